//! Batch-contrastive margin loss over pairs of encoded modalities.

use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};

/// Margin and batch size of the contrastive objective.
#[derive(Clone, Copy, Debug)]
pub struct LossConfig {
    pub margin: f64,
    pub batch_size: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            margin: 0.2,
            batch_size: 32,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.margin <= 0.0 {
            return Err(Error::Config(format!(
                "margin must be positive, got {}",
                self.margin
            )));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(
                "batch size must be at least 2 so in-batch negatives exist".into(),
            ));
        }
        Ok(())
    }
}

/// Cosine distance 1 − u·v/(‖u‖‖v‖), in [0, 2].
///
/// The denominator is computed as √(Σu²·Σv²) so that d(x, x) is exactly 0.
pub fn cosine_distance(u: &Tensor, v: &Tensor) -> Result<f64> {
    if u.shape() != v.shape() || u.shape().len() != 1 {
        return Err(Error::Dimension(format!(
            "cosine distance needs two equal-length vectors, got {:?} and {:?}",
            u.shape(),
            v.shape()
        )));
    }
    let mut dot = 0.0;
    let mut sq_u = 0.0;
    let mut sq_v = 0.0;
    for (&a, &b) in u.values().iter().zip(v.values()) {
        dot += a * b;
        sq_u += a * a;
        sq_v += b * b;
    }
    if sq_u == 0.0 || sq_v == 0.0 {
        return Err(Error::DegenerateNorm(
            "cosine distance of a zero vector".into(),
        ));
    }
    Ok(1.0 - dot / (sq_u * sq_v).sqrt())
}

/// Differentiable cosine distance between two embedding vectors on the tape.
fn cosine_distance_node(tape: &Tape, u: &Tensor, v: &Tensor) -> Result<Tensor> {
    let dot = tape.sum(&tape.mul(u, v)?)?;
    let sq_u = tape.sum(&tape.square(u)?)?;
    let sq_v = tape.sum(&tape.square(v)?)?;
    if sq_u.item()? == 0.0 || sq_v.item()? == 0.0 {
        return Err(Error::DegenerateNorm(
            "cosine distance of a zero vector".into(),
        ));
    }
    let denom = tape.sqrt(&tape.mul(&sq_u, &sq_v)?)?;
    tape.scalar_sub(1.0, &tape.div(&dot, &denom)?)
}

/// The batch-contrastive margin loss.
///
/// `u` and `i` are matched row-for-row; every other row of the batch serves
/// as a negative for both sides. For each matched pair the loss adds
/// max(0, α + d(u,i) − d(u′,i)) over the B−1 mismatched u′ and
/// max(0, α + d(u,i) − d(u,i′)) over the B−1 mismatched i′, and the batch
/// total is the plain sum over matched pairs.
pub fn contrastive_loss(
    tape: &Tape,
    u: &[Tensor],
    i: &[Tensor],
    cfg: &LossConfig,
) -> Result<Tensor> {
    cfg.validate()?;
    let b = u.len();
    if b != i.len() {
        return Err(Error::Dimension(format!(
            "batch sides differ: {} vs {}",
            b,
            i.len()
        )));
    }
    if b < 2 {
        return Err(Error::Contract(
            "contrastive loss needs a batch of at least 2 so negatives exist".into(),
        ));
    }

    // full pairwise distance matrix d[j][k] = d(u_j, i_k)
    let mut dist: Vec<Vec<Tensor>> = Vec::with_capacity(b);
    for u_row in u {
        let mut row = Vec::with_capacity(b);
        for i_row in i {
            row.push(cosine_distance_node(tape, u_row, i_row)?);
        }
        dist.push(row);
    }

    let mut total: Option<Tensor> = None;
    for k in 0..b {
        let matched = &dist[k][k];
        // mismatched utterances against the matched image
        for j in 0..b {
            if j == k {
                continue;
            }
            let gap = tape.sub(matched, &dist[j][k])?;
            let hinge = tape.relu(&tape.add_scalar(&gap, cfg.margin)?)?;
            total = Some(match &total {
                Some(t) => tape.add(t, &hinge)?,
                None => hinge,
            });
        }
        // mismatched images against the matched utterance
        for j in 0..b {
            if j == k {
                continue;
            }
            let gap = tape.sub(matched, &dist[k][j])?;
            let hinge = tape.relu(&tape.add_scalar(&gap, cfg.margin)?)?;
            total = Some(match &total {
                Some(t) => tape.add(t, &hinge)?,
                None => hinge,
            });
        }
    }
    Ok(total.expect("b >= 2 yields at least one term"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn unit(values: Vec<f64>) -> Tensor {
        let norm: f64 = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        let n = values.len();
        Tensor::new(values.into_iter().map(|v| v / norm).collect(), &[n]).unwrap()
    }

    fn random_unit_batch(rng: &mut ChaCha8Rng, b: usize, dim: usize) -> Vec<Tensor> {
        (0..b)
            .map(|_| unit((0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()))
            .collect()
    }

    /// Explicit oracle over all (u,i,u′) and (u,i,i′) triples.
    fn oracle(u: &[Tensor], i: &[Tensor], margin: f64) -> f64 {
        let b = u.len();
        let d = |a: &Tensor, b: &Tensor| cosine_distance(a, b).unwrap();
        let mut total = 0.0;
        for k in 0..b {
            let matched = d(&u[k], &i[k]);
            for j in 0..b {
                if j != k {
                    total += (margin + matched - d(&u[j], &i[k])).max(0.0);
                }
            }
            for j in 0..b {
                if j != k {
                    total += (margin + matched - d(&u[k], &i[j])).max(0.0);
                }
            }
        }
        total
    }

    #[test]
    fn cosine_distance_trivia() {
        let x = Tensor::new(vec![0.3, -0.4, 1.1], &[3]).unwrap();
        assert_eq!(cosine_distance(&x, &x).unwrap(), 0.0);
        let a = Tensor::new(vec![1.0, 0.0], &[2]).unwrap();
        let b = Tensor::new(vec![0.0, 1.0], &[2]).unwrap();
        assert!((cosine_distance(&a, &b).unwrap() - 1.0).abs() < 1e-15);
        let c = Tensor::new(vec![-1.0, 0.0], &[2]).unwrap();
        assert!((cosine_distance(&a, &c).unwrap() - 2.0).abs() < 1e-15);
        let zero = Tensor::new(vec![0.0, 0.0], &[2]).unwrap();
        assert!(cosine_distance(&a, &zero).is_err());
    }

    #[test]
    fn identical_embeddings_give_margin_per_term() {
        let cfg = LossConfig {
            margin: 0.2,
            batch_size: 2,
        };
        let v = unit(vec![0.6, 0.8]);
        let tape = Tape::no_grad();
        let loss = contrastive_loss(
            &tape,
            &[v.clone(), v.clone()],
            &[v.clone(), v.clone()],
            &cfg,
        )
        .unwrap();
        // every hinge term is exactly the margin: 2·B·(B−1)·α
        let expected = 2.0 * 2.0 * 1.0 * cfg.margin;
        assert!((loss.item().unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn satisfied_margin_gives_zero_loss() {
        let cfg = LossConfig {
            margin: 0.2,
            batch_size: 2,
        };
        let u = vec![unit(vec![1.0, 0.0]), unit(vec![0.0, 1.0])];
        let i = vec![unit(vec![1.0, 0.0]), unit(vec![0.0, 1.0])];
        let tape = Tape::no_grad();
        let loss = contrastive_loss(&tape, &u, &i, &cfg).unwrap();
        assert_eq!(loss.item().unwrap(), 0.0);
    }

    #[test]
    fn matches_triple_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let cfg = LossConfig {
            margin: 0.2,
            batch_size: 4,
        };
        for _ in 0..20 {
            let u = random_unit_batch(&mut rng, 4, 6);
            let i = random_unit_batch(&mut rng, 4, 6);
            let tape = Tape::no_grad();
            let loss = contrastive_loss(&tape, &u, &i, &cfg).unwrap();
            let want = oracle(&u, &i, cfg.margin);
            assert!((loss.item().unwrap() - want).abs() <= 1e-12);
        }
    }

    #[test]
    fn loss_is_nonnegative_and_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let cfg = LossConfig {
            margin: 0.2,
            batch_size: 5,
        };
        let u = random_unit_batch(&mut rng, 5, 4);
        let i = random_unit_batch(&mut rng, 5, 4);
        let tape = Tape::no_grad();
        let base = contrastive_loss(&tape, &u, &i, &cfg).unwrap().item().unwrap();
        assert!(base >= 0.0);

        let perm = [3usize, 0, 4, 1, 2];
        let up: Vec<Tensor> = perm.iter().map(|&p| u[p].clone()).collect();
        let ip: Vec<Tensor> = perm.iter().map(|&p| i[p].clone()).collect();
        let permuted = contrastive_loss(&tape, &up, &ip, &cfg).unwrap().item().unwrap();
        assert!((base - permuted).abs() < 1e-12);
    }

    #[test]
    fn batch_of_one_is_rejected() {
        let cfg = LossConfig {
            margin: 0.2,
            batch_size: 2,
        };
        let v = unit(vec![1.0, 0.0]);
        let tape = Tape::no_grad();
        assert!(contrastive_loss(&tape, &[v.clone()], &[v.clone()], &cfg).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences_away_from_kinks() {
        let cfg = LossConfig {
            margin: 0.2,
            batch_size: 3,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let mut checked = 0;
        let mut attempts = 0;
        while checked < 5 && attempts < 50 {
            attempts += 1;
            let dim = 4;
            let b = 3;
            let flat: Vec<f64> = (0..b * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            let i = random_unit_batch(&mut rng, b, dim);
            let x = Tensor::new(flat, &[b, dim]).unwrap();
            let report = grad_check(
                |tape, probe| {
                    let rows: Vec<Tensor> = (0..b)
                        .map(|r| tape.row(probe, r))
                        .collect::<crate::error::Result<_>>()?;
                    contrastive_loss(tape, &rows, &i, &cfg)
                },
                &x,
                1e-4,
                1e-3,
            )
            .unwrap();
            if report.kink_near {
                continue;
            }
            assert!(report.passed, "max rel err {}", report.max_rel_err);
            checked += 1;
        }
        assert!(checked >= 5, "too many kink-adjacent samples");
    }
}
