//! A gradient-check suite covering every layer type and the contrastive
//! loss, for the `gradcheck` command and the acceptance tests.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{grad_check, Tape, Tensor};
use crate::error::Result;
use crate::loss::{contrastive_loss, LossConfig};
use crate::nn::{AttentionPool, Conv1d, EmbeddingTable, GruLayer, Linear};

/// Aggregated finite-difference comparison for one target across seeds.
#[derive(Clone, Debug)]
pub struct SuiteReport {
    pub target: String,
    pub max_rel_err: f64,
    pub seeds: usize,
    pub tol: f64,
    pub passed: bool,
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        shape,
    )
    .expect("positive shape")
}

type Check = (String, Box<dyn Fn(&Tape, &Tensor) -> Result<Tensor>>, Tensor);

fn seed_checks(seed: u64) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checks: Vec<Check> = Vec::new();

    // square the layer output before summing so the objective depends on
    // every coordinate with a nontrivial derivative
    let squared_sum = |tape: &Tape, y: &Tensor| -> Result<Tensor> { tape.sum(&tape.square(y)?) };

    let conv = Conv1d::new(&mut rng, 3, 2, 2, 2)?;
    let conv_x = random_tensor(&mut rng, &[5, 2]);
    {
        let (c, x) = (conv.clone(), conv_x.clone());
        checks.push((
            "conv1d/input".into(),
            Box::new(move |t, p| {
                let y = t.conv1d(&c.weight, &c.bias, p, c.stride)?;
                t.sum(&t.square(&y)?)
            }),
            conv_x.clone(),
        ));
        let (c, x2) = (conv.clone(), x.clone());
        checks.push((
            "conv1d/weight".into(),
            Box::new(move |t, p| {
                let y = t.conv1d(p, &c.bias, &x2, c.stride)?;
                t.sum(&t.square(&y)?)
            }),
            conv.weight.clone(),
        ));
        let (c, x3) = (conv.clone(), conv_x.clone());
        checks.push((
            "conv1d/bias".into(),
            Box::new(move |t, p| {
                let y = t.conv1d(&c.weight, p, &x3, c.stride)?;
                t.sum(&t.square(&y)?)
            }),
            conv.bias.clone(),
        ));
    }

    let gru = GruLayer::new(&mut rng, 2, 3);
    let gru_x = random_tensor(&mut rng, &[4, 2]);
    {
        let (g, x) = (gru.clone(), gru_x.clone());
        checks.push((
            "gru/input".into(),
            Box::new(move |t, p| squared_sum(t, &g.forward(t, p)?)),
            x,
        ));
        let params: [(&str, fn(&mut GruLayer) -> &mut Tensor); 9] = [
            ("gru/w_z", |g| &mut g.w_z),
            ("gru/w_r", |g| &mut g.w_r),
            ("gru/w_h", |g| &mut g.w_h),
            ("gru/u_z", |g| &mut g.u_z),
            ("gru/u_r", |g| &mut g.u_r),
            ("gru/u_h", |g| &mut g.u_h),
            ("gru/b_z", |g| &mut g.b_z),
            ("gru/b_r", |g| &mut g.b_r),
            ("gru/b_h", |g| &mut g.b_h),
        ];
        for (name, field) in params {
            let (mut template, x) = (gru.clone(), gru_x.clone());
            let at = field(&mut template).clone();
            let base = gru.clone();
            checks.push((
                name.into(),
                Box::new(move |t, p| {
                    let mut layer = base.clone();
                    *field(&mut layer) = p.clone();
                    squared_sum(t, &layer.forward(t, &x)?)
                }),
                at,
            ));
            let _ = &template;
        }
    }

    let attn = AttentionPool::new(&mut rng, 3, 4);
    let attn_x = random_tensor(&mut rng, &[5, 3]);
    {
        let (a, x) = (attn.clone(), attn_x.clone());
        checks.push((
            "attention/input".into(),
            Box::new(move |t, p| squared_sum(t, &a.forward(t, p)?)),
            x,
        ));
        let (a, x) = (attn.clone(), attn_x.clone());
        checks.push((
            "attention/w".into(),
            Box::new(move |t, p| {
                let probe = AttentionPool {
                    w: p.clone(),
                    u: a.u.clone(),
                };
                squared_sum(t, &probe.forward(t, &x)?)
            }),
            attn.w.clone(),
        ));
        let (a, x) = (attn.clone(), attn_x.clone());
        checks.push((
            "attention/u".into(),
            Box::new(move |t, p| {
                let probe = AttentionPool {
                    w: a.w.clone(),
                    u: p.clone(),
                };
                squared_sum(t, &probe.forward(t, &x)?)
            }),
            attn.u.clone(),
        ));
    }

    let table = EmbeddingTable::new(&mut rng, 5, 3);
    {
        let ids = vec![
            rng.random_range(0..5usize),
            rng.random_range(0..5),
            rng.random_range(0..5),
            rng.random_range(0..5),
        ];
        checks.push((
            "embedding/table".into(),
            Box::new(move |t, p| {
                let y = t.embed(p, &ids)?;
                t.sum(&t.square(&y)?)
            }),
            table.table.clone(),
        ));
    }

    let linear = Linear::new(&mut rng, 4, 3);
    let lin_x = random_tensor(&mut rng, &[4]);
    {
        let (l, x) = (linear.clone(), lin_x.clone());
        checks.push((
            "linear/input".into(),
            Box::new(move |t, p| squared_sum(t, &l.forward(t, p)?)),
            x,
        ));
        let x = lin_x.clone();
        checks.push((
            "linear/weight".into(),
            Box::new(move |t, p| {
                let probe = Linear { weight: p.clone() };
                squared_sum(t, &probe.forward(t, &x)?)
            }),
            linear.weight.clone(),
        ));
    }

    // margin loss over a batch of raw (unnormalized) embeddings; resample
    // until no hinge argument sits near its kink
    let cfg = LossConfig {
        margin: 0.2,
        batch_size: 3,
    };
    let mut flat = random_tensor(&mut rng, &[3, 4]);
    for _ in 0..20 {
        let partners: Vec<Tensor> = (0..3)
            .map(|_| {
                let v = random_tensor(&mut rng, &[4]);
                let tape = Tape::no_grad();
                tape.l2_normalize(&v).expect("vector")
            })
            .collect();
        let probe_tape = Tape::new();
        let rows: Vec<Tensor> = (0..3)
            .map(|r| probe_tape.row(&flat, r))
            .collect::<Result<_>>()?;
        contrastive_loss(&probe_tape, &rows, &partners, &cfg)?;
        if !probe_tape.relu_kink_within(1e-3) {
            let cfg = cfg;
            checks.push((
                "loss/contrastive".into(),
                Box::new(move |t, p| {
                    let rows: Vec<Tensor> =
                        (0..3).map(|r| t.row(p, r)).collect::<Result<_>>()?;
                    contrastive_loss(t, &rows, &partners, &cfg)
                }),
                flat,
            ));
            break;
        }
        flat = random_tensor(&mut rng, &[3, 4]);
    }

    Ok(checks)
}

/// Run finite-difference checks for every layer and the loss over `seeds`
/// seeds, aggregating the worst relative error per target.
pub fn gradient_suite(seeds: usize, step: f64, tol: f64) -> Result<Vec<SuiteReport>> {
    let mut by_target: std::collections::BTreeMap<String, (f64, usize)> =
        std::collections::BTreeMap::new();
    for seed in 0..seeds as u64 {
        for (target, f, at) in seed_checks(seed)? {
            let report = grad_check(f.as_ref(), &at, step, tol)?;
            let entry = by_target.entry(target).or_insert((0.0, 0));
            entry.0 = entry.0.max(report.max_rel_err);
            entry.1 += 1;
        }
    }
    Ok(by_target
        .into_iter()
        .map(|(target, (max_rel_err, n))| SuiteReport {
            target,
            max_rel_err,
            seeds: n,
            tol,
            passed: max_rel_err <= tol,
        })
        .collect())
}

/// Deliberately mismatched forward/backward pair: half the computation runs
/// through a detached copy of the probe, so the analytic gradient misses it.
/// Used to verify the suite actually fails on wrong gradients.
pub fn injected_fault_report(step: f64, tol: f64) -> Result<crate::autodiff::GradCheckReport> {
    let x = Tensor::new(vec![0.8, -0.4, 0.3], &[3])?;
    grad_check(
        |tape, probe| {
            let detached = Tensor::new(probe.values().to_vec(), probe.shape())?;
            tape.sum(&tape.mul(probe, &detached)?)
        },
        &x,
        step,
        tol,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_on_fresh_layers() {
        let reports = gradient_suite(2, 1e-4, 1e-3).unwrap();
        assert!(reports.len() >= 18, "expected all targets, got {}", reports.len());
        for r in &reports {
            assert!(r.passed, "{}: max rel err {}", r.target, r.max_rel_err);
        }
        assert!(reports.iter().any(|r| r.target == "loss/contrastive"));
    }

    #[test]
    fn injected_fault_is_detected() {
        let report = injected_fault_report(1e-4, 1e-3).unwrap();
        assert!(!report.passed);
    }
}
