//! Neural building blocks: 1-D convolution, embedding lookup, GRU stack,
//! attention pooling, and bias-free linear maps.

use rand::Rng;

use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};

/// Glorot-uniform initialization: uniform(−a, a) with a = √(6/(fan_in+fan_out)).
pub fn glorot_uniform<R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let values: Vec<f64> = (0..n).map(|_| rng.random_range(-a..a)).collect();
    Tensor::param(values, shape).expect("caller provides a positive shape")
}

fn zero_param(shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::param(vec![0.0; n], shape).expect("caller provides a positive shape")
}

/// 1-D convolution over time that subsamples its input by `stride`.
#[derive(Clone, Debug)]
pub struct Conv1d {
    /// [kernel × in_dim × channels]
    pub weight: Tensor,
    /// [channels]
    pub bias: Tensor,
    pub stride: usize,
}

impl Conv1d {
    pub fn new<R: Rng>(rng: &mut R, kernel: usize, in_dim: usize, channels: usize, stride: usize) -> Result<Self> {
        if kernel == 0 || in_dim == 0 || channels == 0 || stride == 0 {
            return Err(Error::Config(
                "conv1d kernel, dims and stride must be >= 1".into(),
            ));
        }
        Ok(Self {
            weight: glorot_uniform(rng, &[kernel, in_dim, channels], kernel * in_dim, channels),
            bias: zero_param(&[channels]),
            stride,
        })
    }

    /// [T × in_dim] → [⌈T/stride⌉ × channels].
    pub fn forward(&self, tape: &Tape, x: &Tensor) -> Result<Tensor> {
        tape.conv1d(&self.weight, &self.bias, x, self.stride)
    }

    pub fn channels(&self) -> usize {
        self.weight.shape()[2]
    }
}

/// One GRU layer.
///
/// Recurrence (reset gate applied to the hidden state before the
/// hidden-to-hidden product of the candidate):
///
/// ```text
/// z_t = σ(W_z x_t + U_z h_{t−1} + b_z)
/// r_t = σ(W_r x_t + U_r h_{t−1} + b_r)
/// h̃_t = tanh(W_h x_t + U_h (r_t ⊙ h_{t−1}) + b_h)
/// h_t = (1 − z_t) ⊙ h_{t−1} + z_t ⊙ h̃_t
/// ```
#[derive(Clone, Debug)]
pub struct GruLayer {
    pub w_z: Tensor,
    pub w_r: Tensor,
    pub w_h: Tensor,
    pub u_z: Tensor,
    pub u_r: Tensor,
    pub u_h: Tensor,
    pub b_z: Tensor,
    pub b_r: Tensor,
    pub b_h: Tensor,
}

impl GruLayer {
    pub fn new<R: Rng>(rng: &mut R, in_dim: usize, hidden: usize) -> Self {
        Self {
            w_z: glorot_uniform(rng, &[hidden, in_dim], in_dim, hidden),
            w_r: glorot_uniform(rng, &[hidden, in_dim], in_dim, hidden),
            w_h: glorot_uniform(rng, &[hidden, in_dim], in_dim, hidden),
            u_z: glorot_uniform(rng, &[hidden, hidden], hidden, hidden),
            u_r: glorot_uniform(rng, &[hidden, hidden], hidden, hidden),
            u_h: glorot_uniform(rng, &[hidden, hidden], hidden, hidden),
            b_z: zero_param(&[hidden]),
            b_r: zero_param(&[hidden]),
            b_h: zero_param(&[hidden]),
        }
    }

    pub fn hidden(&self) -> usize {
        self.w_z.shape()[0]
    }

    fn step(&self, tape: &Tape, x_t: &Tensor, h: &Tensor) -> Result<Tensor> {
        let z = tape.sigmoid(&sum3(
            tape,
            &tape.matvec(&self.w_z, x_t)?,
            &tape.matvec(&self.u_z, h)?,
            &self.b_z,
        )?)?;
        let r = tape.sigmoid(&sum3(
            tape,
            &tape.matvec(&self.w_r, x_t)?,
            &tape.matvec(&self.u_r, h)?,
            &self.b_r,
        )?)?;
        let gated = tape.mul(&r, h)?;
        let candidate = tape.tanh(&sum3(
            tape,
            &tape.matvec(&self.w_h, x_t)?,
            &tape.matvec(&self.u_h, &gated)?,
            &self.b_h,
        )?)?;
        let keep = tape.mul(&tape.scalar_sub(1.0, &z)?, h)?;
        tape.add(&keep, &tape.mul(&z, &candidate)?)
    }

    /// [T × in_dim] → [T × hidden], h₀ = 0.
    pub fn forward(&self, tape: &Tape, x: &Tensor) -> Result<Tensor> {
        let &[t_len, in_dim] = x.shape() else {
            return Err(Error::Dimension(format!(
                "GRU input must be [T × in], got {:?}",
                x.shape()
            )));
        };
        if in_dim != self.w_z.shape()[1] {
            return Err(Error::Dimension(format!(
                "GRU input dim {in_dim} vs weight dim {}",
                self.w_z.shape()[1]
            )));
        }
        let mut h = Tensor::zeros(&[self.hidden()]);
        let mut rows = Vec::with_capacity(t_len);
        for t in 0..t_len {
            let x_t = tape.row(x, t)?;
            h = self.step(tape, &x_t, &h)?;
            rows.push(h.clone());
        }
        tape.stack_rows(&rows)
    }
}

fn sum3(tape: &Tape, a: &Tensor, b: &Tensor, c: &Tensor) -> Result<Tensor> {
    tape.add(&tape.add(a, b)?, c)
}

/// A stack of zero or more GRU layers; zero layers is the identity.
#[derive(Clone, Debug, Default)]
pub struct GruStack {
    pub layers: Vec<GruLayer>,
}

impl GruStack {
    pub fn new<R: Rng>(rng: &mut R, depth: usize, in_dim: usize, hidden: usize) -> Self {
        let mut layers = Vec::with_capacity(depth);
        for i in 0..depth {
            let d = if i == 0 { in_dim } else { hidden };
            layers.push(GruLayer::new(rng, d, hidden));
        }
        Self { layers }
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn forward(&self, tape: &Tape, x: &Tensor) -> Result<Tensor> {
        let mut seq = x.clone();
        for layer in &self.layers {
            seq = layer.forward(tape, &seq)?;
        }
        Ok(seq)
    }
}

/// Attention pooling: a weighted sum of timestep activations with weights
/// from a bias-free scoring MLP and a timewise softmax.
#[derive(Clone, Debug)]
pub struct AttentionPool {
    /// [mlp_hidden × in_dim]
    pub w: Tensor,
    /// [1 × mlp_hidden]
    pub u: Tensor,
}

impl AttentionPool {
    pub fn new<R: Rng>(rng: &mut R, in_dim: usize, mlp_hidden: usize) -> Self {
        Self {
            w: glorot_uniform(rng, &[mlp_hidden, in_dim], in_dim, mlp_hidden),
            u: glorot_uniform(rng, &[1, mlp_hidden], mlp_hidden, 1),
        }
    }

    /// [T × dim] → [dim]; the weights form a probability distribution over
    /// timesteps.
    pub fn forward(&self, tape: &Tape, x: &Tensor) -> Result<Tensor> {
        if x.shape().len() != 2 {
            return Err(Error::Dimension(format!(
                "attention input must be [T × dim], got {:?}",
                x.shape()
            )));
        }
        let dim = x.shape()[1];
        // scores_t = U tanh(W x_t), computed for all t at once
        let hidden = tape.tanh(&tape.matmul(x, &tape.transpose(&self.w)?)?)?;
        let scores = tape.matmul(&hidden, &tape.transpose(&self.u)?)?;
        let alpha = tape.softmax(&scores, 0)?;
        let pooled = tape.matmul(&tape.transpose(&alpha)?, x)?;
        tape.reshape(&pooled, &[dim])
    }

    /// The attention distribution itself, for inspection.
    pub fn weights(&self, tape: &Tape, x: &Tensor) -> Result<Tensor> {
        let hidden = tape.tanh(&tape.matmul(x, &tape.transpose(&self.w)?)?)?;
        let scores = tape.matmul(&hidden, &tape.transpose(&self.u)?)?;
        let t_len = x.shape()[0];
        tape.reshape(&tape.softmax(&scores, 0)?, &[t_len])
    }
}

/// Character-to-vector lookup table.
#[derive(Clone, Debug)]
pub struct EmbeddingTable {
    /// [vocab × dim]
    pub table: Tensor,
}

impl EmbeddingTable {
    pub fn new<R: Rng>(rng: &mut R, vocab: usize, dim: usize) -> Self {
        Self {
            table: glorot_uniform(rng, &[vocab, dim], vocab, dim),
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.table.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.table.shape()[1]
    }

    /// ids → [T × dim].
    pub fn forward(&self, tape: &Tape, ids: &[usize]) -> Result<Tensor> {
        tape.embed(&self.table, ids)
    }
}

/// Bias-free linear map.
#[derive(Clone, Debug)]
pub struct Linear {
    /// [out × in]
    pub weight: Tensor,
}

impl Linear {
    pub fn new<R: Rng>(rng: &mut R, in_dim: usize, out_dim: usize) -> Self {
        Self {
            weight: glorot_uniform(rng, &[out_dim, in_dim], in_dim, out_dim),
        }
    }

    /// [in] → [out].
    pub fn forward(&self, tape: &Tape, x: &Tensor) -> Result<Tensor> {
        tape.matvec(&self.weight, x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
        let values: Vec<f64> = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::new(values, &[rows, cols]).unwrap()
    }

    #[test]
    fn conv_output_length_is_ceil_t_over_stride() {
        let mut r = rng(0);
        for stride in 1..=3usize {
            let conv = Conv1d::new(&mut r, 6, 2, 3, stride).unwrap();
            let tape = Tape::no_grad();
            for t in 1..=64usize {
                let x = random_matrix(&mut r, t, 2);
                let y = conv.forward(&tape, &x).unwrap();
                assert_eq!(y.shape(), &[t.div_ceil(stride), 3], "T={t} stride={stride}");
            }
        }
    }

    #[test]
    fn conv_identity_kernel_copies_strided_input() {
        // kernel 3, stride 2, single channel; one-hot at the kernel center.
        // Padding total = kernel − stride = 1, split as 0 left when halved.
        let mut r = rng(1);
        let mut conv = Conv1d::new(&mut r, 3, 1, 1, 2).unwrap();
        conv.weight.update_values(|w| {
            w.copy_from_slice(&[0.0, 1.0, 0.0]);
        });
        conv.bias.update_values(|b| b[0] = 0.0);
        let x = Tensor::new(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[6, 1]).unwrap();
        let tape = Tape::no_grad();
        let y = conv.forward(&tape, &x).unwrap();
        // pad_left = 0: window t covers rows 2t..2t+2, center = 2t+1
        assert_eq!(y.values(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn conv_matches_sliding_window_oracle() {
        let mut r = rng(2);
        let (kernel, in_dim, channels, stride, t_len) = (4, 3, 2, 2, 7);
        let conv = Conv1d::new(&mut r, kernel, in_dim, channels, stride).unwrap();
        let x = random_matrix(&mut r, t_len, in_dim);
        let tape = Tape::no_grad();
        let y = conv.forward(&tape, &x).unwrap();

        let out_len = t_len.div_ceil(stride);
        let pad_total = ((out_len - 1) * stride + kernel).saturating_sub(t_len);
        let pad_left = pad_total / 2;
        let w = conv.weight.values();
        let b = conv.bias.values();
        for t in 0..out_len {
            for o in 0..channels {
                let mut want = b[o];
                for k in 0..kernel {
                    let src = (t * stride + k) as isize - pad_left as isize;
                    if src < 0 || src as usize >= t_len {
                        continue;
                    }
                    for c in 0..in_dim {
                        want += w[(k * in_dim + c) * channels + o]
                            * x.values()[src as usize * in_dim + c];
                    }
                }
                assert!((y.values()[t * channels + o] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_rejects_empty_and_mismatched_input() {
        let mut r = rng(3);
        let conv = Conv1d::new(&mut r, 3, 2, 2, 2).unwrap();
        let tape = Tape::no_grad();
        let wrong = Tensor::zeros(&[5, 4]);
        assert!(conv.forward(&tape, &wrong).is_err());
        assert!(Tensor::new(vec![], &[0, 2]).is_err());
    }

    #[test]
    fn gru_zero_weights_and_input_stay_zero() {
        let mut r = rng(4);
        let mut layer = GruLayer::new(&mut r, 2, 3);
        for w in [
            &mut layer.w_z, &mut layer.w_r, &mut layer.w_h,
            &mut layer.u_z, &mut layer.u_r, &mut layer.u_h,
        ] {
            w.update_values(|v| v.fill(0.0));
        }
        let x = Tensor::zeros(&[4, 2]);
        let tape = Tape::no_grad();
        let y = layer.forward(&tape, &x).unwrap();
        assert!(y.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gru_zero_layers_is_identity() {
        let stack = GruStack::default();
        let x = Tensor::new(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
        let tape = Tape::no_grad();
        let y = stack.forward(&tape, &x).unwrap();
        assert_eq!(y.values(), x.values());
    }

    #[test]
    fn gru_matches_scalar_recurrence_oracle() {
        let mut r = rng(5);
        let (in_dim, hidden, t_len) = (2usize, 3usize, 4usize);
        let layer = GruLayer::new(&mut r, in_dim, hidden);
        let x = random_matrix(&mut r, t_len, in_dim);
        let tape = Tape::no_grad();
        let y = layer.forward(&tape, &x).unwrap();

        // unrolled scalar recurrence
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let matvec = |w: &Tensor, v: &[f64]| -> Vec<f64> {
            let (rows, cols) = (w.shape()[0], w.shape()[1]);
            (0..rows)
                .map(|i| (0..cols).map(|j| w.values()[i * cols + j] * v[j]).sum())
                .collect()
        };
        let mut h = vec![0.0; hidden];
        for t in 0..t_len {
            let x_t = &x.values()[t * in_dim..(t + 1) * in_dim];
            let wz = matvec(&layer.w_z, x_t);
            let uz = matvec(&layer.u_z, &h);
            let wr = matvec(&layer.w_r, x_t);
            let ur = matvec(&layer.u_r, &h);
            let wh = matvec(&layer.w_h, x_t);
            let mut next = vec![0.0; hidden];
            let z: Vec<f64> = (0..hidden)
                .map(|i| sig(wz[i] + uz[i] + layer.b_z.values()[i]))
                .collect();
            let rr: Vec<f64> = (0..hidden)
                .map(|i| sig(wr[i] + ur[i] + layer.b_r.values()[i]))
                .collect();
            let gated: Vec<f64> = (0..hidden).map(|i| rr[i] * h[i]).collect();
            let uh = matvec(&layer.u_h, &gated);
            for i in 0..hidden {
                let cand = (wh[i] + uh[i] + layer.b_h.values()[i]).tanh();
                next[i] = (1.0 - z[i]) * h[i] + z[i] * cand;
            }
            h = next;
            for i in 0..hidden {
                assert!(
                    (y.values()[t * hidden + i] - h[i]).abs() < 1e-10,
                    "t={t} i={i}"
                );
            }
        }
    }

    #[test]
    fn attention_uniform_when_scores_are_constant() {
        let mut r = rng(6);
        let mut attn = AttentionPool::new(&mut r, 3, 4);
        attn.w.update_values(|v| v.fill(0.0));
        let x = Tensor::new(
            vec![1.0, 2.0, 3.0, 5.0, 6.0, 7.0],
            &[2, 3],
        )
        .unwrap();
        let tape = Tape::no_grad();
        let y = attn.forward(&tape, &x).unwrap();
        for (i, &v) in y.values().iter().enumerate() {
            let mean = (x.values()[i] + x.values()[3 + i]) / 2.0;
            assert!((v - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_single_timestep_returns_it() {
        let mut r = rng(7);
        let attn = AttentionPool::new(&mut r, 3, 4);
        let x = random_matrix(&mut r, 1, 3);
        let tape = Tape::no_grad();
        let y = attn.forward(&tape, &x).unwrap();
        for (a, b) in y.values().iter().zip(x.values()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_matches_direct_formula_oracle() {
        let mut r = rng(8);
        let attn = AttentionPool::new(&mut r, 3, 4);
        let x = random_matrix(&mut r, 5, 3);
        let tape = Tape::no_grad();
        let y = attn.forward(&tape, &x).unwrap();
        let alpha = attn.weights(&tape, &x).unwrap();

        // direct evaluation: α_t ∝ exp(U tanh(W x_t))
        let mut scores = Vec::new();
        for t in 0..5 {
            let x_t = &x.values()[t * 3..(t + 1) * 3];
            let mut s = 0.0;
            for m in 0..4 {
                let mut pre = 0.0;
                for c in 0..3 {
                    pre += attn.w.values()[m * 3 + c] * x_t[c];
                }
                s += attn.u.values()[m] * pre.tanh();
            }
            scores.push(s);
        }
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let total: f64 = scores.iter().map(|s| (s - max).exp()).sum();
        let weights: Vec<f64> = scores.iter().map(|s| (s - max).exp() / total).collect();
        let sum_alpha: f64 = alpha.values().iter().sum();
        assert!((sum_alpha - 1.0).abs() < 1e-12);
        for (got, want) in alpha.values().iter().zip(&weights) {
            assert!((got - want).abs() < 1e-10);
        }
        for c in 0..3 {
            let want: f64 = (0..5).map(|t| weights[t] * x.values()[t * 3 + c]).sum();
            assert!((y.values()[c] - want).abs() < 1e-10);
        }
    }

    #[test]
    fn attention_output_in_convex_hull() {
        let mut r = rng(9);
        for seed in 0..20 {
            let mut rr = rng(100 + seed);
            let attn = AttentionPool::new(&mut rr, 4, 5);
            let t_len = rr.random_range(1..8);
            let x = random_matrix(&mut r, t_len, 4);
            let tape = Tape::no_grad();
            let y = attn.forward(&tape, &x).unwrap();
            for c in 0..4 {
                let col: Vec<f64> = (0..t_len).map(|t| x.values()[t * 4 + c]).collect();
                let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                assert!(y.values()[c] >= lo - 1e-12 && y.values()[c] <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn embedding_lookup_and_linear_oracles() {
        let mut r = rng(10);
        let table = EmbeddingTable::new(&mut r, 5, 3);
        let tape = Tape::no_grad();
        let out = table.forward(&tape, &[4, 0, 4]).unwrap();
        for (t, &id) in [4usize, 0, 4].iter().enumerate() {
            for c in 0..3 {
                assert_eq!(out.values()[t * 3 + c], table.table.values()[id * 3 + c]);
            }
        }

        let lin = Linear::new(&mut r, 4, 2);
        let x = Tensor::new(vec![1.0, -1.0, 0.5, 2.0], &[4]).unwrap();
        let y = lin.forward(&tape, &x).unwrap();
        for o in 0..2 {
            let want: f64 = (0..4).map(|i| lin.weight.values()[o * 4 + i] * x.values()[i]).sum();
            assert!((y.values()[o] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn linear_identity_weight_is_identity() {
        let mut r = rng(11);
        let mut lin = Linear::new(&mut r, 3, 3);
        lin.weight.update_values(|w| {
            w.fill(0.0);
            w[0] = 1.0;
            w[4] = 1.0;
            w[8] = 1.0;
        });
        let x = Tensor::new(vec![3.0, -2.0, 7.0], &[3]).unwrap();
        let tape = Tape::no_grad();
        assert_eq!(lin.forward(&tape, &x).unwrap().values(), x.values());
    }

    #[test]
    fn layers_pass_gradient_checks() {
        for seed in 0..3u64 {
            let mut r = rng(200 + seed);
            let conv = Conv1d::new(&mut r, 3, 2, 2, 2).unwrap();
            let x = random_matrix(&mut r, 5, 2);
            let report = grad_check(
                |tape, p| tape.sum(&tape.square(&conv.forward(tape, p)?)?),
                &x,
                1e-4,
                1e-3,
            )
            .unwrap();
            assert!(report.passed, "conv input grad: {}", report.max_rel_err);

            let gru = GruLayer::new(&mut r, 2, 3);
            let x = random_matrix(&mut r, 4, 2);
            let report = grad_check(
                |tape, p| tape.sum(&tape.square(&gru.forward(tape, p)?)?),
                &x,
                1e-4,
                1e-3,
            )
            .unwrap();
            assert!(report.passed, "gru input grad: {}", report.max_rel_err);

            let attn = AttentionPool::new(&mut r, 3, 4);
            let x = random_matrix(&mut r, 4, 3);
            let report = grad_check(
                |tape, p| tape.sum(&tape.square(&attn.forward(tape, p)?)?),
                &x,
                1e-4,
                1e-3,
            )
            .unwrap();
            assert!(report.passed, "attention input grad: {}", report.max_rel_err);
        }
    }
}
