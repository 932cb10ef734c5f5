use std::collections::BTreeMap;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Per-parameter Adam accumulators, keyed by parameter name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamSlot {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub steps: u64,
}

/// Adam state plus the gradient-clipping threshold.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub learning_rate: f64,
    pub clip_threshold: f64,
    pub step_count: u64,
    pub slots: BTreeMap<String, AdamSlot>,
}

impl OptimizerState {
    pub fn new(learning_rate: f64, clip_threshold: f64) -> Self {
        Self {
            learning_rate,
            clip_threshold,
            step_count: 0,
            slots: BTreeMap::new(),
        }
    }

    /// One Adam update with bias correction over the given named parameters.
    /// Gradients must be finite; otherwise no parameter is touched and a
    /// numeric error is returned.
    pub fn adam_step(&mut self, params: &mut [(String, &mut Tensor)]) -> Result<()> {
        let mut grads = Vec::with_capacity(params.len());
        for (name, tensor) in params.iter() {
            let grad = tensor.grad().ok_or_else(|| {
                Error::Contract(format!("parameter {name} carries no gradient"))
            })?;
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite gradient for {name}; step aborted"
                )));
            }
            grads.push(grad);
        }
        for ((name, tensor), grad) in params.iter_mut().zip(grads) {
            let slot = self.slots.entry(name.clone()).or_insert_with(|| AdamSlot {
                m: vec![0.0; grad.len()],
                v: vec![0.0; grad.len()],
                steps: 0,
            });
            if slot.m.len() != grad.len() {
                return Err(Error::Dimension(format!(
                    "optimizer slot {name} holds {} moments for {} gradients",
                    slot.m.len(),
                    grad.len()
                )));
            }
            slot.steps += 1;
            let t = slot.steps as i32;
            let bias1 = 1.0 - BETA1.powi(t);
            let bias2 = 1.0 - BETA2.powi(t);
            let lr = self.learning_rate;
            tensor.update_values(|values| {
                for i in 0..values.len() {
                    let g = grad[i];
                    slot.m[i] = BETA1 * slot.m[i] + (1.0 - BETA1) * g;
                    slot.v[i] = BETA2 * slot.v[i] + (1.0 - BETA2) * g * g;
                    let m_hat = slot.m[i] / bias1;
                    let v_hat = slot.v[i] / bias2;
                    values[i] -= lr * m_hat / (v_hat.sqrt() + EPSILON);
                }
            });
        }
        self.step_count += 1;
        Ok(())
    }
}

/// Scale all gradients by threshold/norm when their global L2 norm exceeds
/// the threshold. Returns the pre-clip norm.
pub fn clip_gradients(tensors: &[(String, Tensor)], threshold: f64) -> Result<f64> {
    if threshold <= 0.0 {
        return Err(Error::Config(format!(
            "clip threshold must be positive, got {threshold}"
        )));
    }
    let mut total = 0.0;
    for (_, t) in tensors {
        if let Some(grad) = t.grad() {
            for g in grad {
                total += g * g;
            }
        }
    }
    let norm = total.sqrt();
    if norm > threshold {
        let scale = threshold / norm;
        for (_, t) in tensors {
            t.scale_grad(scale);
        }
    }
    Ok(norm)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(values: Vec<f64>) -> Tensor {
        let n = values.len();
        Tensor::param(values, &[n]).unwrap()
    }

    fn set_grad(t: &Tensor, grad: &[f64]) {
        t.zero_grad();
        t.accumulate_grad(grad);
    }

    #[test]
    fn first_step_moves_by_learning_rate_against_gradient_sign() {
        let mut opt = OptimizerState::new(0.01, 2.0);
        let mut t = param(vec![1.0, -1.0]);
        set_grad(&t, &[0.5, -3.0]);
        opt.adam_step(&mut [("p".into(), &mut t)]).unwrap();
        // bias-corrected first step: |update| ≈ lr for any nonzero gradient
        assert!((t.values()[0] - (1.0 - 0.01)).abs() < 1e-6);
        assert!((t.values()[1] - (-1.0 + 0.01)).abs() < 1e-6);
        assert_eq!(opt.step_count, 1);
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut opt = OptimizerState::new(0.01, 2.0);
        let mut t = param(vec![0.7]);
        set_grad(&t, &[0.0]);
        opt.adam_step(&mut [("p".into(), &mut t)]).unwrap();
        assert_eq!(t.values(), &[0.7]);
    }

    #[test]
    fn five_steps_match_scalar_adam_oracle() {
        // minimize f(x) = x² from x = 1; grad = 2x
        let mut opt = OptimizerState::new(0.1, 1e12);
        let mut t = param(vec![1.0]);
        let (mut m, mut v) = (0.0f64, 0.0f64);
        let mut x = 1.0f64;
        for step in 1..=5 {
            set_grad(&t, &[2.0 * t.values()[0]]);
            opt.adam_step(&mut [("x".into(), &mut t)]).unwrap();

            let g = 2.0 * x;
            m = BETA1 * m + (1.0 - BETA1) * g;
            v = BETA2 * v + (1.0 - BETA2) * g * g;
            let m_hat = m / (1.0 - BETA1.powi(step));
            let v_hat = v / (1.0 - BETA2.powi(step));
            x -= 0.1 * m_hat / (v_hat.sqrt() + EPSILON);
            assert!(
                (t.values()[0] - x).abs() < 1e-12,
                "step {step}: {} vs {x}",
                t.values()[0]
            );
        }
    }

    #[test]
    fn nan_gradient_aborts_without_mutation() {
        let mut opt = OptimizerState::new(0.1, 2.0);
        let mut a = param(vec![1.0]);
        let mut b = param(vec![2.0]);
        set_grad(&a, &[0.5]);
        set_grad(&b, &[f64::NAN]);
        let err = opt.adam_step(&mut [("a".into(), &mut a), ("b".into(), &mut b)]);
        assert!(matches!(err, Err(Error::Numeric(_))));
        assert_eq!(a.values(), &[1.0]);
        assert_eq!(b.values(), &[2.0]);
        assert_eq!(opt.step_count, 0);
    }

    #[test]
    fn clip_halves_when_norm_is_twice_threshold() {
        let t = param(vec![0.0, 0.0]);
        set_grad(&t, &[0.0, 4.0]); // norm 4
        let tensors = vec![("p".to_string(), t.clone())];
        let norm = clip_gradients(&tensors, 2.0).unwrap();
        assert_eq!(norm, 4.0);
        assert_eq!(t.grad().unwrap(), vec![0.0, 2.0]);
    }

    #[test]
    fn clip_leaves_small_gradients_alone() {
        let t = param(vec![0.0]);
        set_grad(&t, &[1.0]);
        let tensors = vec![("p".to_string(), t.clone())];
        clip_gradients(&tensors, 2.0).unwrap();
        assert_eq!(t.grad().unwrap(), vec![1.0]);
    }

    #[test]
    fn post_clip_norm_is_min_of_norm_and_threshold() {
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let a = param((0..4).map(|_| 0.0).collect());
            let b = param((0..3).map(|_| 0.0).collect());
            a.accumulate_grad(&(0..4).map(|_| rng.random_range(-2.0..2.0)).collect::<Vec<_>>());
            b.accumulate_grad(&(0..3).map(|_| rng.random_range(-2.0..2.0)).collect::<Vec<_>>());
            let tensors = vec![("a".to_string(), a.clone()), ("b".to_string(), b.clone())];
            let before = clip_gradients(&tensors, 2.0).unwrap();
            let mut total = 0.0;
            for (_, t) in &tensors {
                for g in t.grad().unwrap() {
                    total += g * g;
                }
            }
            let after = total.sqrt();
            assert!((after - before.min(2.0)).abs() < 1e-10);
        }
    }
}
