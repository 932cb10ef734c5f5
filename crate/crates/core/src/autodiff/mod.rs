//! Reverse-mode automatic differentiation over dense f64 tensors.
//!
//! The [`Tape`] records operations as they execute (define-by-run); insertion
//! order is a topological order, and [`Tape::backward`] replays it in strict
//! reverse to accumulate gradients into parameter buffers.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, GradCheckReport};
pub use tape::{ElementwiseTag, Operand, Tape};
pub use tensor::Tensor;

/// Norms below this are treated as degenerate by `l2_normalize`.
pub const DEGENERATE_NORM_EPS: f64 = 1e-12;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Result;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        let values: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::new(values, shape).unwrap()
    }

    #[test]
    fn elementwise_trivia() {
        let tape = Tape::no_grad();
        let x = Tensor::new(vec![0.0, 0.0], &[2]).unwrap();
        assert_eq!(tape.tanh(&x).unwrap().values(), &[0.0, 0.0]);
        let z = Tensor::new(vec![0.0], &[1]).unwrap();
        assert_eq!(tape.sigmoid(&z).unwrap().values(), &[0.5]);
        let a = Tensor::new(vec![1.0, 2.0], &[2]).unwrap();
        let b = Tensor::new(vec![3.0, 4.0], &[2]).unwrap();
        assert_eq!(tape.add(&a, &b).unwrap().values(), &[4.0, 6.0]);
    }

    #[test]
    fn elementwise_tag_dispatch() {
        let tape = Tape::no_grad();
        let a = Tensor::new(vec![1.0, 2.0], &[2]).unwrap();
        let b = Tensor::new(vec![3.0, 4.0], &[2]).unwrap();
        let sum = tape
            .elementwise(ElementwiseTag::Add, &a, Operand::Tensor(&b))
            .unwrap();
        assert_eq!(sum.values(), &[4.0, 6.0]);
        let scaled = tape
            .elementwise(ElementwiseTag::Mul, &a, Operand::Scalar(2.0))
            .unwrap();
        assert_eq!(scaled.values(), &[2.0, 4.0]);
        let sq = tape
            .elementwise(ElementwiseTag::Square, &a, Operand::None)
            .unwrap();
        assert_eq!(sq.values(), &[1.0, 4.0]);
        assert!(tape
            .elementwise(ElementwiseTag::Tanh, &a, Operand::Tensor(&b))
            .is_err());
        assert!(tape
            .elementwise(ElementwiseTag::Add, &a, Operand::None)
            .is_err());
    }

    #[test]
    fn elementwise_shape_mismatch() {
        let tape = Tape::no_grad();
        let a = Tensor::new(vec![1.0, 2.0], &[2]).unwrap();
        let b = Tensor::new(vec![1.0, 2.0, 3.0], &[3]).unwrap();
        assert!(tape.add(&a, &b).is_err());
    }

    #[test]
    fn matmul_identity_and_selector() {
        let tape = Tape::no_grad();
        let eye = Tensor::new(vec![1.0, 0.0, 0.0, 1.0], &[2, 2]).unwrap();
        let m = Tensor::new(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
        assert_eq!(
            tape.matmul(&eye, &m).unwrap().values(),
            &[1.0, 2.0, 3.0, 4.0]
        );
        let sel = Tensor::new(vec![1.0, 0.0], &[1, 2]).unwrap();
        let col = Tensor::new(vec![7.0, 9.0], &[2, 1]).unwrap();
        assert_eq!(tape.matmul(&sel, &col).unwrap().values(), &[7.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let tape = Tape::no_grad();
        let a = random_tensor(&mut rng, &[3, 4]);
        let b = random_tensor(&mut rng, &[4, 2]);
        let got = tape.matmul(&a, &b).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                let mut want = 0.0;
                for p in 0..4 {
                    want += a.values()[i * 4 + p] * b.values()[p * 2 + j];
                }
                assert!((got.values()[i * 2 + j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matmul_inner_dimension_mismatch() {
        let tape = Tape::no_grad();
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[4, 2]);
        assert!(tape.matmul(&a, &b).is_err());
    }

    #[test]
    fn softmax_uniform_and_stability() {
        let tape = Tape::no_grad();
        let x = Tensor::new(vec![0.0, 0.0, 0.0], &[3]).unwrap();
        let s = tape.softmax(&x, 0).unwrap();
        for v in s.values() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
        let big = Tensor::new(vec![1000.0, 0.0], &[2]).unwrap();
        let s = tape.softmax(&big, 0).unwrap();
        assert!((s.values()[0] - 1.0).abs() < 1e-12);
        assert!(s.values()[1].abs() < 1e-12);
    }

    #[test]
    fn softmax_direct_evaluation_oracle() {
        let tape = Tape::no_grad();
        let x = Tensor::new(vec![1.0, 2.0, 3.0], &[3]).unwrap();
        let s = tape.softmax(&x, 0).unwrap();
        let total: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
        for (got, v) in s.values().iter().zip([1.0f64, 2.0, 3.0]) {
            assert!((got - v.exp() / total).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rejects_nan() {
        let tape = Tape::no_grad();
        let x = Tensor::new(vec![f64::NAN, 0.0], &[2]).unwrap();
        assert!(tape.softmax(&x, 0).is_err());
    }

    #[test]
    fn softmax_sums_to_one_along_each_matrix_axis() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let tape = Tape::no_grad();
        let x = random_tensor(&mut rng, &[4, 5]);
        for axis in [0usize, 1] {
            let s = tape.softmax(&x, axis).unwrap();
            let (slices, len, stride, step) = if axis == 0 {
                (5, 4, 1, 5)
            } else {
                (4, 5, 5, 1)
            };
            for sl in 0..slices {
                let sum: f64 = (0..len).map(|i| s.values()[sl * stride + i * step]).sum();
                assert!((sum - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn l2_normalize_basics() {
        let tape = Tape::no_grad();
        let x = Tensor::new(vec![3.0, 4.0], &[2]).unwrap();
        let y = tape.l2_normalize(&x).unwrap();
        assert!((y.values()[0] - 0.6).abs() < 1e-12);
        assert!((y.values()[1] - 0.8).abs() < 1e-12);
        // unit vector stays put
        let y2 = tape.l2_normalize(&y).unwrap();
        assert!((y2.values()[0] - y.values()[0]).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let v = random_tensor(&mut rng, &[9]);
        let n = tape.l2_normalize(&v).unwrap();
        let mut norm = 0.0;
        for x in v.values() {
            norm += x * x;
        }
        let norm = norm.sqrt();
        for (got, x) in n.values().iter().zip(v.values()) {
            assert!((got - x / norm).abs() < 1e-12);
        }
    }

    #[test]
    fn l2_normalize_degenerate_returns_input() {
        let tape = Tape::no_grad();
        let x = Tensor::new(vec![0.0, 1e-20], &[2]).unwrap();
        let y = tape.l2_normalize(&x).unwrap();
        assert_eq!(y.values(), x.values());
        assert_eq!(tape.degenerate_norm_count(), 1);
    }

    #[test]
    fn backward_sum_of_squares() {
        let x = Tensor::param(vec![1.0, 2.0], &[2]).unwrap();
        let tape = Tape::new();
        let loss = tape.sum(&tape.square(&x).unwrap()).unwrap();
        tape.backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 4.0]);
    }

    #[test]
    fn backward_constant_loss_gives_zero_grads() {
        let x = Tensor::param(vec![1.0, 2.0], &[2]).unwrap();
        let tape = Tape::new();
        // x participates but is multiplied by zero
        let z = tape.mul_scalar(&x, 0.0).unwrap();
        let loss = tape.sum(&z).unwrap();
        tape.backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let x = Tensor::param(vec![1.0, 2.0], &[2]).unwrap();
        let tape = Tape::new();
        let y = tape.square(&x).unwrap();
        assert!(tape.backward(&y).is_err());
    }

    #[test]
    fn backward_accumulates_across_calls() {
        let x = Tensor::param(vec![3.0], &[1]).unwrap();
        let tape = Tape::new();
        let loss = tape.sum(&tape.square(&x).unwrap()).unwrap();
        tape.backward(&loss).unwrap();
        tape.backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![12.0]);
        x.zero_grad();
        assert_eq!(x.grad().unwrap(), vec![0.0]);
    }

    #[test]
    fn composite_chain_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let w = random_tensor(&mut rng, &[3, 3]);
        let x = random_tensor(&mut rng, &[3, 2]);
        let report = grad_check(
            |tape, probe| {
                let h = tape.matmul(&w, probe)?;
                let a = tape.tanh(&h)?;
                tape.sum(&a)
            },
            &x,
            1e-4,
            1e-6,
        )
        .unwrap();
        assert!(report.passed, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn grad_check_trivial_quadratic() {
        let x = Tensor::new(vec![1.0, -2.0, 0.5], &[3]).unwrap();
        let report = grad_check(
            |tape, t| tape.sum(&tape.square(t)?),
            &x,
            1e-4,
            1e-6,
        )
        .unwrap();
        assert!(report.passed);
        assert!(report.max_rel_err < 1e-6);
        assert!(!report.kink_near);
    }

    #[test]
    fn grad_check_flags_kink_proximity() {
        let x = Tensor::new(vec![1e-6], &[1]).unwrap();
        let report = grad_check(
            |tape, t| tape.sum(&tape.relu(t)?),
            &x,
            1e-4,
            1e-3,
        )
        .unwrap();
        assert!(report.kink_near);
    }

    #[test]
    fn grad_check_detects_detached_path() {
        // f multiplies x with a detached copy of itself, so the analytic
        // gradient misses half the true derivative.
        let x = Tensor::new(vec![0.7, -0.3], &[2]).unwrap();
        let report = grad_check(
            |tape, t| {
                let frozen = Tensor::new(t.values().to_vec(), t.shape())?;
                tape.sum(&tape.mul(t, &frozen)?)
            },
            &x,
            1e-4,
            1e-3,
        )
        .unwrap();
        assert!(!report.passed);
    }

    #[test]
    fn every_primitive_matches_finite_differences() {
        for seed in 0..10u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random_tensor(&mut rng, &[2, 3]);
            let other = random_tensor(&mut rng, &[2, 3]);
            let right = random_tensor(&mut rng, &[3, 2]);
            let cases: Vec<(
                &str,
                Box<dyn Fn(&Tape, &Tensor) -> Result<Tensor>>,
            )> = vec![
                ("add", Box::new({
                    let other = other.clone();
                    move |t: &Tape, p: &Tensor| t.sum(&t.add(p, &other)?)
                })),
                ("sub", Box::new({
                    let other = other.clone();
                    move |t: &Tape, p: &Tensor| t.sum(&t.sub(p, &other)?)
                })),
                ("mul", Box::new({
                    let other = other.clone();
                    move |t: &Tape, p: &Tensor| t.sum(&t.mul(p, &other)?)
                })),
                ("div", Box::new(|t: &Tape, p: &Tensor| {
                    let denom = Tensor::new(vec![2.0; 6], &[2, 3])?;
                    t.sum(&t.div(p, &denom)?)
                })),
                ("tanh", Box::new(|t: &Tape, p: &Tensor| t.sum(&t.tanh(p)?))),
                ("sigmoid", Box::new(|t: &Tape, p: &Tensor| t.sum(&t.sigmoid(p)?))),
                ("exp", Box::new(|t: &Tape, p: &Tensor| t.sum(&t.exp(p)?))),
                ("square", Box::new(|t: &Tape, p: &Tensor| t.sum(&t.square(p)?))),
                ("matmul", Box::new({
                    let right = right.clone();
                    move |t: &Tape, p: &Tensor| t.sum(&t.matmul(p, &right)?)
                })),
                ("transpose", Box::new(|t: &Tape, p: &Tensor| {
                    t.sum(&t.square(&t.transpose(p)?)?)
                })),
                ("softmax", Box::new(|t: &Tape, p: &Tensor| {
                    let s = t.softmax(p, 1)?;
                    t.sum(&t.square(&s)?)
                })),
                ("row_stack", Box::new(|t: &Tape, p: &Tensor| {
                    let r0 = t.row(p, 0)?;
                    let r1 = t.row(p, 1)?;
                    let m = t.stack_rows(&[r1, r0])?;
                    t.sum(&t.square(&m)?)
                })),
            ];
            for (name, f) in cases {
                let report = grad_check(f.as_ref(), &x, 1e-4, 1e-3).unwrap();
                assert!(
                    report.passed,
                    "{name} (seed {seed}): max rel err {}",
                    report.max_rel_err
                );
            }
        }
    }

    #[test]
    fn log_and_sqrt_gradients_on_positive_input() {
        for seed in 0..10u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let values: Vec<f64> = (0..6).map(|_| rng.random_range(0.5..2.0)).collect();
            let x = Tensor::new(values, &[6]).unwrap();
            for (name, f) in [
                (
                    "log",
                    Box::new(|t: &Tape, p: &Tensor| t.sum(&t.log(p)?))
                        as Box<dyn Fn(&Tape, &Tensor) -> Result<Tensor>>,
                ),
                (
                    "sqrt",
                    Box::new(|t: &Tape, p: &Tensor| t.sum(&t.sqrt(p)?)),
                ),
                (
                    "l2_normalize",
                    Box::new(|t: &Tape, p: &Tensor| {
                        let n = t.l2_normalize(p)?;
                        let w = Tensor::new(vec![0.3, -0.2, 0.5, 0.1, -0.4, 0.2], &[6])?;
                        t.sum(&t.mul(&n, &w)?)
                    }),
                ),
            ] {
                let report = grad_check(f.as_ref(), &x, 1e-4, 1e-3).unwrap();
                assert!(
                    report.passed,
                    "{name} (seed {seed}): max rel err {}",
                    report.max_rel_err
                );
            }
        }
    }

    #[test]
    fn backward_is_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x = Tensor::param(
            (0..4).map(|_| rng.random_range(-1.0..1.0)).collect(),
            &[4],
        )
        .unwrap();
        let tape = Tape::new();
        let f = tape.sum(&tape.square(&x).unwrap()).unwrap();
        let g = tape.sum(&tape.tanh(&x).unwrap()).unwrap();

        tape.backward(&f).unwrap();
        let grad_f = x.grad().unwrap();
        x.zero_grad();
        tape.backward(&g).unwrap();
        let grad_g = x.grad().unwrap();
        x.zero_grad();

        let (a, b) = (2.5, -0.75);
        let combined = tape
            .add(
                &tape.mul_scalar(&f, a).unwrap(),
                &tape.mul_scalar(&g, b).unwrap(),
            )
            .unwrap();
        tape.backward(&combined).unwrap();
        let grad_c = x.grad().unwrap();
        for i in 0..4 {
            assert!((grad_c[i] - (a * grad_f[i] + b * grad_g[i])).abs() < 1e-10);
        }
    }

    #[test]
    fn repeated_runs_are_bit_identical() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(33);
            let w = Tensor::param(
                (0..9).map(|_| rng.random_range(-1.0..1.0)).collect(),
                &[3, 3],
            )
            .unwrap();
            let x = random_tensor(&mut rng, &[3, 3]);
            let tape = Tape::new();
            let y = tape.tanh(&tape.matmul(&w, &x).unwrap()).unwrap();
            let loss = tape.sum(&tape.square(&y).unwrap()).unwrap();
            tape.backward(&loss).unwrap();
            (loss.item().unwrap(), w.grad().unwrap())
        };
        let (l1, g1) = run();
        let (l2, g2) = run();
        assert_eq!(l1.to_bits(), l2.to_bits());
        for (a, b) in g1.iter().zip(&g2) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn parameter_reused_twice_accumulates_gradient() {
        let x = Tensor::param(vec![3.0], &[1]).unwrap();
        let tape = Tape::new();
        // loss = x·x via two separate references to the same parameter
        let loss = tape.sum(&tape.mul(&x, &x).unwrap()).unwrap();
        tape.backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![6.0]);
    }

    #[test]
    fn embedding_gradient_scatters_and_accumulates() {
        let table = Tensor::param(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[3, 2]).unwrap();
        let tape = Tape::new();
        let looked = tape.embed(&table, &[1, 1, 2]).unwrap();
        assert_eq!(looked.values(), &[3.0, 4.0, 3.0, 4.0, 5.0, 6.0]);
        let loss = tape.sum(&looked).unwrap();
        tape.backward(&loss).unwrap();
        // row 1 receives two contributions, row 2 one, row 0 none
        assert_eq!(
            table.grad().unwrap(),
            vec![0.0, 0.0, 2.0, 2.0, 1.0, 1.0]
        );
    }

    #[test]
    fn embedding_rejects_out_of_vocabulary() {
        let table = Tensor::zeros(&[3, 2]);
        let tape = Tape::no_grad();
        assert!(tape.embed(&table, &[3]).is_err());
    }
}
