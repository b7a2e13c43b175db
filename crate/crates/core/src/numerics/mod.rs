//! Dense `f32` tensors with a small reverse-mode autodiff tape.

mod graph;
pub mod kernels;
mod tensor;

pub use graph::{BinaryOp, Graph, UnaryOp, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("division by zero")]
    DivByZero,
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("loss must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("loss does not depend on any gradient-tracked leaf")]
    Detached,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// Compares the autodiff gradient of a scalar function against central
/// differences.
///
/// Returns `max_i |analytic_i - numeric_i| / max(1, |analytic_i|)`.
pub fn grad_check<F>(f: F, at: &Tensor, step: f32) -> Result<f32, NumericsError>
where
    F: Fn(&mut Graph, Var) -> Result<Var, NumericsError>,
{
    if step.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
        return Err(NumericsError::InvalidArgument(format!(
            "grad_check step {step}"
        )));
    }
    let mut g = Graph::new();
    let x = g.param(at.clone());
    let y = f(&mut g, x)?;
    g.backward(y)?;
    let analytic = g.grad(x).ok_or(NumericsError::Detached)?.clone();

    let eval = |t: Tensor| -> Result<f64, NumericsError> {
        let mut g = Graph::new();
        let x = g.constant(t);
        let y = f(&mut g, x)?;
        Ok(g.value(y).item()? as f64)
    };

    let mut worst = 0.0f32;
    for i in 0..at.numel() {
        let mut plus = at.clone();
        plus.data_mut()[i] += step;
        let mut minus = at.clone();
        minus.data_mut()[i] -= step;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * step as f64);
        if !numeric.is_finite() {
            return Err(NumericsError::NonFinite(format!(
                "finite difference at {i}"
            )));
        }
        let a = analytic.data()[i];
        let err = (a as f64 - numeric).abs() / (a.abs() as f64).max(1.0);
        worst = worst.max(err as f32);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    fn naive_matmul(a: &Tensor, b: &Tensor) -> Vec<f64> {
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut c = vec![0.0f64; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a.data()[i * k + p] as f64 * b.data()[p * n + j] as f64;
                }
            }
        }
        c
    }

    /// Direct six-loop cross-correlation.
    fn naive_conv(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> (Vec<usize>, Vec<f64>) {
        let [b, c, h, wd] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
        let [o, _, k, _] = [w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]];
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (wd + 2 * pad - k) / stride + 1;
        let mut out = vec![0.0f64; b * o * oh * ow];
        for bi in 0..b {
            for oc in 0..o {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0f64;
                        for ic in 0..c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                        continue;
                                    }
                                    let xv = x.data()
                                        [((bi * c + ic) * h + iy as usize) * wd + ix as usize];
                                    let wv = w.data()[((oc * c + ic) * k + ky) * k + kx];
                                    acc += xv as f64 * wv as f64;
                                }
                            }
                        }
                        out[((bi * o + oc) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        (vec![b, o, oh, ow], out)
    }

    #[test]
    fn add_and_annihilator() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2], &[1.0, 2.0]));
        let b = g.constant(t(&[2], &[3.0, 4.0]));
        let s = g.add(a, b).unwrap();
        assert_eq!(g.value(s).data(), &[4.0, 6.0]);
        let x = g.constant(Tensor::rand_uniform(
            &[3, 4],
            -2.0,
            2.0,
            &mut ChaCha8Rng::seed_from_u64(1),
        ));
        let z = g.mul_scalar(x, 0.0).unwrap();
        assert!(g.value(z).data().iter().all(|&v| v == 0.0));
        assert_eq!(g.value(z).shape(), &[3, 4]);
    }

    #[test]
    fn sqrt_matches_scalar_loop() {
        let grid: Vec<f32> = (0..1000).map(|i| 1.0 - i as f32 * 9.9e-4).collect();
        let mut g = Graph::new();
        let a = g.constant(Tensor::from_vec(grid.clone()).unwrap());
        let s = g.unary(UnaryOp::Sqrt, a).unwrap();
        for (v, x) in g.value(s).data().iter().zip(&grid) {
            assert!((v - x.sqrt()).abs() <= 1e-7);
        }
    }

    #[test]
    fn division_by_zero_is_an_error() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2], &[1.0, 2.0]));
        let b = g.constant(t(&[2], &[1.0, 0.0]));
        assert_eq!(g.div(a, b), Err(NumericsError::DivByZero));
        assert_eq!(
            g.binary_scalar(BinaryOp::Div, a, 0.0),
            Err(NumericsError::DivByZero)
        );
    }

    #[test]
    fn non_finite_results_surface_as_errors() {
        let mut g = Graph::new();
        let a = g.constant(t(&[1], &[-1.0]));
        assert!(matches!(
            g.unary(UnaryOp::Sqrt, a),
            Err(NumericsError::NonFinite(_))
        ));
        let big = g.constant(t(&[1], &[100.0]));
        assert!(matches!(
            g.unary(UnaryOp::Exp, big),
            Err(NumericsError::NonFinite(_))
        ));
    }

    #[test]
    fn broadcast_shape_errors() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2]));
        assert!(matches!(g.add(a, b), Err(NumericsError::ShapeMismatch(_))));
    }

    #[test]
    fn matmul_examples() {
        let mut g = Graph::new();
        let eye = g.constant(t(&[3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]));
        let m = g.constant(t(&[3, 2], &[1., 2., 3., 4., 5., 6.]));
        let p = g.matmul(eye, m).unwrap();
        assert_eq!(g.value(p), g.value(m));

        let a = g.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let b = g.constant(t(&[2, 1], &[0., 1.]));
        let p = g.matmul(a, b).unwrap();
        assert_eq!(g.value(p).data(), &[2.0, 4.0]);

        assert!(g.matmul(a, m).is_err());
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = Tensor::randn(&[7, 5], &mut rng);
        let b = Tensor::randn(&[5, 3], &mut rng);
        let oracle = naive_matmul(&a, &b);
        let mut g = Graph::new();
        let (va, vb) = (g.constant(a), g.constant(b));
        let p = g.matmul(va, vb).unwrap();
        for (x, y) in g.value(p).data().iter().zip(&oracle) {
            assert!((*x as f64 - y).abs() <= 1e-5 * y.abs().max(1.0));
        }
    }

    #[test]
    fn conv_identity_and_constant_kernels() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::randn(&[2, 1, 5, 5], &mut rng);
        let mut g = Graph::new();
        let vx = g.constant(x.clone());
        let k = g.constant(Tensor::ones(&[1, 1, 1, 1]));
        let y = g.conv2d(vx, k, 1, 0).unwrap();
        assert_eq!(g.value(y), &x);

        let c = g.constant(Tensor::full(&[1, 1, 6, 6], 0.37));
        let avg = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0 / 9.0));
        let y = g.conv2d(c, avg, 1, 1).unwrap();
        let out = g.value(y).data();
        for yy in 1..5 {
            for xx in 1..5 {
                assert!((out[yy * 6 + xx] - 0.37).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn conv_matches_six_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for &(stride, pad, k) in &[(1, 1, 3), (2, 1, 3), (1, 0, 1), (1, 2, 5), (2, 0, 3)] {
            let x = Tensor::randn(&[2, 3, 7, 7], &mut rng);
            let w = Tensor::randn(&[4, 3, k, k], &mut rng);
            if (7 + 2 * pad - k) % stride != 0 {
                continue;
            }
            let (shape, oracle) = naive_conv(&x, &w, stride, pad);
            let mut g = Graph::new();
            let (vx, vw) = (g.constant(x), g.constant(w));
            let y = g.conv2d(vx, vw, stride, pad).unwrap();
            assert_eq!(g.value(y).shape(), shape.as_slice());
            for (a, b) in g.value(y).data().iter().zip(&oracle) {
                assert!((*a as f64 - b).abs() <= 1e-4, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn conv_rejects_non_integral_output() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 1, 6, 6]));
        let k = g.constant(Tensor::zeros(&[1, 1, 3, 3]));
        assert!(matches!(
            g.conv2d(x, k, 2, 0),
            Err(NumericsError::InvalidArgument(_))
        ));
    }

    #[test]
    fn backward_trivial_cases() {
        let mut g = Graph::new();
        let x = g.param(t(&[1], &[3.0]));
        let sq = g.mul(x, x).unwrap();
        let l = g.sum_all(sq).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[6.0]);

        let mut g = Graph::new();
        let a = g.param(t(&[3], &[1.0, -2.0, 0.5]));
        let b = g.constant(t(&[3], &[4.0, 5.0, 6.0]));
        let p = g.mul(a, b).unwrap();
        let l = g.sum_all(p).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(a).unwrap().data(), &[4.0, 5.0, 6.0]);
    }

    #[test]
    fn backward_errors() {
        let mut g = Graph::new();
        let a = g.param(t(&[2], &[1.0, 2.0]));
        let b = g.mul_scalar(a, 2.0).unwrap();
        assert!(matches!(g.backward(b), Err(NumericsError::NotScalar(_))));
        let c = g.constant(t(&[1], &[1.0]));
        let d = g.mul_scalar(c, 2.0).unwrap();
        assert_eq!(g.backward(d), Err(NumericsError::Detached));
    }

    #[test]
    fn grad_check_trivial_functions() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::randn(&[6], &mut rng);
        let err = grad_check(|g, x| g.sum_all(x), &x, 1e-3).unwrap();
        assert!(err < 1e-4);

        let mut g = Graph::new();
        let x = g.param(Tensor::zeros(&[4]));
        let s = g.sigmoid(x).unwrap();
        let l = g.sum_all(s).unwrap();
        g.backward(l).unwrap();
        assert!(g
            .grad(x)
            .unwrap()
            .data()
            .iter()
            .all(|&v| (v - 0.25).abs() < 1e-7));
        assert!(grad_check(|g, x| g.sum_all(x), &Tensor::zeros(&[2]), 0.0).is_err());
    }

    #[test]
    fn every_elementwise_op_passes_grad_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let base = Tensor::rand_uniform(&[2, 3], 0.5, 1.5, &mut rng);
        let other = Tensor::rand_uniform(&[3], 0.5, 1.5, &mut rng);
        let unary = [
            UnaryOp::Neg,
            UnaryOp::Exp,
            UnaryOp::Sqrt,
            UnaryOp::Relu,
            UnaryOp::Sigmoid,
            UnaryOp::Silu,
            UnaryOp::Tanh,
            UnaryOp::Pow(3.0),
        ];
        for op in unary {
            let err = grad_check(
                |g, x| {
                    let y = g.unary(op, x)?;
                    g.sum_all(y)
                },
                &base,
                1e-3,
            )
            .unwrap();
            assert!(err < 1e-3, "{op:?}: {err}");
        }
        for op in [BinaryOp::Add, BinaryOp::Sub, BinaryOp::Mul, BinaryOp::Div] {
            // gradient with respect to the left operand, right operand broadcast
            let o = other.clone();
            let err = grad_check(
                |g, x| {
                    let b = g.constant(o.clone());
                    let y = g.binary(op, x, b)?;
                    let y = g.mul(y, y)?;
                    g.sum_all(y)
                },
                &base,
                1e-3,
            )
            .unwrap();
            assert!(err < 1e-3, "{op:?} lhs: {err}");
            // and with respect to the broadcast operand
            let a = base.clone();
            let err = grad_check(
                |g, x| {
                    let a = g.constant(a.clone());
                    let y = g.binary(op, a, x)?;
                    let y = g.mul(y, y)?;
                    g.sum_all(y)
                },
                &other,
                1e-3,
            )
            .unwrap();
            assert!(err < 1e-3, "{op:?} rhs: {err}");
            let err = grad_check(
                |g, x| {
                    let y = g.binary_scalar(op, x, 1.7)?;
                    let y = g.mul(y, y)?;
                    g.mean_all(y)
                },
                &base,
                1e-3,
            )
            .unwrap();
            assert!(err < 1e-3, "{op:?} scalar: {err}");
        }
    }

    #[test]
    fn depth_to_space_places_channels_at_subpixels() {
        // one output channel, f = 2: channel i·2 + j fills offset (i, j)
        let x = Tensor::new(&[1, 4, 1, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut g = Graph::new();
        let v = g.constant(x.clone());
        let y = g.depth_to_space(v, 2).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 1, 2, 2]);
        assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let big = Tensor::randn(&[2, 3, 4, 6], &mut rng);
        let b = g.constant(big.clone());
        let d = g.space_to_depth(b, 2).unwrap();
        assert_eq!(g.shape(d), &[2, 12, 2, 3]);
        let back = g.depth_to_space(d, 2).unwrap();
        assert!(g.value(back).bit_eq(&big));
    }

    #[test]
    fn structural_ops_pass_grad_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::randn(&[2, 2, 3, 3], &mut rng);
        let w = Tensor::randn(&[2, 4], &mut rng);
        let other = Tensor::randn(&[2, 1, 3, 3], &mut rng);
        let err = grad_check(
            |g, x| {
                let o = g.constant(other.clone());
                let c = g.concat(&[x, o], 1)?;
                let u = g.upsample(c, 2)?;
                let u = g.avg_pool(u, 3)?;
                let u = g.space_to_depth(u, 2)?;
                let u = g.depth_to_space(u, 2)?;
                let u = g.concat(&[u, u, u, u], 1)?;
                let u = g.depth_to_space(u, 2)?;
                let u = g.avg_pool(u, 2)?;
                let m = g.mean_spatial(u)?;
                let w2 = g.constant(Tensor::randn(&[3, 4], &mut ChaCha8Rng::seed_from_u64(2)));
                let p = g.matmul(m, w2)?;
                let r = g.reshape(p, &[8])?;
                let sq = g.mul(r, r)?;
                g.sum_all(sq)
            },
            &x,
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-3, "{err}");
        let err = grad_check(
            |g, w| {
                let logits = g.mul_scalar(w, 1.5)?;
                g.cross_entropy(logits, &[1, 3])
            },
            &w,
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-3, "{err}");
    }

    #[test]
    fn composite_conv_relu_matmul_net_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = Tensor::randn(&[1, 2, 4, 4], &mut rng);
        let k = Tensor::randn(&[3, 2, 3, 3], &mut rng).scale(0.5);
        let w = Tensor::randn(&[3, 2], &mut rng);
        let net = |g: &mut Graph, x: Var, k: Var, w: Var| -> Result<Var, NumericsError> {
            let c = g.conv2d(x, k, 1, 1)?;
            let r = g.relu(c)?;
            let m = g.mean_spatial(r)?;
            let p = g.matmul(m, w)?;
            let s = g.mul(p, p)?;
            g.sum_all(s)
        };
        let (kc, wc) = (k.clone(), w.clone());
        let err_x = grad_check(
            |g, x| {
                let (k, w) = (g.constant(kc.clone()), g.constant(wc.clone()));
                net(g, x, k, w)
            },
            &x,
            1e-3,
        )
        .unwrap();
        let (xc, wc) = (x.clone(), w.clone());
        let err_k = grad_check(
            |g, k| {
                let (x, w) = (g.constant(xc.clone()), g.constant(wc.clone()));
                net(g, x, k, w)
            },
            &k,
            1e-3,
        )
        .unwrap();
        let err_w = grad_check(
            |g, w| {
                let (x, k) = (g.constant(x.clone()), g.constant(k.clone()));
                net(g, x, k, w)
            },
            &w,
            1e-3,
        )
        .unwrap();
        assert!(
            err_x < 1e-3 && err_k < 1e-3 && err_w < 1e-3,
            "{err_x} {err_k} {err_w}"
        );
    }

    #[test]
    fn strided_conv_passes_grad_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let x = Tensor::randn(&[2, 2, 7, 7], &mut rng);
        let k = Tensor::randn(&[3, 2, 3, 3], &mut rng).scale(0.3);
        let kc = k.clone();
        let err = grad_check(
            |g, x| {
                let k = g.constant(kc.clone());
                let y = g.conv2d(x, k, 2, 1)?;
                let y = g.silu(y)?;
                g.mean_all(y)
            },
            &x,
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-3, "{err}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn gradients_are_linear_in_the_loss(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::randn(&[5], &mut rng);
            let w = Tensor::randn(&[5], &mut rng);
            let loss_a = |g: &mut Graph, x: Var| -> Result<Var, NumericsError> {
                let s = g.silu(x)?;
                g.sum_all(s)
            };
            let wc = w.clone();
            let loss_b = move |g: &mut Graph, x: Var| -> Result<Var, NumericsError> {
                let w = g.constant(wc.clone());
                let p = g.mul(x, w)?;
                let p = g.mul(p, p)?;
                g.sum_all(p)
            };
            let grad_of = |f: &dyn Fn(&mut Graph, Var) -> Result<Var, NumericsError>| {
                let mut g = Graph::new();
                let v = g.param(x.clone());
                let l = f(&mut g, v).unwrap();
                g.backward(l).unwrap();
                g.grad(v).unwrap().clone()
            };
            let ga = grad_of(&loss_a);
            let gb = grad_of(&loss_b);
            let gsum = grad_of(&|g: &mut Graph, v: Var| {
                let a = loss_a(g, v)?;
                let b = loss_b(g, v)?;
                g.add(a, b)
            });
            let expected = ga.add(&gb).unwrap();
            prop_assert!(gsum.max_abs_diff(&expected).unwrap() <= 1e-5);
        }

        #[test]
        fn elementwise_matches_scalar_loop(
            vals in proptest::collection::vec(-3.0f32..3.0, 12),
            other in proptest::collection::vec(0.5f32..3.0, 4),
        ) {
            let mut g = Graph::new();
            let a = g.constant(Tensor::new(&[3, 4], vals.clone()).unwrap());
            let b = g.constant(Tensor::new(&[4], other.clone()).unwrap());
            for op in [BinaryOp::Add, BinaryOp::Sub, BinaryOp::Mul, BinaryOp::Div] {
                let r = g.binary(op, a, b).unwrap();
                for (i, v) in g.value(r).data().iter().enumerate() {
                    let (x, y) = (vals[i], other[i % 4]);
                    let want = match op {
                        BinaryOp::Add => x + y,
                        BinaryOp::Sub => x - y,
                        BinaryOp::Mul => x * y,
                        BinaryOp::Div => x / y,
                    };
                    prop_assert!((v - want).abs() <= 1e-5 * want.abs().max(1.0));
                }
            }
        }
    }
}
