//! Minimal reverse-mode differentiation with a finite-difference oracle.

pub mod check;
mod graph;
pub(crate) mod kernels;
mod tensor;

pub use check::{finite_diff, finite_diff_grad, max_relative_error, relative_error, DEFAULT_EPS};
pub use graph::{sigmoid, softmax, softmax_with_logsumexp, Gradients, Graph, Value};
pub use tensor::{ParamGrads, ParamId, ParamStore, Parameter, Tensor};

/// Layer-norm epsilon used throughout.
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::RkmError;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    /// Checks `backward` of `build(inputs)` against finite differences, with the
    /// scalar loss formed as a fixed random projection of the output.
    fn check_op<F>(inputs: Vec<(Vec<usize>, Vec<f64>)>, build: F) -> f64
    where
        F: Fn(&mut Graph, &[Value]) -> Value,
    {
        let sizes: Vec<usize> = inputs.iter().map(|(_, d)| d.len()).collect();
        let flat: Vec<f64> = inputs.iter().flat_map(|(_, d)| d.clone()).collect();
        let shapes: Vec<Vec<usize>> = inputs.iter().map(|(s, _)| s.clone()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let proj = rand_vec(&mut rng, 64);

        let eval = |x: &[f64], want_grad: bool| -> (f64, Vec<f64>) {
            let mut g = Graph::new();
            let mut off = 0;
            let mut vals = Vec::new();
            for (s, n) in shapes.iter().zip(&sizes) {
                vals.push(g.constant(s.clone(), x[off..off + n].to_vec()).unwrap());
                off += n;
            }
            let out = build(&mut g, &vals);
            let n_out = g.numel(out);
            let w = g.constant(vec![1, n_out], proj[..n_out].to_vec()).unwrap();
            let loss = g.affine(w, out, None).unwrap();
            let lv = g.scalar(loss);
            if !want_grad {
                return (lv, vec![]);
            }
            let grads = g.backward(loss).unwrap();
            let mut flat = Vec::new();
            for (v, n) in vals.iter().zip(&sizes) {
                match grads.wrt(*v) {
                    Some(gr) => flat.extend_from_slice(gr),
                    None => flat.extend(std::iter::repeat_n(0.0, *n)),
                }
            }
            (lv, flat)
        };
        let (_, analytic) = eval(&flat, true);
        let numeric = finite_diff(|x| eval(x, false).0, &flat, DEFAULT_EPS);
        max_relative_error(&analytic, &numeric)
    }

    #[test]
    fn affine_identity_and_zero_weights() {
        let mut g = Graph::new();
        let w = g.constant(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let x = g.vector(vec![3.0, 4.0]);
        let y = g.affine(w, x, None).unwrap();
        assert_eq!(g.data(y), &[3.0, 4.0]);

        let w0 = g.constant(vec![2, 2], vec![0.0; 4]).unwrap();
        let ones = g.vector(vec![1.0, 1.0]);
        let b = g.vector(vec![5.0, 6.0]);
        let y = g.affine(w0, ones, Some(b)).unwrap();
        assert_eq!(g.data(y), &[5.0, 6.0]);
    }

    #[test]
    fn affine_shape_error_names_operands() {
        let mut g = Graph::new();
        let w = g.constant(vec![2, 3], vec![0.0; 6]).unwrap();
        let x = g.vector(vec![1.0, 2.0]);
        let err = g.affine(w, x, None).unwrap_err();
        match err {
            RkmError::Shape { op, detail } => {
                assert_eq!(op, "affine");
                assert!(detail.contains("2x3"), "{detail}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn affine_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..3 {
            let err = check_op(
                vec![
                    (vec![3, 4], rand_vec(&mut rng, 12)),
                    (vec![4], rand_vec(&mut rng, 4)),
                    (vec![3], rand_vec(&mut rng, 3)),
                ],
                |g, v| g.affine(v[0], v[1], Some(v[2])).unwrap(),
            );
            assert!(err < 1e-6, "affine rel err {err}");
        }
    }

    #[test]
    fn sigmoid_values_and_gradient() {
        let mut g = Graph::new();
        let x = g.vector(vec![0.0, 0.0]);
        let y = g.sigmoid(x);
        assert_eq!(g.data(y), &[0.5, 0.5]);
        let x = g.vector(vec![-1000.0]);
        let y = g.sigmoid(x);
        let v = g.scalar(y);
        assert!((0.0..=1e-300).contains(&v));
        assert!(!sigmoid(1000.0).is_nan() && !sigmoid(-1000.0).is_nan());

        let d = finite_diff(|t| sigmoid(t[0]), &[0.0], DEFAULT_EPS);
        assert!((d[0] - 0.25).abs() < 1e-10);
        let mut g = Graph::new();
        let x = g.vector(vec![0.0]);
        let y = g.sigmoid(x);
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.wrt(x).unwrap(), &[0.25]);
    }

    #[test]
    fn elementwise_ops_and_pooling() {
        let mut g = Graph::new();
        let a = g.vector(vec![1.0, 2.0]);
        let b = g.vector(vec![3.0, 4.0]);
        let h = g.hadamard(a, b).unwrap();
        assert_eq!(g.data(h), &[3.0, 8.0]);
        let p = g.mean_pool(&[a]).unwrap();
        assert_eq!(g.data(p), &[1.0, 2.0]);
        let c = g.vector(vec![1.0]);
        assert!(matches!(g.add(a, c), Err(RkmError::Shape { .. })));
        assert!(matches!(g.mean_pool(&[]), Err(RkmError::EmptySequence(_))));
    }

    #[test]
    fn elementwise_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..3 {
            let a = rand_vec(&mut rng, 5);
            let b = rand_vec(&mut rng, 5);
            let c = rand_vec(&mut rng, 5);
            let e = check_op(vec![(vec![5], a.clone())], |g, v| g.tanh(v[0]));
            assert!(e < 1e-6, "tanh {e}");
            let e = check_op(vec![(vec![5], a.clone()), (vec![5], b.clone())], |g, v| {
                g.hadamard(v[0], v[1]).unwrap()
            });
            assert!(e < 1e-6, "hadamard {e}");
            let e = check_op(
                vec![(vec![5], a.clone()), (vec![5], b.clone()), (vec![5], c.clone())],
                |g, v| g.mean_pool(v).unwrap(),
            );
            assert!(e < 1e-6, "mean_pool {e}");
            let e = check_op(vec![(vec![5], a.clone()), (vec![5], b.clone())], |g, v| {
                let s = g.sub(v[0], v[1]).unwrap();
                let o = g.one_minus(s);
                g.add(o, v[0]).unwrap()
            });
            assert!(e < 1e-6, "sub/one_minus/add {e}");
            let e = check_op(vec![(vec![5], a.clone()), (vec![1], vec![0.7])], |g, v| {
                g.scale_by(v[0], v[1]).unwrap()
            });
            assert!(e < 1e-6, "scale_by {e}");
            let e = check_op(vec![(vec![2], a[..2].to_vec()), (vec![3], b[..3].to_vec())], |g, v| {
                let s = g.concat(v).unwrap();
                g.sigmoid(s)
            });
            assert!(e < 1e-6, "concat/sigmoid {e}");
            let e = check_op(vec![(vec![3, 2], a[..5].iter().chain(&b[..1]).copied().collect())], |g, v| {
                g.gather(v[0], 1).unwrap()
            });
            assert!(e < 1e-6, "gather {e}");
        }
    }

    #[test]
    fn layer_norm_cases() {
        let mut g = Graph::new();
        let x = g.vector(vec![2.0; 4]);
        let gain = g.vector(vec![1.0; 4]);
        let bias = g.vector(vec![0.0; 4]);
        let y = g.layer_norm(x, gain, bias, LAYER_NORM_EPS).unwrap();
        assert!(g.data(y).iter().all(|&v| v == 0.0));

        let x = g.vector(vec![1.0, -1.0]);
        let gain = g.vector(vec![1.0; 2]);
        let bias = g.vector(vec![0.0; 2]);
        let y = g.layer_norm(x, gain, bias, 1e-14).unwrap();
        assert!((g.data(y)[0] - 1.0).abs() < 1e-12 && (g.data(y)[1] + 1.0).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..3 {
            let e = check_op(
                vec![
                    (vec![6], rand_vec(&mut rng, 6)),
                    (vec![6], rand_vec(&mut rng, 6)),
                    (vec![6], rand_vec(&mut rng, 6)),
                ],
                |g, v| g.layer_norm(v[0], v[1], v[2], LAYER_NORM_EPS).unwrap(),
            );
            assert!(e < 1e-5, "layer_norm {e}");
        }
    }

    #[test]
    fn softmax_xent_cases() {
        let mut g = Graph::new();
        let l = g.vector(vec![0.3; 4]);
        let (loss, p) = g.softmax_xent(l, 2).unwrap();
        assert!(p.iter().all(|&x| (x - 0.25).abs() < 1e-15));
        assert!((g.scalar(loss) - 4f64.ln()).abs() < 1e-12);

        let l = g.vector(vec![1000.0, 0.0]);
        let (loss, _) = g.softmax_xent(l, 0).unwrap();
        assert!(g.scalar(loss).abs() < 1e-12);
        assert!(matches!(g.softmax_xent(l, 2), Err(RkmError::LabelOutOfRange { .. })));

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let logits = rand_vec(&mut rng, 5);
        let mut g = Graph::new();
        let l = g.vector(logits.clone());
        let (loss, p) = g.softmax_xent(l, 3).unwrap();
        let analytic = g.backward(loss).unwrap().wrt(l).unwrap().to_vec();
        let expected: Vec<f64> = p.iter().enumerate().map(|(k, &pk)| pk - f64::from(k == 3)).collect();
        assert!(max_relative_error(&analytic, &expected) < 1e-14);
        let numeric = finite_diff(
            |x| {
                let mut g = Graph::new();
                let l = g.vector(x.to_vec());
                let (loss, _) = g.softmax_xent(l, 3).unwrap();
                g.scalar(loss)
            },
            &logits,
            DEFAULT_EPS,
        );
        assert!(max_relative_error(&analytic, &numeric) < 1e-6);
    }

    #[test]
    fn backward_rejects_vector_loss() {
        let mut g = Graph::new();
        let v = g.vector(vec![1.0, 2.0]);
        assert!(matches!(g.backward(v), Err(RkmError::NonScalarLoss(_))));
    }

    #[test]
    fn shared_parameter_accumulates_both_paths() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = store.add("w", Tensor::new(vec![3, 3], rand_vec(&mut rng, 9)).unwrap(), true).unwrap();
        let unused = store.add("unused", Tensor::vector(vec![1.0, 2.0]), true).unwrap();
        let x0 = rand_vec(&mut rng, 3);
        let f = |s: &ParamStore| -> (f64, ParamGrads) {
            let mut g = Graph::with_params(s);
            let wv = g.param(w);
            let x = g.vector(x0.clone());
            let h1 = g.affine(wv, x, None).unwrap();
            let h1 = g.tanh(h1);
            let h2 = g.affine(wv, h1, None).unwrap();
            let loss = g.mean_pool(&[h2]).unwrap();
            let ones = g.constant(vec![1, 3], vec![1.0; 3]).unwrap();
            let loss = g.affine(ones, loss, None).unwrap();
            let grads = g.backward(loss).unwrap();
            (g.scalar(loss), grads.param_grads(s))
        };
        let (_, analytic) = f(&store);
        let numeric = finite_diff_grad(|s| f(s).0, &store, DEFAULT_EPS);
        assert!(max_relative_error(&analytic.flatten(), &numeric.flatten()) < 1e-6);
        assert_eq!(analytic.get(unused), &[0.0, 0.0]);
    }

    #[test]
    fn wavelet_bank_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let grid = vec![-1.5, -0.5, 0.5, 1.5];
        let e = check_op(
            vec![
                (vec![2, 3], rand_vec(&mut rng, 6)),
                (vec![2], rand_vec(&mut rng, 2)),
                (vec![2, 3], rand_vec(&mut rng, 6)),
                (vec![2], vec![0.05, 0.2]),
            ],
            |g, v| g.wavelet_bank(v[0], v[1], v[2], v[3], &grid).unwrap(),
        );
        assert!(e < 1e-5, "wavelet {e}");
    }
}
