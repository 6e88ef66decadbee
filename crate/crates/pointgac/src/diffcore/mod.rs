//! Differentiable computation substrate: dense tensors, a reverse-mode
//! tape, transformer blocks, gradient verification, and the checkpoint
//! container.

pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod tensor;
pub mod transformer;

pub use graph::{Graph, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod graph_tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::gradcheck::relative_error;
    use super::*;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    /// Central-difference check of a scalar-valued graph builder over one
    /// input tensor.
    fn check_op<F>(input: Tensor, build: F, tol: f64)
    where
        F: Fn(&mut Graph, Var) -> Var,
    {
        let h = 1e-5;
        let analytic = {
            let mut g = Graph::new();
            let x = g.param(input.clone());
            let y = build(&mut g, x);
            let loss = weighted_sum(&mut g, y);
            g.backward(loss);
            g.grad(x)
        };
        for i in 0..input.numel() {
            let mut up = input.clone();
            up.data_mut()[i] += h;
            let mut down = input.clone();
            down.data_mut()[i] -= h;
            let eval = |t: Tensor| {
                let mut g = Graph::new();
                let x = g.constant(t);
                let y = build(&mut g, x);
                let loss = weighted_sum(&mut g, y);
                g.value(loss).item()
            };
            let fd = (eval(up) - eval(down)) / (2.0 * h);
            let err = relative_error(analytic.data()[i], fd);
            assert!(err < tol, "coord {i}: ad {} fd {fd}", analytic.data()[i]);
        }
    }

    /// Deterministic non-uniform weighting so every output coordinate
    /// contributes a distinct gradient path.
    fn weighted_sum(g: &mut Graph, y: Var) -> Var {
        let n = g.value(y).numel();
        let shape = g.value(y).shape().to_vec();
        let w = Tensor::new(shape, (0..n).map(|i| 0.3 + 0.1 * i as f64).collect());
        let weighted = g.mul_const(y, &w);
        g.sum_all(weighted)
    }

    #[test]
    fn softmax_of_constant_row_is_uniform() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(1, 4, vec![2.5; 4]));
        let y = g.softmax_rows(x);
        for &v in g.value(y).data() {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut r = rng();
        let mut g = Graph::new();
        let x = g.constant(Tensor::randn(vec![6, 9], 3.0, &mut r));
        let y = g.softmax_rows(x);
        let t = g.value(y);
        for i in 0..6 {
            let s: f64 = t.row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_by_identity_is_identity() {
        let mut r = rng();
        let a = Tensor::randn(vec![3, 4], 1.0, &mut r);
        let mut eye = Tensor::zeros(vec![4, 4]);
        for i in 0..4 {
            eye.set(i, i, 1.0);
        }
        let mut g = Graph::new();
        let av = g.constant(a.clone());
        let ev = g.constant(eye);
        let y = g.matmul(av, ev);
        assert_eq!(g.value(y).data(), a.data());
    }

    #[test]
    fn layer_norm_standardizes_rows() {
        let mut r = rng();
        let mut g = Graph::new();
        let x = g.constant(Tensor::randn(vec![5, 16], 2.0, &mut r));
        let y = g.layer_norm_rows(x, 1e-12);
        let t = g.value(y);
        for i in 0..5 {
            let mean: f64 = t.row(i).iter().sum::<f64>() / 16.0;
            let var: f64 = t.row(i).iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-9);
            assert!((var - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn primitive_reverse_rules_match_finite_differences() {
        let mut r = rng();
        let tol = 1e-6;
        check_op(Tensor::randn(vec![3, 4], 1.0, &mut r), |g, x| g.silu(x), tol);
        check_op(Tensor::randn(vec![3, 4], 1.0, &mut r), |g, x| g.softmax_rows(x), tol);
        check_op(
            Tensor::randn(vec![3, 4], 1.0, &mut r),
            |g, x| g.log_softmax_rows(x),
            tol,
        );
        check_op(
            Tensor::randn(vec![3, 8], 1.0, &mut r),
            |g, x| g.layer_norm_rows(x, 1e-6),
            tol,
        );
        check_op(Tensor::randn(vec![3, 4], 1.0, &mut r), |g, x| g.unit_rows(x), tol);
        check_op(Tensor::randn(vec![4, 3], 1.0, &mut r), |g, x| g.max_rows(x), tol);
        check_op(Tensor::randn(vec![3, 4], 1.0, &mut r), |g, x| g.mean_all(x), tol);
        check_op(Tensor::randn(vec![3, 4], 1.0, &mut r), |g, x| g.transpose(x), tol);
        check_op(
            Tensor::randn(vec![3, 4], 1.0, &mut r),
            |g, x| g.slice_cols(x, 1, 2),
            tol,
        );
        check_op(
            Tensor::randn(vec![4, 3], 1.0, &mut r),
            |g, x| g.gather_rows(x, &[2, 0, 2, 1]),
            tol,
        );
        check_op(
            Tensor::randn(vec![2, 3], 1.0, &mut r),
            |g, x| g.scatter_rows(x, &[3, 1], 5),
            tol,
        );
        check_op(
            Tensor::randn(vec![1, 5], 1.0, &mut r),
            |g, x| g.repeat_row(x, 4),
            tol,
        );
        let w = Tensor::randn(vec![4, 6], 0.7, &mut r);
        check_op(
            Tensor::randn(vec![3, 4], 1.0, &mut r),
            move |g, x| {
                let wv = g.constant(w.clone());
                g.matmul(x, wv)
            },
            tol,
        );
        let bias = Tensor::randn(vec![4], 0.7, &mut r);
        check_op(
            Tensor::randn(vec![3, 4], 1.0, &mut r),
            move |g, x| {
                let bv = g.constant(bias.clone());
                let y = g.add_row(x, bv);
                let gv = g.constant(Tensor::vector(vec![0.5, -1.0, 2.0, 0.25]));
                g.mul_row(y, gv)
            },
            tol,
        );
        check_op(
            Tensor::randn(vec![2, 6], 1.0, &mut r),
            |g, x| {
                let a = g.slice_cols(x, 0, 3);
                let b = g.slice_cols(x, 3, 3);
                let stacked = g.concat_rows(&[a, b]);
                let wide = g.concat_cols(&[stacked, stacked]);
                let s = g.silu(wide);
                g.mul(s, s)
            },
            tol,
        );
    }

    #[test]
    fn gradient_of_linear_function_is_exact() {
        let mut r = rng();
        let w = Tensor::randn(vec![4, 4], 1.0, &mut r);
        let x = Tensor::randn(vec![2, 4], 1.0, &mut r);
        let mut g = Graph::new();
        let xv = g.param(x);
        let wv = g.constant(w.clone());
        let y = g.matmul(xv, wv);
        let loss = g.sum_all(y);
        g.backward(loss);
        let grad = g.grad(xv);
        // d(sum(xW))/dx_ij = sum of row j of W.
        for i in 0..2 {
            for j in 0..4 {
                let expect: f64 = (0..4).map(|c| w.get(j, c)).sum();
                assert!((grad.get(i, j) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gradients_accumulate_over_shared_leaves() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(3.0));
        let y = g.mul(x, x);
        let z = g.add(y, x);
        g.backward(z);
        // d(x^2 + x)/dx = 2x + 1 = 7.
        assert!((g.grad(x).item() - 7.0).abs() < 1e-12);
    }

    #[test]
    #[should_panic(expected = "matmul")]
    fn shape_mismatch_panics() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::matrix(2, 3, vec![0.0; 6]));
        let b = g.constant(Tensor::matrix(2, 3, vec![0.0; 6]));
        g.matmul(a, b);
    }

    #[test]
    #[should_panic(expected = "non-finite")]
    fn non_finite_output_trips_a_fault() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::scalar(1e308));
        let b = g.constant(Tensor::scalar(1e308));
        g.add(a, b);
    }
}
