//! Minimal dense-tensor math with reverse-mode automatic differentiation,
//! the Adam optimizer, finite-difference gradient verification, and the
//! checkpoint container.

mod adam;
mod checkpoint;
mod graph;
mod tensor;

pub use adam::{adam_step, AdamState};
pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint};
pub use graph::{Graph, NodeId, LAYER_NORM_EPS};
pub use tensor::Tensor;

use crate::error::{Error, Result};

/// Sinusoidal positional encoding table of shape `[length, dim]`:
/// `pe[pos, 2i] = sin(pos / 10000^(2i/dim))`, `pe[pos, 2i+1] = cos(same)`.
pub fn sinusoidal_pe(length: usize, dim: usize) -> Result<Tensor> {
    if dim % 2 != 0 {
        return Err(Error::Config(format!(
            "positional encoding dimension must be even, got {dim}"
        )));
    }
    let mut data = vec![0.0; length * dim];
    for pos in 0..length {
        for i in 0..dim / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / dim as f64);
            data[pos * dim + 2 * i] = angle.sin();
            data[pos * dim + 2 * i + 1] = angle.cos();
        }
    }
    Ok(Tensor::matrix(length, dim, data))
}

/// Compares an analytic gradient against central finite differences of a
/// scalar-valued function of the given parameters. Returns the maximum
/// relative error, with denominator `max(|analytic|, |numeric|, 1e-6)`.
/// The 1e-6 floor keeps central-difference roundoff noise (about
/// `eps * |f| / step`) from registering as error where the true gradient
/// is zero.
///
/// `value` must be deterministic (a fixed dropout mask is fine); `analytic`
/// is the gradient of `value` at `params`, one tensor per parameter.
pub fn finite_diff_check<F>(
    mut value: F,
    analytic: &[Tensor],
    params: &[Tensor],
    step: f64,
) -> f64
where
    F: FnMut(&[Tensor]) -> f64,
{
    let mut worst: f64 = 0.0;
    let mut work: Vec<Tensor> = params.to_vec();
    for (pi, p) in params.iter().enumerate() {
        for j in 0..p.len() {
            let orig = p.data()[j];
            work[pi].data_mut()[j] = orig + step;
            let plus = value(&work);
            work[pi].data_mut()[j] = orig - step;
            let minus = value(&work);
            work[pi].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic[pi].data()[j];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(err);
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    #[test]
    fn masked_softmax_examples() {
        let mut g = Graph::inference();
        let x = g.constant(Tensor::matrix(1, 2, vec![0.0, 0.0]));
        let y = g.softmax(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);

        let mut g = Graph::inference();
        let x = g.constant(Tensor::matrix(1, 2, vec![2f64.ln(), 0.0]));
        let y = g.softmax(x).unwrap();
        let v = g.value(y).data();
        assert!((v[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((v[1] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn masked_entries_are_exactly_zero_and_rows_sum_to_one() {
        let mut g = Graph::inference();
        let x = g.constant(Tensor::matrix(2, 4, vec![5.0, 1.0, -3.0, 2.0, 0.0, 0.1, 0.2, 0.3]));
        let y = g.masked_softmax(x, Some(&[false, true, false, true])).unwrap();
        let v = g.value(y);
        for r in 0..2 {
            assert_eq!(v.at(r, 1), 0.0);
            assert_eq!(v.at(r, 3), 0.0);
            let sum: f64 = (0..4).map(|c| v.at(r, c)).sum();
            assert!((sum - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn layer_norm_of_constant_row_is_zero() {
        let mut g = Graph::inference();
        let x = g.constant(Tensor::matrix(1, 4, vec![3.0; 4]));
        let y = g.layer_norm(x);
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_sum_is_ones() {
        let mut g = Graph::new(false, 0);
        let x = g.leaf(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]));
        let loss = g.sum(x);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_dot_product() {
        let mut g = Graph::new(false, 0);
        let x = g.leaf(Tensor::new(vec![2], vec![1.0, 2.0]));
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut g = Graph::new(false, 0);
        let x = g.leaf(Tensor::new(vec![2], vec![1.0, 2.0]));
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut g = Graph::new(false, 0);
        let x = g.leaf(Tensor::new(vec![2], vec![1.0, 2.0]));
        let loss = g.sum(x);
        g.backward(loss).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn shape_mismatch_named_in_error() {
        let mut g = Graph::new(false, 0);
        let a = g.leaf(Tensor::zeros(&[2, 3]));
        let b = g.leaf(Tensor::zeros(&[3, 3]));
        let err = g.add(a, b).unwrap_err();
        assert!(err.to_string().contains("[2, 3]") && err.to_string().contains("[3, 3]"));
    }

    #[test]
    fn sinusoidal_pe_values() {
        let pe = sinusoidal_pe(4, 6).unwrap();
        for i in 0..3 {
            assert_eq!(pe.at(0, 2 * i), 0.0);
            assert_eq!(pe.at(0, 2 * i + 1), 1.0);
        }
        assert!((pe.at(1, 0) - 1f64.sin()).abs() < 1e-12);
        assert!(pe.data().iter().all(|&x| (-1.0..=1.0).contains(&x)));
        assert!(sinusoidal_pe(4, 5).is_err());
    }

    #[test]
    fn finite_diff_on_quadratic() {
        let params = [Tensor::scalar(3.0)];
        let analytic = [Tensor::scalar(6.0)];
        let err = finite_diff_check(
            |p| p[0].scalar_value().powi(2),
            &analytic,
            &params,
            1e-5,
        );
        assert!(err <= 1e-8, "{err}");
    }

    #[test]
    fn finite_diff_on_constant() {
        let params = [Tensor::scalar(3.0)];
        let analytic = [Tensor::scalar(0.0)];
        let err = finite_diff_check(|_| 7.0, &analytic, &params, 1e-5);
        assert_eq!(err, 0.0);
    }

    /// Gradient check for each primitive op through a generic scalarizer.
    #[test]
    fn every_op_passes_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);

        type Builder = Box<dyn Fn(&mut Graph, &[NodeId]) -> NodeId>;
        let cases: Vec<(&str, Vec<Vec<usize>>, Builder)> = vec![
            ("add", vec![vec![2, 3], vec![2, 3]], Box::new(|g, xs| g.add(xs[0], xs[1]).unwrap())),
            ("sub", vec![vec![2, 3], vec![2, 3]], Box::new(|g, xs| g.sub(xs[0], xs[1]).unwrap())),
            ("mul", vec![vec![2, 3], vec![2, 3]], Box::new(|g, xs| g.mul(xs[0], xs[1]).unwrap())),
            ("scale", vec![vec![2, 3]], Box::new(|g, xs| g.scale(xs[0], -1.7))),
            ("matmul", vec![vec![2, 3], vec![3, 4]], Box::new(|g, xs| g.matmul(xs[0], xs[1]).unwrap())),
            ("matmul_nt", vec![vec![2, 3], vec![4, 3]], Box::new(|g, xs| g.matmul_nt(xs[0], xs[1]).unwrap())),
            ("add_row", vec![vec![3, 4], vec![4]], Box::new(|g, xs| g.add_row(xs[0], xs[1]).unwrap())),
            ("mul_row", vec![vec![3, 4], vec![4]], Box::new(|g, xs| g.mul_row(xs[0], xs[1]).unwrap())),
            ("concat_rows", vec![vec![2, 3], vec![1, 3]], Box::new(|g, xs| g.concat_rows(xs[0], xs[1]).unwrap())),
            ("concat_cols", vec![vec![2, 3], vec![2, 2]], Box::new(|g, xs| g.concat_cols(xs[0], xs[1]).unwrap())),
            ("slice_rows", vec![vec![4, 3]], Box::new(|g, xs| g.slice_rows(xs[0], 1, 3).unwrap())),
            ("slice_cols", vec![vec![3, 5]], Box::new(|g, xs| g.slice_cols(xs[0], 1, 4).unwrap())),
            ("relu", vec![vec![3, 3]], Box::new(|g, xs| g.relu(xs[0]))),
            ("softmax", vec![vec![3, 4]], Box::new(|g, xs| g.softmax(xs[0]).unwrap())),
            (
                "masked_softmax",
                vec![vec![3, 4]],
                Box::new(|g, xs| g.masked_softmax(xs[0], Some(&[false, true, false, false])).unwrap()),
            ),
            ("layer_norm", vec![vec![3, 4]], Box::new(|g, xs| g.layer_norm(xs[0]))),
            ("mean", vec![vec![3, 4]], Box::new(|g, xs| g.mean(xs[0]))),
            ("gather", vec![vec![3, 4]], Box::new(|g, xs| g.gather_cols(xs[0], &[2, 0, 3]).unwrap())),
        ];

        for (name, shapes, build) in &cases {
            let params: Vec<Tensor> = shapes.iter().map(|s| rand_tensor(&mut rng, s)).collect();
            // Weight tensor makes the scalarization non-uniform.
            let weights: Vec<Tensor> = {
                let mut g = Graph::inference();
                let xs: Vec<NodeId> = params.iter().map(|p| g.constant(p.clone())).collect();
                let out = build(&mut g, &xs);
                vec![rand_tensor(&mut rng, g.value(out).shape())]
            };
            let run = |ps: &[Tensor]| -> (f64, Vec<Tensor>) {
                let mut g = Graph::new(false, 0);
                let xs: Vec<NodeId> = ps.iter().map(|p| g.leaf(p.clone())).collect();
                let out = build(&mut g, &xs);
                let w = g.constant(weights[0].clone());
                let weighted = g.mul(out, w).unwrap();
                let loss = g.sum(weighted);
                g.backward(loss).unwrap();
                let grads = xs
                    .iter()
                    .map(|&x| g.take_grad(x).unwrap_or_else(|| Tensor::zeros(g.value(x).shape())))
                    .collect();
                (g.value(loss).scalar_value(), grads)
            };
            let (_, analytic) = run(&params);
            let err = finite_diff_check(|ps| run(ps).0, &analytic, &params, 1e-5);
            assert!(err <= 1e-4, "op {name} failed gradient check: {err}");
        }
    }

    #[test]
    fn dropout_is_noop_in_eval_and_deterministic_in_train() {
        let t = Tensor::matrix(4, 4, (0..16).map(|x| x as f64).collect());
        let mut g = Graph::inference();
        let x = g.constant(t.clone());
        let y = g.dropout(x, 0.5).unwrap();
        assert_eq!(g.value(y), &t);

        let run = |seed| {
            let mut g = Graph::new(true, seed);
            let x = g.constant(t.clone());
            let y = g.dropout(x, 0.5).unwrap();
            g.value(y).clone()
        };
        assert_eq!(run(3), run(3));
        assert_ne!(run(3), run(4));
    }
}
