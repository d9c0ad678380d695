//! Finite-difference verification of analytic gradients (64-bit).

use rand::seq::index::sample;
use rand::Rng;

use crate::graph::{Graph, Var};
use crate::rng::stream;
use crate::tensor::Tensor;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// `max_i |analytic_i - numeric_i| / max(max|analytic|, max|numeric|)`.
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
    /// Coordinates compared.
    pub checked: usize,
    /// `(input index, coordinate)` of the worst disagreement.
    pub worst: (usize, usize),
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    /// Compare at most this many coordinates per input (all when `None`).
    pub max_coords_per_input: Option<usize>,
    /// Seed for the output projection and coordinate sampling.
    pub seed: u64,
    /// Central-difference step.
    pub step: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            max_coords_per_input: None,
            seed: 0,
            step: FD_STEP,
        }
    }
}

/// Checks `op` at `inputs`. Non-scalar outputs are reduced to a scalar by a
/// fixed random projection so every output element contributes. Never panics
/// on disagreement: the report carries the verdict.
pub fn grad_check<F>(op: F, inputs: &[Tensor<f64>], tolerance: f64, opts: GradCheckOptions) -> GradCheckReport
where
    F: for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Var<'g, f64>,
{
    let mut rng = stream(opts.seed, "gradcheck");
    let projection: std::cell::RefCell<Option<Tensor<f64>>> = std::cell::RefCell::new(None);

    let eval = |xs: &[Tensor<f64>], want_grad: bool| -> (f64, Vec<Tensor<f64>>) {
        let g = Graph::new();
        let vars: Vec<_> = xs.iter().map(|x| g.param(x.clone())).collect();
        let out = op(&g, &vars);
        let weights = {
            let mut p = projection.borrow_mut();
            if p.is_none() {
                let mut prng = stream(opts.seed, "projection");
                *p = Some(Tensor::from_fn(&out.shape(), |_| prng.random_range(-1.0..1.0)));
            }
            p.clone().unwrap()
        };
        let loss = (out * g.constant(weights)).sum();
        let value = loss.item();
        let grads = if want_grad {
            g.grad(loss, &vars, false)
                .into_iter()
                .map(|v| (*v.value()).clone())
                .collect()
        } else {
            Vec::new()
        };
        (value, grads)
    };

    let (_, analytic) = eval(inputs, true);
    let mut numeric_pairs = Vec::new();
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (ti, input) in inputs.iter().enumerate() {
        let coords: Vec<usize> = match opts.max_coords_per_input {
            Some(k) if k < input.len() => sample(&mut rng, input.len(), k).into_vec(),
            _ => (0..input.len()).collect(),
        };
        for i in coords {
            let orig = input.data()[i];
            work[ti].data_mut()[i] = orig + opts.step;
            let (plus, _) = eval(&work, false);
            work[ti].data_mut()[i] = orig - opts.step;
            let (minus, _) = eval(&work, false);
            work[ti].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            numeric_pairs.push(((ti, i), analytic[ti].data()[i], numeric));
        }
    }

    let scale = numeric_pairs
        .iter()
        .fold(0.0f64, |m, &(_, a, n)| m.max(a.abs()).max(n.abs()));
    let mut worst = (0, 0);
    let mut max_rel_error = 0.0f64;
    for &(idx, a, n) in &numeric_pairs {
        let err = if scale > 0.0 { (a - n).abs() / scale } else { 0.0 };
        if err > max_rel_error || err.is_nan() {
            max_rel_error = err;
            worst = idx;
        }
    }
    GradCheckReport {
        max_rel_error,
        tolerance,
        passed: max_rel_error < tolerance,
        checked: numeric_pairs.len(),
        worst,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn leaky_relu_at_two_is_exact() {
        let x = Tensor::new(&[1], vec![2.0]).unwrap();
        let r = grad_check(
            |_, v| crate::nn::leaky_relu(v[0]),
            &[x],
            1e-8,
            GradCheckOptions::default(),
        );
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn detects_wrong_gradient() {
        // detach() hides the dependence of the second factor from the analytic gradient.
        let x = Tensor::new(&[3], vec![0.5, 1.0, 2.0]).unwrap();
        let r = grad_check(|_, v| v[0] * v[0].detach(), &[x], 1e-4, GradCheckOptions::default());
        assert!(!r.passed);
        assert!(r.max_rel_error > 0.1);
    }
}
