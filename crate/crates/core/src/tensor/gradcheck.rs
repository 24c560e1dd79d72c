use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{no_grad, Parameter, Tensor};
use crate::error::{Error, Result};

/// Compares analytic gradients with central finite differences.
///
/// `f` maps the parameter tensors (in order) to a scalar. Returns the maximum
/// over every parameter element of `|analytic - numeric| / max(1, |analytic|)`.
pub fn grad_check<F>(f: F, params: &[Parameter<f64>], step: f64) -> Result<f64>
where
    F: Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    grad_check_sampled(f, params, step, usize::MAX, 0)
}

/// Like [`grad_check`] but probes at most `per_param` randomly chosen
/// elements of each parameter, chosen with `seed`.
pub fn grad_check_sampled<F>(f: F, params: &[Parameter<f64>], step: f64, per_param: usize, seed: u64) -> Result<f64>
where
    F: Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    let leaves: Vec<Tensor<f64>> = params.iter().map(|p| p.tensor.to_leaf(p.name.clone(), true)).collect();
    let eval = |tensors: &[Tensor<f64>]| -> Result<f64> { no_grad(|| f(tensors)?.item()) };

    let base = eval(&leaves)?;
    let again = eval(&leaves)?;
    if base.to_bits() != again.to_bits() {
        return Err(Error::Determinism(format!("two identical evaluations gave {base} and {again}")));
    }

    let grads = f(&leaves)?.backward()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for (i, p) in params.iter().enumerate() {
        let n = p.tensor.numel();
        let analytic = grads.get(&p.name).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; n]);
        let indices: Vec<usize> = if per_param >= n {
            (0..n).collect()
        } else {
            let mut idx = sample(&mut rng, n, per_param).into_vec();
            idx.sort_unstable();
            idx
        };
        for j in indices {
            let probe = |delta: f64| -> Result<f64> {
                let mut data = p.tensor.to_vec();
                data[j] += delta;
                let mut shifted = leaves.clone();
                shifted[i] = Tensor::leaf(p.name.clone(), data, p.tensor.shape(), true)?;
                eval(&shifted)
            };
            let numeric = (probe(step)? - probe(-step)?) / (2.0 * step);
            let err = (analytic[j] - numeric).abs() / analytic[j].abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
