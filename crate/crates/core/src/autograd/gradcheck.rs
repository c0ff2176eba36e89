use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Ctx, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Magnitude below which gradients are compared absolutely: round-off in
/// the difference quotient is around 1e-11, so exact zeros would otherwise
/// read as large relative errors.
pub const GRAD_FLOOR: f64 = 1e-3;

/// `|a - n| / max(|a|, |n|, GRAD_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(GRAD_FLOOR);
    (analytic - numeric).abs() / denom
}

/// Fourth-order central difference of `f` at offset 0 along one coordinate.
fn stencil(eps: f64, mut f: impl FnMut(f64) -> Result<f64>) -> Result<f64> {
    let (m2, m1, p1, p2) = (f(-2.0 * eps)?, f(-eps)?, f(eps)?, f(2.0 * eps)?);
    Ok((m2 - 8.0 * m1 + 8.0 * p1 - p2) / (12.0 * eps))
}

/// Compares reverse-mode gradients of a scalar function against
/// fourth-order central differences with step `eps`, over every component
/// of every input.
///
/// Returns the maximum [`relative_error`].
pub fn finite_difference_check<T, F>(f: F, inputs: &[Tensor<T>], eps: f64) -> Result<f64>
where
    T: Scalar,
    F: for<'g> Fn(&'g Graph<T>, &[Var<'g, T>]) -> Result<Var<'g, T>>,
{
    let graph = Graph::new();
    let vars: Vec<Var<'_, T>> = inputs.iter().map(|t| graph.param(t.clone())).collect();
    let loss = f(&graph, &vars)?;
    if loss.value().numel() != 1 {
        return Err(Error::NonScalarLoss(loss.shape()));
    }
    let grads = graph.backward(loss)?;
    let analytic: Vec<Tensor<T>> = vars.iter().map(|&v| grads.get_or_zeros(v)).collect();

    let eval = |perturbed: &[Tensor<T>]| -> Result<f64> {
        let g = Graph::new();
        let vars: Vec<Var<'_, T>> = perturbed.iter().map(|t| g.constant(t.clone())).collect();
        Ok(f(&g, &vars)?.value().item().to_f64().unwrap())
    };

    let mut worst = 0.0f64;
    for (which, input) in inputs.iter().enumerate() {
        for i in 0..input.numel() {
            let numeric = stencil(eps, |d| {
                let mut shifted = inputs.to_vec();
                let mut v = input.to_vec();
                v[i] += T::c(d);
                shifted[which] = Tensor::from_parts(input.shape().to_vec(), v);
                eval(&shifted)
            })?;
            let a = analytic[which].data()[i].to_f64().unwrap();
            worst = worst.max(relative_error(a, numeric));
        }
    }
    Ok(worst)
}

/// Like [`finite_difference_check`] but differentiates with respect to the
/// entries of a parameter store, running `f` in eval mode with gradients.
///
/// At most `per_param` randomly chosen components of each trainable
/// parameter are probed (all of them when it has fewer).
pub fn store_gradient_check<T, F>(store: &ParamStore<T>, f: F, eps: f64, per_param: usize, seed: u64) -> Result<f64>
where
    T: Scalar,
    F: for<'g> Fn(&Ctx<'g, T>) -> Result<Var<'g, T>>,
{
    let graph = Graph::new();
    let ctx = Ctx::eval_with_grads(&graph, store);
    let loss = f(&ctx)?;
    if loss.value().numel() != 1 {
        return Err(Error::NonScalarLoss(loss.shape()));
    }
    let grads = ctx.param_grads(&graph.backward(loss)?);
    drop(ctx);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probe = store.clone();
    let mut worst = 0.0f64;
    for (id, g) in grads {
        let base = store.get(id).value.clone();
        let n = base.numel();
        for i in sample(&mut rng, n, per_param.min(n)) {
            let numeric = stencil(eps, |d| {
                let mut v = base.to_vec();
                v[i] += T::c(d);
                probe.set(id, Tensor::from_parts(base.shape().to_vec(), v))?;
                let g2 = Graph::new();
                let c2 = Ctx::eval_with_grads(&g2, &probe);
                Ok(f(&c2)?.value().item().to_f64().unwrap())
            })?;
            probe.set(id, base.clone())?;
            worst = worst.max(relative_error(g.data()[i].to_f64().unwrap(), numeric));
        }
    }
    Ok(worst)
}
