//! AdamW with decoupled weight decay and global-norm gradient clipping.

use std::collections::HashMap;

use crate::error::Result;
use crate::nn::{ParamId, ParamRole, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Global L2 norm over all gradients.
pub fn global_norm<T: Scalar>(grads: &[(ParamId, Tensor<T>)]) -> f64 {
    grads
        .iter()
        .flat_map(|(_, g)| g.data().iter())
        .map(|v| {
            let v = v.to_f64().unwrap();
            v * v
        })
        .sum::<f64>()
        .sqrt()
}

/// Scales gradients so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm<T: Scalar>(grads: &mut [(ParamId, Tensor<T>)], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let s = T::c(max_norm / norm);
        for (_, g) in grads.iter_mut() {
            *g = g.scale(s);
        }
    }
    norm
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.05 }
    }
}

#[derive(Debug, Clone)]
struct Moments<T> {
    m: Vec<T>,
    v: Vec<T>,
}

#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    pub step: u64,
    state: HashMap<ParamId, Moments<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(config: AdamWConfig) -> Self {
        Self { config, step: 0, state: HashMap::new() }
    }

    /// First and second moments of a parameter, if it has been updated.
    pub fn moments(&self, id: ParamId) -> Option<(&[T], &[T])> {
        self.state.get(&id).map(|s| (s.m.as_slice(), s.v.as_slice()))
    }

    pub fn set_moments(&mut self, id: ParamId, m: Vec<T>, v: Vec<T>) {
        self.state.insert(id, Moments { m, v });
    }

    /// One update. `lr` gives the learning rate for each parameter; decay is
    /// only applied to parameters with role [`ParamRole::Weight`].
    pub fn step(
        &mut self,
        store: &mut ParamStore<T>,
        grads: &[(ParamId, Tensor<T>)],
        lr: impl Fn(ParamId) -> f64,
    ) -> Result<()> {
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::c(c.beta1), T::c(c.beta2));
        for (id, g) in grads {
            let entry = store.get(*id);
            if entry.role == ParamRole::Buffer {
                continue;
            }
            let rate = lr(*id);
            let decay = if entry.role == ParamRole::Weight { c.weight_decay } else { 0.0 };
            let n = g.numel();
            let st = self.state.entry(*id).or_insert_with(|| Moments { m: vec![T::zero(); n], v: vec![T::zero(); n] });
            let step_size = T::c(rate / bc1);
            let shrink = T::c(1.0 - rate * decay);
            let inv_bc2 = T::c(1.0 / bc2);
            let eps = T::c(c.eps);
            let mut p = entry.value.to_vec();
            for (((pi, &gi), mi), vi) in p.iter_mut().zip(g.data()).zip(st.m.iter_mut()).zip(st.v.iter_mut()) {
                *mi = b1 * *mi + (T::one() - b1) * gi;
                *vi = b2 * *vi + (T::one() - b2) * gi * gi;
                *pi = *pi * shrink - step_size * *mi / ((*vi * inv_bc2).sqrt() + eps);
            }
            store.set(*id, Tensor::new(entry.value.shape().to_vec(), p)?)?;
        }
        Ok(())
    }
}
