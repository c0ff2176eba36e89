//! Batch normalization kernels and channel-wise layer normalization.

use crate::autograd::Var;
use crate::error::{shape_err, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const NORM_EPS: f64 = 1e-5;

fn check_channels<T: Scalar>(op: &'static str, x: &Tensor<T>, c: usize) -> Result<(usize, usize, usize)> {
    let s = x.shape();
    if s.len() < 2 || s[1] != c {
        return shape_err(op, format!("input {s:?} vs {c} channels"));
    }
    Ok((s[0], s[1], s[2..].iter().product()))
}

/// Per-channel statistics of a batch-normalization forward pass.
#[derive(Debug, Clone)]
pub struct BatchStats<T> {
    pub mean: Tensor<T>,
    /// Biased variance used for normalization.
    pub var: Tensor<T>,
    pub count: usize,
}

impl<'g, T: Scalar> Var<'g, T> {
    /// Batch normalization of `[B, C, ...]` using the statistics of this batch.
    pub fn batch_norm_train(
        self,
        gamma: Var<'g, T>,
        beta: Var<'g, T>,
        eps: f64,
    ) -> Result<(Var<'g, T>, BatchStats<T>)> {
        let x = self.value();
        let (gv, bv) = (gamma.value(), beta.value());
        let c = gv.numel();
        let (batch, _, plane) = check_channels("batch_norm", &x, c)?;
        let count = batch * plane;
        let inv_n = T::one() / T::of_usize(count);
        let xd = x.data();
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for b in 0..batch {
            for ch in 0..c {
                let s = &xd[(b * c + ch) * plane..(b * c + ch + 1) * plane];
                mean[ch] += s.iter().copied().sum::<T>();
            }
        }
        mean.iter_mut().for_each(|m| *m *= inv_n);
        for b in 0..batch {
            for ch in 0..c {
                let s = &xd[(b * c + ch) * plane..(b * c + ch + 1) * plane];
                var[ch] += s.iter().map(|&v| (v - mean[ch]) * (v - mean[ch])).sum::<T>();
            }
        }
        var.iter_mut().for_each(|v| *v *= inv_n);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + T::c(eps)).sqrt()).collect();
        let mut xhat = Vec::with_capacity(xd.len());
        let mut y = Vec::with_capacity(xd.len());
        for b in 0..batch {
            for ch in 0..c {
                for &v in &xd[(b * c + ch) * plane..(b * c + ch + 1) * plane] {
                    let h = (v - mean[ch]) * inv_std[ch];
                    xhat.push(h);
                    y.push(h * gv.data()[ch] + bv.data()[ch]);
                }
            }
        }
        let shape = x.shape().to_vec();
        let out = Tensor::from_parts(shape.clone(), y);
        let stats =
            BatchStats { mean: Tensor::from_parts(vec![c], mean), var: Tensor::from_parts(vec![c], var), count };
        let var_node = self.graph().push("batch_norm", &[self, gamma, beta], out, move |g, needs| {
            let gd = g.data();
            let mut dgamma = vec![T::zero(); c];
            let mut dbeta = vec![T::zero(); c];
            for b in 0..batch {
                for ch in 0..c {
                    let r = (b * c + ch) * plane..(b * c + ch + 1) * plane;
                    for (&gi, &hi) in gd[r.clone()].iter().zip(&xhat[r]) {
                        dgamma[ch] += gi * hi;
                        dbeta[ch] += gi;
                    }
                }
            }
            let dx = needs[0].then(|| {
                let mut dx = Vec::with_capacity(gd.len());
                for b in 0..batch {
                    for ch in 0..c {
                        let r = (b * c + ch) * plane..(b * c + ch + 1) * plane;
                        let gam = gv.data()[ch];
                        let mean_dh = dbeta[ch] * gam * inv_n;
                        let mean_dh_h = dgamma[ch] * gam * inv_n;
                        for (&gi, &hi) in gd[r.clone()].iter().zip(&xhat[r]) {
                            dx.push(inv_std[ch] * (gi * gam - mean_dh - hi * mean_dh_h));
                        }
                    }
                }
                Tensor::from_parts(shape.clone(), dx)
            });
            vec![dx, Some(Tensor::from_parts(vec![c], dgamma)), Some(Tensor::from_parts(vec![c], dbeta))]
        });
        Ok((var_node, stats))
    }

    /// Batch normalization with fixed running statistics.
    pub fn batch_norm_eval(
        self,
        gamma: Var<'g, T>,
        beta: Var<'g, T>,
        running_mean: &Tensor<T>,
        running_var: &Tensor<T>,
        eps: f64,
    ) -> Result<Var<'g, T>> {
        let c = gamma.value().numel();
        let x = self.value();
        check_channels("batch_norm", &x, c)?;
        let mut stat_shape = vec![c];
        stat_shape.extend(std::iter::repeat_n(1, x.rank() - 2));
        let inv_std = running_var.map(|v| T::one() / (v + T::c(eps)).sqrt()).reshape(stat_shape.clone())?;
        let mean = self.graph().constant(running_mean.reshape(stat_shape.clone())?);
        let scale = gamma.reshape(stat_shape.clone())?.mul(self.graph().constant(inv_std))?;
        self.sub(mean)?.mul(scale)?.add(beta.reshape(stat_shape)?)
    }

    /// Layer normalization over the channel axis of `[B, C, H, W]`.
    pub fn layer_norm_channels(self, gamma: Var<'g, T>, beta: Var<'g, T>, eps: f64) -> Result<Var<'g, T>> {
        if self.rank() != 4 {
            return shape_err("layer_norm_channels", format!("{:?}", self.shape()));
        }
        self.permute(&[0, 2, 3, 1])?.layer_norm(gamma, beta, eps)?.permute(&[0, 3, 1, 2])
    }
}
