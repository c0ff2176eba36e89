//! Bilinear resampling with half-pixel centers and edge clamping.

use crate::autograd::Var;
use crate::error::{invalid, shape_err, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Source taps for one output coordinate.
#[derive(Debug, Clone, Copy)]
struct Tap<T> {
    i0: usize,
    i1: usize,
    frac: T,
}

fn taps<T: Scalar>(input: usize, output: usize) -> Vec<Tap<T>> {
    let ratio = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * ratio - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            Tap { i0, i1, frac: T::c(src - i0 as f64) }
        })
        .collect()
}

fn resize_planes<T: Scalar>(data: &[T], planes: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<T> {
    let ty = taps::<T>(h, oh);
    let tx = taps::<T>(w, ow);
    let mut out = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let src = &data[p * h * w..(p + 1) * h * w];
        for y in &ty {
            let r0 = &src[y.i0 * w..(y.i0 + 1) * w];
            let r1 = &src[y.i1 * w..(y.i1 + 1) * w];
            for x in &tx {
                let top = r0[x.i0] + (r0[x.i1] - r0[x.i0]) * x.frac;
                let bot = r1[x.i0] + (r1[x.i1] - r1[x.i0]) * x.frac;
                out.push(top + (bot - top) * y.frac);
            }
        }
    }
    out
}

fn spatial(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return shape_err(op, format!("need at least [H,W], got {shape:?}"));
    }
    let n = shape.len();
    Ok((shape[..n - 2].iter().product(), shape[n - 2], shape[n - 1]))
}

/// Resizes the last two axes of `t` to `oh x ow` (no gradient).
pub fn resize_bilinear<T: Scalar>(t: &Tensor<T>, oh: usize, ow: usize) -> Result<Tensor<T>> {
    let (planes, h, w) = spatial("resize_bilinear", t.shape())?;
    if oh == 0 || ow == 0 {
        return invalid("resize_bilinear", "empty output size");
    }
    let mut shape = t.shape().to_vec();
    let n = shape.len();
    shape[n - 2] = oh;
    shape[n - 1] = ow;
    Ok(Tensor::from_parts(shape, resize_planes(t.data(), planes, h, w, oh, ow)))
}

impl<'g, T: Scalar> Var<'g, T> {
    /// Differentiable bilinear resize of the last two axes.
    pub fn resize_bilinear(self, oh: usize, ow: usize) -> Result<Var<'g, T>> {
        let x = self.value();
        let out = resize_bilinear(&x, oh, ow)?;
        let (planes, h, w) = spatial("resize_bilinear", x.shape())?;
        let in_shape = x.shape().to_vec();
        Ok(self.graph().push("resize_bilinear", &[self], out, move |g, _| {
            let ty = taps::<T>(h, oh);
            let tx = taps::<T>(w, ow);
            let mut dx = vec![T::zero(); planes * h * w];
            let gd = g.data();
            for p in 0..planes {
                let dst = &mut dx[p * h * w..(p + 1) * h * w];
                let src = &gd[p * oh * ow..(p + 1) * oh * ow];
                for (oy, y) in ty.iter().enumerate() {
                    for (ox, x) in tx.iter().enumerate() {
                        let v = src[oy * ow + ox];
                        let top = v * (T::one() - y.frac);
                        let bot = v * y.frac;
                        dst[y.i0 * w + x.i0] += top * (T::one() - x.frac);
                        dst[y.i0 * w + x.i1] += top * x.frac;
                        dst[y.i1 * w + x.i0] += bot * (T::one() - x.frac);
                        dst[y.i1 * w + x.i1] += bot * x.frac;
                    }
                }
            }
            vec![Some(Tensor::from_parts(in_shape.clone(), dx))]
        }))
    }

    /// Integer-factor bilinear up-sampling of the last two axes.
    pub fn upsample_bilinear(self, scale: usize) -> Result<Var<'g, T>> {
        if scale < 2 {
            return invalid("upsample_bilinear", format!("scale {scale} < 2"));
        }
        let shape = self.shape();
        let n = shape.len();
        if n < 2 {
            return shape_err("upsample_bilinear", format!("{shape:?}"));
        }
        self.resize_bilinear(shape[n - 2] * scale, shape[n - 1] * scale)
    }
}
