//! Multi-scale deformable attention.
//!
//! Every query attends to a handful of sampled locations per head and per
//! pyramid level. Locations are a reference point plus learned offsets;
//! values are read with bilinear interpolation (half-pixel centers, border
//! clamp) and combined with softmax weights over `levels x points`.

use super::layers::Linear;
use super::params::{Ctx, Init, ParamBuilder};
use crate::autograd::Var;
use crate::error::{invalid, shape_err, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Bilinear corner indices and weights for a normalized coordinate.
/// Returns `(i0, i1, frac, d(pixel)/d(normalized))`; the derivative is zero
/// where the coordinate was clamped.
fn axis_sample<T: Scalar>(u: T, size: usize) -> (usize, usize, T, T) {
    let n = T::of_usize(size);
    let p = u * n - T::c(0.5);
    let hi = n - T::one();
    let (pc, dp) = if p < T::zero() {
        (T::zero(), T::zero())
    } else if p > hi {
        (hi, T::zero())
    } else {
        (p, n)
    };
    let i0 = pc.floor().to_usize().unwrap().min(size - 1);
    let i1 = (i0 + 1).min(size - 1);
    (i0, i1, pc - T::of_usize(i0), dp)
}

struct Layout {
    batch: usize,
    queries: usize,
    heads: usize,
    head_dim: usize,
    tokens: usize,
    levels: Vec<(usize, usize)>,
    starts: Vec<usize>,
    points: usize,
}

impl<'g, T: Scalar> Var<'g, T> {
    /// Deformable sampling core.
    ///
    /// * `self`: values `[B, S, heads, head_dim]`, levels concatenated
    ///   row-major in the order of `levels` (`(h, w)` each)
    /// * `loc`: normalized `(x, y)` sampling locations `[B, Nq, heads, L, P, 2]`
    /// * `weights`: `[B, Nq, heads, L, P]`
    ///
    /// Output `[B, Nq, heads * head_dim]`.
    pub fn ms_deform_sample(
        self,
        levels: &[(usize, usize)],
        loc: Var<'g, T>,
        weights: Var<'g, T>,
    ) -> Result<Var<'g, T>> {
        let value = self.value();
        let locv = loc.value();
        let wv = weights.value();
        let vs = value.shape();
        if vs.len() != 4 {
            return shape_err("ms_deform_sample", format!("value {vs:?}"));
        }
        let tokens: usize = levels.iter().map(|&(h, w)| h * w).sum();
        if tokens != vs[1] || levels.is_empty() {
            return shape_err(
                "ms_deform_sample",
                format!("levels {levels:?} cover {tokens} tokens, value has {}", vs[1]),
            );
        }
        let ls = locv.shape();
        if ls.len() != 6 || ls[0] != vs[0] || ls[2] != vs[2] || ls[3] != levels.len() || ls[5] != 2 {
            return shape_err("ms_deform_sample", format!("locations {ls:?} vs value {vs:?}"));
        }
        if wv.shape() != &ls[..5] {
            return shape_err("ms_deform_sample", format!("weights {:?} vs locations {ls:?}", wv.shape()));
        }
        let mut starts = Vec::with_capacity(levels.len());
        let mut acc = 0;
        for &(h, w) in levels {
            starts.push(acc);
            acc += h * w;
        }
        let lay = Layout {
            batch: vs[0],
            queries: ls[1],
            heads: vs[2],
            head_dim: vs[3],
            tokens,
            levels: levels.to_vec(),
            starts,
            points: ls[4],
        };
        let out = deform_forward(&lay, value.data(), locv.data(), wv.data());
        let out = Tensor::from_parts(vec![lay.batch, lay.queries, lay.heads * lay.head_dim], out);
        Ok(self.graph().push("ms_deform_sample", &[self, loc, weights], out, move |g, _| {
            let (dv, dl, dw) = deform_backward(&lay, value.data(), locv.data(), wv.data(), g.data());
            vec![
                Some(Tensor::from_parts(value.shape().to_vec(), dv)),
                Some(Tensor::from_parts(locv.shape().to_vec(), dl)),
                Some(Tensor::from_parts(wv.shape().to_vec(), dw)),
            ]
        }))
    }
}

fn deform_forward<T: Scalar>(lay: &Layout, value: &[T], loc: &[T], weights: &[T]) -> Vec<T> {
    let (nh, hd, np, nl) = (lay.heads, lay.head_dim, lay.points, lay.levels.len());
    let mut out = vec![T::zero(); lay.batch * lay.queries * nh * hd];
    for b in 0..lay.batch {
        for q in 0..lay.queries {
            for h in 0..nh {
                let o = &mut out[((b * lay.queries + q) * nh + h) * hd..][..hd];
                for (l, &(lh, lw)) in lay.levels.iter().enumerate() {
                    for p in 0..np {
                        let wi = (((b * lay.queries + q) * nh + h) * nl + l) * np + p;
                        let (x0, x1, fx, _) = axis_sample(loc[2 * wi], lw);
                        let (y0, y1, fy, _) = axis_sample(loc[2 * wi + 1], lh);
                        let a = weights[wi];
                        let corners = [
                            (y0, x0, (T::one() - fy) * (T::one() - fx)),
                            (y0, x1, (T::one() - fy) * fx),
                            (y1, x0, fy * (T::one() - fx)),
                            (y1, x1, fy * fx),
                        ];
                        for (yy, xx, cw) in corners {
                            let s = lay.starts[l] + yy * lw + xx;
                            let v = &value[((b * lay.tokens + s) * nh + h) * hd..][..hd];
                            let k = a * cw;
                            for (oi, &vi) in o.iter_mut().zip(v) {
                                *oi += k * vi;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn deform_backward<T: Scalar>(
    lay: &Layout,
    value: &[T],
    loc: &[T],
    weights: &[T],
    grad: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (nh, hd, np, nl) = (lay.heads, lay.head_dim, lay.points, lay.levels.len());
    let mut dv = vec![T::zero(); value.len()];
    let mut dl = vec![T::zero(); loc.len()];
    let mut dw = vec![T::zero(); weights.len()];
    for b in 0..lay.batch {
        for q in 0..lay.queries {
            for h in 0..nh {
                let go = &grad[((b * lay.queries + q) * nh + h) * hd..][..hd];
                for (l, &(lh, lw)) in lay.levels.iter().enumerate() {
                    for p in 0..np {
                        let wi = (((b * lay.queries + q) * nh + h) * nl + l) * np + p;
                        let (x0, x1, fx, dxn) = axis_sample(loc[2 * wi], lw);
                        let (y0, y1, fy, dyn_) = axis_sample(loc[2 * wi + 1], lh);
                        let a = weights[wi];
                        let idx =
                            |yy: usize, xx: usize| ((b * lay.tokens + lay.starts[l] + yy * lw + xx) * nh + h) * hd;
                        let (i00, i01, i10, i11) = (idx(y0, x0), idx(y0, x1), idx(y1, x0), idx(y1, x1));
                        let (w00, w01, w10, w11) =
                            ((T::one() - fy) * (T::one() - fx), (T::one() - fy) * fx, fy * (T::one() - fx), fy * fx);
                        let mut dot_sample = T::zero();
                        let mut dot_dx = T::zero();
                        let mut dot_dy = T::zero();
                        for d in 0..hd {
                            let (v00, v01, v10, v11) = (value[i00 + d], value[i01 + d], value[i10 + d], value[i11 + d]);
                            let gd = go[d];
                            dot_sample += gd * (w00 * v00 + w01 * v01 + w10 * v10 + w11 * v11);
                            dot_dx += gd * ((T::one() - fy) * (v01 - v00) + fy * (v11 - v10));
                            dot_dy += gd * ((T::one() - fx) * (v10 - v00) + fx * (v11 - v01));
                            let ga = gd * a;
                            dv[i00 + d] += ga * w00;
                            dv[i01 + d] += ga * w01;
                            dv[i10 + d] += ga * w10;
                            dv[i11 + d] += ga * w11;
                        }
                        dw[wi] += dot_sample;
                        dl[2 * wi] += a * dot_dx * dxn;
                        dl[2 * wi + 1] += a * dot_dy * dyn_;
                    }
                }
            }
        }
    }
    (dv, dl, dw)
}

/// Deformable attention block with its projections.
#[derive(Debug, Clone)]
pub struct MsDeformAttn {
    pub value_proj: Linear,
    pub sampling_offsets: Linear,
    pub attention_weights: Linear,
    pub output_proj: Linear,
    pub dim: usize,
    pub heads: usize,
    pub levels: usize,
    pub points: usize,
}

/// Initial offsets: head `h` points along angle `2 pi h / heads`, point `p`
/// at distance `p + 1` pixels, scaled so the larger component is one.
pub fn radial_offset_bias(heads: usize, levels: usize, points: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(heads * levels * points * 2);
    for h in 0..heads {
        let theta = h as f64 * 2.0 * std::f64::consts::PI / heads as f64;
        let (c, s) = (theta.cos(), theta.sin());
        let m = c.abs().max(s.abs());
        for _ in 0..levels {
            for p in 0..points {
                out.push(c / m * (p + 1) as f64);
                out.push(s / m * (p + 1) as f64);
            }
        }
    }
    out
}

impl MsDeformAttn {
    pub fn new<T: Scalar>(
        pb: &mut ParamBuilder<'_, T>,
        name: &str,
        dim: usize,
        heads: usize,
        levels: usize,
        points: usize,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return invalid("ms_deform_attn", format!("dim {dim} not divisible by {heads} heads"));
        }
        let mut pb = pb.sub(name);
        let n_off = heads * levels * points * 2;
        let n_w = heads * levels * points;
        let sampling_offsets = {
            let mut sub = pb.sub("sampling_offsets");
            let weight = sub.weight("weight", &[dim, n_off], Init::Zeros);
            let bias_values = radial_offset_bias(heads, levels, points);
            let bias = sub.add_value(
                "bias",
                Tensor::from_parts(vec![n_off], bias_values.iter().map(|&v| T::c(v)).collect()),
                super::params::ParamRole::NoDecay,
            );
            Linear { weight, bias: Some(bias), in_dim: dim, out_dim: n_off }
        };
        let attention_weights = Linear::new(&mut pb, "attention_weights", dim, n_w, Init::Zeros);
        let value_proj = Linear::new(&mut pb, "value_proj", dim, dim, Init::Xavier(dim, dim));
        let output_proj = Linear::new(&mut pb, "output_proj", dim, dim, Init::Xavier(dim, dim));
        Ok(Self { value_proj, sampling_offsets, attention_weights, output_proj, dim, heads, levels, points })
    }

    pub fn num_params(dim: usize, heads: usize, levels: usize, points: usize) -> usize {
        let hlp = heads * levels * points;
        Linear::num_params(dim, 2 * hlp) + Linear::num_params(dim, hlp) + 2 * Linear::num_params(dim, dim)
    }

    /// * `query`: `[B, Nq, D]`
    /// * `reference`: normalized `(x, y)` per query per level, `[B, Nq, L, 2]`
    /// * `value_input`: `[B, S, D]` with the levels concatenated
    pub fn forward<'g, T: Scalar>(
        &self,
        ctx: &Ctx<'g, T>,
        query: Var<'g, T>,
        reference: &Tensor<T>,
        value_input: Var<'g, T>,
        level_shapes: &[(usize, usize)],
    ) -> Result<Var<'g, T>> {
        let qs = query.shape();
        let (b, nq) = (qs[0], qs[1]);
        let (nh, nl, np) = (self.heads, self.levels, self.points);
        if level_shapes.len() != nl || reference.shape() != [b, nq, nl, 2] {
            return shape_err(
                "ms_deform_attn",
                format!("levels {level_shapes:?}, reference {:?} for {nl} levels", reference.shape()),
            );
        }
        let s = value_input.dim(1);
        let value = self.value_proj.forward(ctx, value_input)?.reshape([b, s, nh, self.dim / nh])?;
        let offsets = self.sampling_offsets.forward(ctx, query)?.reshape([b, nq, nh, nl, np, 2])?;
        let normalizer = Tensor::from_parts(
            vec![nl, 1, 2],
            level_shapes.iter().flat_map(|&(h, w)| [T::of_usize(w), T::of_usize(h)]).collect(),
        );
        let reference = ctx.constant(reference.reshape([b, nq, 1, nl, 1, 2])?);
        let loc = offsets.div(ctx.constant(normalizer))?.add(reference)?;
        let weights = self
            .attention_weights
            .forward(ctx, query)?
            .reshape([b, nq, nh, nl * np])?
            .softmax()?
            .reshape([b, nq, nh, nl, np])?;
        let sampled = value.ms_deform_sample(level_shapes, loc, weights)?;
        self.output_proj.forward(ctx, sampled)
    }
}
