//! Multi-head scaled dot-product attention.

use super::layers::Linear;
use super::params::{Ctx, Init, ParamBuilder};
use crate::autograd::Var;
use crate::error::{invalid, shape_err, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionParams {
    pub embed_dim: usize,
    pub num_heads: usize,
}

impl AttentionParams {
    pub fn new(embed_dim: usize, num_heads: usize) -> Result<Self> {
        if num_heads == 0 || !embed_dim.is_multiple_of(num_heads) {
            return invalid("attention", format!("embed dim {embed_dim} not divisible by {num_heads} heads"));
        }
        Ok(Self { embed_dim, num_heads })
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }
}

/// Boolean key mask, `true` where a query may not attend to a key.
#[derive(Debug, Clone, PartialEq)]
pub struct KeyMask {
    pub batch: usize,
    pub queries: usize,
    pub keys: usize,
    pub masked: Vec<bool>,
}

impl KeyMask {
    pub fn new(batch: usize, queries: usize, keys: usize, masked: Vec<bool>) -> Result<Self> {
        if masked.len() != batch * queries * keys {
            return shape_err("key mask", format!("{} entries for {batch}x{queries}x{keys}", masked.len()));
        }
        Ok(Self { batch, queries, keys, masked })
    }

    /// Unmasks every row that masks all of its keys; returns how many rows
    /// were reset.
    pub fn apply_safeguard(&mut self) -> usize {
        let mut reset = 0;
        for row in self.masked.chunks_mut(self.keys) {
            if row.iter().all(|&m| m) {
                row.fill(false);
                reset += 1;
            }
        }
        reset
    }

    pub fn has_empty_row(&self) -> bool {
        self.masked.chunks(self.keys).any(|row| row.iter().all(|&m| m))
    }

    /// Additive form `[B, 1, Nq, Nk]` with `-inf` on masked keys, after the
    /// all-masked safeguard.
    pub fn additive<T: Scalar>(&self) -> Tensor<T> {
        let mut guarded = self.clone();
        guarded.apply_safeguard();
        Tensor::from_parts(
            vec![self.batch, 1, self.queries, self.keys],
            guarded.masked.iter().map(|&m| if m { T::neg_infinity() } else { T::zero() }).collect(),
        )
    }
}

/// Attention over already projected `q [B,Nq,D]`, `k`, `v [B,Nk,D]`.
///
/// `bias` is an additive `[heads, Nq, Nk]` term (relative position bias).
/// Returns the concatenated head outputs `[B,Nq,D]` and the attention
/// probabilities `[B,heads,Nq,Nk]`.
pub fn scaled_dot_product<'g, T: Scalar>(
    q: Var<'g, T>,
    k: Var<'g, T>,
    v: Var<'g, T>,
    heads: usize,
    bias: Option<Var<'g, T>>,
    mask: Option<&KeyMask>,
) -> Result<(Var<'g, T>, Var<'g, T>)> {
    let (qs, ks, vs) = (q.shape(), k.shape(), v.shape());
    if qs.len() != 3 || ks.len() != 3 || ks != vs || qs[0] != ks[0] || qs[2] != ks[2] || qs[2] % heads != 0 {
        return shape_err("attention", format!("q {qs:?} k {ks:?} v {vs:?} heads {heads}"));
    }
    let (b, nq, d) = (qs[0], qs[1], qs[2]);
    let nk = ks[1];
    let hd = d / heads;
    let split = |x: Var<'g, T>, n: usize| -> Result<Var<'g, T>> {
        x.reshape([b, n, heads, hd])?.permute(&[0, 2, 1, 3])?.reshape([b * heads, n, hd])
    };
    let qh = split(q, nq)?.scale(T::one() / T::of_usize(hd).sqrt());
    let kh = split(k, nk)?;
    let vh = split(v, nk)?;
    let mut scores = qh.bmm(kh, true)?.reshape([b, heads, nq, nk])?;
    if let Some(bias) = bias {
        scores = scores.add(bias)?;
    }
    if let Some(mask) = mask {
        if (mask.batch, mask.queries, mask.keys) != (b, nq, nk) {
            return shape_err(
                "attention",
                format!("mask {}x{}x{} vs scores {b}x{nq}x{nk}", mask.batch, mask.queries, mask.keys),
            );
        }
        scores = scores.add(q.graph().constant(mask.additive()))?;
    }
    let probs = scores.softmax()?;
    let out = probs
        .reshape([b * heads, nq, nk])?
        .bmm(vh, false)?
        .reshape([b, heads, nq, hd])?
        .permute(&[0, 2, 1, 3])?
        .reshape([b, nq, d])?;
    Ok((out, probs))
}

/// Attention with input and output projections.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub params: AttentionParams,
}

impl MultiHeadAttention {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, name: &str, params: AttentionParams, init: Init) -> Self {
        let mut pb = pb.sub(name);
        let d = params.embed_dim;
        Self {
            q: Linear::new(&mut pb, "q", d, d, init),
            k: Linear::new(&mut pb, "k", d, d, init),
            v: Linear::new(&mut pb, "v", d, d, init),
            out: Linear::new(&mut pb, "out", d, d, init),
            params,
        }
    }

    pub fn num_params(dim: usize) -> usize {
        4 * Linear::num_params(dim, dim)
    }

    pub fn forward<'g, T: Scalar>(
        &self,
        ctx: &Ctx<'g, T>,
        query: Var<'g, T>,
        key: Var<'g, T>,
        value: Var<'g, T>,
        bias: Option<Var<'g, T>>,
        mask: Option<&KeyMask>,
    ) -> Result<Var<'g, T>> {
        Ok(self.forward_with_probs(ctx, query, key, value, bias, mask)?.0)
    }

    pub fn forward_with_probs<'g, T: Scalar>(
        &self,
        ctx: &Ctx<'g, T>,
        query: Var<'g, T>,
        key: Var<'g, T>,
        value: Var<'g, T>,
        bias: Option<Var<'g, T>>,
        mask: Option<&KeyMask>,
    ) -> Result<(Var<'g, T>, Var<'g, T>)> {
        if query.shape().last() != Some(&self.params.embed_dim) {
            return shape_err("attention", format!("query {:?} vs dim {}", query.shape(), self.params.embed_dim));
        }
        let q = self.q.forward(ctx, query)?;
        let k = self.k.forward(ctx, key)?;
        let v = self.v.forward(ctx, value)?;
        let (o, probs) = scaled_dot_product(q, k, v, self.params.num_heads, bias, mask)?;
        Ok((self.out.forward(ctx, o)?, probs))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Graph;

    #[test]
    fn heads_must_divide() {
        assert!(AttentionParams::new(10, 3).is_err());
        assert_eq!(AttentionParams::new(256, 8).unwrap().head_dim(), 32);
    }

    #[test]
    fn safeguard_resets_full_rows() {
        let mut m = KeyMask::new(1, 2, 2, vec![true, true, false, true]).unwrap();
        assert!(m.has_empty_row());
        assert_eq!(m.apply_safeguard(), 1);
        assert_eq!(m.masked, vec![false, false, false, true]);
    }

    #[test]
    fn single_key_returns_value() {
        let g = Graph::<f64>::new();
        let q = g.constant(Tensor::from_fn([1, 3, 4], |i| i as f64 * 0.3));
        let k = g.constant(Tensor::from_fn([1, 1, 4], |i| i as f64));
        let v = g.constant(Tensor::from_f64([1, 1, 4], &[1.0, -2.0, 3.0, 0.5]).unwrap());
        let (out, _) = scaled_dot_product(q, k, v, 2, None, None).unwrap();
        for row in out.value().data().chunks(4) {
            assert_eq!(row, &[1.0, -2.0, 3.0, 0.5]);
        }
    }

    #[test]
    fn masked_rows_still_normalize() {
        let g = Graph::<f64>::new();
        let q = g.constant(Tensor::from_fn([1, 2, 4], |i| (i as f64).sin()));
        let k = g.constant(Tensor::from_fn([1, 3, 4], |i| (i as f64).cos()));
        let mask = KeyMask::new(1, 2, 3, vec![true, false, true, true, true, true]).unwrap();
        let (_, probs) = scaled_dot_product(q, k, k, 2, None, Some(&mask)).unwrap();
        let p = probs.value();
        for row in p.data().chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        // first query: only key 1 visible
        assert_eq!(p.at(&[0, 0, 0, 1]), 1.0);
    }
}
