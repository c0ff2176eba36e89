//! Slim mask-classification transformer decoder.

use super::config::DecoderConfig;
use crate::autograd::Var;
use crate::error::{invalid, shape_err, Result};
use crate::nn::{
    resize_bilinear, Activation, AttentionParams, Ctx, Init, KeyMask, LayerNorm, Linear, Mlp, MultiHeadAttention,
    ParamBuilder, ParamId,
};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Source index consumed by each decoder layer when cycling through
/// `sources` feature maps.
pub fn round_robin_sequence(num_layers: usize, sources: usize) -> Result<Vec<usize>> {
    if sources == 0 || !num_layers.is_multiple_of(sources) {
        return invalid("round robin", format!("{num_layers} layers over {sources} sources"));
    }
    Ok((0..num_layers).map(|j| j % sources).collect())
}

/// Key mask from mask logits `[B, Nq, h, w]` resized to `(kh, kw)`: keys with
/// negative logit (sigmoid below one half) are masked.
pub fn attention_mask_from<T: Scalar>(mask_logits: &Tensor<T>, kh: usize, kw: usize) -> Result<KeyMask> {
    let s = mask_logits.shape();
    if s.len() != 4 {
        return shape_err("attention mask", format!("mask logits {s:?}"));
    }
    let resized = if (s[2], s[3]) == (kh, kw) { mask_logits.clone() } else { resize_bilinear(mask_logits, kh, kw)? };
    let masked = resized.data().iter().map(|&v| v < T::zero()).collect();
    KeyMask::new(s[0], s[1], kh * kw, masked)
}

/// Class and mask logits of one prediction step.
#[derive(Debug, Clone, Copy)]
pub struct Prediction<'g, T: Scalar> {
    /// `[B, Nq, K+1]`, last class is "no object".
    pub class_logits: Var<'g, T>,
    /// `[B, Nq, h, w]` at the mask-feature resolution.
    pub mask_logits: Var<'g, T>,
}

/// All predictions of a decoder run: the initial one, then one per layer.
#[derive(Debug, Clone)]
pub struct MaskClassOutput<'g, T: Scalar> {
    pub predictions: Vec<Prediction<'g, T>>,
    /// Feature source used by each layer.
    pub sources: Vec<usize>,
    /// Attention rows reset because every key was masked, per layer.
    pub reset_rows: Vec<usize>,
}

impl<'g, T: Scalar> MaskClassOutput<'g, T> {
    pub fn last(&self) -> &Prediction<'g, T> {
        self.predictions.last().expect("decoder emits at least one prediction")
    }
}

#[derive(Debug, Clone)]
pub struct DecoderLayer {
    pub cross_attn: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub ffn: Mlp,
    pub norm3: LayerNorm,
}

impl DecoderLayer {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, name: &str, cfg: &DecoderConfig) -> Result<Self> {
        let params = AttentionParams::new(cfg.width, cfg.num_heads)?;
        let d = cfg.width;
        let mut pb = pb.sub(name);
        Ok(Self {
            cross_attn: MultiHeadAttention::new(&mut pb, "cross_attn", params, Init::Xavier(d, d)),
            norm1: LayerNorm::new(&mut pb, "norm1", d),
            self_attn: MultiHeadAttention::new(&mut pb, "self_attn", params, Init::Xavier(d, d)),
            norm2: LayerNorm::new(&mut pb, "norm2", d),
            ffn: Mlp::new(&mut pb, "ffn", d, cfg.ffn_dim, Activation::Relu, Init::Xavier),
            norm3: LayerNorm::new(&mut pb, "norm3", d),
        })
    }

    pub fn num_params(width: usize, ffn_dim: usize) -> usize {
        2 * MultiHeadAttention::num_params(width) + Mlp::num_params(width, ffn_dim) + 3 * LayerNorm::num_params(width)
    }

    /// Masked cross-attention, self-attention and FFN, each post-norm with
    /// a residual.
    ///
    /// * `queries`, `query_pos`: `[B, Nq, D]`
    /// * `memory`: flattened source `[B, S, D]` (level embedding included)
    pub fn forward<'g, T: Scalar>(
        &self,
        ctx: &Ctx<'g, T>,
        queries: Var<'g, T>,
        query_pos: Var<'g, T>,
        memory: Var<'g, T>,
        mask: Option<&KeyMask>,
    ) -> Result<Var<'g, T>> {
        let q = queries.add(query_pos)?;
        let a = self.cross_attn.forward(ctx, q, memory, memory, None, mask)?;
        let x = self.norm1.forward(ctx, queries.add(a)?)?;
        let qk = x.add(query_pos)?;
        let a = self.self_attn.forward(ctx, qk, qk, x, None, None)?;
        let x = self.norm2.forward(ctx, x.add(a)?)?;
        let f = self.ffn.forward(ctx, x)?;
        self.norm3.forward(ctx, x.add(f)?)
    }
}

#[derive(Debug, Clone)]
pub struct MaskDecoder {
    pub config: DecoderConfig,
    pub num_classes: usize,
    pub num_sources: usize,
    pub query_feat: ParamId,
    pub query_pos: ParamId,
    pub level_embed: ParamId,
    pub layers: Vec<DecoderLayer>,
    pub norm: LayerNorm,
    pub class_head: Linear,
    pub mask_head: [Linear; 3],
}

impl MaskDecoder {
    pub fn new<T: Scalar>(
        pb: &mut ParamBuilder<'_, T>,
        cfg: &DecoderConfig,
        num_classes: usize,
        num_sources: usize,
    ) -> Result<Self> {
        round_robin_sequence(cfg.num_layers, num_sources)?;
        let d = cfg.width;
        let mut pb = pb.sub("decoder");
        let query_feat = pb.no_decay("query_feat", &[cfg.num_queries, d], Init::Normal(0.02));
        let query_pos = pb.no_decay("query_pos", &[cfg.num_queries, d], Init::Normal(0.02));
        let level_embed = pb.no_decay("level_embed", &[num_sources, d], Init::Normal(0.02));
        let layers = (0..cfg.num_layers)
            .map(|i| DecoderLayer::new(&mut pb, &format!("layers.{i}"), cfg))
            .collect::<Result<Vec<_>>>()?;
        let norm = LayerNorm::new(&mut pb, "norm", d);
        let class_head = Linear::new(&mut pb, "class_head", d, num_classes + 1, Init::Xavier(d, num_classes + 1));
        let mask_head = [0, 1, 2].map(|i| Linear::new(&mut pb, &format!("mask_head.{i}"), d, d, Init::Xavier(d, d)));
        Ok(Self {
            config: cfg.clone(),
            num_classes,
            num_sources,
            query_feat,
            query_pos,
            level_embed,
            layers,
            norm,
            class_head,
            mask_head,
        })
    }

    pub fn num_params(cfg: &DecoderConfig, num_classes: usize, num_sources: usize) -> usize {
        let d = cfg.width;
        2 * cfg.num_queries * d
            + num_sources * d
            + cfg.num_layers * DecoderLayer::num_params(d, cfg.ffn_dim)
            + LayerNorm::num_params(d)
            + Linear::num_params(d, num_classes + 1)
            + 3 * Linear::num_params(d, d)
    }

    /// MACs for sources of `source_hw` pixels and a mask map of `mask_hw`.
    pub fn macs(cfg: &DecoderConfig, num_classes: usize, source_hw: &[usize], mask_hw: usize) -> u64 {
        let d = cfg.width as u64;
        let nq = cfg.num_queries as u64;
        let heads_out = nq * (d * (num_classes as u64 + 1) + 3 * d * d) + nq * d * mask_hw as u64;
        let seq = round_robin_sequence(cfg.num_layers, source_hw.len()).unwrap_or_default();
        let layers: u64 = seq
            .iter()
            .map(|&s| {
                let s = source_hw[s] as u64;
                let cross = 2 * nq * d * d + 2 * s * d * d + 2 * nq * s * d;
                let selfa = 4 * nq * d * d + 2 * nq * nq * d;
                let ffn = 2 * nq * d * cfg.ffn_dim as u64;
                cross + selfa + ffn
            })
            .sum();
        layers + (cfg.num_layers as u64 + 1) * heads_out
    }

    /// Class logits and mask logits for the current queries.
    pub fn predict_heads<'g, T: Scalar>(
        &self,
        ctx: &Ctx<'g, T>,
        queries: Var<'g, T>,
        mask_features: Var<'g, T>,
    ) -> Result<Prediction<'g, T>> {
        let ms = mask_features.shape();
        if ms.len() != 4 || ms[1] != self.config.width {
            return shape_err("predict heads", format!("mask features {ms:?} vs width {}", self.config.width));
        }
        let (b, nq) = (queries.dim(0), queries.dim(1));
        let q = self.norm.forward(ctx, queries)?;
        let class_logits = self.class_head.forward(ctx, q)?;
        let e = self.mask_head[0].forward(ctx, q)?.relu();
        let e = self.mask_head[1].forward(ctx, e)?.relu();
        let e = self.mask_head[2].forward(ctx, e)?;
        let (h, w) = (ms[2], ms[3]);
        let f = mask_features.reshape([b, ms[1], h * w])?;
        let mask_logits = e.bmm(f, false)?.reshape([b, nq, h, w])?;
        Ok(Prediction { class_logits, mask_logits })
    }

    /// Runs all layers, layer `j` reading source `j mod n`.
    ///
    /// Sources are `[B, D, h, w]`; `mask_features` is `[B, D, H, W]`.
    pub fn forward<'g, T: Scalar>(
        &self,
        ctx: &Ctx<'g, T>,
        sources: &[Var<'g, T>],
        mask_features: Var<'g, T>,
    ) -> Result<MaskClassOutput<'g, T>> {
        if sources.len() != self.num_sources {
            return shape_err("mask decoder", format!("{} sources, built for {}", sources.len(), self.num_sources));
        }
        let seq = round_robin_sequence(self.layers.len(), sources.len())?;
        let b = mask_features.dim(0);
        let d = self.config.width;
        let nq = self.config.num_queries;
        let level = ctx.p(self.level_embed);
        let memories = sources
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let sh = s.shape();
                if sh.len() != 4 || sh[0] != b || sh[1] != d {
                    return shape_err("mask decoder", format!("source {i} {sh:?} vs width {d}"));
                }
                let flat = s.reshape([b, d, sh[2] * sh[3]])?.permute(&[0, 2, 1])?;
                flat.add(level.narrow(0, i, 1)?.reshape([d])?)
            })
            .collect::<Result<Vec<_>>>()?;
        let zeros = ctx.constant(Tensor::zeros([b, nq, d]));
        let mut queries = zeros.add(ctx.p(self.query_feat))?;
        let query_pos = zeros.add(ctx.p(self.query_pos))?;
        let mut pred = self.predict_heads(ctx, queries, mask_features)?;
        let mut predictions = vec![pred];
        let mut reset_rows = Vec::with_capacity(seq.len());
        for (layer, &src) in self.layers.iter().zip(&seq) {
            let sh = sources[src].shape();
            let mut mask = attention_mask_from(&pred.mask_logits.value(), sh[2], sh[3])?;
            reset_rows.push(mask.apply_safeguard());
            debug_assert!(!mask.has_empty_row());
            queries = layer.forward(ctx, queries, query_pos, memories[src], Some(&mask))?;
            pred = self.predict_heads(ctx, queries, mask_features)?;
            predictions.push(pred);
        }
        Ok(MaskClassOutput { predictions, sources: seq, reset_rows })
    }
}
