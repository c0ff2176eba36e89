//! Plain ViT encoder returning the last feature map.

use rand::Rng;

use super::config::{PosEmbed, ViTConfig};
use crate::autograd::Var;
use crate::error::{shape_err, Result};
use crate::nn::{
    Activation, AttentionParams, Conv2d, ConvParams, Ctx, Init, LayerNorm, Mlp, MultiHeadAttention, ParamBuilder,
    ParamGroup, ParamId,
};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Index into a relative-bias table for query cell `(qr, qc)` attending to
/// key cell `(kr, kc)` on an `h x w` grid.
pub fn relative_index(qr: usize, qc: usize, kr: usize, kc: usize, h: usize, w: usize) -> usize {
    let dr = qr + h - 1 - kr;
    let dc = qc + w - 1 - kc;
    dr * (2 * w - 1) + dc
}

/// Table rows for an `h x w` grid plus the three class-token entries.
pub fn relative_table_len(h: usize, w: usize) -> usize {
    (2 * h - 1) * (2 * w - 1) + 3
}

/// Full `(N+1) x (N+1)` lookup including the class token at position 0.
pub fn relative_position_index(h: usize, w: usize) -> Vec<usize> {
    let n = h * w + 1;
    let base = (2 * h - 1) * (2 * w - 1);
    let mut idx = vec![0; n * n];
    for i in 0..n {
        for j in 0..n {
            idx[i * n + j] = match (i, j) {
                (0, 0) => base + 2,
                (0, _) => base,
                (_, 0) => base + 1,
                _ => {
                    let (q, k) = (i - 1, j - 1);
                    relative_index(q / w, q % w, k / w, k % w, h, w)
                }
            };
        }
    }
    idx
}

#[derive(Debug, Clone)]
pub struct EncoderBlock {
    pub norm1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub rel_bias: Option<ParamId>,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
    pub drop_path: f64,
}

#[derive(Debug, Clone)]
pub struct VisionTransformer {
    pub config: ViTConfig,
    pub patch_embed: Conv2d,
    pub cls_token: ParamId,
    pub pos_embed: Option<ParamId>,
    pub blocks: Vec<EncoderBlock>,
    pub norm: LayerNorm,
    rel_index: Vec<usize>,
}

impl VisionTransformer {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, config: &ViTConfig) -> Result<Self> {
        config.validate()?;
        let c = config.embed_dim;
        let g = config.grid();
        let n = g * g;
        let mut embed = pb.sub_group("encoder", ParamGroup::Embedding);
        let patch_embed = Conv2d::new(
            &mut embed,
            "patch_embed",
            ConvParams {
                in_ch: config.in_chans,
                out_ch: c,
                kernel: config.patch_size,
                stride: config.patch_size,
                padding: 0,
                groups: 1,
                has_bias: true,
            },
        )?;
        let cls_token = embed.no_decay("cls_token", &[1, 1, c], Init::TruncNormal(0.02));
        let pos_embed = (config.pos_embed == PosEmbed::Absolute)
            .then(|| embed.no_decay("pos_embed", &[n + 1, c], Init::TruncNormal(0.02)));
        let attn_params = AttentionParams::new(c, config.num_heads)?;
        let hidden = c * config.mlp_ratio;
        let mut blocks = Vec::with_capacity(config.depth);
        for i in 0..config.depth {
            let mut lb = pb.sub_group(&format!("encoder.blocks.{i}"), ParamGroup::EncoderLayer(i + 1));
            let rel_bias = (config.pos_embed == PosEmbed::Relative)
                .then(|| lb.no_decay("rel_pos_bias", &[relative_table_len(g, g), config.num_heads], Init::Zeros));
            blocks.push(EncoderBlock {
                norm1: LayerNorm::new(&mut lb, "norm1", c),
                attn: MultiHeadAttention::new(&mut lb, "attn", attn_params, Init::TruncNormal(0.02)),
                rel_bias,
                norm2: LayerNorm::new(&mut lb, "norm2", c),
                mlp: Mlp::new(&mut lb, "mlp", c, hidden, Activation::Gelu, |_, _| Init::TruncNormal(0.02)),
                drop_path: if config.depth > 1 {
                    config.drop_path_rate * i as f64 / (config.depth - 1) as f64
                } else {
                    config.drop_path_rate
                },
            });
        }
        let mut last = pb.sub_group("encoder", ParamGroup::EncoderLayer(config.depth));
        let norm = LayerNorm::new(&mut last, "norm", c);
        let rel_index = if config.pos_embed == PosEmbed::Relative { relative_position_index(g, g) } else { Vec::new() };
        Ok(Self { config: config.clone(), patch_embed, cls_token, pos_embed, blocks, norm, rel_index })
    }

    /// Trainable parameter count without instantiation.
    pub fn num_params(config: &ViTConfig) -> usize {
        let c = config.embed_dim;
        let g = config.grid();
        let k = config.patch_size;
        let patch = config.in_chans * c * k * k + c;
        let pos = match config.pos_embed {
            PosEmbed::Absolute => (g * g + 1) * c,
            PosEmbed::Relative => 0,
        };
        let rel = match config.pos_embed {
            PosEmbed::Relative => relative_table_len(g, g) * config.num_heads,
            PosEmbed::Absolute => 0,
        };
        let block = 2 * LayerNorm::num_params(c)
            + MultiHeadAttention::num_params(c)
            + Mlp::num_params(c, c * config.mlp_ratio)
            + rel;
        patch + c + pos + config.depth * block + LayerNorm::num_params(c)
    }

    /// Patch tokens `[B, N, C]` without class token or positions.
    pub fn patch_tokens<'g, T: Scalar>(&self, ctx: &Ctx<'g, T>, images: Var<'g, T>) -> Result<Var<'g, T>> {
        let s = images.shape();
        let cfg = &self.config;
        if s.len() != 4
            || s[1] != cfg.in_chans
            || !s[2].is_multiple_of(cfg.patch_size)
            || !s[3].is_multiple_of(cfg.patch_size)
        {
            return shape_err(
                "patch_embed",
                format!("images {s:?} for {} channels, patch {}", cfg.in_chans, cfg.patch_size),
            );
        }
        let x = self.patch_embed.forward(ctx, images)?;
        let (b, c, h, w) = (s[0], cfg.embed_dim, s[2] / cfg.patch_size, s[3] / cfg.patch_size);
        x.reshape([b, c, h * w])?.permute(&[0, 2, 1])
    }

    fn drop_path<'g, T: Scalar>(&self, ctx: &Ctx<'g, T>, x: Var<'g, T>, rate: f64) -> Result<Var<'g, T>> {
        if !ctx.training() || rate <= 0.0 {
            return Ok(x);
        }
        let b = x.dim(0);
        let keep = 1.0 - rate;
        let mask: Vec<f64> =
            ctx.with_rng(|rng| (0..b).map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 }).collect());
        x.mul(ctx.constant(Tensor::from_f64([b, 1, 1], &mask)?))
    }

    fn block_forward<'g, T: Scalar>(
        &self,
        ctx: &Ctx<'g, T>,
        block: &EncoderBlock,
        x: Var<'g, T>,
    ) -> Result<Var<'g, T>> {
        let bias = match block.rel_bias {
            Some(table) => {
                let n = x.dim(1);
                if n * n != self.rel_index.len() {
                    return shape_err(
                        "relative position bias",
                        format!("{n} tokens, table built for {} pairs", self.rel_index.len()),
                    );
                }
                let heads = self.config.num_heads;
                Some(ctx.p(table).index_select(&self.rel_index)?.reshape([n, n, heads])?.permute(&[2, 0, 1])?)
            }
            None => None,
        };
        let h = block.norm1.forward(ctx, x)?;
        let a = block.attn.forward(ctx, h, h, h, bias, None)?;
        let x = x.add(self.drop_path(ctx, a, block.drop_path)?)?;
        let h = block.norm2.forward(ctx, x)?;
        let m = block.mlp.forward(ctx, h)?;
        x.add(self.drop_path(ctx, m, block.drop_path)?)
    }

    /// `[B, 3, H, W]` to the last feature map `[B, C, H/p, W/p]`.
    pub fn forward<'g, T: Scalar>(&self, ctx: &Ctx<'g, T>, images: Var<'g, T>) -> Result<Var<'g, T>> {
        let s = images.shape();
        let tokens = self.patch_tokens(ctx, images)?;
        let (b, n, c) = (s[0], tokens.dim(1), self.config.embed_dim);
        let (h, w) = (s[2] / self.config.patch_size, s[3] / self.config.patch_size);
        let cls = ctx.constant(Tensor::zeros([b, 1, c])).add(ctx.p(self.cls_token))?;
        let mut x = Var::concat(&[cls, tokens], 1)?;
        if let Some(pos) = self.pos_embed {
            if n + 1 != ctx.value(pos).shape()[0] {
                return shape_err("position embedding", format!("{n} tokens vs table {:?}", ctx.value(pos).shape()));
            }
            x = x.add(ctx.p(pos))?;
        }
        for block in &self.blocks {
            x = self.block_forward(ctx, block, x)?;
        }
        let x = self.norm.forward(ctx, x)?;
        x.narrow(1, 1, n)?.permute(&[0, 2, 1])?.reshape([b, c, h, w])
    }
}

/// Encoder MACs for an `h x w` input, class token included.
pub fn encoder_macs(config: &ViTConfig, h: usize, w: usize) -> u64 {
    let c = config.embed_dim as u64;
    let (gh, gw) = ((h / config.patch_size) as u64, (w / config.patch_size) as u64);
    let n = gh * gw + 1;
    let k = config.patch_size as u64;
    let patch = gh * gw * c * config.in_chans as u64 * k * k;
    let hidden = c * config.mlp_ratio as u64;
    let block = n * 4 * c * c + 2 * n * n * c + 2 * n * c * hidden;
    patch + config.depth as u64 * block
}
