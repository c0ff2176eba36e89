//! PlainSeg-Hier neck: a feature pyramid built from the last ViT map, one
//! deformable encoder layer over three scales, and mask-feature fusion.

use super::config::{HierConfig, ModelConfig};
use crate::autograd::Var;
use crate::error::{shape_err, Result};
use crate::nn::{
    Activation, BatchNorm2d, Conv2d, ConvParams, ConvTranspose2d, Ctx, Init, LayerNorm, Mlp, MsDeformAttn,
    ParamBuilder, ParamId,
};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Pyramid levels keyed by stride relative to the encoder output: index 0 is
/// 4x finer, 1 is 2x finer, 2 is the encoder map, 3 is 2x coarser.
#[derive(Debug, Clone)]
pub struct FeaturePyramid<'g, T: Scalar> {
    pub levels: [Var<'g, T>; 4],
}

/// Outputs of the neck.
#[derive(Debug, Clone)]
pub struct HierOutput<'g, T: Scalar> {
    pub pyramid: FeaturePyramid<'g, T>,
    /// Enhanced maps ordered coarse to fine, the decoder source order.
    pub sources: Vec<Var<'g, T>>,
    pub mask: Var<'g, T>,
}

/// Pyramid channel widths for encoder width `c`, finest first.
pub fn pyramid_widths(c: usize) -> [usize; 4] {
    [c / 4, c / 2, c, c]
}

#[derive(Debug, Clone)]
pub struct HierNeck {
    pub width: usize,
    pub up1: ConvTranspose2d,
    pub up2: ConvTranspose2d,
    /// 1x1 projections and norms for the 2x-finer, encoder and 2x-coarser levels.
    pub proj: Vec<(Conv2d, LayerNorm)>,
    pub level_embed: ParamId,
    pub deform: MsDeformAttn,
    pub norm1: LayerNorm,
    pub ffn: Mlp,
    pub norm2: LayerNorm,
    pub lateral: Conv2d,
    pub fuse_conv: Conv2d,
    pub fuse_bn: BatchNorm2d,
}

impl HierNeck {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, c: usize, width: usize, hier: &HierConfig) -> Result<Self> {
        let [w4, w8, w16, w32] = pyramid_widths(c);
        let mut pb = pb.sub("neck");
        let up1 = ConvTranspose2d::new(&mut pb, "up1", c, w8);
        let up2 = ConvTranspose2d::new(&mut pb, "up2", w8, w4);
        let proj = [w8, w16, w32]
            .iter()
            .enumerate()
            .map(|(i, &cin)| {
                Ok((
                    Conv2d::new(&mut pb, &format!("proj.{i}.conv"), ConvParams::same(cin, width, 1))?,
                    LayerNorm::new(&mut pb, &format!("proj.{i}.norm"), width),
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        let level_embed = pb.no_decay("level_embed", &[3, width], Init::Normal(0.02));
        let deform = MsDeformAttn::new(&mut pb, "deform_attn", width, hier.deform_heads, 3, hier.deform_points)?;
        Ok(Self {
            width,
            up1,
            up2,
            proj,
            level_embed,
            deform,
            norm1: LayerNorm::new(&mut pb, "norm1", width),
            ffn: Mlp::new(&mut pb, "ffn", width, hier.deform_ffn_dim, Activation::Relu, Init::Xavier),
            norm2: LayerNorm::new(&mut pb, "norm2", width),
            lateral: Conv2d::new(&mut pb, "lateral", ConvParams::same(w4, width, 1))?,
            fuse_conv: Conv2d::new(&mut pb, "fuse_conv", ConvParams::same(width, width, 3).bias(false))?,
            fuse_bn: BatchNorm2d::new(&mut pb, "fuse_bn", width),
        })
    }

    pub fn num_params(cfg: &ModelConfig) -> usize {
        let c = cfg.encoder.embed_dim;
        let d = cfg.decoder.width;
        let h = &cfg.hier;
        let [w4, w8, w16, w32] = pyramid_widths(c);
        ConvTranspose2d::num_params(c, w8)
            + ConvTranspose2d::num_params(w8, w4)
            + [w8, w16, w32]
                .iter()
                .map(|&cin| ConvParams::same(cin, d, 1).num_params() + LayerNorm::num_params(d))
                .sum::<usize>()
            + 3 * d
            + MsDeformAttn::num_params(d, h.deform_heads, 3, h.deform_points)
            + 2 * LayerNorm::num_params(d)
            + Mlp::num_params(d, h.deform_ffn_dim)
            + ConvParams::same(w4, d, 1).num_params()
            + ConvParams::same(d, d, 3).bias(false).num_params()
            + BatchNorm2d::num_params(d)
    }

    /// MACs for an encoder map of `h x w`.
    pub fn macs(cfg: &ModelConfig, h: usize, w: usize) -> u64 {
        let c = cfg.encoder.embed_dim as u64;
        let d = cfg.decoder.width as u64;
        let hc = &cfg.hier;
        let [w4, w8, w16, w32] = pyramid_widths(cfg.encoder.embed_dim).map(|v| v as u64);
        let (h, w) = (h as u64, w as u64);
        let p16 = h * w;
        let (p8, p4, p32) = (4 * p16, 16 * p16, p16 / 4);
        let deconv = p16 * c * w8 * 4 + p8 * w8 * w4 * 4;
        let proj = p8 * w8 * d + p16 * w16 * d + p32 * w32 * d;
        let s = p8 + p16 + p32;
        let hlp = (hc.deform_heads * 3 * hc.deform_points) as u64;
        let deform = s * d * d * 2 + s * d * 3 * hlp + s * hlp * (d / hc.deform_heads as u64) * 4;
        let ffn = 2 * s * d * hc.deform_ffn_dim as u64;
        let fuse = p4 * w4 * d + p4 * d * d * 9;
        deconv + proj + deform + ffn + fuse
    }

    /// Deconvolutions up, max pooling down.
    pub fn build_pyramid<'g, T: Scalar>(&self, ctx: &Ctx<'g, T>, f_vit: Var<'g, T>) -> Result<FeaturePyramid<'g, T>> {
        let s = f_vit.shape();
        if s.len() != 4 || !s[2].is_multiple_of(2) || !s[3].is_multiple_of(2) {
            return shape_err("feature pyramid", format!("encoder map {s:?} needs even spatial dims"));
        }
        let l8 = self.up1.forward(ctx, f_vit)?;
        let l4 = self.up2.forward(ctx, l8)?;
        let l32 = f_vit.max_pool2d()?;
        Ok(FeaturePyramid { levels: [l4, l8, f_vit, l32] })
    }

    /// One deformable encoder layer over the three projected levels
    /// (fine to coarse); returns the enhanced maps in the same order.
    pub fn deformable_encoder<'g, T: Scalar>(
        &self,
        ctx: &Ctx<'g, T>,
        levels: &[Var<'g, T>],
    ) -> Result<Vec<Var<'g, T>>> {
        let d = self.width;
        let b = levels[0].dim(0);
        let shapes: Vec<(usize, usize)> = levels.iter().map(|l| (l.dim(2), l.dim(3))).collect();
        let embed = ctx.p(self.level_embed);
        let mut flat = Vec::with_capacity(levels.len());
        let mut pos = Vec::with_capacity(levels.len());
        for (i, (l, &(h, w))) in levels.iter().zip(&shapes).enumerate() {
            let f = l.reshape([b, d, h * w])?.permute(&[0, 2, 1])?;
            let e = ctx.constant(Tensor::zeros([b, h * w, d])).add(embed.narrow(0, i, 1)?.reshape([d])?)?;
            flat.push(f);
            pos.push(e);
        }
        let src = Var::concat(&flat, 1)?;
        let query = src.add(Var::concat(&pos, 1)?)?;
        let reference = reference_points::<T>(b, &shapes);
        let a = self.deform.forward(ctx, query, &reference, src, &shapes)?;
        let x = self.norm1.forward(ctx, src.add(a)?)?;
        let f = self.ffn.forward(ctx, x)?;
        let x = self.norm2.forward(ctx, x.add(f)?)?;
        let mut out = Vec::with_capacity(levels.len());
        let mut start = 0;
        for &(h, w) in &shapes {
            let part = x.narrow(1, start, h * w)?.permute(&[0, 2, 1])?.reshape([b, d, h, w])?;
            out.push(part);
            start += h * w;
        }
        Ok(out)
    }

    /// `ReLU(BN(Conv3x3(Conv1x1(level_1_4) + Up(enhanced_1_8))))`.
    pub fn fuse_mask_features<'g, T: Scalar>(
        &self,
        ctx: &Ctx<'g, T>,
        fine: Var<'g, T>,
        enhanced: Var<'g, T>,
    ) -> Result<Var<'g, T>> {
        let lat = self.lateral.forward(ctx, fine)?;
        let up = enhanced.upsample_bilinear(2)?;
        if lat.shape() != up.shape() {
            return shape_err("mask fusion", format!("{:?} vs {:?}", lat.shape(), up.shape()));
        }
        let x = self.fuse_conv.forward(ctx, lat.add(up)?)?;
        Ok(self.fuse_bn.forward(ctx, x)?.relu())
    }

    pub fn forward<'g, T: Scalar>(&self, ctx: &Ctx<'g, T>, f_vit: Var<'g, T>) -> Result<HierOutput<'g, T>> {
        let pyramid = self.build_pyramid(ctx, f_vit)?;
        let projected = self
            .proj
            .iter()
            .zip(&pyramid.levels[1..])
            .map(|((conv, norm), &l)| norm.forward_channels(ctx, conv.forward(ctx, l)?))
            .collect::<Result<Vec<_>>>()?;
        let enhanced = self.deformable_encoder(ctx, &projected)?;
        let mask = self.fuse_mask_features(ctx, pyramid.levels[0], enhanced[0])?;
        let sources = enhanced.into_iter().rev().collect();
        Ok(HierOutput { pyramid, sources, mask })
    }
}

/// Normalized pixel centers of every token at its own level, repeated for
/// every level: `[B, S, L, 2]`.
pub fn reference_points<T: Scalar>(batch: usize, shapes: &[(usize, usize)]) -> Tensor<T> {
    let nl = shapes.len();
    let mut one = Vec::new();
    for &(h, w) in shapes {
        for y in 0..h {
            for x in 0..w {
                let px = T::c((x as f64 + 0.5) / w as f64);
                let py = T::c((y as f64 + 0.5) / h as f64);
                for _ in 0..nl {
                    one.push(px);
                    one.push(py);
                }
            }
        }
    }
    let s = one.len() / (2 * nl);
    let data: Vec<T> = (0..batch).flat_map(|_| one.iter().copied()).collect();
    Tensor::new(vec![batch, s, nl, 2], data).expect("reference point layout")
}
