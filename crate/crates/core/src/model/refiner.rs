//! Decoders that consume the last ViT feature directly: the linear and
//! simple up-sampling baselines, and the PlainSeg refiner.

use crate::autograd::Var;
use crate::error::{invalid, Result};
use crate::nn::{Activation, BatchNorm2d, Conv2d, ConvParams, Ctx, LayerNorm, ParamBuilder};
use crate::scalar::Scalar;

/// Single 1x1 convolution `C -> K` at stride 16.
#[derive(Debug, Clone)]
pub struct LinearDecoder {
    pub cls: Conv2d,
}

impl LinearDecoder {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, in_ch: usize, num_classes: usize) -> Result<Self> {
        Ok(Self { cls: Conv2d::new(pb, "decode.cls", ConvParams::same(in_ch, num_classes, 1))? })
    }

    pub fn num_params(in_ch: usize, num_classes: usize) -> usize {
        ConvParams::same(in_ch, num_classes, 1).num_params()
    }

    pub fn forward<'g, T: Scalar>(&self, ctx: &Ctx<'g, T>, f_vit: Var<'g, T>) -> Result<Var<'g, T>> {
        self.cls.forward(ctx, f_vit)
    }
}

/// `Up -> Conv3x3-BN-ReLU -> Up -> Conv3x3-BN-ReLU -> Conv1x1`, stride 4 output.
#[derive(Debug, Clone)]
pub struct SimpleUpsampleDecoder {
    pub conv1: Conv2d,
    pub bn1: BatchNorm2d,
    pub conv2: Conv2d,
    pub bn2: BatchNorm2d,
    pub cls: Conv2d,
}

impl SimpleUpsampleDecoder {
    fn conv(c: usize) -> ConvParams {
        ConvParams::same(c, c, 3).bias(false)
    }

    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, in_ch: usize, num_classes: usize) -> Result<Self> {
        let mut pb = pb.sub("decode");
        Ok(Self {
            conv1: Conv2d::new(&mut pb, "conv1", Self::conv(in_ch))?,
            bn1: BatchNorm2d::new(&mut pb, "bn1", in_ch),
            conv2: Conv2d::new(&mut pb, "conv2", Self::conv(in_ch))?,
            bn2: BatchNorm2d::new(&mut pb, "bn2", in_ch),
            cls: Conv2d::new(&mut pb, "cls", ConvParams::same(in_ch, num_classes, 1))?,
        })
    }

    pub fn num_params(in_ch: usize, num_classes: usize) -> usize {
        2 * (Self::conv(in_ch).num_params() + BatchNorm2d::num_params(in_ch))
            + ConvParams::same(in_ch, num_classes, 1).num_params()
    }

    /// MACs for an input feature of `h x w` (stride 16).
    pub fn macs(in_ch: usize, num_classes: usize, h: usize, w: usize) -> u64 {
        Self::conv(in_ch).macs(2 * h, 2 * w)
            + Self::conv(in_ch).macs(4 * h, 4 * w)
            + ConvParams::same(in_ch, num_classes, 1).macs(4 * h, 4 * w)
    }

    pub fn forward<'g, T: Scalar>(&self, ctx: &Ctx<'g, T>, f_vit: Var<'g, T>) -> Result<Var<'g, T>> {
        let x = f_vit.upsample_bilinear(2)?;
        let x = self.bn1.forward(ctx, self.conv1.forward(ctx, x)?)?.relu();
        let x = x.upsample_bilinear(2)?;
        let x = self.bn2.forward(ctx, self.conv2.forward(ctx, x)?)?.relu();
        self.cls.forward(ctx, x)
    }
}

/// Intermediate features of the refiner.
#[derive(Debug, Clone)]
pub struct RefinerOutput<'g, T: Scalar> {
    /// `[B, C, H/8, W/8]`
    pub refine: Var<'g, T>,
    /// `n` tensors `[B, D, H/8, W/8]`
    pub cross_attn: Vec<Var<'g, T>>,
    /// `[B, D, H/4, W/4]`
    pub mask: Var<'g, T>,
    /// Input of the 3x3 refinement conv, kept for feature dumps.
    pub pre_refine: Var<'g, T>,
}

#[derive(Debug, Clone)]
pub struct Refiner {
    pub in_ch: usize,
    pub width: usize,
    pub groups: usize,
    pub act: Activation,
    pub up_norm: LayerNorm,
    pub conv: Conv2d,
    pub norm: LayerNorm,
    pub group_conv: Conv2d,
    pub group_norm: LayerNorm,
    pub mask_conv: Conv2d,
    pub mask_bn: BatchNorm2d,
    pub mask_proj: Conv2d,
}

impl Refiner {
    fn refine_conv(c: usize) -> ConvParams {
        ConvParams::same(c, c, 3)
    }

    fn group_conv_params(c: usize, width: usize, groups: usize) -> ConvParams {
        ConvParams::same(c, groups * width, 3).groups(groups)
    }

    fn mask_conv_params(c: usize, width: usize) -> ConvParams {
        ConvParams::same(c, width, 3).bias(false)
    }

    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, in_ch: usize, width: usize, groups: usize) -> Result<Self> {
        if groups == 0 || !in_ch.is_multiple_of(groups) {
            return invalid("refiner", format!("{in_ch} channels not divisible by {groups} groups"));
        }
        let mut pb = pb.sub("refiner");
        Ok(Self {
            in_ch,
            width,
            groups,
            act: Activation::Gelu,
            up_norm: LayerNorm::new(&mut pb, "up_norm", in_ch),
            conv: Conv2d::new(&mut pb, "conv", Self::refine_conv(in_ch))?,
            norm: LayerNorm::new(&mut pb, "norm", in_ch),
            group_conv: Conv2d::new(&mut pb, "group_conv", Self::group_conv_params(in_ch, width, groups))?,
            group_norm: LayerNorm::new(&mut pb, "group_norm", groups * width),
            mask_conv: Conv2d::new(&mut pb, "mask_conv", Self::mask_conv_params(in_ch, width))?,
            mask_bn: BatchNorm2d::new(&mut pb, "mask_bn", width),
            mask_proj: Conv2d::new(&mut pb, "mask_proj", ConvParams::same(width, width, 1))?,
        })
    }

    pub fn num_params(in_ch: usize, width: usize, groups: usize) -> usize {
        2 * LayerNorm::num_params(in_ch)
            + Self::refine_conv(in_ch).num_params()
            + Self::group_conv_params(in_ch, width, groups).num_params()
            + LayerNorm::num_params(groups * width)
            + Self::mask_conv_params(in_ch, width).num_params()
            + BatchNorm2d::num_params(width)
            + ConvParams::same(width, width, 1).num_params()
    }

    /// MACs for an input feature of `h x w` (stride 16).
    pub fn macs(in_ch: usize, width: usize, groups: usize, h: usize, w: usize) -> u64 {
        let (h8, w8, h4, w4) = (2 * h, 2 * w, 4 * h, 4 * w);
        Self::refine_conv(in_ch).macs(h8, w8)
            + Self::group_conv_params(in_ch, width, groups).macs(h8, w8)
            + Self::mask_conv_params(in_ch, width).macs(h4, w4)
            + ConvParams::same(width, width, 1).macs(h4, w4)
    }

    /// `Act(Norm(Conv3x3(Norm(Up(F_vit)))))`, also returning the conv input.
    pub fn refine<'g, T: Scalar>(&self, ctx: &Ctx<'g, T>, f_vit: Var<'g, T>) -> Result<(Var<'g, T>, Var<'g, T>)> {
        let up = f_vit.upsample_bilinear(2)?;
        let pre = self.up_norm.forward_channels(ctx, up)?;
        let x = self.conv.forward(ctx, pre)?;
        let x = self.norm.forward_channels(ctx, x)?;
        Ok((self.act.apply(x), pre))
    }

    /// `Split(Norm(GroupConv3x3(F_refine)))` into `groups` tensors.
    pub fn width_to_depth<'g, T: Scalar>(&self, ctx: &Ctx<'g, T>, refine: Var<'g, T>) -> Result<Vec<Var<'g, T>>> {
        let x = self.group_conv.forward(ctx, refine)?;
        let x = self.group_norm.forward_channels(ctx, x)?;
        x.split(1, self.groups)
    }

    /// `Conv1x1(ReLU(BN(Conv3x3(Up(F_refine)))))`.
    pub fn mask_feature<'g, T: Scalar>(&self, ctx: &Ctx<'g, T>, refine: Var<'g, T>) -> Result<Var<'g, T>> {
        let x = refine.upsample_bilinear(2)?;
        let x = self.mask_conv.forward(ctx, x)?;
        let x = self.mask_bn.forward(ctx, x)?.relu();
        self.mask_proj.forward(ctx, x)
    }

    pub fn forward<'g, T: Scalar>(&self, ctx: &Ctx<'g, T>, f_vit: Var<'g, T>) -> Result<RefinerOutput<'g, T>> {
        let (refine, pre_refine) = self.refine(ctx, f_vit)?;
        let cross_attn = self.width_to_depth(ctx, refine)?;
        let mask = self.mask_feature(ctx, refine)?;
        Ok(RefinerOutput { refine, cross_attn, mask, pre_refine })
    }
}
