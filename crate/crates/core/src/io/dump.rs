//! Grayscale dumps of intermediate feature maps.

use std::fmt;
use std::str::FromStr;

use super::pnm::Image8;
use crate::autograd::Graph;
use crate::error::{invalid, shape_err, Error, Result};
use crate::model::Segmenter;
use crate::nn::Ctx;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Where in the refiner to look. Groups are numbered from 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DumpStage {
    /// Up-sampled encoder feature entering the 3x3 convolution.
    PreRefine,
    /// Output of the 3x3 convolution, norm and activation.
    PostRefine,
    Group(usize),
}

impl FromStr for DumpStage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pre-refine" => Ok(DumpStage::PreRefine),
            "post-refine" => Ok(DumpStage::PostRefine),
            _ => s
                .strip_prefix("group-")
                .and_then(|i| i.parse().ok())
                .filter(|&i| i >= 1)
                .map(DumpStage::Group)
                .ok_or_else(|| Error::Invalid {
                    op: "dump stage",
                    detail: format!("unknown stage {s:?}; expected pre-refine, post-refine or group-<i>"),
                }),
        }
    }
}

impl fmt::Display for DumpStage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DumpStage::PreRefine => f.write_str("pre-refine"),
            DumpStage::PostRefine => f.write_str("post-refine"),
            DumpStage::Group(i) => write!(f, "group-{i}"),
        }
    }
}

/// Mean over channels of `[1, C, h, w]`.
pub fn channel_mean<T: Scalar>(t: &Tensor<T>) -> Result<(usize, usize, Vec<f64>)> {
    let s = t.shape();
    if s.len() != 4 || s[0] != 1 {
        return shape_err("channel mean", format!("expected [1, C, h, w], got {s:?}"));
    }
    let (c, hw) = (s[1], s[2] * s[3]);
    let mut out = vec![0.0; hw];
    for ch in t.data().chunks(hw) {
        for (o, v) in out.iter_mut().zip(ch) {
            *o += v.to_f64().unwrap();
        }
    }
    out.iter_mut().for_each(|v| *v /= c as f64);
    Ok((s[2], s[3], out))
}

/// Min-max normalization to 0..=255. A constant map becomes uniform 128.
pub fn to_gray(values: &[f64]) -> Vec<u8> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    if !(span > 0.0 && span.is_finite()) {
        return vec![128; values.len()];
    }
    values.iter().map(|v| ((v - lo) / span * 255.0).round() as u8).collect()
}

/// The channel-mean map of one refiner stage for a `[1, 3, H, W]` image.
pub fn dump_feature<T: Scalar>(model: &Segmenter<T>, image: &Tensor<T>, stage: DumpStage) -> Result<Image8> {
    let g = Graph::new();
    let ctx = Ctx::eval(&g, &model.store);
    let f = model.features(&ctx, ctx.constant(image.clone()))?;
    let Some(r) = f.refiner else {
        return invalid("dump stage", format!("{stage} needs a model with a refiner, got {:?}", model.config.variant));
    };
    let t = match stage {
        DumpStage::PreRefine => r.pre_refine,
        DumpStage::PostRefine => r.refine,
        DumpStage::Group(i) => match r.cross_attn.get(i.wrapping_sub(1)) {
            Some(v) => *v,
            None => return invalid("dump stage", format!("{stage} but the refiner has {} groups", r.cross_attn.len())),
        },
    };
    let (h, w, mean) = channel_mean(&t.value())?;
    Image8::new(w, h, 1, to_gray(&mean))
}

/// Every stage the model supports: both refine stages then each group.
pub fn all_stages<T: Scalar>(model: &Segmenter<T>) -> Vec<DumpStage> {
    let mut v = vec![DumpStage::PreRefine, DumpStage::PostRefine];
    if model.config.variant == crate::model::Variant::Plainseg {
        v.extend((1..=model.config.groups).map(DumpStage::Group));
    }
    v
}
