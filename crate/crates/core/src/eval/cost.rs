//! Analytic parameter and MAC accounting.
//!
//! One MAC counts as one FLOP, the convention behind the decoder GFLOPs
//! figures this report is compared against. Norms, activations, biases and
//! interpolation are not counted.

use std::fmt;

use crate::error::{Error, Result};
use crate::model::vit::encoder_macs;
use crate::model::{
    HierNeck, LinearDecoder, MaskDecoder, ModelConfig, Refiner, SimpleUpsampleDecoder, Variant, VisionTransformer,
};

#[derive(Debug, Clone, PartialEq)]
pub struct CostReport {
    pub variant: Variant,
    pub input: (usize, usize),
    pub pretrained_params: usize,
    pub random_params: usize,
    pub encoder_macs: u64,
    pub head_macs: u64,
}

impl CostReport {
    pub fn total_params(&self) -> usize {
        self.pretrained_params + self.random_params
    }

    /// Random-init over pretrained parameters, in percent.
    pub fn rp_percent(&self) -> f64 {
        100.0 * self.random_params as f64 / self.pretrained_params as f64
    }

    pub fn head_gmacs(&self) -> f64 {
        self.head_macs as f64 / 1e9
    }

    pub fn encoder_gmacs(&self) -> f64 {
        self.encoder_macs as f64 / 1e9
    }

    /// `key=value` lines for scripts.
    pub fn to_key_values(&self) -> String {
        let v = serde_variant(self.variant);
        format!(
            "variant={v}\ninput={}x{}\ntotal_params={}\npretrained_params={}\nrandom_params={}\nrp_percent={:.2}\n\
             encoder_gmacs={:.3}\ndecoder_gmacs={:.3}\ntotal_gmacs={:.3}\nmac_convention=1MAC=1FLOP\n",
            self.input.0,
            self.input.1,
            self.total_params(),
            self.pretrained_params,
            self.random_params,
            self.rp_percent(),
            self.encoder_gmacs(),
            self.head_gmacs(),
            self.encoder_gmacs() + self.head_gmacs(),
        )
    }
}

fn serde_variant(v: Variant) -> &'static str {
    match v {
        Variant::Plainseg => "plainseg",
        Variant::PlainsegHier => "plainseg-hier",
        Variant::Linear => "linear",
        Variant::SimpleUpsample => "simple-upsample",
    }
}

impl fmt::Display for CostReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let m = |n: usize| n as f64 / 1e6;
        writeln!(f, "model        {} @ {}x{}", serde_variant(self.variant), self.input.0, self.input.1)?;
        writeln!(f, "params       {:.2}M total", m(self.total_params()))?;
        writeln!(f, "  pretrained {:.2}M", m(self.pretrained_params))?;
        writeln!(f, "  random     {:.2}M  (R/P {:.1}%)", m(self.random_params), self.rp_percent())?;
        writeln!(f, "GMACs        {:.2} decoder, {:.2} encoder", self.head_gmacs(), self.encoder_gmacs())?;
        write!(f, "note         1 MAC is reported as 1 FLOP")
    }
}

/// Head (randomly initialized) parameters.
pub fn head_params(cfg: &ModelConfig) -> usize {
    let c = cfg.encoder.embed_dim;
    let k = cfg.num_classes;
    match cfg.variant {
        Variant::Linear => LinearDecoder::num_params(c, k),
        Variant::SimpleUpsample => SimpleUpsampleDecoder::num_params(c, k),
        Variant::Plainseg => {
            Refiner::num_params(c, cfg.decoder.width, cfg.groups) + MaskDecoder::num_params(&cfg.decoder, k, cfg.groups)
        }
        Variant::PlainsegHier => HierNeck::num_params(cfg) + MaskDecoder::num_params(&cfg.decoder, k, 3),
    }
}

/// `(pretrained, random)` trainable parameter counts.
pub fn count_params(cfg: &ModelConfig) -> Result<(usize, usize)> {
    cfg.validate()?;
    Ok((VisionTransformer::num_params(&cfg.encoder), head_params(cfg)))
}

/// `(encoder, head)` MACs for an `h x w` input.
pub fn count_macs(cfg: &ModelConfig, h: usize, w: usize) -> Result<(u64, u64)> {
    cfg.validate()?;
    let p = cfg.encoder.patch_size;
    if !h.is_multiple_of(p) || !w.is_multiple_of(p) {
        return Err(Error::Config(format!("input {h}x{w} not divisible by patch {p}")));
    }
    let (gh, gw) = (h / p, w / p);
    let c = cfg.encoder.embed_dim;
    let k = cfg.num_classes;
    let d = cfg.decoder.width;
    let head = match cfg.variant {
        Variant::Linear => (gh * gw * c * k) as u64,
        Variant::SimpleUpsample => SimpleUpsampleDecoder::macs(c, k, gh, gw),
        Variant::Plainseg => {
            let sources = vec![4 * gh * gw; cfg.groups];
            Refiner::macs(c, d, cfg.groups, gh, gw) + MaskDecoder::macs(&cfg.decoder, k, &sources, 16 * gh * gw)
        }
        Variant::PlainsegHier => {
            let sources = [gh * gw / 4, gh * gw, 4 * gh * gw];
            HierNeck::macs(cfg, gh, gw) + MaskDecoder::macs(&cfg.decoder, k, &sources, 16 * gh * gw)
        }
    };
    Ok((encoder_macs(&cfg.encoder, h, w), head))
}

pub fn cost_report(cfg: &ModelConfig, h: usize, w: usize) -> Result<CostReport> {
    let (pretrained_params, random_params) = count_params(cfg)?;
    let (encoder_macs, head_macs) = count_macs(cfg, h, w)?;
    Ok(CostReport { variant: cfg.variant, input: (h, w), pretrained_params, random_params, encoder_macs, head_macs })
}
