//! Architecture descriptions. Everything needed to build a model or count
//! its cost analytically lives here.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Refiner + width-to-depth + slim mask decoder.
    Plainseg,
    /// Feature pyramid + deformable encoder layer + mask decoder.
    PlainsegHier,
    /// 1x1 convolution on the last encoder feature.
    Linear,
    /// Two bilinear 2x steps, each followed by conv-BN-ReLU, then a 1x1 classifier.
    SimpleUpsample,
}

impl Variant {
    pub fn is_mask_classification(self) -> bool {
        matches!(self, Variant::Plainseg | Variant::PlainsegHier)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PosEmbed {
    /// Learned table added to the token sequence (MAE style).
    Absolute,
    /// Learned per-layer relative bias inside attention (BEiT style).
    Relative,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViTConfig {
    pub img_size: usize,
    pub patch_size: usize,
    pub in_chans: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
    pub pos_embed: PosEmbed,
    pub drop_path_rate: f64,
}

impl ViTConfig {
    pub fn beit_base(img_size: usize) -> Self {
        Self {
            img_size,
            patch_size: 16,
            in_chans: 3,
            embed_dim: 768,
            depth: 12,
            num_heads: 12,
            mlp_ratio: 4,
            pos_embed: PosEmbed::Relative,
            drop_path_rate: 0.1,
        }
    }

    pub fn beit_large(img_size: usize) -> Self {
        Self { embed_dim: 1024, depth: 24, num_heads: 16, drop_path_rate: 0.3, ..Self::beit_base(img_size) }
    }

    pub fn tiny() -> Self {
        Self {
            img_size: 64,
            patch_size: 8,
            in_chans: 3,
            embed_dim: 64,
            depth: 4,
            num_heads: 4,
            mlp_ratio: 4,
            pos_embed: PosEmbed::Relative,
            drop_path_rate: 0.0,
        }
    }

    /// Token grid side for the configured image size.
    pub fn grid(&self) -> usize {
        self.img_size / self.patch_size
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patch_size == 0 || self.img_size == 0 || !self.img_size.is_multiple_of(self.patch_size) {
            return bad(format!("img_size {} not divisible by patch_size {}", self.img_size, self.patch_size));
        }
        if self.num_heads == 0 || !self.embed_dim.is_multiple_of(self.num_heads) {
            return bad(format!("embed_dim {} not divisible by num_heads {}", self.embed_dim, self.num_heads));
        }
        if self.depth == 0 || self.mlp_ratio == 0 || self.in_chans == 0 {
            return bad("depth, mlp_ratio and in_chans must be positive".into());
        }
        if !(0.0..1.0).contains(&self.drop_path_rate) {
            return bad(format!("drop_path_rate {} outside [0, 1)", self.drop_path_rate));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderConfig {
    pub width: usize,
    pub num_layers: usize,
    pub num_queries: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
}

impl DecoderConfig {
    pub fn base(num_layers: usize) -> Self {
        Self { width: 256, num_layers, num_queries: 100, num_heads: 8, ffn_dim: 2048 }
    }

    pub fn tiny(num_layers: usize) -> Self {
        Self { width: 32, num_layers, num_queries: 20, num_heads: 4, ffn_dim: 128 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HierConfig {
    pub deform_heads: usize,
    pub deform_points: usize,
    pub deform_ffn_dim: usize,
}

impl Default for HierConfig {
    fn default() -> Self {
        Self { deform_heads: 8, deform_points: 4, deform_ffn_dim: 1024 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    pub num_classes: usize,
    pub encoder: ViTConfig,
    /// Number of cross-attention feature groups (PlainSeg only).
    pub groups: usize,
    pub decoder: DecoderConfig,
    #[serde(default)]
    pub hier: HierConfig,
}

impl ModelConfig {
    /// PlainSeg over BEiT-B at 512x512, 150 classes.
    pub fn plainseg_base() -> Self {
        Self {
            variant: Variant::Plainseg,
            num_classes: 150,
            encoder: ViTConfig::beit_base(512),
            groups: 3,
            decoder: DecoderConfig::base(6),
            hier: HierConfig::default(),
        }
    }

    pub fn plainseg_large() -> Self {
        Self {
            encoder: ViTConfig::beit_large(640),
            groups: 4,
            decoder: DecoderConfig::base(8),
            ..Self::plainseg_base()
        }
    }

    pub fn hier_base() -> Self {
        Self { variant: Variant::PlainsegHier, decoder: DecoderConfig::base(9), ..Self::plainseg_base() }
    }

    pub fn hier_large() -> Self {
        Self { variant: Variant::PlainsegHier, decoder: DecoderConfig::base(6), ..Self::plainseg_large() }
    }

    /// Same backbone and layout with the decoder widened to the encoder width.
    pub fn wide_decoder(mut self) -> Self {
        let c = self.encoder.embed_dim;
        self.decoder.width = c;
        self.decoder.ffn_dim = 4 * c;
        self.decoder.num_heads = self.encoder.num_heads;
        self
    }

    pub fn simple_upsample_base() -> Self {
        Self { variant: Variant::SimpleUpsample, ..Self::plainseg_base() }
    }

    pub fn linear_base() -> Self {
        Self { variant: Variant::Linear, ..Self::plainseg_base() }
    }

    /// Desk-scale PlainSeg: patch 8 ViT with 64 channels and 4 layers.
    pub fn plainseg_tiny(num_classes: usize) -> Self {
        Self {
            variant: Variant::Plainseg,
            num_classes,
            encoder: ViTConfig::tiny(),
            groups: 2,
            decoder: DecoderConfig::tiny(4),
            hier: HierConfig { deform_heads: 4, deform_points: 4, deform_ffn_dim: 128 },
        }
    }

    pub fn hier_tiny(num_classes: usize) -> Self {
        Self { variant: Variant::PlainsegHier, decoder: DecoderConfig::tiny(6), ..Self::plainseg_tiny(num_classes) }
    }

    /// Number of feature sources the mask decoder cycles through.
    pub fn num_sources(&self) -> usize {
        match self.variant {
            Variant::PlainsegHier => 3,
            _ => self.groups,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        let bad = |m: String| Err(Error::Config(m));
        if self.num_classes < 2 {
            return bad(format!("num_classes {} must be at least 2", self.num_classes));
        }
        if !self.variant.is_mask_classification() {
            return Ok(());
        }
        let d = &self.decoder;
        let c = self.encoder.embed_dim;
        if d.width == 0 || d.num_heads == 0 || !d.width.is_multiple_of(d.num_heads) {
            return bad(format!("decoder width {} not divisible by {} heads", d.width, d.num_heads));
        }
        if d.num_queries == 0 || d.ffn_dim == 0 {
            return bad("decoder num_queries and ffn_dim must be positive".into());
        }
        match self.variant {
            Variant::Plainseg => {
                if self.groups == 0 || !c.is_multiple_of(self.groups) {
                    return bad(format!("encoder width {c} not divisible by {} groups", self.groups));
                }
            }
            _ => {
                let h = &self.hier;
                if !c.is_multiple_of(4) {
                    return bad(format!("encoder width {c} must be divisible by 4 for the pyramid"));
                }
                if h.deform_heads == 0 || !d.width.is_multiple_of(h.deform_heads) || h.deform_points == 0 {
                    return bad(format!(
                        "decoder width {} not divisible by {} deformable heads",
                        d.width, h.deform_heads
                    ));
                }
                if !self.encoder.grid().is_multiple_of(2) {
                    return bad(format!("token grid {} must be even for pooling", self.encoder.grid()));
                }
            }
        }
        let n = self.num_sources();
        if d.num_layers == 0 || !d.num_layers.is_multiple_of(n) {
            return bad(format!("decoder layers {} not a multiple of {n} sources", d.num_layers));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for cfg in [
            ModelConfig::plainseg_base(),
            ModelConfig::plainseg_large(),
            ModelConfig::hier_base(),
            ModelConfig::hier_large(),
            ModelConfig::plainseg_tiny(4),
            ModelConfig::hier_tiny(4),
            ModelConfig::plainseg_base().wide_decoder(),
        ] {
            cfg.validate().unwrap();
        }
    }

    #[test]
    fn layer_count_must_match_sources() {
        let mut cfg = ModelConfig::plainseg_base();
        cfg.decoder.num_layers = 7;
        assert!(cfg.validate().is_err());
    }
}
