//! Encoder, decoders and the assembled segmentation model.

pub mod config;
pub mod decoder;
pub mod hier;
pub mod refiner;
pub mod vit;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use config::{DecoderConfig, HierConfig, ModelConfig, PosEmbed, Variant, ViTConfig};
pub use decoder::{attention_mask_from, round_robin_sequence, MaskClassOutput, MaskDecoder, Prediction};
pub use hier::{FeaturePyramid, HierNeck, HierOutput};
pub use refiner::{LinearDecoder, Refiner, RefinerOutput, SimpleUpsampleDecoder};
pub use vit::VisionTransformer;

use crate::autograd::Var;
use crate::error::Result;
use crate::nn::{Ctx, ParamBuilder, ParamGroup, ParamStore};
use crate::scalar::Scalar;

// One per model; boxing the large variant buys nothing.
#[allow(clippy::large_enum_variant)]
#[derive(Debug, Clone)]
pub enum Head {
    Linear(LinearDecoder),
    SimpleUpsample(SimpleUpsampleDecoder),
    PlainSeg { refiner: Refiner, decoder: MaskDecoder },
    Hier { neck: HierNeck, decoder: MaskDecoder },
}

/// Raw model output.
#[derive(Debug, Clone)]
pub enum SegOutput<'g, T: Scalar> {
    /// Per-pixel class logits `[B, K, h, w]`.
    Dense(Var<'g, T>),
    MaskClass(MaskClassOutput<'g, T>),
}

/// Intermediate maps exposed for inspection.
#[derive(Debug, Clone)]
pub struct Features<'g, T: Scalar> {
    pub f_vit: Var<'g, T>,
    pub refiner: Option<RefinerOutput<'g, T>>,
    pub hier: Option<HierOutput<'g, T>>,
}

/// A ViT encoder plus one of the heads, owning its parameters.
#[derive(Debug, Clone)]
pub struct Segmenter<T: Scalar> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub encoder: VisionTransformer,
    pub head: Head,
}

impl<T: Scalar> Segmenter<T> {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pb = ParamBuilder::new(&mut store, &mut rng, ParamGroup::Head);
        let encoder = VisionTransformer::new(&mut pb, &config.encoder)?;
        let c = config.encoder.embed_dim;
        let k = config.num_classes;
        let d = config.decoder.width;
        let head = match config.variant {
            Variant::Linear => Head::Linear(LinearDecoder::new(&mut pb, c, k)?),
            Variant::SimpleUpsample => Head::SimpleUpsample(SimpleUpsampleDecoder::new(&mut pb, c, k)?),
            Variant::Plainseg => Head::PlainSeg {
                refiner: Refiner::new(&mut pb, c, d, config.groups)?,
                decoder: MaskDecoder::new(&mut pb, &config.decoder, k, config.groups)?,
            },
            Variant::PlainsegHier => Head::Hier {
                neck: HierNeck::new(&mut pb, c, d, &config.hier)?,
                decoder: MaskDecoder::new(&mut pb, &config.decoder, k, 3)?,
            },
        };
        Ok(Self { config: config.clone(), store, encoder, head })
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    /// Encoder and head intermediates for `[B, 3, H, W]` images.
    pub fn features<'g>(&self, ctx: &Ctx<'g, T>, images: Var<'g, T>) -> Result<Features<'g, T>> {
        let f_vit = self.encoder.forward(ctx, images)?;
        let (refiner, hier) = match &self.head {
            Head::PlainSeg { refiner, .. } => (Some(refiner.forward(ctx, f_vit)?), None),
            Head::Hier { neck, .. } => (None, Some(neck.forward(ctx, f_vit)?)),
            _ => (None, None),
        };
        Ok(Features { f_vit, refiner, hier })
    }

    pub fn forward<'g>(&self, ctx: &Ctx<'g, T>, images: Var<'g, T>) -> Result<SegOutput<'g, T>> {
        let f_vit = self.encoder.forward(ctx, images)?;
        Ok(match &self.head {
            Head::Linear(h) => SegOutput::Dense(h.forward(ctx, f_vit)?),
            Head::SimpleUpsample(h) => SegOutput::Dense(h.forward(ctx, f_vit)?),
            Head::PlainSeg { refiner, decoder } => {
                let r = refiner.forward(ctx, f_vit)?;
                SegOutput::MaskClass(decoder.forward(ctx, &r.cross_attn, r.mask)?)
            }
            Head::Hier { neck, decoder } => {
                let h = neck.forward(ctx, f_vit)?;
                SegOutput::MaskClass(decoder.forward(ctx, &h.sources, h.mask)?)
            }
        })
    }
}
