//! Files: images, synthetic datasets, checkpoints, run configs and feature
//! dumps.

pub mod checkpoint;
pub mod dump;
pub mod pnm;
pub mod run_config;
pub mod synth;

pub use checkpoint::{Checkpoint, LoadMode, LoadReport, Record};
pub use dump::{all_stages, channel_mean, dump_feature, to_gray, DumpStage};
pub use pnm::Image8;
pub use run_config::{DataConfig, EvalConfig, RunConfig};
pub use synth::{class_color, generate_dataset, generate_sample, load_dataset, Sample, ShapeKind, SyntheticSpec};

use crate::error::{shape_err, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Per-channel normalization applied to 8-bit pixels before the encoder.
pub const PIXEL_MEAN: f64 = 127.5;
pub const PIXEL_STD: f64 = 64.0;

/// Stacks RGB images into a normalized `[B, 3, H, W]` tensor.
pub fn images_to_tensor<T: Scalar>(images: &[&Image8]) -> Result<Tensor<T>> {
    let Some(first) = images.first() else {
        return shape_err("image batch", "empty batch");
    };
    let (h, w) = (first.height, first.width);
    let mut data = Vec::with_capacity(images.len() * 3 * h * w);
    for img in images {
        if img.channels != 3 || (img.height, img.width) != (h, w) {
            return shape_err("image batch", format!("{}x{}x{} vs {h}x{w}x3", img.height, img.width, img.channels));
        }
        for c in 0..3 {
            data.extend(img.data[c..].iter().step_by(3).map(|&v| T::c((v as f64 - PIXEL_MEAN) / PIXEL_STD)));
        }
    }
    Tensor::new(vec![images.len(), 3, h, w], data)
}

/// Images and label maps of a set of samples.
pub fn batch<T: Scalar>(samples: &[&Sample]) -> Result<(Tensor<T>, Vec<Vec<u8>>)> {
    let imgs: Vec<&Image8> = samples.iter().map(|s| &s.image).collect();
    Ok((images_to_tensor(&imgs)?, samples.iter().map(|s| s.labels.data.clone()).collect()))
}
