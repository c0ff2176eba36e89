//! One optimization step: forward, set loss over all deep-supervision
//! outputs, backward, clip, per-group AdamW.

use serde::{Deserialize, Serialize};

use super::loss::{dense_ce_loss, mask_class_loss, GtSegmentation, LossParts, LossWeights};
use super::optim::{clip_grad_norm, AdamW, AdamWConfig};
use super::schedule::{build_lr_schedule, LrSchedule};
use crate::autograd::Graph;
use crate::error::{shape_err, Result};
use crate::model::{SegOutput, Segmenter};
use crate::nn::{Ctx, ParamGroup};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Optimization hyper-parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub layer_decay: f64,
    pub head_lr_scale: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub grad_clip: f64,
    pub warmup_iters: usize,
    pub iters: usize,
    pub batch_size: usize,
    /// Follow the decay exponent as written (shallow layers largest).
    pub literal_layer_index: bool,
    pub class_weight: f64,
    pub bce_weight: f64,
    pub dice_weight: f64,
    pub no_object_weight: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::base()
    }
}

impl TrainConfig {
    /// Base recipe for ViT-B backbones.
    pub fn base() -> Self {
        Self {
            lr: 3e-5,
            layer_decay: 0.9,
            head_lr_scale: 10.0,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip: 0.01,
            warmup_iters: 1500,
            iters: 80_000,
            batch_size: 16,
            literal_layer_index: false,
            class_weight: 2.0,
            bce_weight: 5.0,
            dice_weight: 5.0,
            no_object_weight: 0.1,
            seed: 0,
        }
    }

    /// Recipe for ViT-L backbones.
    pub fn large() -> Self {
        Self { lr: 2e-5, layer_decay: 0.95, ..Self::base() }
    }

    /// Settings that train the tiny models from scratch in a few minutes.
    pub fn tiny() -> Self {
        Self {
            lr: 1e-3,
            layer_decay: 1.0,
            head_lr_scale: 2.0,
            weight_decay: 0.01,
            grad_clip: 1.0,
            warmup_iters: 50,
            iters: 2000,
            batch_size: 4,
            ..Self::base()
        }
    }

    pub fn schedule(&self, depth: usize) -> Result<LrSchedule> {
        let mut s =
            build_lr_schedule(self.lr, self.layer_decay, self.head_lr_scale, depth, self.warmup_iters, self.iters)?;
        s.literal_index = self.literal_layer_index;
        Ok(s)
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            class: self.class_weight,
            bce: self.bce_weight,
            dice: self.dice_weight,
            no_object: self.no_object_weight,
        }
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig { beta1: self.beta1, beta2: self.beta2, eps: self.eps, weight_decay: self.weight_decay }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub iter: usize,
    pub loss: f64,
    /// Terms of the final prediction; zero for dense heads.
    pub parts: LossParts,
    pub grad_norm: f64,
    /// Learning rate of every group used at this step.
    pub lrs: Vec<(ParamGroup, f64)>,
}

impl StepReport {
    pub fn tsv_header(&self) -> String {
        let mut s = String::from("iter\tloss\tgrad_norm");
        for (g, _) in &self.lrs {
            s.push_str(&format!("\tlr_{g}"));
        }
        s
    }

    pub fn tsv_line(&self) -> String {
        let mut s = format!("{}\t{:.6}\t{:.6}", self.iter, self.loss, self.grad_norm);
        for (_, lr) in &self.lrs {
            s.push_str(&format!("\t{lr:.6e}"));
        }
        s
    }
}

/// Model, optimizer and schedule advancing together.
#[derive(Debug, Clone)]
pub struct Trainer<T: Scalar> {
    pub model: Segmenter<T>,
    pub optimizer: AdamW<T>,
    pub schedule: LrSchedule,
    pub config: TrainConfig,
    pub iter: usize,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model: Segmenter<T>, config: TrainConfig) -> Result<Self> {
        let schedule = config.schedule(model.config.encoder.depth)?;
        Ok(Self { optimizer: AdamW::new(config.adamw()), schedule, model, config, iter: 0 })
    }

    /// One step on `images [B, 3, H, W]` with `B` label maps of `H x W`.
    pub fn step(&mut self, images: &Tensor<T>, labels: &[Vec<u8>]) -> Result<StepReport> {
        let s = images.shape();
        if s.len() != 4 || labels.len() != s[0] {
            return shape_err("train step", format!("images {s:?} with {} label maps", labels.len()));
        }
        let (h, w) = (s[2], s[3]);
        let iter = self.iter;
        let factor = self.schedule.factor_at(iter)?;
        let weights = self.config.loss_weights();
        let graph = Graph::new();
        let (mut grads, loss, parts, updates) = {
            let ctx = Ctx::train(&graph, &self.model.store, self.config.seed ^ (iter as u64).wrapping_mul(0x9E37_79B9));
            let x = ctx.constant(images.clone());
            let (loss, parts) = match self.model.forward(&ctx, x)? {
                SegOutput::Dense(logits) => (dense_ce_loss(logits, labels, h, w)?, LossParts::default()),
                SegOutput::MaskClass(out) => {
                    let ms = out.last().mask_logits.shape();
                    let gts = labels
                        .iter()
                        .map(|l| GtSegmentation::from_labels(l, h, w, ms[2], ms[3], self.model.num_classes()))
                        .collect::<Result<Vec<_>>>()?;
                    mask_class_loss(&out, &gts, &weights)?
                }
            };
            let g = graph.backward(loss)?;
            (ctx.param_grads(&g), loss.value().item().to_f64().unwrap_or(f64::NAN), parts, ctx.take_buffer_updates())
        };
        let grad_norm = clip_grad_norm(&mut grads, self.config.grad_clip);
        let rates: Vec<f64> = self.model.store.iter().map(|(_, e)| self.schedule.peak_lr(e.group) * factor).collect();
        self.optimizer.step(&mut self.model.store, &grads, |id| rates[id.index()])?;
        for (id, v) in updates {
            self.model.store.set(id, v)?;
        }
        let lrs = self.schedule.groups().into_iter().map(|g| (g, self.schedule.peak_lr(g) * factor)).collect();
        self.iter += 1;
        Ok(StepReport { iter, loss, parts, grad_norm, lrs })
    }
}
