//! Data loading, the training loop and validation, as driven by a
//! [`RunConfig`].

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::eval::{predict_labels, ConfusionMatrix};
use crate::io::{batch, generate_sample, images_to_tensor, load_dataset, RunConfig, Sample};
use crate::model::Segmenter;
use crate::scalar::Scalar;
use crate::train::{StepReport, Trainer};

/// Train and validation samples for a run.
pub fn load_splits(cfg: &RunConfig) -> Result<(Vec<Sample>, Vec<Sample>)> {
    cfg.require_data()?;
    if let Some(spec) = &cfg.data.synthetic {
        let all = (0..spec.count).map(|i| generate_sample(spec, i)).collect::<Result<Vec<_>>>()?;
        let cut = spec.count - cfg.data.val_count;
        let mut train = all;
        let val = train.split_off(cut);
        return Ok((train, val));
    }
    let dir = cfg.data.train_dir.as_ref().ok_or_else(|| Error::Config("data.train_dir missing".into()))?;
    let train = load_dataset(dir)?;
    let val = match &cfg.data.val_dir {
        Some(d) => load_dataset(d)?,
        None => Vec::new(),
    };
    Ok((train, val))
}

/// Confusion matrix of `model` over `samples` using sliding windows.
pub fn evaluate<T: Scalar>(
    model: &Segmenter<T>,
    samples: &[Sample],
    crop: usize,
    stride: usize,
) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(model.num_classes());
    for s in samples {
        let x = images_to_tensor::<T>(&[&s.image])?;
        let pred = predict_labels(model, &x, crop, stride)?;
        cm.update(&s.labels.data, &pred)?;
    }
    Ok(cm)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Validation {
    pub iter: usize,
    pub miou: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitSummary {
    pub steps: usize,
    pub losses: Vec<f64>,
    pub validations: Vec<Validation>,
    /// Whether training stopped because the target mIoU was reached.
    pub reached_target: bool,
}

/// Deterministic epoch-shuffled mini-batches.
pub struct BatchSampler {
    order: Vec<usize>,
    pos: usize,
    batch: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    pub fn new(len: usize, batch: usize, seed: u64) -> Self {
        Self { order: (0..len).collect(), pos: len, batch: batch.min(len), rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn next_indices(&mut self) -> Vec<usize> {
        if self.pos + self.batch > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let out = self.order[self.pos..self.pos + self.batch].to_vec();
        self.pos += self.batch;
        out
    }
}

/// Runs up to `train.iters` steps, validating every `eval.every` iterations
/// (and at the end). Stops early once validation mIoU reaches `target`.
/// One tab-separated line per step goes to `log`.
pub fn fit<T: Scalar>(
    trainer: &mut Trainer<T>,
    cfg: &RunConfig,
    train: &[Sample],
    val: &[Sample],
    target: Option<f64>,
    mut log: impl Write,
) -> Result<FitSummary> {
    if train.is_empty() {
        return Err(Error::Config("no training images".into()));
    }
    let mut sampler = BatchSampler::new(train.len(), cfg.train.batch_size, cfg.train.seed);
    let mut summary = FitSummary { steps: 0, losses: Vec::new(), validations: Vec::new(), reached_target: false };
    let mut header = false;
    while trainer.iter < cfg.train.iters {
        let idx = sampler.next_indices();
        let samples: Vec<&Sample> = idx.iter().map(|&i| &train[i]).collect();
        let (x, y) = batch::<T>(&samples)?;
        let report: StepReport = trainer.step(&x, &y)?;
        if !report.loss.is_finite() {
            return Err(Error::Invalid {
                op: "train",
                detail: format!("non-finite loss at iteration {}", report.iter),
            });
        }
        if !header {
            writeln!(log, "{}", report.tsv_header())?;
            header = true;
        }
        writeln!(log, "{}", report.tsv_line())?;
        summary.losses.push(report.loss);
        summary.steps += 1;
        let done = trainer.iter == cfg.train.iters;
        let due = cfg.eval.every > 0 && trainer.iter.is_multiple_of(cfg.eval.every);
        if !val.is_empty() && (due || done) {
            let miou = evaluate(&trainer.model, val, cfg.eval.crop, cfg.eval.stride)?.miou()?;
            summary.validations.push(Validation { iter: trainer.iter, miou });
            if target.is_some_and(|t| miou >= t) {
                summary.reached_target = true;
                break;
            }
        }
    }
    Ok(summary)
}
