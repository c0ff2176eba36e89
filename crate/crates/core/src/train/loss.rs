//! Set-prediction loss for mask classification and per-pixel cross-entropy
//! for the dense baselines.

use super::matcher::hungarian;
use crate::autograd::Var;
use crate::error::{invalid, shape_err, Result};
use crate::eval::IGNORE_INDEX;
use crate::model::{MaskClassOutput, Prediction};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Ground truth of one image as a set of binary class masks at the
/// mask-prediction resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct GtSegmentation {
    pub height: usize,
    pub width: usize,
    pub classes: Vec<usize>,
    /// One `height * width` 0/1 mask per class entry.
    pub masks: Vec<Vec<bool>>,
    /// Pixels that take part in the loss (false where the label is ignored).
    pub valid: Vec<bool>,
}

impl GtSegmentation {
    /// Builds masks from a label map, sampling it at the centers of an
    /// `out_h x out_w` grid (nearest neighbour).
    pub fn from_labels(
        labels: &[u8],
        h: usize,
        w: usize,
        out_h: usize,
        out_w: usize,
        num_classes: usize,
    ) -> Result<Self> {
        if labels.len() != h * w || out_h == 0 || out_w == 0 {
            return shape_err("ground truth", format!("{} labels for {h}x{w}", labels.len()));
        }
        let sample = resize_labels_nearest(labels, h, w, out_h, out_w);
        let mut present = vec![false; num_classes];
        for &l in &sample {
            if l != IGNORE_INDEX {
                let l = l as usize;
                if l >= num_classes {
                    return invalid("ground truth", format!("label {l} outside {num_classes} classes"));
                }
                present[l] = true;
            }
        }
        let classes: Vec<usize> = (0..num_classes).filter(|&c| present[c]).collect();
        let masks = classes.iter().map(|&c| sample.iter().map(|&l| l as usize == c).collect()).collect();
        let valid = sample.iter().map(|&l| l != IGNORE_INDEX).collect();
        Ok(Self { height: out_h, width: out_w, classes, masks, valid })
    }

    pub fn num_masks(&self) -> usize {
        self.classes.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub class: f64,
    pub bce: f64,
    pub dice: f64,
    /// Cross-entropy weight of the "no object" class.
    pub no_object: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { class: 2.0, bce: 5.0, dice: 5.0, no_object: 0.1 }
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Matching cost `[num_gt, Nq]` for one image.
///
/// `class_logits` is `[Nq, K+1]`, `mask_logits` is `[Nq, h*w]` flattened.
pub fn matching_cost(
    class_logits: &[f64],
    mask_logits: &[f64],
    num_queries: usize,
    gt: &GtSegmentation,
    w: &LossWeights,
) -> Vec<f64> {
    let k1 = class_logits.len() / num_queries;
    let hw = gt.height * gt.width;
    let n_valid = gt.valid.iter().filter(|&&v| v).count().max(1) as f64;
    let probs: Vec<Vec<f64>> = class_logits
        .chunks(k1)
        .map(|row| {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|&v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(|v| v / s).collect()
        })
        .collect();
    let mut pos = vec![0.0; num_queries];
    let mut sig_sum = vec![0.0; num_queries];
    for q in 0..num_queries {
        let x = &mask_logits[q * hw..(q + 1) * hw];
        for (i, &xi) in x.iter().enumerate() {
            if gt.valid[i] {
                pos[q] += softplus(xi);
                sig_sum[q] += sigmoid(xi);
            }
        }
    }
    let mut cost = vec![0.0; gt.num_masks() * num_queries];
    for (g, (mask, &class)) in gt.masks.iter().zip(&gt.classes).enumerate() {
        let t_sum = mask.iter().zip(&gt.valid).filter(|(&m, &v)| m && v).count() as f64;
        for q in 0..num_queries {
            let x = &mask_logits[q * hw..(q + 1) * hw];
            let mut cross = 0.0;
            let mut inter = 0.0;
            for i in 0..hw {
                if mask[i] && gt.valid[i] {
                    cross += x[i];
                    inter += sigmoid(x[i]);
                }
            }
            let bce = (pos[q] - cross) / n_valid;
            let dice = 1.0 - (2.0 * inter + 1.0) / (sig_sum[q] + t_sum + 1.0);
            cost[g * num_queries + q] = -w.class * probs[q][class] + w.bce * bce + w.dice * dice;
        }
    }
    cost
}

/// Query index matched to each ground-truth mask, per image.
pub fn match_prediction<T: Scalar>(
    pred: &Prediction<'_, T>,
    gts: &[GtSegmentation],
    w: &LossWeights,
) -> Result<Vec<Vec<usize>>> {
    let cl = pred.class_logits.value();
    let ml = pred.mask_logits.value();
    let (b, nq, k1) = (cl.shape()[0], cl.shape()[1], cl.shape()[2]);
    if gts.len() != b {
        return shape_err("matcher", format!("{} targets for batch {b}", gts.len()));
    }
    let hw = ml.shape()[2] * ml.shape()[3];
    let cl = cl.to_f64();
    let ml = ml.to_f64();
    gts.iter()
        .enumerate()
        .map(|(i, gt)| {
            if gt.height * gt.width != hw {
                return shape_err("matcher", format!("target {}x{} vs {hw} mask pixels", gt.height, gt.width));
            }
            let cost =
                matching_cost(&cl[i * nq * k1..(i + 1) * nq * k1], &ml[i * nq * hw..(i + 1) * nq * hw], nq, gt, w);
            hungarian(&cost, gt.num_masks(), nq)
        })
        .collect()
}

/// Loss terms of one prediction, already weighted.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossParts {
    pub class: f64,
    pub bce: f64,
    pub dice: f64,
}

impl LossParts {
    pub fn total(&self) -> f64 {
        self.class + self.bce + self.dice
    }
}

/// Loss of one prediction under a given assignment (`assignment[i][g]` is
/// the query matched to mask `g` of image `i`).
pub fn prediction_loss<'g, T: Scalar>(
    pred: &Prediction<'g, T>,
    gts: &[GtSegmentation],
    assignment: &[Vec<usize>],
    w: &LossWeights,
) -> Result<(Var<'g, T>, LossParts)> {
    let cs = pred.class_logits.shape();
    let ms = pred.mask_logits.shape();
    let (b, nq, k1) = (cs[0], cs[1], cs[2]);
    let hw = ms[2] * ms[3];
    if gts.len() != b || assignment.len() != b {
        return shape_err("mask loss", format!("batch {b} vs {} targets", gts.len()));
    }
    let graph = pred.class_logits.graph();
    // classification: matched queries take their mask's class, others no-object
    let mut target = vec![k1 - 1; b * nq];
    for (i, (gt, a)) in gts.iter().zip(assignment).enumerate() {
        for (g, &q) in a.iter().enumerate() {
            target[i * nq + q] = gt.classes[g];
        }
    }
    let mut cw = vec![T::zero(); b * nq * k1];
    let mut weight_sum = 0.0;
    for (r, &t) in target.iter().enumerate() {
        let wt = if t == k1 - 1 { w.no_object } else { 1.0 };
        cw[r * k1 + t] = T::c(wt);
        weight_sum += wt;
    }
    let ce = pred
        .class_logits
        .log_softmax()?
        .mul(graph.constant(Tensor::from_parts(vec![b, nq, k1], cw)))?
        .sum()?
        .scale(T::c(-1.0 / weight_sum));
    let mut loss = ce.scale(T::c(w.class));
    let mut parts = LossParts { class: w.class * ce.value().item().to_f64().unwrap(), ..Default::default() };

    let num_masks: usize = gts.iter().map(GtSegmentation::num_masks).sum();
    if num_masks == 0 {
        return Ok((loss, parts));
    }
    let mut rows = Vec::with_capacity(num_masks);
    let mut t = Vec::with_capacity(num_masks * hw);
    let mut valid = Vec::with_capacity(num_masks * hw);
    let mut bce_w = Vec::with_capacity(num_masks * hw);
    for (i, (gt, a)) in gts.iter().zip(assignment).enumerate() {
        let n_valid = gt.valid.iter().filter(|&&v| v).count().max(1);
        for (g, &q) in a.iter().enumerate() {
            rows.push(i * nq + q);
            for p in 0..hw {
                let v = gt.valid[p];
                t.push(if gt.masks[g][p] && v { T::one() } else { T::zero() });
                valid.push(if v { T::one() } else { T::zero() });
                bce_w.push(if v { T::one() / T::of_usize(n_valid) } else { T::zero() });
            }
        }
    }
    let m = rows.len();
    let x = pred.mask_logits.reshape([b * nq, hw])?.index_select(&rows)?;
    let t = graph.constant(Tensor::from_parts(vec![m, hw], t));
    let valid = Tensor::from_parts(vec![m, hw], valid);
    let t_sum = graph.constant(Tensor::from_parts(vec![m], {
        let td = t.value();
        td.data().chunks(hw).map(|r| r.iter().copied().sum()).collect()
    }));
    let inv_masks = T::one() / T::of_usize(num_masks);
    let bce = x
        .softplus()
        .sub(x.mul(t)?)?
        .mul(graph.constant(Tensor::from_parts(vec![m, hw], bce_w)))?
        .sum()?
        .scale(inv_masks);
    let s = x.sigmoid().mul(graph.constant(valid))?;
    let num = s.mul(t)?.sum_axis(1)?.scale(T::c(2.0)).add_scalar(T::one());
    let den = s.sum_axis(1)?.add(t_sum)?.add_scalar(T::one());
    let dice = num.div(den)?.neg().add_scalar(T::one()).sum()?.scale(inv_masks);
    parts.bce = w.bce * bce.value().item().to_f64().unwrap();
    parts.dice = w.dice * dice.value().item().to_f64().unwrap();
    loss = loss.add(bce.scale(T::c(w.bce)))?.add(dice.scale(T::c(w.dice)))?;
    Ok((loss, parts))
}

/// Deep-supervised loss summed over every prediction, each with its own
/// matching. Returns the loss and the parts of the final prediction.
pub fn mask_class_loss<'g, T: Scalar>(
    output: &MaskClassOutput<'g, T>,
    gts: &[GtSegmentation],
    w: &LossWeights,
) -> Result<(Var<'g, T>, LossParts)> {
    let mut total: Option<Var<'g, T>> = None;
    let mut last = LossParts::default();
    for pred in &output.predictions {
        let assignment = match_prediction(pred, gts, w)?;
        let (l, parts) = prediction_loss(pred, gts, &assignment, w)?;
        total = Some(match total {
            Some(t) => t.add(l)?,
            None => l,
        });
        last = parts;
    }
    let total =
        total.ok_or_else(|| crate::error::Error::Invalid { op: "mask loss", detail: "no predictions".into() })?;
    Ok((total, last))
}

/// Mean per-pixel cross-entropy after resizing logits `[B, K, h, w]` to the
/// label resolution. Ignored pixels are left out.
pub fn dense_ce_loss<'g, T: Scalar>(logits: Var<'g, T>, labels: &[Vec<u8>], h: usize, w: usize) -> Result<Var<'g, T>> {
    let s = logits.shape();
    if s.len() != 4 || labels.len() != s[0] || labels.iter().any(|l| l.len() != h * w) {
        return shape_err("dense loss", format!("logits {s:?} vs {} label maps of {h}x{w}", labels.len()));
    }
    let (b, k) = (s[0], s[1]);
    let up = if (s[2], s[3]) == (h, w) { logits } else { logits.resize_bilinear(h, w)? };
    let logp = up.permute(&[0, 2, 3, 1])?.log_softmax()?;
    let mut onehot = vec![T::zero(); b * h * w * k];
    let mut n = 0usize;
    for (i, l) in labels.iter().enumerate() {
        for (p, &c) in l.iter().enumerate() {
            if c == IGNORE_INDEX {
                continue;
            }
            if c as usize >= k {
                return invalid("dense loss", format!("label {c} outside {k} classes"));
            }
            onehot[(i * h * w + p) * k + c as usize] = T::one();
            n += 1;
        }
    }
    let n = n.max(1);
    Ok(logp
        .mul(logits.graph().constant(Tensor::from_parts(vec![b, h, w, k], onehot)))?
        .sum()?
        .scale(T::c(-1.0 / n as f64)))
}

/// Nearest-neighbour resize of a label map, sampling source pixel centers.
pub fn resize_labels_nearest(labels: &[u8], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<u8> {
    (0..out_h)
        .flat_map(|y| {
            let sy = (((y as f64 + 0.5) * h as f64 / out_h as f64) as usize).min(h - 1);
            (0..out_w).map(move |x| {
                let sx = (((x as f64 + 0.5) * w as f64 / out_w as f64) as usize).min(w - 1);
                labels[sy * w + sx]
            })
        })
        .collect()
}
