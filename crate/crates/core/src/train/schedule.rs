//! Layer-wise learning-rate decay with a head scale factor, linear warmup
//! and polynomial decay.

use crate::error::{Error, Result};
use crate::nn::ParamGroup;

#[derive(Debug, Clone, PartialEq)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub decay: f64,
    pub head_scale: f64,
    pub depth: usize,
    pub warmup_iters: usize,
    pub total_iters: usize,
    /// Layer `i` from the bottom gets `l * r^i` (shallow layers largest)
    /// instead of the usual `l * r^(L-i)`.
    pub literal_index: bool,
}

impl LrSchedule {
    pub fn multiplier(&self, group: ParamGroup) -> f64 {
        let l = self.depth as i32;
        let r = self.decay;
        match (group, self.literal_index) {
            (ParamGroup::Head, _) => self.head_scale,
            (ParamGroup::Embedding, false) => r.powi(l),
            (ParamGroup::EncoderLayer(i), false) => r.powi(l - i as i32),
            (ParamGroup::Embedding, true) => 1.0,
            (ParamGroup::EncoderLayer(i), true) => r.powi(i as i32),
        }
    }

    /// Peak learning rate of a group.
    pub fn peak_lr(&self, group: ParamGroup) -> f64 {
        self.base_lr * self.multiplier(group)
    }

    /// Fraction of the peak applied at `iter`: linear warmup to 1 at
    /// `warmup_iters`, then linear (power 1) decay to 0 at `total_iters`.
    pub fn factor_at(&self, iter: usize) -> Result<f64> {
        if iter > self.total_iters {
            return Err(Error::Invalid {
                op: "lr schedule",
                detail: format!("iteration {iter} beyond total {}", self.total_iters),
            });
        }
        if iter < self.warmup_iters {
            return Ok(iter as f64 / self.warmup_iters as f64);
        }
        let span = self.total_iters - self.warmup_iters;
        if span == 0 {
            return Ok(if iter < self.total_iters { 1.0 } else { 0.0 });
        }
        Ok(1.0 - (iter - self.warmup_iters) as f64 / span as f64)
    }

    pub fn lr_at(&self, iter: usize, group: ParamGroup) -> Result<f64> {
        Ok(self.peak_lr(group) * self.factor_at(iter)?)
    }

    /// All groups in order: embedding, layers 1..=L, head.
    pub fn groups(&self) -> Vec<ParamGroup> {
        let mut g = vec![ParamGroup::Embedding];
        g.extend((1..=self.depth).map(ParamGroup::EncoderLayer));
        g.push(ParamGroup::Head);
        g
    }
}

/// Validated schedule with the standard decay direction.
pub fn build_lr_schedule(
    base_lr: f64,
    decay: f64,
    head_scale: f64,
    depth: usize,
    warmup_iters: usize,
    total_iters: usize,
) -> Result<LrSchedule> {
    if !(base_lr > 0.0 && base_lr.is_finite()) {
        return Err(Error::Config(format!("learning rate {base_lr} must be positive")));
    }
    if !(decay > 0.0 && decay <= 1.0) {
        return Err(Error::Config(format!("layer decay {decay} outside (0, 1]")));
    }
    if !(head_scale > 1.0 && head_scale.is_finite()) {
        return Err(Error::Config(format!("head scale {head_scale} must be greater than 1")));
    }
    if depth == 0 {
        return Err(Error::Config("encoder depth must be positive".into()));
    }
    if warmup_iters > total_iters || total_iters == 0 {
        return Err(Error::Config(format!("warmup {warmup_iters} must not exceed total {total_iters} > 0")));
    }
    Ok(LrSchedule { base_lr, decay, head_scale, depth, warmup_iters, total_iters, literal_index: false })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn base_recipe() {
        let s = build_lr_schedule(3e-5, 0.9, 10.0, 12, 1500, 80_000).unwrap();
        assert!((s.peak_lr(ParamGroup::Head) - 3e-4).abs() <= 3e-4 * f64::EPSILON);
        assert_eq!(s.peak_lr(ParamGroup::EncoderLayer(12)), 3e-5);
        assert!((s.peak_lr(ParamGroup::EncoderLayer(1)) - 9.414e-6).abs() < 1e-9);
        assert!((s.peak_lr(ParamGroup::Embedding) - 8.473e-6).abs() < 1e-9);
    }

    #[test]
    fn endpoints() {
        let s = build_lr_schedule(1e-3, 0.9, 10.0, 4, 10, 100).unwrap();
        assert_eq!(s.factor_at(0).unwrap(), 0.0);
        assert_eq!(s.factor_at(10).unwrap(), 1.0);
        assert_eq!(s.factor_at(100).unwrap(), 0.0);
        assert!(s.factor_at(101).is_err());
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(build_lr_schedule(1e-3, 0.9, 1.0, 4, 0, 10).is_err());
        assert!(build_lr_schedule(1e-3, 1.5, 10.0, 4, 0, 10).is_err());
    }
}
