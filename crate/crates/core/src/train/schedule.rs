use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dsp::FeatureMatrix;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Epochs trained on `segment_phase1_s` segments.
    pub epochs_phase1: usize,
    pub segment_phase1_s: f64,
    /// Total epoch count including phase 1; later epochs use `segment_phase2_s`.
    pub epochs_total: usize,
    pub segment_phase2_s: f64,
    pub lr_min: f64,
    pub lr_max: f64,
    /// Length of one full triangle, in epochs.
    pub cycle_epochs: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            epochs_phase1: 50,
            segment_phase1_s: 5.0,
            epochs_total: 100,
            segment_phase2_s: 4.0,
            lr_min: 1e-5,
            lr_max: 1e-3,
            cycle_epochs: 10.0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(format!("training: {m}")));
        if self.batch_size < 2 {
            return fail("batch_size must be at least 2");
        }
        if self.epochs_phase1 > self.epochs_total {
            return fail("epochs_phase1 must not exceed epochs_total");
        }
        if !(self.segment_phase1_s > 0.0 && self.segment_phase2_s > 0.0) {
            return fail("segment durations must be positive");
        }
        if !(self.lr_min > 0.0 && self.lr_min < self.lr_max && self.lr_max.is_finite()) {
            return fail("need 0 < lr_min < lr_max");
        }
        if !(self.cycle_epochs > 0.0 && self.cycle_epochs.is_finite()) {
            return fail("cycle_epochs must be positive");
        }
        if !((0.0..1.0).contains(&self.adam_beta1) && (0.0..1.0).contains(&self.adam_beta2) && self.adam_eps > 0.0) {
            return fail("adam betas must lie in [0, 1) and eps must be positive");
        }
        Ok(())
    }

    pub fn segment_for_epoch(&self, epoch: usize) -> f64 {
        if epoch < self.epochs_phase1 {
            self.segment_phase1_s
        } else {
            self.segment_phase2_s
        }
    }
}

/// Cyclical triangular learning rate: `lr_min` at the start of each cycle,
/// `lr_max` half way through.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TriangularLr {
    pub lr_min: f64,
    pub lr_max: f64,
    pub period_steps: f64,
}

impl TriangularLr {
    pub fn new(cfg: &TrainConfig, steps_per_epoch: usize) -> Self {
        Self { lr_min: cfg.lr_min, lr_max: cfg.lr_max, period_steps: cfg.cycle_epochs * steps_per_epoch.max(1) as f64 }
    }

    pub fn at(&self, step: u64) -> f64 {
        let phase = (step as f64 / self.period_steps).fract();
        let height = 1.0 - (2.0 * phase - 1.0).abs();
        self.lr_min + (self.lr_max - self.lr_min) * height
    }
}

/// Frame count covering `duration_s` at the matrix's frame shift.
pub fn segment_frames(duration_s: f64, frame_shift_ms: f32) -> usize {
    let exact = duration_s * 1000.0 / frame_shift_ms as f64;
    // Guard against products like 0.3 * 1000 / 10 = 30.000000000000004.
    ((exact - 1e-9).ceil() as usize).max(1)
}

/// A random contiguous window of `duration_s`; shorter utterances repeat
/// cyclically from their first frame.
pub fn sample_segment<R: Rng + ?Sized>(feat: &FeatureMatrix, duration_s: f64, rng: &mut R) -> Result<FeatureMatrix> {
    if feat.frames() == 0 {
        return Err(Error::Dimension("cannot sample from an empty feature matrix".into()));
    }
    if !(duration_s > 0.0) {
        return Err(Error::Config(format!("segment duration must be positive, got {duration_s}")));
    }
    let len = segment_frames(duration_s, feat.frame_shift_ms);
    let start = if feat.frames() > len { rng.gen_range(0..=feat.frames() - len) } else { 0 };
    Ok(feat.cyclic_slice(start, len))
}
