//! Learning-rate schedule: linear warmup to the peak, optional hold, then
//! linear decay to zero. The pre-training preset uses 8% warmup / 92% decay.

use serde::{Deserialize, Serialize};

use super::NumkitError;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub peak_lr: f64,
    pub total_steps: u64,
    pub warmup_frac: f64,
    pub decay_frac: f64,
}

impl ScheduleConfig {
    /// The masked-prediction pre-training schedule: 8% warmup, 92% decay.
    pub fn pretrain(peak_lr: f64, total_steps: u64) -> Self {
        Self {
            peak_lr,
            total_steps,
            warmup_frac: 0.08,
            decay_frac: 0.92,
        }
    }

    pub fn validate(&self) -> Result<(), NumkitError> {
        if !(self.peak_lr.is_finite() && self.peak_lr > 0.0) {
            return Err(NumkitError::InvalidArgument(format!(
                "peak_lr must be positive, got {}",
                self.peak_lr
            )));
        }
        if self.total_steps == 0 {
            return Err(NumkitError::InvalidArgument("total_steps must be >= 1".into()));
        }
        if self.warmup_frac < 0.0 || self.decay_frac < 0.0 {
            return Err(NumkitError::InvalidArgument("schedule fractions must be >= 0".into()));
        }
        if self.warmup_frac + self.decay_frac > 1.0 + 1e-12 {
            return Err(NumkitError::InvalidArgument(format!(
                "warmup_frac + decay_frac = {} exceeds 1",
                self.warmup_frac + self.decay_frac
            )));
        }
        Ok(())
    }
}

/// Learning rate at `step`, 0 <= step <= total_steps.
pub fn lr_at(step: u64, cfg: &ScheduleConfig) -> Result<f64, NumkitError> {
    cfg.validate()?;
    if step > cfg.total_steps {
        return Err(NumkitError::StepOutOfRange {
            step,
            total: cfg.total_steps,
        });
    }
    let t = step as f64;
    let total = cfg.total_steps as f64;
    let warmup_end = cfg.warmup_frac * total;
    let decay_start = total - cfg.decay_frac * total;
    if t < warmup_end {
        Ok(cfg.peak_lr * t / warmup_end)
    } else if t > decay_start {
        Ok(cfg.peak_lr * (total - t) / (total - decay_start))
    } else {
        Ok(cfg.peak_lr)
    }
}
