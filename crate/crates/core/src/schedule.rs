//! Learning-rate schedules and the batch-size ramp.
//!
//! All three schedulers are pure step -> value functions. WSD ramps linearly
//! to `eta` over the warmup, holds the plateau until `stable_end`, then
//! decays exponentially with an explicit half-life. The cosine forms
//! interpolate `eta -> floor_frac * eta` over one period; the looped variant
//! keeps oscillating past the period instead of clamping.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ScheduleError {
    #[error("step {step} outside schedule range [1, {total}]")]
    StepOutOfRange { step: u64, total: u64 },
    #[error("invalid schedule: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Wsd,
    Cosine,
    CosineLoop,
}

/// Full description of a learning-rate schedule.
///
/// `warmup_end` is W, `stable_end` is T (the cosine period for the cosine
/// kinds), `total` is S. `half_life` only matters for WSD decay.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub kind: ScheduleKind,
    pub eta: f64,
    pub warmup_end: u64,
    pub stable_end: u64,
    pub total: u64,
    pub half_life: u64,
    #[serde(default = "default_floor_frac")]
    pub floor_frac: f64,
}

fn default_floor_frac() -> f64 {
    0.1
}

impl ScheduleSpec {
    pub fn wsd(eta: f64, warmup_end: u64, stable_end: u64, total: u64, half_life: u64) -> Self {
        Self {
            kind: ScheduleKind::Wsd,
            eta,
            warmup_end,
            stable_end,
            total,
            half_life,
            floor_frac: default_floor_frac(),
        }
    }

    pub fn cosine(eta: f64, warmup_end: u64, period: u64, total: u64) -> Self {
        Self {
            kind: ScheduleKind::Cosine,
            eta,
            warmup_end,
            stable_end: period,
            total,
            half_life: 1,
            floor_frac: default_floor_frac(),
        }
    }

    pub fn cosine_loop(eta: f64, warmup_end: u64, period: u64, total: u64) -> Self {
        Self {
            kind: ScheduleKind::CosineLoop,
            ..Self::cosine(eta, warmup_end, period, total)
        }
    }

    pub fn validate(&self) -> Result<(), ScheduleError> {
        if !(self.eta > 0.0) {
            return Err(ScheduleError::Invalid(format!("eta must be > 0, got {}", self.eta)));
        }
        if self.warmup_end > self.stable_end || self.stable_end > self.total {
            return Err(ScheduleError::Invalid(format!(
                "need warmup_end <= stable_end <= total, got {} / {} / {}",
                self.warmup_end, self.stable_end, self.total
            )));
        }
        if self.half_life == 0 {
            return Err(ScheduleError::Invalid("half_life must be > 0".into()));
        }
        if !(self.floor_frac > 0.0 && self.floor_frac < 1.0) {
            return Err(ScheduleError::Invalid(format!(
                "floor_frac must be in (0, 1), got {}",
                self.floor_frac
            )));
        }
        Ok(())
    }

    /// Learning rate at step `s`, 1-based, `s` in `[1, total]`.
    pub fn lr_at(&self, s: u64) -> Result<f64, ScheduleError> {
        if s < 1 || s > self.total {
            return Err(ScheduleError::StepOutOfRange {
                step: s,
                total: self.total,
            });
        }
        Ok(match self.kind {
            ScheduleKind::Wsd => wsd_lr(self, s),
            ScheduleKind::Cosine => cosine_lr(self, s),
            ScheduleKind::CosineLoop => cosine_loop_lr(self, s),
        })
    }
}

fn warmup(spec: &ScheduleSpec, s: u64) -> f64 {
    s as f64 / spec.warmup_end as f64 * spec.eta
}

/// Warmup-Stable-Decay: s/W * eta, then eta, then 0.5^((s-T)/half_life) * eta.
pub fn wsd_lr(spec: &ScheduleSpec, s: u64) -> f64 {
    if s < spec.warmup_end {
        warmup(spec, s)
    } else if s <= spec.stable_end {
        spec.eta
    } else {
        let delta = (s - spec.stable_end) as f64;
        0.5f64.powf(delta / spec.half_life as f64) * spec.eta
    }
}

fn cosine_body(spec: &ScheduleSpec, s: u64) -> f64 {
    let f = spec.floor_frac;
    let phase = std::f64::consts::PI * s as f64 / spec.stable_end as f64;
    spec.eta * (f + (1.0 - f) * 0.5 * (1.0 + phase.cos()))
}

/// Cosine interpolation eta -> floor_frac * eta over one period, clamped at
/// the floor afterwards.
pub fn cosine_lr(spec: &ScheduleSpec, s: u64) -> f64 {
    if s < spec.warmup_end {
        warmup(spec, s)
    } else if s <= spec.stable_end {
        cosine_body(spec, s)
    } else {
        spec.floor_frac * spec.eta
    }
}

/// Same cosine expression with no clamp past the period: the schedule keeps
/// cycling back up to eta.
pub fn cosine_loop_lr(spec: &ScheduleSpec, s: u64) -> f64 {
    if s < spec.warmup_end {
        warmup(spec, s)
    } else {
        cosine_body(spec, s)
    }
}

/// Step-indexed batch-size segments: `(start_step, tokens_per_step)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchRamp {
    pub segments: Vec<(u64, u64)>,
}

impl BatchRamp {
    pub fn constant(tokens: u64) -> Self {
        Self {
            segments: vec![(1, tokens)],
        }
    }

    pub fn validate(&self) -> Result<(), ScheduleError> {
        if self.segments.is_empty() {
            return Err(ScheduleError::Invalid("batch ramp has no segments".into()));
        }
        if self.segments[0].0 != 1 {
            return Err(ScheduleError::Invalid(
                "batch ramp must start at step 1".into(),
            ));
        }
        for w in self.segments.windows(2) {
            if w[1].0 <= w[0].0 {
                return Err(ScheduleError::Invalid(
                    "batch ramp steps must be strictly increasing".into(),
                ));
            }
        }
        if self.segments.iter().any(|&(_, size)| size == 0) {
            return Err(ScheduleError::Invalid("batch sizes must be positive".into()));
        }
        Ok(())
    }

    /// Tokens per step at step `s`: the last segment whose start <= s.
    pub fn tokens_at(&self, s: u64) -> u64 {
        let mut size = self.segments[0].1;
        for &(start, tokens) in &self.segments {
            if start <= s {
                size = tokens;
            } else {
                break;
            }
        }
        size
    }
}
