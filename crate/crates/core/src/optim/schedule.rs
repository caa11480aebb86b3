use crate::error::{Error, Result};
use std::f64::consts::PI;

/// Linear warmup from 0 to `base_lr`, then half-cosine decay to 0.
pub fn cosine_lr(step: u64, warmup_steps: u64, total_steps: u64, base_lr: f64) -> Result<f64> {
    if warmup_steps > total_steps {
        return Err(Error::invalid(
            "warmup_steps",
            format!("{warmup_steps} exceeds total {total_steps}"),
        ));
    }
    if step > total_steps {
        return Err(Error::invalid("step", format!("{step} exceeds total {total_steps}")));
    }
    if step < warmup_steps {
        return Ok(base_lr * step as f64 / warmup_steps as f64);
    }
    let span = total_steps - warmup_steps;
    if span == 0 {
        return Ok(base_lr);
    }
    let progress = (step - warmup_steps) as f64 / span as f64;
    Ok(0.5 * base_lr * (1.0 + (PI * progress).cos()))
}

/// Momentum-encoder coefficient rising from `start` to `end` along a half cosine.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmaSchedule {
    pub start: f64,
    pub end: f64,
    pub total_steps: u64,
}

impl EmaSchedule {
    pub fn new(total_steps: u64) -> Self {
        Self {
            start: 0.99,
            end: 1.0,
            total_steps,
        }
    }

    pub fn coefficient(&self, step: u64) -> f64 {
        if self.total_steps == 0 {
            return self.end;
        }
        let progress = (step.min(self.total_steps)) as f64 / self.total_steps as f64;
        self.end - (self.end - self.start) * 0.5 * (1.0 + (PI * progress).cos())
    }
}

/// `target ← coeff · target + (1 − coeff) · online`.
pub fn momentum_encoder_update(online: &[f64], target: &mut [f64], coeff: f64) -> Result<()> {
    if online.len() != target.len() {
        return Err(Error::ShapeMismatch {
            context: "momentum encoder",
            expected: vec![target.len()],
            actual: vec![online.len()],
        });
    }
    for (t, &o) in target.iter_mut().zip(online) {
        *t = coeff * *t + (1.0 - coeff) * o;
    }
    Ok(())
}
