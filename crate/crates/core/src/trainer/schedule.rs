use super::TrainConfig;
use crate::error::{Error, Result};

/// Number of linear warmup steps: `floor(warmup_fraction · total_steps)`.
pub fn warmup_steps(total_steps: usize, cfg: &TrainConfig) -> usize {
    (cfg.warmup_fraction * total_steps as f64).floor() as usize
}

/// Learning rate at `step` of `total_steps`: linear from 0 to `peak_lr` over
/// the warmup, then half-cosine down to exactly 0 at `total_steps`. The
/// training loop queries steps `1..=total_steps`.
pub fn lr_at(step: usize, total_steps: usize, cfg: &TrainConfig) -> Result<f64> {
    if step > total_steps {
        return Err(Error::Contract(format!("step {step} beyond total {total_steps}")));
    }
    let warm = warmup_steps(total_steps, cfg);
    if step < warm {
        return Ok(cfg.peak_lr * step as f64 / warm as f64);
    }
    if step == total_steps {
        return Ok(0.0);
    }
    let progress = (step - warm) as f64 / (total_steps - warm) as f64;
    Ok(cfg.peak_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}
