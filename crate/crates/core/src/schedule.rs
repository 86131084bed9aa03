//! Learning-rate schedule: linear warmup followed by cosine decay.

use alloc::format;

use crate::config::RunConfig;
use crate::error::{Error, Result};

/// Learning rate at `step` for a run of `total_steps` steps.
///
/// Ramps linearly from `min_lr` to `max_lr` over `warmup_steps`, then decays
/// along a half cosine from `max_lr` back to `min_lr` at `total_steps`.
pub fn cosine_warmup_lr(step: usize, cfg: &RunConfig) -> Result<f64> {
    lr_at(step, cfg.warmup_steps, cfg.total_steps, cfg.min_lr, cfg.max_lr)
}

pub fn lr_at(step: usize, warmup: usize, total: usize, min_lr: f64, max_lr: f64) -> Result<f64> {
    if step > total {
        return Err(Error::OutOfRange(format!("step {} beyond total_steps {}", step, total)));
    }
    if warmup > total {
        return Err(Error::Config(format!("warmup_steps {} exceeds total_steps {}", warmup, total)));
    }
    if step < warmup {
        return Ok(min_lr + (max_lr - min_lr) * step as f64 / warmup as f64);
    }
    let decay = total - warmup;
    if decay == 0 {
        return Ok(max_lr);
    }
    let progress = (step - warmup) as f64 / decay as f64;
    Ok(min_lr + (max_lr - min_lr) * 0.5 * (1.0 + num_traits::Float::cos(core::f64::consts::PI * progress)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(min_lr: f64, max_lr: f64, warmup: usize, total: usize) -> RunConfig {
        RunConfig {
            min_lr,
            max_lr,
            warmup_steps: warmup,
            total_steps: total,
            ..RunConfig::default()
        }
    }

    #[test]
    fn warmup_endpoints() {
        let c = cfg(1e-6, 2e-4, 10, 100);
        assert_eq!(cosine_warmup_lr(0, &c).unwrap(), 1e-6);
        assert_eq!(cosine_warmup_lr(10, &c).unwrap(), 2e-4);
        assert_eq!(cosine_warmup_lr(100, &c).unwrap(), 1e-6);
    }

    #[test]
    fn cosine_midpoint_is_half_of_max() {
        // (1 + cos(pi/2)) / 2 = 1/2
        let c = cfg(0.0, 0.4, 20, 120);
        let lr = cosine_warmup_lr(70, &c).unwrap();
        assert!((lr - 0.2).abs() < 1e-15, "{lr}");
    }

    #[test]
    fn step_beyond_total_is_an_error() {
        assert!(cosine_warmup_lr(101, &cfg(0.0, 1.0, 10, 100)).is_err());
    }

    #[test]
    fn continuous_at_end_of_warmup() {
        let c = cfg(1e-9, 2.4e-3, 1000, 100_000);
        let left = cosine_warmup_lr(999, &c).unwrap();
        let at = cosine_warmup_lr(1000, &c).unwrap();
        let right = cosine_warmup_lr(1001, &c).unwrap();
        assert_eq!(at, 2.4e-3);
        assert!((at - left).abs() < 2.5e-6 && (at - right).abs() < 1e-9);
    }
}
