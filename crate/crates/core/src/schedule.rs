//! Learning-rate schedule: linear warmup, then cosine decay.

use crate::config::TrainConfig;

/// Learning rate at optimizer step `step` (0-based).
///
/// Ramps linearly from 0 to `lr_init` over the warmup epochs, then follows a half
/// cosine down to `lr_final`, reached at the last step of the last epoch.
pub fn lr_schedule(step: usize, steps_per_epoch: usize, cfg: &TrainConfig) -> f64 {
    let warmup = cfg.warmup_epochs * steps_per_epoch;
    let last = (cfg.epochs * steps_per_epoch).saturating_sub(1);
    if step < warmup {
        return cfg.lr_init * step as f64 / warmup as f64;
    }
    if last <= warmup {
        return cfg.lr_init;
    }
    let t = ((step - warmup) as f64 / (last - warmup) as f64).min(1.0);
    // Written as a decrement from lr_init so t = 0 gives lr_init exactly.
    cfg.lr_init - (cfg.lr_init - cfg.lr_final) * 0.5 * (1.0 - (std::f64::consts::PI * t).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(epochs: usize, warmup_epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            warmup_epochs,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn key_points() {
        let c = cfg(13, 3);
        assert_eq!(lr_schedule(0, 10, &c), 0.0);
        assert_eq!(lr_schedule(30, 10, &c), 1e-4);
        assert!((lr_schedule(129, 10, &c) - 1e-6).abs() < 1e-12);
        assert!((lr_schedule(1000, 10, &c) - 1e-6).abs() < 1e-12);
    }

    #[test]
    fn cosine_midpoint() {
        // warmup ends at step 3 and the last step is 11, so step 7 is halfway.
        let v = lr_schedule(7, 3, &cfg(4, 1));
        assert!((v - (1e-4 + 1e-6) / 2.0).abs() < 1e-15, "{v}");
    }

    #[test]
    fn monotone_after_warmup() {
        let c = cfg(13, 3);
        let mut prev = f64::INFINITY;
        for s in 30..140 {
            let v = lr_schedule(s, 10, &c);
            assert!(v <= prev);
            prev = v;
        }
    }
}
