use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Linear warm-up from 0 to `lr_init`, then cosine annealing down to `lr_min`
/// at `total_steps`. Steps outside `[0, total_steps]` are clamped.
pub fn schedule_lr(step: usize, warmup_steps: usize, total_steps: usize, lr_init: f64, lr_min: f64) -> f64 {
    let step = step.min(total_steps);
    if step < warmup_steps {
        return lr_init * step as f64 / warmup_steps as f64;
    }
    let span = total_steps.saturating_sub(warmup_steps);
    if span == 0 {
        return lr_init;
    }
    let progress = (step - warmup_steps) as f64 / span as f64;
    lr_min + 0.5 * (lr_init - lr_min) * (1.0 + (PI * progress).cos())
}

/// True once the earliest minimum of `history` is at least `patience` epochs old.
pub fn early_stop_check(history: &[f64], patience: usize) -> Result<bool> {
    if history.is_empty() {
        return Err(Error::contract("early stopping needs at least one validation loss"));
    }
    if patience == 0 {
        return Err(Error::config("patience must be at least 1"));
    }
    let best = history
        .iter()
        .enumerate()
        .fold(0, |best, (i, &x)| if x < history[best] { i } else { best });
    Ok(history.len() - 1 - best >= patience)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_end_is_initial_rate() {
        assert_eq!(schedule_lr(100, 100, 1000, 0.001, 1e-5), 0.001);
        assert_eq!(schedule_lr(0, 100, 1000, 0.001, 1e-5), 0.0);
        assert!((schedule_lr(50, 100, 1000, 0.001, 1e-5) - 0.0005).abs() < 1e-18);
    }

    #[test]
    fn cosine_endpoints() {
        assert!((schedule_lr(1000, 100, 1000, 0.001, 1e-5) - 1e-5).abs() < 1e-18);
        let mid = schedule_lr(550, 100, 1000, 0.001, 1e-5);
        assert!((mid - (0.001 + 1e-5) / 2.0).abs() < 1e-15);
        assert_eq!(schedule_lr(5000, 100, 1000, 0.001, 1e-5), schedule_lr(1000, 100, 1000, 0.001, 1e-5));
    }

    #[test]
    fn early_stop_examples() {
        assert!(!early_stop_check(&[1.0, 0.9, 0.8], 10).unwrap());
        let mut h = vec![0.1];
        h.extend([0.2; 10]);
        assert!(early_stop_check(&h, 10).unwrap());
        assert!(!early_stop_check(&h[..10], 10).unwrap());
        assert!(early_stop_check(&[0.5, 0.5, 0.5], 2).unwrap());
        assert!(early_stop_check(&[], 2).is_err());
    }
}
