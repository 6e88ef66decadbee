//! Learning-rate and teacher-EMA schedules.

use std::f64::consts::PI;

/// Linear warmup from zero to `lr_max`, then cosine decay to `lr_min`.
pub fn lr_schedule(
    step: usize,
    total_steps: usize,
    warmup_steps: usize,
    lr_max: f64,
    lr_min: f64,
) -> f64 {
    if warmup_steps > 0 && step < warmup_steps {
        return lr_max * step as f64 / warmup_steps as f64;
    }
    if total_steps <= warmup_steps {
        return lr_min;
    }
    let t = ((step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64).clamp(0.0, 1.0);
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (PI * t).cos())
}

/// Teacher EMA momentum ramping from `start` to `end` on a cosine.
pub fn ema_momentum(step: usize, total_steps: usize, start: f64, end: f64) -> f64 {
    if total_steps == 0 {
        return end;
    }
    let t = (step as f64 / total_steps as f64).clamp(0.0, 1.0);
    end - 0.5 * (end - start) * (1.0 + (PI * t).cos())
}
