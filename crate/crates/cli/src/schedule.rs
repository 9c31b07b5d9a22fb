//! Learning-rate schedules. Ratio schedules for glancing live in the core
//! crate; the optimizer itself is schedule-free and reads `lr` each step.

use crate::config::{LrPolicy, OptimSection};

/// Learning rate for a (0-based) step.
pub fn learning_rate(optim: &OptimSection, step: u64) -> f64 {
    let s = (step + 1) as f64;
    match optim.lr_policy {
        LrPolicy::InvSqrt => {
            let w = optim.warmup_steps.max(1) as f64;
            optim.lr * (s / w).min((w / s).sqrt())
        }
        LrPolicy::Linear => {
            let total = optim.total_steps.max(1) as f64;
            optim.lr + (optim.lr_end - optim.lr) * (step as f64 / total)
        }
    }
}
