use serde::{Deserialize, Serialize};

/// Linear warmup then cosine decay to zero, or a constant rate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub constant: bool,
}

impl Schedule {
    /// Warmup over `warmup_frac` of `total_steps`.
    pub fn warmup_cosine(base_lr: f64, total_steps: u64, warmup_frac: f64) -> Self {
        Self {
            base_lr,
            warmup_steps: (total_steps as f64 * warmup_frac).round() as u64,
            total_steps,
            constant: false,
        }
    }

    pub fn constant(base_lr: f64) -> Self {
        Self {
            base_lr,
            warmup_steps: 0,
            total_steps: 0,
            constant: true,
        }
    }

    /// Rate for zero-based `step`.
    pub fn lr(&self, step: u64) -> f64 {
        if self.constant {
            return self.base_lr;
        }
        if step < self.warmup_steps {
            return self.base_lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps).max(1);
        let progress = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        0.5 * self.base_lr * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// Batch-size scaling of a reference rate quoted for batch 256.
pub fn scale_lr(base_lr: f64, batch: usize) -> f64 {
    base_lr * batch as f64 / 256.0
}
