//! Poly learning-rate schedule with warmup (§4.2).

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WarmupMode {
    /// Ramp linearly from `warmup_factor·lr0` to `lr0`.
    #[default]
    Linear,
    /// Hold `warmup_factor·lr0` for the whole warmup.
    Constant,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub lr0: f64,
    pub power: f64,
    pub warmup_steps: usize,
    pub warmup_factor: f64,
    pub warmup_mode: WarmupMode,
    pub total_steps: usize,
}

impl LrSchedule {
    /// Learning rate used for update number `step` (0-based), for `step ≤ total_steps`.
    pub fn lr(&self, step: usize) -> f64 {
        let (w, s) = (self.warmup_steps, self.total_steps);
        if step < w {
            let f = self.warmup_factor;
            return match self.warmup_mode {
                WarmupMode::Linear => self.lr0 * (f + (1.0 - f) * step as f64 / w as f64),
                WarmupMode::Constant => self.lr0 * f,
            };
        }
        if s <= w {
            return self.lr0;
        }
        let progress = ((step - w) as f64 / (s - w) as f64).min(1.0);
        self.lr0 * (1.0 - progress).powf(self.power)
    }
}
