use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    /// Linear warmup from `initial_lr` to `max_lr` over the first
    /// `warmup_fraction` of training, then cosine annealing to `final_lr`.
    OneCycle {
        total_steps: usize,
        max_lr: f64,
        initial_lr: f64,
        final_lr: f64,
        warmup_fraction: f64,
    },
    /// `initial_lr · (1 − step/total)^power`.
    Polynomial {
        total_steps: usize,
        initial_lr: f64,
        power: f64,
    },
    Constant { total_steps: usize, lr: f64 },
}

impl LrSchedule {
    /// One-cycle with max 0.1, start 0.01, end 1e-6, 1% warmup.
    pub fn one_cycle(total_steps: usize) -> Self {
        LrSchedule::OneCycle {
            total_steps,
            max_lr: 0.1,
            initial_lr: 0.01,
            final_lr: 1e-6,
            warmup_fraction: 0.01,
        }
    }

    /// Polynomial decay from 0.1 with power 0.9.
    pub fn polynomial(total_steps: usize) -> Self {
        LrSchedule::Polynomial {
            total_steps,
            initial_lr: 0.1,
            power: 0.9,
        }
    }

    pub fn total_steps(&self) -> usize {
        match *self {
            LrSchedule::OneCycle { total_steps, .. }
            | LrSchedule::Polynomial { total_steps, .. }
            | LrSchedule::Constant { total_steps, .. } => total_steps,
        }
    }

    /// Same schedule stretched over a different step budget.
    pub fn with_total_steps(mut self, steps: usize) -> Self {
        match &mut self {
            LrSchedule::OneCycle { total_steps, .. }
            | LrSchedule::Polynomial { total_steps, .. }
            | LrSchedule::Constant { total_steps, .. } => *total_steps = steps,
        }
        self
    }

    /// Step at which warmup ends (one-cycle only; 0 otherwise).
    pub fn warmup_steps(&self) -> f64 {
        match *self {
            LrSchedule::OneCycle {
                total_steps,
                warmup_fraction,
                ..
            } => warmup_fraction * total_steps as f64,
            _ => 0.0,
        }
    }

    pub fn lr_at(&self, step: usize) -> Result<f64> {
        let total = self.total_steps();
        if step > total {
            return Err(Error::Range(format!("step {step} beyond schedule length {total}")));
        }
        Ok(self.lr_at_f(step as f64))
    }

    /// Learning rate at a fractional step position.
    pub fn lr_at_f(&self, step: f64) -> f64 {
        match *self {
            LrSchedule::OneCycle {
                total_steps,
                max_lr,
                initial_lr,
                final_lr,
                ..
            } => {
                let total = total_steps as f64;
                let warm = self.warmup_steps();
                if step < warm {
                    initial_lr + (max_lr - initial_lr) * step / warm
                } else if total <= warm {
                    max_lr
                } else {
                    let t = ((step - warm) / (total - warm)).clamp(0.0, 1.0);
                    final_lr + 0.5 * (max_lr - final_lr) * (1.0 + (std::f64::consts::PI * t).cos())
                }
            }
            LrSchedule::Polynomial {
                total_steps,
                initial_lr,
                power,
            } => {
                if total_steps == 0 {
                    return initial_lr;
                }
                let frac = (1.0 - step / total_steps as f64).max(0.0);
                initial_lr * frac.powf(power)
            }
            LrSchedule::Constant { lr, .. } => lr,
        }
    }
}
