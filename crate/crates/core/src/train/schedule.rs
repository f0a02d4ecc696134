use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Cyclic cosine annealing to zero, stepped per batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub base_lr: f64,
    pub cycle_epochs: usize,
    pub cycles: usize,
    pub steps_per_epoch: usize,
}

impl ScheduleConfig {
    pub fn cycle_len(&self) -> usize {
        self.cycle_epochs * self.steps_per_epoch
    }

    pub fn total_steps(&self) -> usize {
        self.cycles * self.cycle_len()
    }
}

/// `base_lr * (1 + cos(pi * t / T)) / 2` with `t` the step within the
/// current cycle of `T` steps.
pub fn cosine_lr(step: usize, schedule: &ScheduleConfig) -> Result<f64> {
    let total = schedule.total_steps();
    if step >= total {
        return Err(Error::StepOutOfRange { step, total });
    }
    let period = schedule.cycle_len();
    let t = step % period;
    Ok(schedule.base_lr * (1.0 + (PI * t as f64 / period as f64).cos()) / 2.0)
}
