//! Eight-step learning-rate vector from warmup and decay settings.

use serde::{Deserialize, Serialize};

use super::KernelError;
use crate::contract::LR_SCHEDULE_LEN;

#[derive(Serialize, Deserialize, Clone, Copy, Debug, PartialEq)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

#[derive(Serialize, Deserialize, Clone, Copy, Debug, PartialEq)]
#[serde(rename_all = "snake_case")]
pub enum Warmup {
    Steps(u32),
    Ratio(f64),
}

impl Warmup {
    pub fn resolve(self, total_steps: u32) -> u32 {
        match self {
            Warmup::Steps(w) => w,
            Warmup::Ratio(r) => (r * total_steps as f64).ceil() as u32,
        }
    }
}

pub fn lr_schedule(
    base_lr: f64,
    warmup: Warmup,
    kind: ScheduleKind,
    total_steps: u32,
) -> Result<[f64; LR_SCHEDULE_LEN], KernelError> {
    if !(base_lr.is_finite() && base_lr > 0.0) {
        return Err(KernelError::Schedule(format!("base_lr must be positive, got {base_lr}")));
    }
    if (total_steps as usize) < LR_SCHEDULE_LEN {
        return Err(KernelError::Schedule(format!("total_steps {total_steps} < {LR_SCHEDULE_LEN}")));
    }
    if let Warmup::Ratio(r) = warmup {
        if !(0.0..1.0).contains(&r) {
            return Err(KernelError::Schedule(format!("warmup ratio {r} outside [0, 1)")));
        }
    }
    let w = warmup.resolve(total_steps);
    if w == 0 {
        return Err(KernelError::Schedule("warmup must be at least one step".into()));
    }
    if w >= total_steps {
        return Err(KernelError::Schedule(format!("warmup {w} >= total_steps {total_steps}")));
    }
    let (w, total) = (w as f64, total_steps as f64);
    let mut out = [0.0; LR_SCHEDULE_LEN];
    for (t, lr) in out.iter_mut().enumerate() {
        let t = t as f64;
        *lr = if t < w {
            base_lr * (t + 1.0) / w
        } else {
            match kind {
                ScheduleKind::Linear => base_lr * (total - t) / (total - w),
                ScheduleKind::Cosine => base_lr * 0.5 * (1.0 + (std::f64::consts::PI * (t - w) / (total - w)).cos()),
            }
        };
    }
    Ok(out)
}
