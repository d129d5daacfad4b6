//! Preference losses over chosen/rejected sequence log-probabilities.
//!
//! Rows are paired positionally: the first half of the batch holds the
//! chosen completions, the second half the rejected ones.

use super::KernelError;
use crate::contract::{DpoLossType, DpoSettings};

/// Clamp range for ORPO probabilities.
const ORPO_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct DpoInputs {
    pub policy_logps: Vec<f64>,
    pub ref_logps: Option<Vec<f64>>,
    /// Supervised token count per row, used for length normalization.
    pub lengths: Vec<usize>,
    pub settings: DpoSettings,
}

/// log σ(x), stable for large |x|.
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn mean_logp(logp: f64, len: usize) -> f64 {
    logp / len.max(1) as f64
}

pub fn dpo_loss(inputs: &DpoInputs) -> Result<f64, KernelError> {
    dpo_loss_with_grad(inputs).map(|(l, _)| l)
}

/// Preference loss and its gradient with respect to `policy_logps`.
pub fn dpo_loss_with_grad(inputs: &DpoInputs) -> Result<(f64, Vec<f64>), KernelError> {
    let rows = inputs.policy_logps.len();
    if rows == 0 || rows % 2 != 0 {
        return Err(KernelError::UnpairedBatch(rows));
    }
    if inputs.lengths.len() != rows {
        return Err(KernelError::Shape(format!("{} lengths for {rows} rows", inputs.lengths.len())));
    }
    let pairs = rows / 2;
    let s = &inputs.settings;
    let lp = &inputs.policy_logps;
    let mut grad = vec![0.0; rows];
    let mut total = 0.0;
    match s.loss_type {
        DpoLossType::Sigmoid => {
            let refs = inputs.ref_logps.as_ref().ok_or(KernelError::MissingRefLogps)?;
            if refs.len() != rows {
                return Err(KernelError::BatchSizeMismatch { input: rows, target: refs.len() });
            }
            let eps = s.label_smoothing;
            for i in 0..pairs {
                let (c, r) = (i, i + pairs);
                let h = (lp[c] - lp[r]) - (refs[c] - refs[r]);
                let z = s.beta * h;
                total += -(1.0 - eps) * log_sigmoid(z) - eps * log_sigmoid(-z);
                // d/dz: −(1−ε)σ(−z) + εσ(z)
                let dz = -(1.0 - eps) * sigmoid(-z) + eps * sigmoid(z);
                grad[c] = dz * s.beta / pairs as f64;
                grad[r] = -grad[c];
            }
        }
        DpoLossType::Orpo => {
            let log_odds = |g: f64| {
                let p = g.exp().clamp(ORPO_EPS, 1.0 - ORPO_EPS);
                // d log_odds / dg = p / (p (1 − p)) · dp/dg, zero while clamped
                let slope = if g.exp() > ORPO_EPS && g.exp() < 1.0 - ORPO_EPS { 1.0 / (1.0 - p) } else { 0.0 };
                ((p / (1.0 - p)).ln(), slope)
            };
            for i in 0..pairs {
                let (c, r) = (i, i + pairs);
                let (gc, gr) = (mean_logp(lp[c], inputs.lengths[c]), mean_logp(lp[r], inputs.lengths[r]));
                let ((oc, sc), (or, sr)) = (log_odds(gc), log_odds(gr));
                let z = oc - or;
                total -= log_sigmoid(z);
                let dz = -sigmoid(-z) / pairs as f64;
                grad[c] = dz * sc / inputs.lengths[c].max(1) as f64;
                grad[r] = -dz * sr / inputs.lengths[r].max(1) as f64;
            }
        }
        DpoLossType::Simpo => {
            for i in 0..pairs {
                let (c, r) = (i, i + pairs);
                let (gc, gr) = (mean_logp(lp[c], inputs.lengths[c]), mean_logp(lp[r], inputs.lengths[r]));
                let z = s.beta * (gc - gr) - s.simpo_margin;
                total -= log_sigmoid(z);
                let dz = -sigmoid(-z) * s.beta / pairs as f64;
                grad[c] = dz / inputs.lengths[c].max(1) as f64;
                grad[r] = -dz / inputs.lengths[r].max(1) as f64;
            }
        }
    }
    Ok((total / pairs as f64, grad))
}
