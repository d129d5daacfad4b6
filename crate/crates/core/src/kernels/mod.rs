//! Engine-side derivations of method quantities from raw runtime outputs.
//!
//! Every kernel is a pure f64 function over ndarray views; identical inputs
//! give bitwise-identical outputs.

use ndarray::{s, Array2, Array3, ArrayView1, ArrayView2, ArrayView3, Axis};
use thiserror::Error;

use crate::artifact::{ArtifactValue, TensorArtifact};
use crate::compare::{compare_tensors, CompareVerdict};
use crate::contract::ToleranceProfile;

pub mod dpo;
pub mod ppo;
pub mod schedule;

pub use dpo::{dpo_loss, dpo_loss_with_grad, DpoInputs};
pub use ppo::{gae, ppo_method_loss, ppo_synthetic_rewards, token_logprobs, PpoLoss, GAE_GAMMA, GAE_LAMBDA};
pub use schedule::{lr_schedule, ScheduleKind, Warmup};

/// Label value excluded from supervision.
pub const IGNORE_INDEX: i64 = -100;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KernelError {
    #[error("no supervised tokens")]
    NoSupervisedTokens,
    #[error("Expected input batch_size ({input}) to match target batch_size ({target}).")]
    BatchSizeMismatch { input: usize, target: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("label {label} outside vocabulary of size {vocab}")]
    LabelOutOfRange { label: i64, vocab: usize },
    #[error("ref log-probs required for sigmoid DPO loss")]
    MissingRefLogps,
    #[error("PPO model must return values.")]
    MissingValues,
    #[error("preference batch must hold chosen/rejected pairs, got {0} rows")]
    UnpairedBatch(usize),
    #[error("invalid schedule: {0}")]
    Schedule(String),
}

/// Stable log-softmax of one row.
pub fn log_softmax_row(row: ArrayView1<f64>) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|x| (x - m).exp()).sum::<f64>().ln() + m;
    row.iter().map(|x| x - lse).collect()
}

pub(crate) fn check_labels(logits: &ArrayView3<f64>, labels: &ArrayView2<i64>) -> Result<(), KernelError> {
    let (b, t, v) = logits.dim();
    let (lb, lt) = labels.dim();
    if b != lb {
        return Err(KernelError::BatchSizeMismatch { input: b, target: lb });
    }
    if t != lt {
        return Err(KernelError::Shape(format!("logits time axis {t} vs labels {lt}")));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l != IGNORE_INDEX && (l < 0 || l as usize >= v)) {
        return Err(KernelError::LabelOutOfRange { label: bad, vocab: v });
    }
    Ok(())
}

/// Shifted target of position `t`, if it is supervised.
#[inline]
pub(crate) fn shifted_label(labels: &ArrayView2<i64>, b: usize, t: usize) -> Option<usize> {
    let (_, len) = labels.dim();
    if t + 1 >= len {
        return None;
    }
    let l = labels[[b, t + 1]];
    (l != IGNORE_INDEX).then_some(l as usize)
}

/// Mean over supervised positions of −log softmax(logits[b,t])[labels[b,t+1]].
pub fn shifted_causal_ce(logits: ArrayView3<f64>, labels: ArrayView2<i64>) -> Result<f64, KernelError> {
    shifted_causal_ce_with_grad(logits, labels).map(|(loss, _)| loss)
}

/// Cross-entropy together with its gradient with respect to the logits.
pub fn shifted_causal_ce_with_grad(
    logits: ArrayView3<f64>,
    labels: ArrayView2<i64>,
) -> Result<(f64, Array3<f64>), KernelError> {
    check_labels(&logits, &labels)?;
    let (b, t, _) = logits.dim();
    let mut grad = Array3::zeros(logits.dim());
    let mut total = 0.0;
    let mut count = 0usize;
    for bi in 0..b {
        for ti in 0..t {
            let Some(target) = shifted_label(&labels, bi, ti) else { continue };
            let lp = log_softmax_row(logits.slice(s![bi, ti, ..]));
            total -= lp[target];
            count += 1;
            let mut g = grad.slice_mut(s![bi, ti, ..]);
            for (gv, l) in g.iter_mut().zip(&lp) {
                *gv = l.exp();
            }
            g[target] -= 1.0;
        }
    }
    if count == 0 {
        return Err(KernelError::NoSupervisedTokens);
    }
    let n = count as f64;
    grad.mapv_inplace(|g| g / n);
    Ok((total / n, grad))
}

/// Per-row sum of gathered log-probabilities over supervised positions.
pub fn sequence_logprobs(logits: ArrayView3<f64>, labels: ArrayView2<i64>) -> Result<Vec<f64>, KernelError> {
    check_labels(&logits, &labels)?;
    let (b, t, _) = logits.dim();
    Ok((0..b)
        .map(|bi| {
            (0..t)
                .filter_map(|ti| {
                    shifted_label(&labels, bi, ti).map(|target| log_softmax_row(logits.slice(s![bi, ti, ..]))[target])
                })
                .sum()
        })
        .collect())
}

/// Number of supervised positions per row.
pub fn supervised_lengths(labels: ArrayView2<i64>) -> Vec<usize> {
    let (b, t) = labels.dim();
    (0..b).map(|bi| (0..t).filter(|&ti| shifted_label(&labels, bi, ti).is_some()).count()).collect()
}

/// Gradient of Σ_b w[b]·logp[b] with respect to the logits.
pub fn sequence_logprobs_vjp(
    logits: ArrayView3<f64>,
    labels: ArrayView2<i64>,
    weights: &[f64],
) -> Result<Array3<f64>, KernelError> {
    check_labels(&logits, &labels)?;
    let (b, t, _) = logits.dim();
    if weights.len() != b {
        return Err(KernelError::Shape(format!("{} weights for {b} rows", weights.len())));
    }
    let mut grad = Array3::zeros(logits.dim());
    for bi in 0..b {
        for ti in 0..t {
            let Some(target) = shifted_label(&labels, bi, ti) else { continue };
            let lp = log_softmax_row(logits.slice(s![bi, ti, ..]));
            let mut g = grad.slice_mut(s![bi, ti, ..]);
            for (gv, l) in g.iter_mut().zip(&lp) {
                *gv = -weights[bi] * l.exp();
            }
            g[target] += weights[bi];
        }
    }
    Ok(grad)
}

/// Global ℓ2 norm over every element of every tensor.
pub fn global_grad_norm<'a>(grads: impl IntoIterator<Item = &'a [f64]>) -> f64 {
    let mut any = false;
    let mut sum = 0.0;
    for g in grads {
        any = true;
        sum += g.iter().map(|x| x * x).sum::<f64>();
    }
    if !any {
        log::warn!("global gradient norm over an empty parameter list");
    }
    sum.sqrt()
}

/// Tensors aligned on a common time axis.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeAligned {
    pub logits: Array3<f64>,
    pub values: Option<Array2<f64>>,
    pub labels: Array2<i64>,
    pub mask: Array2<f64>,
}

/// Truncate every tensor to the shortest time axis, keeping leading positions.
pub fn time_axis_normalize(
    logits: ArrayView3<f64>,
    values: Option<ArrayView2<f64>>,
    labels: ArrayView2<i64>,
    mask: ArrayView2<f64>,
) -> Result<TimeAligned, KernelError> {
    let b = logits.len_of(Axis(0));
    for target in [labels.nrows(), mask.nrows()].into_iter().chain(values.map(|v| v.nrows())) {
        if target != b {
            return Err(KernelError::BatchSizeMismatch { input: b, target });
        }
    }
    let t = [logits.len_of(Axis(1)), labels.ncols(), mask.ncols()]
        .into_iter()
        .chain(values.map(|v| v.ncols()))
        .min()
        .unwrap_or(0);
    if t == 0 {
        return Err(KernelError::Shape("empty time axis".into()));
    }
    Ok(TimeAligned {
        logits: logits.slice(s![.., ..t, ..]).to_owned(),
        values: values.map(|v| v.slice(s![.., ..t]).to_owned()),
        labels: labels.slice(s![.., ..t]).to_owned(),
        mask: mask.slice(s![.., ..t]).to_owned(),
    })
}

/// Compare a full-batch loss with the mean of its two micro-batch halves.
pub fn micro_batch_invariant(full: f64, left: f64, right: f64, tol: &ToleranceProfile) -> CompareVerdict {
    let r = TensorArtifact::new("loss_full", vec![1], crate::artifact::DType::F32, vec![full]).expect("length 1");
    let c = TensorArtifact::new("loss_accum", vec![1], crate::artifact::DType::F32, vec![(left + right) / 2.0])
        .expect("length 1");
    compare_tensors(&r, &c, tol)
}

/// Typed views over decoded artifacts.
pub fn view3(t: &TensorArtifact) -> Result<ArrayView3<'_, f64>, KernelError> {
    t.view()
        .into_dimensionality()
        .map_err(|_| KernelError::Shape(format!("'{}' has shape {:?}, expected 3 axes", t.name(), t.shape())))
}

pub fn view2(t: &TensorArtifact) -> Result<ArrayView2<'_, f64>, KernelError> {
    t.view()
        .into_dimensionality()
        .map_err(|_| KernelError::Shape(format!("'{}' has shape {:?}, expected 2 axes", t.name(), t.shape())))
}

pub fn labels2(t: &TensorArtifact) -> Result<Array2<i64>, KernelError> {
    Ok(view2(t)?.mapv(|x| x as i64))
}

/// Render a kernel error as a failure value for the comparator.
pub fn as_value(result: Result<TensorArtifact, KernelError>) -> ArtifactValue {
    match result {
        Ok(t) => ArtifactValue::Tensor(t),
        Err(e) => ArtifactValue::bottom(e.failure_reason(), e.to_string()),
    }
}

impl KernelError {
    pub fn failure_reason(&self) -> crate::artifact::FailureReason {
        use crate::artifact::FailureReason as F;
        match self {
            KernelError::NoSupervisedTokens | KernelError::MissingRefLogps | KernelError::MissingValues => {
                F::MissingArtifact
            }
            KernelError::BatchSizeMismatch { .. }
            | KernelError::Shape(_)
            | KernelError::LabelOutOfRange { .. }
            | KernelError::UnpairedBatch(_) => F::SchemaMismatch,
            KernelError::Schedule(_) => F::RuntimeError,
        }
    }
}
