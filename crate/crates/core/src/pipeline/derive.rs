//! Engine-side derivations: every method quantity the verifier computes
//! itself from raw runtime outputs, identically for both sides.
//!
//! A derived quantity is `None` when it cannot be formed because an input
//! is already reported by a dedicated check (for example the logits, or the
//! DPO reference log-probs); the dependent check is then omitted rather
//! than failing a second time for the same root cause.

use ndarray::{Array2, Array3, ArrayView3, Axis};

use crate::artifact::{ArtifactSet, ArtifactValue, Bottom, FailureReason, TensorArtifact};
use crate::contract::{
    derived, names, AccumulationSupport, DpoLossType, EquivalenceContract, Method, PpoValueMode,
};
use crate::kernels::{self, DpoInputs, KernelError};

/// Name of the micro-batch loss vector `[full, mean(left, right)]`.
pub const MICRO_BATCH_LOSSES: &str = "micro_batch_losses";

/// Raw observations of one runtime needed for derivations.
#[derive(Clone, Copy, Debug)]
pub struct SideInputs<'a> {
    pub batch: &'a ArtifactSet,
    pub forward: &'a ArtifactSet,
    pub params: Option<&'a ArtifactSet>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Derived {
    pub method_loss: Option<ArtifactValue>,
    pub log_probs: Option<ArtifactValue>,
    pub ref_log_probs: Option<ArtifactValue>,
    pub token_logprobs: Option<ArtifactValue>,
    pub advantages: Option<ArtifactValue>,
    pub returns: Option<ArtifactValue>,
    pub accumulation: Option<ArtifactValue>,
}

fn bottom(e: &KernelError) -> ArtifactValue {
    ArtifactValue::bottom(e.failure_reason(), e.to_string())
}

fn vector(name: &str, data: Vec<f64>) -> ArtifactValue {
    TensorArtifact::f32(name, vec![data.len()], data).into()
}

fn matrix(name: &str, a: &Array2<f64>) -> ArtifactValue {
    TensorArtifact::f32(name, vec![a.nrows(), a.ncols()], a.iter().copied()).into()
}

/// Logits as `[B,T,V]`; a flattened `[N,V]` tensor is reported as a batch
/// size disagreement against the labels.
fn logits3(t: &TensorArtifact, batch: usize) -> Result<Array3<f64>, KernelError> {
    match t.shape().len() {
        3 => Ok(kernels::view3(t)?.to_owned()),
        2 => Err(KernelError::BatchSizeMismatch { input: t.shape()[0], target: batch }),
        _ => Err(KernelError::Shape(format!("'{}' has shape {:?}, expected [B,T,V]", t.name(), t.shape()))),
    }
}

/// Last exposed hidden-state layer contracted with the value-head weight.
pub fn values_from_hidden(forward: &ArtifactSet, params: Option<&ArtifactSet>) -> Result<Array2<f64>, KernelError> {
    let layer = forward
        .tensors()
        .filter_map(|t| {
            let idx = t.name().strip_prefix(names::HIDDEN_STATES_PREFIX)?.parse::<usize>().ok()?;
            Some((idx, t))
        })
        .max_by_key(|(i, _)| *i)
        .map(|(_, t)| t)
        .ok_or(KernelError::MissingValues)?;
    let head = params.and_then(|p| p.tensor(names::VALUE_HEAD_PARAM).ok()).ok_or(KernelError::MissingValues)?;
    let h = kernels::view3(layer)?;
    let u = head.data();
    if u.len() != h.len_of(Axis(2)) {
        return Err(KernelError::Shape(format!(
            "value head has {} weights for hidden size {}",
            u.len(),
            h.len_of(Axis(2))
        )));
    }
    let (b, t, _) = h.dim();
    Ok(Array2::from_shape_fn((b, t), |(i, j)| h.slice(ndarray::s![i, j, ..]).iter().zip(u).map(|(x, w)| x * w).sum()))
}

/// How the PPO value mode of a reference is derived from its observations.
pub fn derive_value_mode(forward: &ArtifactSet, params: Option<&ArtifactSet>) -> PpoValueMode {
    if forward.has_tensor(names::VALUES) {
        PpoValueMode::OutputField
    } else if values_from_hidden(forward, params).is_ok() {
        PpoValueMode::HiddenStatesValueHead
    } else {
        PpoValueMode::Missing
    }
}

struct Inputs {
    logits: Array3<f64>,
    labels: Array2<i64>,
    mask: Array2<f64>,
    ref_logits: Option<Array3<f64>>,
    values: Option<Array2<f64>>,
}

impl Inputs {
    fn rows(&self, rows: &[usize]) -> Inputs {
        Inputs {
            logits: self.logits.select(Axis(0), rows),
            labels: self.labels.select(Axis(0), rows),
            mask: self.mask.select(Axis(0), rows),
            ref_logits: self.ref_logits.as_ref().map(|r| r.select(Axis(0), rows)),
            values: self.values.as_ref().map(|v| v.select(Axis(0), rows)),
        }
    }
}

fn seq_logps(logits: ArrayView3<f64>, labels: &Array2<i64>) -> Result<Vec<f64>, KernelError> {
    kernels::sequence_logprobs(logits, labels.view())
}

fn method_loss(contract: &EquivalenceContract, x: &Inputs) -> Result<f64, KernelError> {
    match contract.method() {
        Method::Sft => kernels::shifted_causal_ce(x.logits.view(), x.labels.view()),
        Method::Dpo => {
            let ref_logps = match &x.ref_logits {
                Some(r) => Some(seq_logps(r.view(), &x.labels)?),
                None => None,
            };
            kernels::dpo_loss(&DpoInputs {
                policy_logps: seq_logps(x.logits.view(), &x.labels)?,
                ref_logps,
                lengths: kernels::supervised_lengths(x.labels.view()),
                settings: contract.config().dpo,
            })
        }
        Method::Ppo => {
            let values = x.values.as_ref().ok_or(KernelError::MissingValues)?;
            let a = kernels::time_axis_normalize(x.logits.view(), Some(values.view()), x.labels.view(), x.mask.view())?;
            let v = a.values.expect("values passed through");
            Ok(kernels::ppo_method_loss(a.logits.view(), v.view(), a.labels.view(), a.mask.view())?.loss)
        }
    }
}

/// Row halves for the micro-batch split; DPO splits pairs, keeping each
/// chosen row with its rejected partner.
fn halves(method: Method, rows: usize) -> (Vec<usize>, Vec<usize>) {
    if method == Method::Dpo {
        let pairs = rows / 2;
        let cut = pairs / 2;
        let pick = |r: std::ops::Range<usize>| r.clone().chain(r.map(|i| i + pairs)).collect::<Vec<_>>();
        (pick(0..cut), pick(cut..pairs))
    } else {
        let cut = rows / 2;
        ((0..cut).collect(), (cut..rows).collect())
    }
}

fn accumulation(contract: &EquivalenceContract, x: &Inputs, full: f64) -> ArtifactValue {
    let (left, right) = halves(contract.method(), x.labels.nrows());
    let pair = method_loss(contract, &x.rows(&left)).and_then(|l| Ok((l, method_loss(contract, &x.rows(&right))?)));
    match pair {
        Ok((l, r)) => vector(MICRO_BATCH_LOSSES, vec![full, (l + r) / 2.0]),
        Err(e) => bottom(&e),
    }
}

/// Compute every derived quantity of the contract's method for one side.
pub fn derive(contract: &EquivalenceContract, side: SideInputs<'_>) -> Derived {
    let mut out = Derived::default();
    let (Ok(logits_t), Ok(labels_t)) = (side.forward.tensor(names::LOGITS), side.batch.tensor(names::LABELS)) else {
        return out;
    };
    let labels = match kernels::labels2(labels_t) {
        Ok(l) => l,
        Err(e) => {
            out.method_loss = Some(bottom(&e));
            return out;
        }
    };
    let logits = match logits3(logits_t, labels.nrows()) {
        Ok(l) => l,
        Err(e) => {
            out.method_loss = Some(bottom(&e));
            return out;
        }
    };
    let mask = side
        .batch
        .tensor(names::ATTENTION_MASK)
        .ok()
        .and_then(|m| kernels::view2(m).ok().map(|v| v.to_owned()))
        .unwrap_or_else(|| Array2::ones(labels.dim()));
    let mut x = Inputs { logits, labels, mask, ref_logits: None, values: None };
    let method = contract.method();
    let mut loss_available = true;

    match method {
        Method::Sft => {}
        Method::Dpo => {
            out.log_probs = Some(match seq_logps(x.logits.view(), &x.labels) {
                Ok(v) => vector(derived::LOG_PROBS, v),
                Err(e) => bottom(&e),
            });
            let sigmoid = contract.config().dpo.loss_type == DpoLossType::Sigmoid;
            match side.forward.tensor(names::REF_LOGITS) {
                Ok(t) => match logits3(t, x.labels.nrows()).and_then(|r| {
                    let lp = seq_logps(r.view(), &x.labels)?;
                    Ok((r, lp))
                }) {
                    Ok((r, lp)) => {
                        x.ref_logits = Some(r);
                        out.ref_log_probs = Some(vector(derived::REF_LOG_PROBS, lp));
                    }
                    Err(e) => {
                        out.ref_log_probs = Some(bottom(&e));
                        loss_available = !sigmoid;
                    }
                },
                Err(b) => {
                    let b = if sigmoid && b.reason == FailureReason::MissingArtifact {
                        Bottom::new(FailureReason::MissingArtifact, KernelError::MissingRefLogps.to_string())
                    } else {
                        b
                    };
                    out.ref_log_probs = Some(b.into());
                    loss_available = !sigmoid;
                }
            }
        }
        Method::Ppo => {
            let values = match contract.ppo_value_mode() {
                Some(PpoValueMode::OutputField) => side
                    .forward
                    .tensor(names::VALUES)
                    .map_err(|_| KernelError::MissingValues)
                    .and_then(|v| Ok(kernels::view2(v)?.to_owned())),
                Some(PpoValueMode::HiddenStatesValueHead) => values_from_hidden(side.forward, side.params),
                Some(PpoValueMode::Missing) | None => Err(KernelError::MissingValues),
            };
            match values {
                Ok(v) => x.values = Some(v),
                Err(e) => {
                    out.method_loss = Some(bottom(&e));
                    loss_available = false;
                }
            }
            match kernels::time_axis_normalize(x.logits.view(), x.values.as_ref().map(|v| v.view()), x.labels.view(), x.mask.view()) {
                Ok(a) => {
                    out.token_logprobs = Some(
                        match kernels::ppo::token_logprobs(a.logits.view(), a.labels.view(), a.mask.view()) {
                            Ok(lp) => matrix(derived::TOKEN_LOGPROBS, &lp),
                            Err(e) => bottom(&e),
                        },
                    );
                    if let Some(v) = &a.values {
                        match kernels::ppo_method_loss(a.logits.view(), v.view(), a.labels.view(), a.mask.view()) {
                            Ok(p) => {
                                out.advantages = Some(matrix(derived::ADVANTAGES, &p.advantages));
                                out.returns = Some(matrix(derived::RETURNS, &p.returns));
                            }
                            Err(e) => {
                                out.method_loss = Some(bottom(&e));
                                loss_available = false;
                            }
                        }
                    }
                }
                Err(e) => {
                    out.method_loss = Some(bottom(&e));
                    loss_available = false;
                }
            }
        }
    }

    if loss_available {
        match method_loss(contract, &x) {
            Ok(full) => {
                out.method_loss = Some(TensorArtifact::scalar(derived::METHOD_LOSS, full).into());
                if *contract.gradient_accumulation() == AccumulationSupport::Supported {
                    out.accumulation = Some(accumulation(contract, &x, full));
                }
            }
            Err(e) => out.method_loss = Some(bottom(&e)),
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::contract::{BoundedConfig, ProbeKind};

    fn set(kind: ProbeKind, tensors: Vec<TensorArtifact>) -> ArtifactSet {
        let mut s = ArtifactSet::new(kind);
        for t in tensors {
            s.insert(t.name().to_string(), t);
        }
        s
    }

    #[test]
    fn dpo_halves_keep_pairs() {
        let (l, r) = halves(Method::Dpo, 8);
        assert_eq!(l, vec![0, 1, 4, 5]);
        assert_eq!(r, vec![2, 3, 6, 7]);
        let (l, r) = halves(Method::Sft, 4);
        assert_eq!((l, r), (vec![0, 1], vec![2, 3]));
    }

    #[test]
    fn sft_method_loss_is_uniform_ce() {
        let c = EquivalenceContract::build(BoundedConfig::reported_default(Method::Sft)).unwrap();
        let batch = set(ProbeKind::CollateBatch, vec![TensorArtifact::i64("labels", vec![1, 3], &[-100, 1, 0])]);
        let fwd = set(ProbeKind::Forward, vec![TensorArtifact::f32("logits", vec![1, 3, 2], vec![0.0; 6])]);
        let d = derive(&c, SideInputs { batch: &batch, forward: &fwd, params: None });
        let loss = d.method_loss.unwrap().as_tensor().unwrap().data()[0];
        assert!((loss - 2f64.ln()).abs() < 1e-7);
    }

    #[test]
    fn flattened_logits_report_batch_disagreement() {
        let c = EquivalenceContract::build(BoundedConfig::reported_default(Method::Sft)).unwrap();
        let batch = set(ProbeKind::CollateBatch, vec![TensorArtifact::i64("labels", vec![1, 3], &[-100, 1, 0])]);
        let fwd = set(ProbeKind::Forward, vec![TensorArtifact::f32("logits", vec![3, 2], vec![0.0; 6])]);
        let d = derive(&c, SideInputs { batch: &batch, forward: &fwd, params: None });
        let b = d.method_loss.unwrap().as_tensor().unwrap_err().clone();
        assert_eq!(b.reason, FailureReason::SchemaMismatch);
        assert_eq!(b.error, "Expected input batch_size (3) to match target batch_size (1).");
    }

    #[test]
    fn value_mode_derivation() {
        let with_values = set(ProbeKind::Forward, vec![TensorArtifact::f32("values", vec![1, 2], vec![0.0; 2])]);
        assert_eq!(derive_value_mode(&with_values, None), PpoValueMode::OutputField);
        let hidden = set(ProbeKind::Forward, vec![
            TensorArtifact::f32("hidden_states.0", vec![1, 2, 2], vec![9.0; 4]),
            TensorArtifact::f32("hidden_states.1", vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]),
        ]);
        let params = set(ProbeKind::ExportParams, vec![TensorArtifact::f32("v_head.weight", vec![2], vec![1.0, -1.0])]);
        assert_eq!(derive_value_mode(&hidden, Some(&params)), PpoValueMode::HiddenStatesValueHead);
        let v = values_from_hidden(&hidden, Some(&params)).unwrap();
        assert_eq!(v.iter().copied().collect::<Vec<_>>(), vec![-1.0, -1.0]);
        assert_eq!(derive_value_mode(&hidden, None), PpoValueMode::Missing);
    }
}
