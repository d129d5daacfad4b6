//! Reference-only preflight: the source runtime must be executable and
//! fully observable before any candidate is scored.

use serde_json::json;

use super::derive::{self, SideInputs};
use super::records::{CheckRecord, Stage, StageSummary};
use super::{set_of, Run};
use crate::artifact::{ArtifactSet, Bottom, FailureReason};
use crate::contract::{capabilities, names, Method, ProbeKind, LR_SCHEDULE_LEN};
use crate::kernels;
use crate::protocol::Request;
use crate::runtime::{ProbeResult, Role};

const S: Stage = Stage::Preflight;

fn require<'a>(r: &'a Option<ProbeResult>) -> Result<&'a ArtifactSet, &'a Bottom> {
    match r {
        Some(p) => p.artifacts.as_ref(),
        None => unreachable!("preflight probes always run"),
    }
}

/// A named tensor of a probe result, or the ⊥ standing in for it.
pub(crate) fn tensor_of<'a>(
    r: &'a Result<ArtifactSet, Bottom>,
    name: &str,
) -> Result<&'a crate::artifact::TensorArtifact, Bottom> {
    match r {
        Ok(set) => set.tensor(name),
        Err(b) => Err(b.clone()),
    }
}

fn first_nonfinite(set: &ArtifactSet) -> Option<(&str, &Bottom)> {
    set.bottoms().find(|(_, b)| b.reason == FailureReason::Nonfinite)
}

/// Gradient tensors (`grad.*`) of a gradient response.
pub(crate) fn gradient_tensors(set: &ArtifactSet) -> Vec<&crate::artifact::TensorArtifact> {
    set.tensors().filter(|t| t.name().starts_with(names::GRAD_PREFIX)).collect()
}

pub(super) fn run(run: &mut Run) -> StageSummary {
    run.probes = 0;
    let method = run.contract.method();
    let init = run.probe(Role::Reference, run.init_request());
    let params = run.probe(Role::Reference, Request::ExportParams);
    let batch = run.probe(Role::Reference, Request::CollateBatch);

    // PPO preflight always asks for hidden states so the value mode can be
    // derived whichever way the reference exposes values.
    let mut flags = run.contract.forward_flags();
    let mut forward_expected = run.contract.expected(ProbeKind::Forward);
    if method == Method::Ppo {
        flags.output_hidden_states = true;
        forward_expected.remove(names::VALUES);
        forward_expected.remove(names::FIRST_HIDDEN_STATE);
    }
    let forward = run.probe_expecting(Role::Reference, Request::Forward { flags }, &forward_expected);
    let gradient = run.probe(Role::Reference, Request::Gradient);

    let generation_declared = run.handle(Role::Reference).has_capability(capabilities::GENERATE);
    let generate = (run.contract.has_generation() && generation_declared)
        .then(|| run.probe(Role::Reference, Request::Generate { max_new_tokens: run.contract.config().max_new_tokens }));
    let ref_model_declared = run.handle(Role::Reference).has_capability(capabilities::REF_MODEL);

    let init = Some(init);
    let params = Some(params);
    let batch = Some(batch);
    let forward = Some(forward);
    let gradient = Some(gradient);
    let mut records = Vec::with_capacity(9);

    records.push(match require(&params) {
        Err(b) => CheckRecord::bottom(S, "params_nonempty", b),
        Ok(set) if set.tensors().next().is_none() => CheckRecord::fail(
            S,
            "params_nonempty",
            Some(FailureReason::MissingArtifact),
            "exported parameter tree is empty",
        ),
        Ok(set) => CheckRecord::pass(S, "params_nonempty").with_detail(json!({ "parameters": set.tensors().count() })),
    });

    records.push(match require(&batch) {
        Err(b) => CheckRecord::bottom(S, "batch_nonempty", b),
        Ok(set) => {
            let empty: Vec<&str> = [names::INPUT_IDS, names::ATTENTION_MASK, names::LABELS]
                .into_iter()
                .filter(|n| set.tensor(n).map(|t| t.numel() == 0).unwrap_or(true))
                .collect();
            if empty.is_empty() {
                CheckRecord::pass(S, "batch_nonempty")
            } else {
                CheckRecord::fail(
                    S,
                    "batch_nonempty",
                    Some(FailureReason::MissingArtifact),
                    format!("collated batch lacks non-empty {}", empty.join(", ")),
                )
            }
        }
    });

    records.push(match require(&forward) {
        Err(b) => CheckRecord::bottom(S, "forward_finite", b),
        Ok(set) => match (first_nonfinite(set), set.tensor(names::LOGITS)) {
            (Some((_, b)), _) => CheckRecord::bottom(S, "forward_finite", b),
            (None, Err(b)) => CheckRecord::bottom(S, "forward_finite", &b),
            (None, Ok(_)) => CheckRecord::pass(S, "forward_finite"),
        },
    });

    let value_mode = match (method, require(&forward)) {
        (Method::Ppo, Ok(fwd)) => Some(derive::derive_value_mode(fwd, set_of(&params))),
        _ => None,
    };
    records.push(match (method, require(&forward)) {
        (Method::Ppo, Err(b)) => CheckRecord::bottom(S, "contract_derivable", b),
        _ => CheckRecord::pass(S, "contract_derivable").with_detail(json!({ "ppo_value_mode": value_mode })),
    });
    if let Some(mode) = value_mode {
        run.contract = run.contract.with_value_mode(mode);
    }

    records.push(match require(&gradient) {
        Err(b) => CheckRecord::bottom(S, "grads_finite", b),
        Ok(set) => {
            let grads = gradient_tensors(set);
            if let Some((_, b)) = first_nonfinite(set) {
                CheckRecord::bottom(S, "grads_finite", b)
            } else if let Err(b) = set.tensor(names::LOSS) {
                CheckRecord::bottom(S, "grads_finite", &b)
            } else if grads.is_empty() {
                CheckRecord::fail(
                    S,
                    "grads_finite",
                    Some(FailureReason::MissingArtifact),
                    "gradient probe returned no parameter gradients",
                )
            } else {
                let norm = kernels::global_grad_norm(grads.iter().map(|t| t.data()));
                CheckRecord::pass(S, "grads_finite").with_detail(json!({ "tensors": grads.len(), "global_norm": norm }))
            }
        }
    });

    records.push(match tensor_of(&init.as_ref().expect("ran").artifacts, names::LR_SCHEDULE) {
        Err(b) => CheckRecord::bottom(S, "lr_finite", &b),
        Ok(lr) if lr.numel() != LR_SCHEDULE_LEN => CheckRecord::fail(
            S,
            "lr_finite",
            Some(FailureReason::SchemaMismatch),
            format!("learning-rate vector has {} entries, expected {LR_SCHEDULE_LEN}", lr.numel()),
        ),
        Ok(lr) if lr.data().iter().any(|x| *x < 0.0) => {
            CheckRecord::fail(S, "lr_finite", None, "learning-rate vector has negative entries")
        }
        Ok(lr) => CheckRecord::pass(S, "lr_finite").with_detail(json!({ "lr_schedule": lr.data() })),
    });

    records.push(method_loss_record(run, &batch, &forward, &params));

    records.push(if !run.contract.has_generation() {
        CheckRecord::not_supported(S, "generation_supported", "generation is not part of the contract")
    } else if let Some(g) = &generate {
        match tensor_of(&g.artifacts, names::GENERATED_IDS) {
            Ok(t) if t.numel() > 0 => CheckRecord::pass(S, "generation_supported"),
            Ok(_) => CheckRecord::fail(S, "generation_supported", None, "generation returned no tokens"),
            Err(b) => CheckRecord::bottom(S, "generation_supported", &b),
        }
    } else {
        CheckRecord::not_supported(S, "generation_supported", "source runtime does not declare generation")
    });

    records.push(match method {
        Method::Sft => CheckRecord::not_supported(S, "ref_model_available", "sft uses no reference model"),
        _ if !ref_model_declared => CheckRecord::fail(
            S,
            "ref_model_available",
            Some(FailureReason::MissingArtifact),
            "reference model unavailable: runtime does not declare 'ref_model'",
        ),
        Method::Dpo => match require(&forward).map(|s| s.tensor(names::REF_LOGITS)) {
            Ok(Ok(_)) => CheckRecord::pass(S, "ref_model_available"),
            Ok(Err(b)) => CheckRecord::bottom(S, "ref_model_available", &b),
            Err(b) => CheckRecord::bottom(S, "ref_model_available", b),
        },
        Method::Ppo => CheckRecord::pass(S, "ref_model_available"),
    });

    if let Some(h) = run.reference.as_mut() {
        h.shutdown();
    }
    run.ref_obs.init = init;
    run.ref_obs.params = params;
    run.ref_obs.batch = batch;
    run.ref_obs.forward = forward;
    run.ref_obs.gradient = gradient;
    StageSummary::from_records(S, records, std::mem::take(&mut run.probes))
}

fn method_loss_record(
    run: &Run,
    batch: &Option<ProbeResult>,
    forward: &Option<ProbeResult>,
    params: &Option<ProbeResult>,
) -> CheckRecord {
    const NAME: &str = "method_loss_finite";
    let (batch, forward) = match (require(batch), require(forward)) {
        (Err(b), _) | (_, Err(b)) => return CheckRecord::bottom(S, NAME, b),
        (Ok(b), Ok(f)) => (b, f),
    };
    let d = derive::derive(&run.contract, SideInputs { batch, forward, params: set_of(params) });
    let value = d.method_loss.or_else(|| d.ref_log_probs.filter(|v| v.is_bottom()));
    match value {
        Some(v) => match v.as_tensor() {
            Ok(t) if t.is_finite() => CheckRecord::pass(S, NAME).with_detail(json!({ "method_loss": t.data()[0] })),
            Ok(_) => CheckRecord::bottom(S, NAME, &Bottom::new(FailureReason::Nonfinite, "method loss is not finite")),
            Err(b) => CheckRecord::bottom(S, NAME, b),
        },
        None => CheckRecord::bottom(
            S,
            NAME,
            &Bottom::new(FailureReason::MissingArtifact, "method loss inputs are unavailable"),
        ),
    }
}
