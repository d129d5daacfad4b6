//! Numeric stage: bounded tensor equivalence of forward outputs, derived
//! method quantities, gradients and the learning-rate schedule.

use serde_json::json;

use super::derive::{self, Derived, SideInputs};
use super::preflight::{gradient_tensors, tensor_of};
use super::records::{CheckRecord, Stage, StageSummary};
use super::{first_probe_failure, set_of, Observations, Run};
use crate::artifact::{ArtifactSet, ArtifactValue, Bottom, FailureReason, TensorArtifact};
use crate::compare::{compare_arrays, compare_logits, cosine_similarity, CompareVerdict};
use crate::contract::{names, AccumulationSupport, ToleranceProfile};
use crate::kernels;
use crate::protocol::Request;
use crate::runtime::Role;

const S: Stage = Stage::Numeric;

pub(super) fn run(run: &mut Run) -> StageSummary {
    run.probes = 0;
    let flags = run.contract.forward_flags();
    run.ref_obs.forward = Some(run.probe(Role::Reference, Request::Forward { flags }));
    run.ref_obs.gradient = Some(run.probe(Role::Reference, Request::Gradient));
    run.cand_obs.forward = Some(run.probe(Role::Candidate, Request::Forward { flags }));
    run.cand_obs.gradient = Some(run.probe(Role::Candidate, Request::Gradient));

    let tol = run.contract.tolerance();
    let (r, c) = (&run.ref_obs, &run.cand_obs);
    let mut records = Vec::with_capacity(14);

    let forwards = set_of(&r.forward).zip(set_of(&c.forward));
    if let Some((rf, cf)) = forwards {
        records.push(CheckRecord::from_verdict(
            S,
            "forward_logits",
            compare_logits(&rf.get(names::LOGITS), &cf.get(names::LOGITS), &tol),
        ));
        if run.contract.config().compare_hidden_states {
            records.push(hidden_states(rf, cf, &tol));
        }
        if rf.has_tensor(names::LOSS) {
            records.push(CheckRecord::from_verdict(
                S,
                "forward_loss",
                compare_arrays(&rf.get(names::LOSS), &cf.get(names::LOSS), &tol),
            ));
        }
    }

    let (rd, cd) = (derived(run, r), derived(run, c));
    let pairs: [(&str, &Option<ArtifactValue>, &Option<ArtifactValue>); 6] = [
        ("method_loss", &rd.method_loss, &cd.method_loss),
        ("log_probs", &rd.log_probs, &cd.log_probs),
        ("ref_log_probs", &rd.ref_log_probs, &cd.ref_log_probs),
        ("token_logprobs", &rd.token_logprobs, &cd.token_logprobs),
        ("advantages", &rd.advantages, &cd.advantages),
        ("returns", &rd.returns, &cd.returns),
    ];
    for (name, rv, cv) in pairs {
        if let (Some(rv), Some(cv)) = (rv, cv) {
            records.push(CheckRecord::from_verdict(S, name, compare_arrays(rv, cv, &tol)));
        }
    }

    if let (Some(rg), Some(cg)) = (set_of(&r.gradient), set_of(&c.gradient)) {
        records.push(CheckRecord::from_verdict(
            S,
            "gradient_loss",
            compare_arrays(&rg.get(names::LOSS), &cg.get(names::LOSS), &tol),
        ));
        records.push(gradient_norm(rg, cg, &tol));
    }

    if let (Some(ri), Some(ci)) = (&r.init, &c.init) {
        let lr = |p: &crate::runtime::ProbeResult| -> ArtifactValue {
            match tensor_of(&p.artifacts, names::LR_SCHEDULE) {
                Ok(t) => t.clone().into(),
                Err(b) => b.into(),
            }
        };
        let verdict = compare_arrays(&lr(ri), &lr(ci), &tol);
        records.push(CheckRecord::from_verdict(S, "lr_schedule", verdict));
    }

    // Omitted when the micro-batch losses' inputs were reported elsewhere.
    match run.contract.gradient_accumulation() {
        AccumulationSupport::NotSupported { reason } => {
            records.push(CheckRecord::not_supported(S, "gradient_accumulation", reason))
        }
        AccumulationSupport::Supported => {
            if let (Some(rv), Some(cv)) = (&rd.accumulation, &cd.accumulation) {
                records.push(accumulation(rv, cv, &tol));
            }
        }
    }

    let probes = [&r.forward, &r.gradient, &c.forward, &c.gradient];
    records.push(match first_probe_failure(probes) {
        Some(b) => CheckRecord::bottom(S, "numeric_runtime", b),
        None => CheckRecord::pass(S, "numeric_runtime"),
    });
    StageSummary::from_records(S, records, std::mem::take(&mut run.probes))
}

fn derived(run: &Run, obs: &Observations) -> Derived {
    match (set_of(&obs.batch), set_of(&obs.forward)) {
        (Some(batch), Some(forward)) => {
            derive::derive(&run.contract, SideInputs { batch, forward, params: set_of(&obs.params) })
        }
        _ => Derived::default(),
    }
}

fn hidden_layers(set: &ArtifactSet) -> Vec<(usize, &TensorArtifact)> {
    let mut v: Vec<_> = set
        .tensors()
        .filter_map(|t| Some((t.name().strip_prefix(names::HIDDEN_STATES_PREFIX)?.parse().ok()?, t)))
        .collect();
    v.sort_by_key(|(i, _)| *i);
    v
}

/// Worst verdict over hidden-state layers exposed by both sides.
fn hidden_states(rf: &ArtifactSet, cf: &ArtifactSet, tol: &ToleranceProfile) -> CheckRecord {
    const NAME: &str = "forward_hidden_states";
    if let Err(b) = cf.tensor(names::FIRST_HIDDEN_STATE) {
        return CheckRecord::bottom(S, NAME, &b);
    }
    let cand = hidden_layers(cf);
    let mut worst: Option<(usize, CompareVerdict)> = None;
    for (i, rt) in hidden_layers(rf) {
        let Some((_, ct)) = cand.iter().find(|(j, _)| *j == i) else { continue };
        let v = crate::compare::compare_tensors(rt, ct, tol);
        let rank = |v: &CompareVerdict| (v.status as u8, v.metrics.as_ref().map_or(0.0, |m| m.max_abs_err));
        if worst.as_ref().is_none_or(|(_, w)| rank(&v) > rank(w)) {
            worst = Some((i, v));
        }
    }
    match worst {
        Some((layer, v)) => CheckRecord::from_verdict(S, NAME, v).with_detail(json!({ "worst_layer": layer })),
        None => CheckRecord::bottom(S, NAME, &Bottom::missing(names::FIRST_HIDDEN_STATE)),
    }
}

fn norm_of(set: &ArtifactSet) -> ArtifactValue {
    if let Some((_, b)) = set.bottoms().find(|(n, _)| n.starts_with(names::GRAD_PREFIX)) {
        return b.clone().into();
    }
    let grads = gradient_tensors(set);
    if grads.is_empty() {
        return Bottom::new(FailureReason::MissingArtifact, "gradient probe returned no parameter gradients").into();
    }
    TensorArtifact::scalar(names::GRAD_NORM, kernels::global_grad_norm(grads.iter().map(|t| t.data()))).into()
}

/// Global gradient norm; the flattened-gradient cosine is recorded as detail.
fn gradient_norm(rg: &ArtifactSet, cg: &ArtifactSet, tol: &ToleranceProfile) -> CheckRecord {
    let verdict = compare_arrays(&norm_of(rg), &norm_of(cg), tol);
    let (mut a, mut b) = (Vec::new(), Vec::new());
    for t in gradient_tensors(rg) {
        if let Ok(ct) = cg.tensor(t.name()) {
            if ct.numel() == t.numel() {
                a.extend_from_slice(t.data());
                b.extend_from_slice(ct.data());
            }
        }
    }
    let cosine = (!a.is_empty()).then(|| cosine_similarity(&a, &b)).filter(|c| c.is_finite());
    CheckRecord::from_verdict(S, "gradient_norm", verdict).with_detail(json!({ "gradient_cosine": cosine }))
}

/// Full-batch loss and mean of two half-batch losses, compared across sides.
fn accumulation(rv: &ArtifactValue, cv: &ArtifactValue, tol: &ToleranceProfile) -> CheckRecord {
    let rec = CheckRecord::from_verdict(S, "gradient_accumulation", compare_arrays(rv, cv, tol));
    match (rv.as_tensor(), cv.as_tensor()) {
        (Ok(r), Ok(c)) => rec.with_detail(json!({ "reference": r.data(), "candidate": c.data() })),
        _ => rec,
    }
}
