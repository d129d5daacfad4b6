//! Spec stage: interface admissibility — construction, runtime contract,
//! parameter-tree topology and batch schema.

use std::collections::BTreeMap;

use serde_json::json;

use super::records::{CheckRecord, Stage, StageSummary};
use super::{first_probe_failure, set_of, Run};
use crate::artifact::{ArtifactSet, Bottom, FailureReason};
use crate::protocol::Request;
use crate::runtime::Role;

const S: Stage = Stage::Spec;

pub(super) fn run(run: &mut Run) -> StageSummary {
    run.probes = 0;
    let mut records = Vec::new();

    // A fresh reference after preflight released the first one.
    let preflight_params = run.ref_obs.params.take();
    run.handle(Role::Reference).reinitialize();
    run.ref_obs.init = Some(run.probe(Role::Reference, run.init_request()));
    run.ref_obs.params = Some(run.probe(Role::Reference, Request::ExportParams));
    run.ref_obs.batch = Some(run.probe(Role::Reference, Request::CollateBatch));

    let reinit_failure = first_probe_failure([&run.ref_obs.init, &run.ref_obs.params, &run.ref_obs.batch]).cloned();
    let reinit = match reinit_failure {
        Some(b) => CheckRecord::bottom(S, "reference_reinit", &b),
        None if !same_tensors(set_of(&preflight_params), set_of(&run.ref_obs.params)) => CheckRecord::fail(
            S,
            "reference_reinit",
            None,
            "re-initialized reference exports different parameters",
        ),
        None => CheckRecord::pass(S, "reference_reinit"),
    };
    let reinit_ok = reinit.status == super::CheckStatus::Pass;
    records.push(reinit);
    if !reinit_ok {
        return StageSummary::from_records(S, records, std::mem::take(&mut run.probes));
    }

    // Any construction fault, including an unresolvable descriptor, is a
    // candidate_init failure.
    let init = run.probe(Role::Candidate, run.init_request());
    if run.handle(Role::Candidate).never_produced() {
        run.candidate_never_produced = true;
    }
    let init_failure = init.bottom().cloned();
    run.cand_obs.init = Some(init);
    match init_failure {
        Some(b) => {
            records.push(CheckRecord::bottom(S, "candidate_init", &b));
            return StageSummary::from_records(S, records, std::mem::take(&mut run.probes));
        }
        None => records.push(CheckRecord::pass(S, "candidate_init")),
    }

    let declared = run.handle(Role::Candidate).method();
    let expected = run.contract.method();
    let detail = json!({
        "method": expected,
        "candidate_method": declared,
        "ppo_value_mode": run.contract.ppo_value_mode(),
    });
    records.push(if declared == Some(expected) {
        CheckRecord::pass(S, "runtime_contract").with_detail(detail)
    } else {
        CheckRecord::fail(
            S,
            "runtime_contract",
            Some(FailureReason::SchemaMismatch),
            format!(
                "candidate implements {}, contract requires {expected}",
                declared.map(|m| m.to_string()).unwrap_or_else(|| "no method".into())
            ),
        )
        .with_detail(detail)
    });

    run.cand_obs.params = Some(run.probe(Role::Candidate, Request::ExportParams));
    run.cand_obs.batch = Some(run.probe(Role::Candidate, Request::CollateBatch));

    if let (Some(r), Some(c)) = (set_of(&run.ref_obs.params), set_of(&run.cand_obs.params)) {
        records.push(weight_loading(r, c));
    }
    if let (Some(r), Some(c)) = (set_of(&run.ref_obs.batch), set_of(&run.cand_obs.batch)) {
        records.push(data_pipeline(r, c));
    }
    records.push(match first_probe_failure([&run.cand_obs.params, &run.cand_obs.batch]) {
        Some(b) => CheckRecord::bottom(S, "spec_runtime", b),
        None => CheckRecord::pass(S, "spec_runtime"),
    });
    StageSummary::from_records(S, records, std::mem::take(&mut run.probes))
}

fn same_tensors(a: Option<&ArtifactSet>, b: Option<&ArtifactSet>) -> bool {
    match (a, b) {
        (Some(a), Some(b)) => a.tensors().eq(b.tensors()),
        _ => false,
    }
}

/// Per-name shapes of every returned tensor; ⊥ entries count as present.
fn inventory(set: &ArtifactSet) -> BTreeMap<&str, Option<&crate::artifact::TensorArtifact>> {
    set.names().map(|n| (n, set.tensor(n).ok())).collect()
}

struct KeyDiff {
    missing: Vec<String>,
    extra: Vec<String>,
}

fn key_diff(r: &ArtifactSet, c: &ArtifactSet) -> KeyDiff {
    let (ri, ci) = (inventory(r), inventory(c));
    KeyDiff {
        missing: ri.keys().filter(|k| !ci.contains_key(*k)).map(|k| k.to_string()).collect(),
        extra: ci.keys().filter(|k| !ri.contains_key(*k)).map(|k| k.to_string()).collect(),
    }
}

fn present_bottom<'a>(set: &'a ArtifactSet, missing: &[String]) -> Option<(&'a str, &'a Bottom)> {
    set.bottoms().find(|(n, b)| b.reason != FailureReason::MissingArtifact || !missing.iter().any(|m| m == n))
}

/// Exact key-set and per-key shape equality of the parameter trees.
fn weight_loading(r: &ArtifactSet, c: &ArtifactSet) -> CheckRecord {
    const NAME: &str = "weight_loading";
    if let Some((_, b)) = present_bottom(c, &[]) {
        return CheckRecord::bottom(S, NAME, b);
    }
    let diff = key_diff(r, c);
    let mut shape_mismatches = Vec::new();
    for t in r.tensors() {
        if let Ok(ct) = c.tensor(t.name()) {
            if ct.shape() != t.shape() {
                shape_mismatches.push(json!({ "key": t.name(), "reference": t.shape(), "candidate": ct.shape() }));
            }
        }
    }
    let detail = json!({
        "missing_keys": diff.missing,
        "extra_keys": diff.extra,
        "shape_mismatches": shape_mismatches,
    });
    if diff.missing.is_empty() && diff.extra.is_empty() && shape_mismatches.is_empty() {
        return CheckRecord::pass(S, NAME).with_detail(json!({ "parameters": r.len() }));
    }
    let mut parts = Vec::new();
    if !diff.extra.is_empty() {
        parts.push(format!("extra {}", diff.extra.join(", ")));
    }
    if !diff.missing.is_empty() {
        parts.push(format!("missing {}", diff.missing.join(", ")));
    }
    if !shape_mismatches.is_empty() {
        parts.push(format!("{} shape mismatches", shape_mismatches.len()));
    }
    CheckRecord::fail(S, NAME, Some(FailureReason::SchemaMismatch), parts.join("; ")).with_detail(detail)
}

/// Exact key-set, shape and dtype equality of the first collated batch.
fn data_pipeline(r: &ArtifactSet, c: &ArtifactSet) -> CheckRecord {
    const NAME: &str = "data_pipeline";
    let diff = key_diff(r, c);
    if let Some((_, b)) = present_bottom(c, &diff.missing) {
        return CheckRecord::bottom(S, NAME, b);
    }
    let mut shape_mismatches = Vec::new();
    let mut dtype_mismatches = Vec::new();
    for t in r.tensors() {
        if let Ok(ct) = c.tensor(t.name()) {
            if ct.shape() != t.shape() {
                shape_mismatches.push(json!({ "key": t.name(), "reference": t.shape(), "candidate": ct.shape() }));
            }
            if ct.dtype() != t.dtype() {
                dtype_mismatches.push(json!({ "key": t.name(), "reference": t.dtype(), "candidate": ct.dtype() }));
            }
        }
    }
    // Keys the candidate failed to produce are absent, not extra.
    let missing: Vec<String> = diff
        .missing
        .into_iter()
        .chain(c.bottoms().filter(|(_, b)| b.reason == FailureReason::MissingArtifact).map(|(n, _)| n.to_string()))
        .collect();
    let detail = json!({
        "missing_keys": missing,
        "extra_keys": diff.extra,
        "shape_mismatches": shape_mismatches,
        "dtype_mismatches": dtype_mismatches,
    });
    if missing.is_empty() && diff.extra.is_empty() && shape_mismatches.is_empty() && dtype_mismatches.is_empty() {
        return CheckRecord::pass(S, NAME).with_detail(json!({ "keys": r.len() }));
    }
    let mut parts = Vec::new();
    if !missing.is_empty() {
        parts.push(format!("missing {}", missing.join(", ")));
    }
    if !diff.extra.is_empty() {
        parts.push(format!("extra {}", diff.extra.join(", ")));
    }
    for m in shape_mismatches.iter().chain(&dtype_mismatches) {
        parts.push(format!("{} {} vs {}", m["key"].as_str().unwrap_or(""), m["reference"], m["candidate"]));
    }
    CheckRecord::fail(S, NAME, Some(FailureReason::SchemaMismatch), format!("schema_mismatch ({})", parts.join("; ")))
        .with_detail(detail)
}
