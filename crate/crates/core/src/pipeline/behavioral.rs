//! Behavioral stage: short optimizer replay and deterministic generation.

use serde_json::json;

use super::preflight::{gradient_tensors, tensor_of};
use super::records::{CheckRecord, Stage, StageSummary};
use super::{set_of, Run};
use crate::artifact::{Bottom, TensorArtifact};
use crate::compare::{compare_arrays, compare_tensors, CompareStatus};
use crate::contract::{capabilities, names, ToleranceProfile};
use crate::kernels;
use crate::protocol::Request;
use crate::runtime::{ProbeResult, Role};

const S: Stage = Stage::Behavioral;

/// One replay step as recorded in the report.
#[derive(Clone, Copy, Debug)]
struct Step {
    step: u32,
    lr: f64,
    loss: f64,
    grad_norm: f64,
}

/// Replayed steps of one side, or the first ⊥ that stopped the replay.
struct Trajectory {
    steps: Vec<Step>,
    failure: Option<Bottom>,
}

impl Trajectory {
    fn json(&self) -> serde_json::Value {
        self.steps
            .iter()
            .map(|s| json!({ "step": s.step, "lr": s.lr, "loss": s.loss, "grad_norm": s.grad_norm }))
            .collect()
    }

    fn losses(&self) -> TensorArtifact {
        TensorArtifact::f32("loss_curve", vec![self.steps.len()], self.steps.iter().map(|s| s.loss))
    }
}

fn replay(run: &mut Run, role: Role, schedule: &[f64]) -> Trajectory {
    let mut steps = Vec::new();
    for step in 0..run.contract.config().replay_horizon {
        let lr = schedule.get(step as usize).copied().unwrap_or(0.0);
        let result = run.probe(role, Request::ReplayStep { step, lr });
        let values = result
            .artifacts
            .and_then(|set| Ok((set.tensor(names::LOSS)?.data()[0], set.tensor(names::GRAD_NORM)?.data()[0])));
        match values {
            Ok((loss, grad_norm)) => steps.push(Step { step, lr, loss, grad_norm }),
            Err(b) => return Trajectory { steps, failure: Some(b) },
        }
    }
    Trajectory { steps, failure: None }
}

fn generate(run: &mut Run, role: Role) -> Option<ProbeResult> {
    if !run.handle(role).has_capability(capabilities::GENERATE) {
        return None;
    }
    let max_new_tokens = run.contract.config().max_new_tokens;
    Some(run.probe(role, Request::Generate { max_new_tokens }))
}

pub(super) fn run(run: &mut Run) -> StageSummary {
    run.probes = 0;
    let mut records = Vec::with_capacity(3);
    let tol = run.contract.tolerance();
    let schedule: Vec<f64> = run
        .ref_obs
        .init
        .as_ref()
        .and_then(|p| tensor_of(&p.artifacts, names::LR_SCHEDULE).ok().map(|t| t.data().to_vec()))
        .unwrap_or_default();

    let replay_declared =
        [Role::Reference, Role::Candidate].map(|role| run.handle(role).has_capability(capabilities::REPLAY));
    let mut failures: Vec<Bottom> = Vec::new();
    if replay_declared == [true, true] {
        let r = replay(run, Role::Reference, &schedule);
        let c = replay(run, Role::Candidate, &schedule);
        failures.extend(r.failure.clone());
        failures.extend(c.failure.clone());
        if r.failure.is_none() && c.failure.is_none() {
            records.push(loss_curve(run, &r, &c, &tol));
        }
    } else {
        let side = if replay_declared[0] { "candidate" } else { "reference" };
        records.push(CheckRecord::fail(
            S,
            "loss_curve",
            None,
            format!("behavioral unavailable: {side} runtime does not declare optimizer replay"),
        ));
    }

    if run.contract.has_generation() {
        let r = generate(run, Role::Reference);
        let c = generate(run, Role::Candidate);
        failures.extend(r.iter().chain(&c).filter_map(|p| p.bottom().cloned()));
        match (r, c) {
            (None, _) => records.push(
                CheckRecord::pass(S, "generation").with_detail(json!({ "reason": "source unsupported" })),
            ),
            (Some(_), None) => records.push(CheckRecord::fail(
                S,
                "generation",
                None,
                "candidate runtime does not declare generation",
            )),
            (Some(r), Some(c)) => {
                if let (Ok(rs), Ok(cs)) = (&r.artifacts, &c.artifacts) {
                    records.push(generation(rs.tensor(names::GENERATED_IDS), cs.tensor(names::GENERATED_IDS), &tol));
                }
            }
        }
    }

    records.push(match failures.first() {
        Some(b) => CheckRecord::bottom(S, "behavior_runtime", b),
        None => CheckRecord::pass(S, "behavior_runtime"),
    });
    StageSummary::from_records(S, records, std::mem::take(&mut run.probes))
}

fn loss_curve(run: &Run, r: &Trajectory, c: &Trajectory, tol: &ToleranceProfile) -> CheckRecord {
    const NAME: &str = "loss_curve";
    let detail = json!({ "reference": r.json(), "candidate": c.json() });
    let verdict = compare_tensors(&r.losses(), &c.losses(), tol);
    if verdict.status != CompareStatus::Pass {
        let diverged = r.steps.iter().zip(&c.steps).find(|(a, b)| {
            let v = compare_tensors(&TensorArtifact::scalar("l", a.loss), &TensorArtifact::scalar("l", b.loss), tol);
            v.status != CompareStatus::Pass
        });
        let mut rec = CheckRecord::from_verdict(S, NAME, verdict);
        if let Some((a, b)) = diverged {
            rec.error = Some(format!(
                "loss curves diverge at step {}: reference {:.6} vs candidate {:.6} ({})",
                a.step,
                a.loss,
                b.loss,
                rec.error.unwrap_or_default()
            ));
        }
        return rec.with_detail(detail);
    }
    // The first replay step must reproduce the candidate's own gradient probe.
    if let (Some(first), Some(grad)) = (c.steps.first(), set_of(&run.cand_obs.gradient)) {
        if let Ok(loss) = grad.tensor(names::LOSS) {
            let norm = kernels::global_grad_norm(gradient_tensors(grad).iter().map(|t| t.data()));
            let replayed = TensorArtifact::f32("step0", vec![2], [first.loss, first.grad_norm]);
            let probed = TensorArtifact::f32("step0", vec![2], [loss.data()[0], norm]);
            let v = compare_arrays(&probed.into(), &replayed.into(), tol);
            if v.status != CompareStatus::Pass {
                return CheckRecord::fail(
                    S,
                    NAME,
                    None,
                    "candidate replay step 0 is inconsistent with its gradient probe",
                )
                .with_detail(detail);
            }
        }
    }
    CheckRecord::from_verdict(S, NAME, verdict).with_detail(detail)
}

/// Greedy generations must match exactly; elementwise metrics are recorded.
fn generation(
    r: Result<&TensorArtifact, Bottom>,
    c: Result<&TensorArtifact, Bottom>,
    tol: &ToleranceProfile,
) -> CheckRecord {
    const NAME: &str = "generation";
    let (r, c) = match (r, c) {
        (Err(b), _) | (_, Err(b)) => return CheckRecord::bottom(S, NAME, &b),
        (Ok(r), Ok(c)) => (r, c),
    };
    let verdict = compare_tensors(r, c, tol);
    if verdict.status == CompareStatus::HardFail {
        return CheckRecord::from_verdict(S, NAME, verdict);
    }
    let mismatches = r.data().iter().zip(c.data()).filter(|(a, b)| a != b).count();
    let detail = json!({ "tokens": r.numel(), "mismatched_tokens": mismatches });
    let mut rec = CheckRecord::from_verdict(S, NAME, verdict).with_detail(detail);
    if mismatches == 0 {
        rec.status = super::CheckStatus::Pass;
        rec.error = None;
    } else {
        rec.status = super::CheckStatus::Fail;
        rec.failure_kind = None;
        rec.error = Some(format!("generated token ids differ at {mismatches} of {} positions", r.numel()));
    }
    rec
}
