//! The gated verification pipeline: reference preflight, then Spec, Numeric
//! and Behavioral stages over a reference and a candidate runtime.
//!
//! Each stage sends its probes (reference first, then candidate), then
//! emits its checks in inventory order. A stage that is not reached because
//! an earlier one failed contains a single `stage_gate` record and sends no
//! probes. A probe that fails as a whole removes the checks depending on it
//! and is reported once, by the stage's `*_runtime` record.

use std::collections::BTreeSet;
use std::time::{Duration, Instant};

use crate::artifact::{ArtifactSet, Bottom};
use crate::contract::{BoundedConfig, ConfigError, EquivalenceContract};
use crate::protocol::Request;
use crate::report::{Overall, Outcome, RuntimeInfo, Timings, VerificationReport};
use crate::runtime::{Descriptor, HandleOptions, ProbeResult, Role, RuntimeFactory, RuntimeHandle};

mod behavioral;
pub mod derive;
mod numeric;
mod preflight;
pub mod records;
mod spec_stage;

pub use records::{
    CheckRecord, CheckStatus, Stage, StageStatus, StageSummary, BEHAVIORAL_CHECKS, NUMERIC_CHECKS,
    PREFLIGHT_CHECKS, SPEC_CHECKS, STAGE_GATE,
};

/// Where a runtime comes from.
#[derive(Clone)]
pub enum RuntimeSource {
    Descriptor(Descriptor),
    /// A custom in-process runtime.
    Factory { label: String, factory: RuntimeFactory },
}

impl RuntimeSource {
    pub fn factory(label: impl Into<String>, factory: RuntimeFactory) -> Self {
        RuntimeSource::Factory { label: label.into(), factory }
    }

    fn spawn(&self, role: Role, opts: &HandleOptions) -> RuntimeHandle {
        match self {
            RuntimeSource::Descriptor(d) => RuntimeHandle::spawn(d, role, opts),
            RuntimeSource::Factory { factory, .. } => RuntimeHandle::from_factory(factory.clone(), role, opts),
        }
    }

    fn describe(&self) -> serde_json::Value {
        match self {
            RuntimeSource::Descriptor(d) => serde_json::to_value(d).expect("serializable descriptor"),
            RuntimeSource::Factory { label, .. } => serde_json::json!({ "custom": label }),
        }
    }
}

impl From<Descriptor> for RuntimeSource {
    fn from(d: Descriptor) -> Self {
        RuntimeSource::Descriptor(d)
    }
}

impl std::fmt::Debug for RuntimeSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.describe())
    }
}

/// Engine-side overrides of the per-probe limits.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct VerifyOptions {
    /// Replaces the config's probe timeout.
    pub probe_timeout: Option<Duration>,
    pub frame_cap: Option<usize>,
    pub kill_grace: Option<Duration>,
}

impl VerifyOptions {
    pub fn handle_options(&self, config: &BoundedConfig) -> HandleOptions {
        let mut o = HandleOptions::with_timeout(self.probe_timeout.unwrap_or_else(|| config.probe_timeout()));
        if let Some(cap) = self.frame_cap {
            o.frame_cap = cap;
        }
        if let Some(g) = self.kill_grace {
            o.grace = g;
        }
        o
    }
}

/// Observations of one runtime, accumulated across stages.
#[derive(Default)]
pub(crate) struct Observations {
    pub init: Option<ProbeResult>,
    pub params: Option<ProbeResult>,
    pub batch: Option<ProbeResult>,
    pub forward: Option<ProbeResult>,
    pub gradient: Option<ProbeResult>,
}

pub(crate) fn set_of(r: &Option<ProbeResult>) -> Option<&ArtifactSet> {
    r.as_ref().and_then(|p| p.artifacts.as_ref().ok())
}

/// First whole-probe failure among `results`, in order.
pub(crate) fn first_probe_failure<'a>(results: impl IntoIterator<Item = &'a Option<ProbeResult>>) -> Option<&'a Bottom> {
    results.into_iter().flatten().find_map(|r| r.bottom())
}

pub(crate) struct Run {
    pub contract: EquivalenceContract,
    pub opts: HandleOptions,
    pub reference_source: RuntimeSource,
    pub candidate_source: RuntimeSource,
    pub reference: Option<RuntimeHandle>,
    pub candidate: Option<RuntimeHandle>,
    pub ref_obs: Observations,
    pub cand_obs: Observations,
    /// Probes sent during the current stage.
    pub probes: usize,
    pub candidate_never_produced: bool,
}

impl Run {
    fn new(contract: EquivalenceContract, reference: RuntimeSource, candidate: RuntimeSource, opts: HandleOptions) -> Self {
        Self {
            contract,
            opts,
            reference_source: reference,
            candidate_source: candidate,
            reference: None,
            candidate: None,
            ref_obs: Observations::default(),
            cand_obs: Observations::default(),
            probes: 0,
            candidate_never_produced: false,
        }
    }

    pub fn handle(&mut self, role: Role) -> &mut RuntimeHandle {
        let (slot, source) = match role {
            Role::Reference => (&mut self.reference, &self.reference_source),
            Role::Candidate => (&mut self.candidate, &self.candidate_source),
        };
        slot.get_or_insert_with(|| source.spawn(role, &self.opts))
    }

    pub fn probe(&mut self, role: Role, request: Request) -> ProbeResult {
        let expected = self.contract.expected(request.kind());
        self.probe_expecting(role, request, &expected)
    }

    pub fn probe_expecting(&mut self, role: Role, request: Request, expected: &BTreeSet<String>) -> ProbeResult {
        self.probes += 1;
        let result = self.handle(role).run_probe(&request, expected);
        log::debug!(
            "{role:?} {} -> {}",
            request.op(),
            match result.bottom() {
                Some(b) => b.to_string(),
                None => "ok".to_string(),
            }
        );
        result
    }

    pub fn init_request(&self) -> Request {
        Request::Init { config: self.contract.config().clone() }
    }

    fn shutdown_all(&mut self) {
        for h in [self.reference.as_mut(), self.candidate.as_mut()].into_iter().flatten() {
            h.shutdown();
        }
    }

    fn runtime_info(&self, role: Role) -> RuntimeInfo {
        let (handle, source) = match role {
            Role::Reference => (&self.reference, &self.reference_source),
            Role::Candidate => (&self.candidate, &self.candidate_source),
        };
        RuntimeInfo {
            descriptor: source.describe(),
            kind: handle.as_ref().map(|h| h.kind()),
            handshake: handle.as_ref().and_then(|h| h.handshake().cloned()),
            diagnostics: handle.as_ref().map(|h| h.diagnostics()).unwrap_or_default(),
        }
    }
}

/// Run reference preflight alone.
pub fn run_preflight(
    reference: impl Into<RuntimeSource>,
    config: &BoundedConfig,
    opts: &VerifyOptions,
) -> Result<(StageSummary, EquivalenceContract), ConfigError> {
    let contract = EquivalenceContract::build(config.clone())?;
    let reference = reference.into();
    let mut run = Run::new(contract, reference.clone(), reference, opts.handle_options(config));
    let summary = preflight::run(&mut run);
    run.shutdown_all();
    Ok((summary, run.contract))
}

/// Verify `candidate` against `reference` under the contract built from
/// `config`. Total: a report is produced for every runtime behavior.
pub fn verify(
    reference: impl Into<RuntimeSource>,
    candidate: impl Into<RuntimeSource>,
    config: &BoundedConfig,
) -> Result<VerificationReport, ConfigError> {
    verify_with(reference, candidate, config, &VerifyOptions::default())
}

pub fn verify_with(
    reference: impl Into<RuntimeSource>,
    candidate: impl Into<RuntimeSource>,
    config: &BoundedConfig,
    opts: &VerifyOptions,
) -> Result<VerificationReport, ConfigError> {
    let contract = EquivalenceContract::build(config.clone())?;
    let mut run = Run::new(contract, reference.into(), candidate.into(), opts.handle_options(config));
    let started = Instant::now();
    let mut timings = Timings::default();

    let mut clock = Instant::now();
    let mut lap = |timings: &mut Timings, stage: Stage| {
        timings.stages.insert(stage, clock.elapsed().as_secs_f64());
        clock = Instant::now();
    };

    let preflight = preflight::run(&mut run);
    lap(&mut timings, Stage::Preflight);

    let mut stages = Vec::with_capacity(3);
    let spec = if preflight.passed() {
        spec_stage::run(&mut run)
    } else {
        StageSummary::blocked(Stage::Spec, "reference preflight failed")
    };
    lap(&mut timings, Stage::Spec);
    let numeric = if spec.passed() {
        numeric::run(&mut run)
    } else {
        StageSummary::blocked(Stage::Numeric, "spec stage did not pass")
    };
    lap(&mut timings, Stage::Numeric);
    let behavioral = if numeric.passed() {
        behavioral::run(&mut run)
    } else {
        StageSummary::blocked(Stage::Behavioral, "numeric stage did not pass")
    };
    lap(&mut timings, Stage::Behavioral);
    stages.extend([spec, numeric, behavioral]);

    run.shutdown_all();
    timings.total_secs = started.elapsed().as_secs_f64();

    let overall = if stages.iter().all(StageSummary::passed) { Overall::Pass } else { Overall::Fail };
    let never = run.candidate_never_produced || run.candidate.as_ref().is_some_and(|h| h.never_produced());
    let outcome = never.then_some(Outcome::ArtifactNeverProduced);
    Ok(VerificationReport::new(
        run.runtime_info(Role::Reference),
        run.runtime_info(Role::Candidate),
        run.contract.clone(),
        preflight,
        stages,
        overall,
        outcome,
        timings,
    ))
}
