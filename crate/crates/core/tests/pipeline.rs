//! End-to-end verification over the in-process toys: healthy parity, every
//! injected fault, gating, reference variants and report determinism.

use std::sync::Arc;
use std::time::{Duration, Instant};

use eqv::contract::{BoundedConfig, Method, PpoValueMode, PrecisionProfile};
use eqv::pipeline::{
    run_preflight, verify, verify_with, CheckStatus, RuntimeSource, Stage, StageStatus, VerifyOptions, STAGE_GATE,
};
use eqv::report::{Outcome, Overall, VerificationReport};
use eqv::runtime::{Descriptor, Runtime};
use eqv::toy::{self, reference_toy, FaultId};

const PROFILES: [PrecisionProfile; 2] = [PrecisionProfile::Fp16Compare, PrecisionProfile::Bf16Compare];

fn configs(method: Method) -> Vec<BoundedConfig> {
    PROFILES
        .iter()
        .flat_map(|&p| {
            let base = BoundedConfig::reported_default(method).with_profile(p);
            [base.clone(), base.with_batch(4)]
        })
        .collect()
}

fn fault_candidate(method: Method, fault: FaultId) -> Descriptor {
    if fault == FaultId::ArtifactNeverProduced {
        Descriptor::toy("missing_candidate")
    } else {
        Descriptor::faulty_toy(reference_toy(method), fault)
    }
}

fn short_timeout() -> VerifyOptions {
    VerifyOptions { probe_timeout: Some(Duration::from_millis(500)), ..Default::default() }
}

/// Blocked stages carry exactly one gate record and send no probes.
fn assert_gating(report: &VerificationReport) {
    let mut blocked = !report.preflight.passed();
    for s in &report.stages {
        if blocked {
            assert_eq!(s.status, StageStatus::Blocked, "{} should be blocked", s.stage);
            assert_eq!(s.probes_sent, 0);
            assert_eq!(s.records.len(), 1);
            assert_eq!(s.records[0].name, STAGE_GATE);
            assert_eq!(s.records[0].status, CheckStatus::Blocked);
        } else {
            assert_ne!(s.status, StageStatus::Blocked);
            assert!(s.records.iter().all(|r| r.name != STAGE_GATE));
            assert!(s.records.iter().all(|r| s.stage.inventory().contains(&r.name.as_str())), "{}", s.stage);
        }
        blocked |= !s.passed();
    }
}

#[test]
fn healthy_toys_pass_under_every_profile_and_batch() {
    for method in Method::ALL {
        for config in configs(method) {
            let r = Descriptor::toy(reference_toy(method));
            let report = verify(r.clone(), r, &config).unwrap();
            assert_eq!(report.overall, Overall::Pass, "{method} {:?}: {:?}", config.precision_profile, report.first_failure());
            assert_gating(&report);
            assert!(report.stages.iter().all(|s| s.passed()));
        }
    }
}

#[test]
fn healthy_record_inventories() {
    let names = |m: Method, s: Stage| -> Vec<String> {
        let r = Descriptor::toy(reference_toy(m));
        let report = verify(r.clone(), r, &BoundedConfig::reported_default(m).with_batch(4)).unwrap();
        report.stage(s).unwrap().records.iter().map(|r| r.name.clone()).collect()
    };
    assert_eq!(
        names(Method::Sft, Stage::Numeric),
        [
            "forward_logits",
            "forward_loss",
            "method_loss",
            "gradient_loss",
            "gradient_norm",
            "lr_schedule",
            "gradient_accumulation",
            "numeric_runtime"
        ]
    );
    let dpo = names(Method::Dpo, Stage::Numeric);
    assert!(dpo.contains(&"log_probs".into()) && dpo.contains(&"ref_log_probs".into()));
    let ppo = names(Method::Ppo, Stage::Numeric);
    for n in ["token_logprobs", "advantages", "returns"] {
        assert!(ppo.contains(&n.to_string()), "{n}");
    }
    assert!(!ppo.contains(&"forward_loss".into()));
    assert_eq!(names(Method::Sft, Stage::Behavioral), ["loss_curve", "generation", "behavior_runtime"]);
    assert_eq!(names(Method::Ppo, Stage::Behavioral), ["loss_curve", "behavior_runtime"]);
    assert_eq!(names(Method::Sft, Stage::Preflight).len(), 9);
}

#[test]
fn every_fault_is_detected_at_its_expected_check() {
    for method in Method::ALL {
        let config = BoundedConfig::reported_default(method);
        for fault in FaultId::ALL.into_iter().filter(|f| f.applies_to(method)) {
            let report =
                verify_with(Descriptor::toy(reference_toy(method)), fault_candidate(method, fault), &config, &short_timeout())
                    .unwrap();
            assert_eq!(report.overall, Overall::Fail, "{method} {fault}");
            let want = fault.expected_detection();
            let first = report.first_failure().unwrap_or_else(|| panic!("{method} {fault}: no failure"));
            assert_eq!(
                (first.stage, first.name.as_str(), first.failure_kind),
                (want.stage, want.check, want.failure_kind),
                "{method} {fault}: {:?}",
                first.error
            );
            assert!(report.preflight.passed());
            assert_gating(&report);
        }
    }
}

#[test]
fn hang_resolves_as_timeout_within_budget() {
    let timeout = Duration::from_secs(2);
    let opts = VerifyOptions { probe_timeout: Some(timeout), ..Default::default() };
    let started = Instant::now();
    let report = verify_with(
        Descriptor::toy("sft_ref"),
        Descriptor::faulty_toy("sft_ref", FaultId::HangOnForward),
        &BoundedConfig::reported_default(Method::Sft),
        &opts,
    )
    .unwrap();
    assert!(started.elapsed() < timeout + Duration::from_secs(5), "{:?}", started.elapsed());
    let first = report.first_failure().unwrap();
    assert_eq!(first.name, "numeric_runtime");
    assert_eq!(first.failure_kind, Some(eqv::artifact::FailureReason::Timeout));
}

#[test]
fn forward_loss_conflation_is_isolated() {
    let report = verify(
        Descriptor::toy("dpo_ref"),
        Descriptor::faulty_toy("dpo_ref", FaultId::ForwardReturnsMethodLoss),
        &BoundedConfig::reported_default(Method::Dpo),
    )
    .unwrap();
    let numeric = report.stage(Stage::Numeric).unwrap();
    let fl = numeric.record("forward_loss").unwrap();
    let ml = numeric.record("method_loss").unwrap();
    assert_eq!(fl.status, CheckStatus::Fail);
    assert_eq!(ml.status, CheckStatus::Pass);
    assert_eq!(numeric.record("forward_logits").unwrap().status, CheckStatus::Pass);
}

#[test]
fn missing_candidate_is_artifact_never_produced() {
    let report = verify(
        Descriptor::toy("sft_ref"),
        Descriptor::toy("missing_candidate"),
        &BoundedConfig::reported_default(Method::Sft),
    )
    .unwrap();
    assert_eq!(report.outcome, Some(Outcome::ArtifactNeverProduced));
    let first = report.first_failure().unwrap();
    assert_eq!((first.stage, first.name.as_str()), (Stage::Spec, "candidate_init"));
    assert_gating(&report);
}

#[test]
fn reference_without_parameters_fails_preflight_and_blocks_all_stages() {
    let config = BoundedConfig::reported_default(Method::Sft);
    let (summary, _) = run_preflight(Descriptor::toy("sft_noparams"), &config, &VerifyOptions::default()).unwrap();
    assert!(!summary.passed());
    assert_eq!(summary.record("params_nonempty").unwrap().status, CheckStatus::Fail);
    let report = verify(Descriptor::toy("sft_noparams"), Descriptor::toy("sft_ref"), &config).unwrap();
    assert_eq!(report.overall, Overall::Fail);
    assert!(report.stages.iter().all(|s| s.status == StageStatus::Blocked));
    assert!(report.first_failure().is_none(), "blocked stages contribute no failures");
    assert_gating(&report);
}

#[test]
fn ppo_value_mode_follows_the_reference() {
    let config = BoundedConfig::reported_default(Method::Ppo);
    let mode = |name: &str| {
        run_preflight(Descriptor::toy(name), &config, &VerifyOptions::default()).unwrap().1.ppo_value_mode()
    };
    assert_eq!(mode("ppo_ref"), Some(PpoValueMode::OutputField));
    assert_eq!(mode("ppo_hidden"), Some(PpoValueMode::HiddenStatesValueHead));
    let (summary, _) = run_preflight(Descriptor::toy("ppo_novalues"), &config, &VerifyOptions::default()).unwrap();
    assert!(!summary.passed());

    let hidden = Descriptor::toy("ppo_hidden");
    let report = verify(hidden.clone(), hidden, &config).unwrap();
    assert!(report.passed(), "{:?}", report.first_failure());
}

#[test]
fn reference_without_generation_leaves_generation_unscored() {
    let report = verify(
        Descriptor::toy("sft_nogen"),
        Descriptor::toy("sft_nogen"),
        &BoundedConfig::reported_default(Method::Sft),
    )
    .unwrap();
    assert!(report.passed());
    let preflight_gen = report.preflight.record("generation_supported").unwrap();
    assert_eq!(preflight_gen.status, CheckStatus::NotSupported);
    assert!(report.stage(Stage::Behavioral).unwrap().record("generation").is_none_or(|r| r.status == CheckStatus::Pass));
}

#[test]
fn method_mismatch_is_a_spec_failure() {
    // The toy refuses a config for another method at INIT.
    let report = verify(
        Descriptor::toy("sft_ref"),
        Descriptor::toy("dpo_ref"),
        &BoundedConfig::reported_default(Method::Sft),
    )
    .unwrap();
    let first = report.first_failure().unwrap();
    assert_eq!((first.stage, first.name.as_str()), (Stage::Spec, "candidate_init"));
    assert!(first.error.as_deref().unwrap().contains("implements dpo"));

    // A runtime that initializes but declares the wrong method.
    struct Mislabeled(Box<dyn Runtime>);
    impl Runtime for Mislabeled {
        fn handshake(&self) -> eqv::protocol::Handshake {
            eqv::protocol::Handshake { method: Method::Ppo, ..self.0.handshake() }
        }
        fn handle(&mut self, r: &eqv::protocol::Request, c: &eqv::runtime::CancelToken) -> eqv::protocol::Response {
            self.0.handle(r, c)
        }
    }
    let factory: eqv::runtime::RuntimeFactory =
        Arc::new(|| Box::new(Mislabeled(toy::resolve("sft_ref", None).unwrap())) as Box<dyn Runtime>);
    let report = verify(
        Descriptor::toy("sft_ref"),
        RuntimeSource::factory("mislabeled", factory),
        &BoundedConfig::reported_default(Method::Sft),
    )
    .unwrap();
    let first = report.first_failure().unwrap();
    assert_eq!((first.stage, first.name.as_str()), (Stage::Spec, "runtime_contract"));
    assert_eq!(first.failure_kind, Some(eqv::artifact::FailureReason::SchemaMismatch));
}

#[test]
fn custom_runtime_factory_is_verified_like_a_toy() {
    let factory: eqv::runtime::RuntimeFactory =
        Arc::new(|| toy::resolve("sft_ref", None).expect("registered") as Box<dyn Runtime>);
    let report = verify(
        Descriptor::toy("sft_ref"),
        RuntimeSource::factory("wrapped sft toy", factory),
        &BoundedConfig::reported_default(Method::Sft),
    )
    .unwrap();
    assert!(report.passed(), "{:?}", report.first_failure());
    assert_eq!(report.candidate.descriptor["custom"], "wrapped sft toy");
}

#[test]
fn reports_are_deterministic_modulo_timings() {
    for (method, fault) in [(Method::Sft, None), (Method::Ppo, Some(FaultId::GradSignFlip)), (Method::Dpo, None)] {
        let config = BoundedConfig::reported_default(method).with_batch(4);
        let cand = match fault {
            Some(f) => Descriptor::faulty_toy(reference_toy(method), f),
            None => Descriptor::toy(reference_toy(method)),
        };
        let a = verify(Descriptor::toy(reference_toy(method)), cand.clone(), &config).unwrap();
        let b = verify(Descriptor::toy(reference_toy(method)), cand, &config).unwrap();
        assert_eq!(a.canonical_without_timings(), b.canonical_without_timings());
    }
}

#[test]
fn report_json_round_trips() {
    let report = verify(
        Descriptor::toy("ppo_ref"),
        Descriptor::faulty_toy("ppo_ref", FaultId::NonfiniteLoss),
        &BoundedConfig::reported_default(Method::Ppo),
    )
    .unwrap();
    let text = report.to_canonical_json();
    let back = VerificationReport::from_json(&text).unwrap();
    assert_eq!(back.to_canonical_json(), text);
}

#[test]
fn invalid_config_is_rejected_before_any_runtime_starts() {
    let mut config = BoundedConfig::reported_default(Method::Sft);
    config.replay_horizon = 0;
    assert!(verify(Descriptor::toy("sft_ref"), Descriptor::toy("sft_ref"), &config).is_err());
}
