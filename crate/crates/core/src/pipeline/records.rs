//! Check records, stage summaries and the closed check inventory.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::artifact::{Bottom, FailureReason};
use crate::compare::{CompareMetrics, CompareStatus, CompareVerdict};

#[derive(Serialize, Deserialize, Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Preflight,
    Spec,
    Numeric,
    Behavioral,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::Preflight, Stage::Spec, Stage::Numeric, Stage::Behavioral];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Preflight => "preflight",
            Stage::Spec => "spec",
            Stage::Numeric => "numeric",
            Stage::Behavioral => "behavioral",
        }
    }

    /// The closed check inventory of this stage, in execution order.
    pub fn inventory(self) -> &'static [&'static str] {
        match self {
            Stage::Preflight => &PREFLIGHT_CHECKS,
            Stage::Spec => &SPEC_CHECKS,
            Stage::Numeric => &NUMERIC_CHECKS,
            Stage::Behavioral => &BEHAVIORAL_CHECKS,
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

pub const STAGE_GATE: &str = "stage_gate";

pub const PREFLIGHT_CHECKS: [&str; 9] = [
    "params_nonempty",
    "batch_nonempty",
    "forward_finite",
    "contract_derivable",
    "grads_finite",
    "lr_finite",
    "method_loss_finite",
    "generation_supported",
    "ref_model_available",
];

pub const SPEC_CHECKS: [&str; 7] = [
    STAGE_GATE,
    "reference_reinit",
    "candidate_init",
    "runtime_contract",
    "weight_loading",
    "data_pipeline",
    "spec_runtime",
];

pub const NUMERIC_CHECKS: [&str; 15] = [
    STAGE_GATE,
    "forward_logits",
    "forward_hidden_states",
    "forward_loss",
    "method_loss",
    "log_probs",
    "ref_log_probs",
    "token_logprobs",
    "advantages",
    "returns",
    "gradient_loss",
    "gradient_norm",
    "lr_schedule",
    "gradient_accumulation",
    "numeric_runtime",
];

pub const BEHAVIORAL_CHECKS: [&str; 4] = [STAGE_GATE, "loss_curve", "generation", "behavior_runtime"];

#[derive(Serialize, Deserialize, Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum CheckStatus {
    Pass,
    Fail,
    HardFail,
    Blocked,
    NotSupported,
}

impl CheckStatus {
    pub fn is_failure(self) -> bool {
        matches!(self, CheckStatus::Fail | CheckStatus::HardFail)
    }
}

/// One named check's outcome.
#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
pub struct CheckRecord {
    pub stage: Stage,
    pub name: String,
    pub status: CheckStatus,
    #[serde(default)]
    pub failure_kind: Option<FailureReason>,
    #[serde(default)]
    pub metrics: Option<CompareMetrics>,
    #[serde(default)]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub detail: serde_json::Value,
}

impl CheckRecord {
    fn new(stage: Stage, name: &str, status: CheckStatus) -> Self {
        Self {
            stage,
            name: name.to_string(),
            status,
            failure_kind: None,
            metrics: None,
            error: None,
            detail: serde_json::Value::Null,
        }
    }

    pub fn pass(stage: Stage, name: &str) -> Self {
        Self::new(stage, name, CheckStatus::Pass)
    }

    /// A soft failure (mismatch without a failure symbol).
    pub fn fail(stage: Stage, name: &str, kind: Option<FailureReason>, error: impl Into<String>) -> Self {
        Self { failure_kind: kind, error: Some(error.into()), ..Self::new(stage, name, CheckStatus::Fail) }
    }

    /// A hard failure caused by ⊥.
    pub fn bottom(stage: Stage, name: &str, bottom: &Bottom) -> Self {
        Self {
            failure_kind: Some(bottom.reason),
            error: Some(bottom.error.clone()),
            ..Self::new(stage, name, CheckStatus::HardFail)
        }
    }

    pub fn not_supported(stage: Stage, name: &str, reason: impl Into<String>) -> Self {
        Self { error: Some(reason.into()), ..Self::new(stage, name, CheckStatus::NotSupported) }
    }

    pub fn blocked(stage: Stage, reason: impl Into<String>) -> Self {
        Self { error: Some(reason.into()), ..Self::new(stage, STAGE_GATE, CheckStatus::Blocked) }
    }

    pub fn from_verdict(stage: Stage, name: &str, verdict: CompareVerdict) -> Self {
        let status = match verdict.status {
            CompareStatus::Pass => CheckStatus::Pass,
            CompareStatus::Fail => CheckStatus::Fail,
            CompareStatus::HardFail => CheckStatus::HardFail,
        };
        Self {
            failure_kind: verdict.failure_kind,
            metrics: verdict.metrics,
            error: (status != CheckStatus::Pass).then_some(verdict.reason),
            ..Self::new(stage, name, status)
        }
    }

    pub fn with_detail(mut self, detail: serde_json::Value) -> Self {
        self.detail = detail;
        self
    }

    pub fn is_failure(&self) -> bool {
        self.status.is_failure()
    }

    /// `stage.name`.
    pub fn qualified_name(&self) -> String {
        format!("{}.{}", self.stage, self.name)
    }
}

#[derive(Serialize, Deserialize, Clone, Copy, Debug, PartialEq, Eq)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum StageStatus {
    Pass,
    Fail,
    Blocked,
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
pub struct StageSummary {
    pub stage: Stage,
    pub status: StageStatus,
    /// Probe requests sent to either runtime while running this stage.
    pub probes_sent: usize,
    pub records: Vec<CheckRecord>,
}

impl StageSummary {
    pub fn from_records(stage: Stage, records: Vec<CheckRecord>, probes_sent: usize) -> Self {
        let ok = records.iter().all(|r| matches!(r.status, CheckStatus::Pass | CheckStatus::NotSupported));
        let status = if ok { StageStatus::Pass } else { StageStatus::Fail };
        Self { stage, status, probes_sent, records }
    }

    pub fn blocked(stage: Stage, reason: impl Into<String>) -> Self {
        Self { stage, status: StageStatus::Blocked, probes_sent: 0, records: vec![CheckRecord::blocked(stage, reason)] }
    }

    pub fn passed(&self) -> bool {
        self.status == StageStatus::Pass
    }

    pub fn record(&self, name: &str) -> Option<&CheckRecord> {
        self.records.iter().find(|r| r.name == name)
    }

    pub fn first_failure(&self) -> Option<&CheckRecord> {
        self.records.iter().find(|r| r.is_failure())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn summary_status_rules() {
        let s = StageSummary::from_records(
            Stage::Spec,
            vec![CheckRecord::pass(Stage::Spec, "weight_loading"), CheckRecord::not_supported(Stage::Spec, "x", "n/a")],
            2,
        );
        assert!(s.passed());
        let f = StageSummary::from_records(
            Stage::Spec,
            vec![CheckRecord::fail(Stage::Spec, "weight_loading", Some(FailureReason::SchemaMismatch), "extra")],
            2,
        );
        assert_eq!(f.status, StageStatus::Fail);
        let b = StageSummary::blocked(Stage::Numeric, "spec failed");
        assert_eq!(b.records.len(), 1);
        assert_eq!(b.records[0].status, CheckStatus::Blocked);
        assert_eq!(b.records[0].name, STAGE_GATE);
    }

    #[test]
    fn record_serialization_shape() {
        let r = CheckRecord::bottom(Stage::Numeric, "gradient_loss", &Bottom::new(FailureReason::Nonfinite, "nan"));
        let v = serde_json::to_value(&r).unwrap();
        assert_eq!(v["stage"], "numeric");
        assert_eq!(v["status"], "HARD_FAIL");
        assert_eq!(v["failure_kind"], "NONFINITE");
        assert!(v.get("detail").is_none());
        let back: CheckRecord = serde_json::from_value(v).unwrap();
        assert_eq!(back, r);
    }
}
