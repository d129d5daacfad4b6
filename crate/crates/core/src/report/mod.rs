//! The verification report, its root-cause classification, and corpus
//! aggregation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::contract::EquivalenceContract;
use crate::pipeline::{CheckRecord, Stage, StageSummary};
use crate::protocol::Handshake;
use crate::runtime::HandleKind;

pub mod aggregate;
pub mod taxonomy;

pub use aggregate::{aggregate, self_report_gap, AggregateError, AttemptMeta, Corpus, CorpusEntry, Summary};
pub use taxonomy::{classify, Category, TaxonomyLabel};

/// Report schema version; the aggregator refuses mixed major versions.
pub const SCHEMA_VERSION: &str = "1.0";

#[derive(Serialize, Deserialize, Clone, Copy, Debug, PartialEq, Eq)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Overall {
    Pass,
    Fail,
}

/// Distinguished outcomes beyond the overall verdict.
#[derive(Serialize, Deserialize, Clone, Copy, Debug, PartialEq, Eq)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Outcome {
    ArtifactNeverProduced,
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
pub struct RuntimeInfo {
    pub descriptor: serde_json::Value,
    #[serde(default)]
    pub kind: Option<HandleKind>,
    #[serde(default)]
    pub handshake: Option<Handshake>,
    /// Captured stderr tail of external runtimes.
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub diagnostics: String,
}

/// Wall-clock timings; the only non-deterministic part of a report.
#[derive(Serialize, Deserialize, Clone, Debug, Default, PartialEq)]
pub struct Timings {
    pub stages: BTreeMap<Stage, f64>,
    pub total_secs: f64,
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
pub struct VerificationReport {
    pub schema_version: String,
    pub engine_version: String,
    pub reference: RuntimeInfo,
    pub candidate: RuntimeInfo,
    pub contract: EquivalenceContract,
    pub preflight: StageSummary,
    /// Spec, Numeric and Behavioral, in order.
    pub stages: Vec<StageSummary>,
    pub overall: Overall,
    #[serde(default)]
    pub outcome: Option<Outcome>,
    #[serde(default)]
    pub timings: Timings,
}

impl VerificationReport {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        reference: RuntimeInfo,
        candidate: RuntimeInfo,
        contract: EquivalenceContract,
        preflight: StageSummary,
        stages: Vec<StageSummary>,
        overall: Overall,
        outcome: Option<Outcome>,
        timings: Timings,
    ) -> Self {
        Self {
            schema_version: SCHEMA_VERSION.to_string(),
            engine_version: env!("CARGO_PKG_VERSION").to_string(),
            reference,
            candidate,
            contract,
            preflight,
            stages,
            overall,
            outcome,
            timings,
        }
    }

    pub fn passed(&self) -> bool {
        self.overall == Overall::Pass
    }

    /// Summary of any stage, preflight included.
    pub fn stage(&self, stage: Stage) -> Option<&StageSummary> {
        if stage == Stage::Preflight {
            return Some(&self.preflight);
        }
        self.stages.iter().find(|s| s.stage == stage)
    }

    /// Every record, preflight first.
    pub fn records(&self) -> impl Iterator<Item = &CheckRecord> {
        std::iter::once(&self.preflight).chain(&self.stages).flat_map(|s| &s.records)
    }

    /// First failing record of the candidate-facing stages.
    pub fn first_failure(&self) -> Option<&CheckRecord> {
        self.stages.iter().flat_map(|s| &s.records).find(|r| r.is_failure())
    }

    pub fn to_canonical_json(&self) -> String {
        crate::canonical_json(self)
    }

    /// Canonical JSON without the timings block; byte-identical across
    /// repeated runs of the same verification.
    pub fn canonical_without_timings(&self) -> String {
        let mut v = serde_json::to_value(self).expect("serializable report");
        if let Some(o) = v.as_object_mut() {
            o.remove("timings");
        }
        serde_json::to_string_pretty(&v).expect("json value")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}
