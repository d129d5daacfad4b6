//! Root-cause classification of failing reports.
//!
//! Each non-blocked failing record is matched against an ordered rule table
//! keyed on `(stage, name, failure_kind)` plus error-string patterns; the
//! first matching rule names its category. A report maps to the set of
//! categories of its failing records, each with the first record as
//! evidence. The rule table is data and can be replaced at runtime.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::VerificationReport;
use crate::artifact::FailureReason;
use crate::pipeline::{CheckRecord, CheckStatus, Stage};

/// The shipped rule table.
pub const DEFAULT_RULES: &str = include_str!("taxonomy_rules.json");

/// Longest error excerpt kept as evidence.
const EXCERPT_CHARS: usize = 240;

#[derive(Serialize, Deserialize, Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Category {
    InitFailure,
    ParamTreeMismatch,
    BatchSchemaMismatch,
    BoundarySeam,
    DeviceMismatch,
    DtypeUnsupported,
    ArtifactContractDrift,
    MissingArtifact,
    ShapeMismatch,
    ForwardMismatch,
    MethodMismatch,
    GradientMismatch,
    BehaviorGeneration,
    ArtifactNeverProduced,
    /// Failures no rule explains; evidence is kept, never dropped.
    Other,
}

impl Category {
    pub const ALL: [Category; 15] = [
        Category::InitFailure,
        Category::ParamTreeMismatch,
        Category::BatchSchemaMismatch,
        Category::BoundarySeam,
        Category::DeviceMismatch,
        Category::DtypeUnsupported,
        Category::ArtifactContractDrift,
        Category::MissingArtifact,
        Category::ShapeMismatch,
        Category::ForwardMismatch,
        Category::MethodMismatch,
        Category::GradientMismatch,
        Category::BehaviorGeneration,
        Category::ArtifactNeverProduced,
        Category::Other,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Category::InitFailure => "INIT_FAILURE",
            Category::ParamTreeMismatch => "PARAM_TREE_MISMATCH",
            Category::BatchSchemaMismatch => "BATCH_SCHEMA_MISMATCH",
            Category::BoundarySeam => "BOUNDARY_SEAM",
            Category::DeviceMismatch => "DEVICE_MISMATCH",
            Category::DtypeUnsupported => "DTYPE_UNSUPPORTED",
            Category::ArtifactContractDrift => "ARTIFACT_CONTRACT_DRIFT",
            Category::MissingArtifact => "MISSING_ARTIFACT",
            Category::ShapeMismatch => "SHAPE_MISMATCH",
            Category::ForwardMismatch => "FORWARD_MISMATCH",
            Category::MethodMismatch => "METHOD_MISMATCH",
            Category::GradientMismatch => "GRADIENT_MISMATCH",
            Category::BehaviorGeneration => "BEHAVIOR_GENERATION",
            Category::ArtifactNeverProduced => "ARTIFACT_NEVER_PRODUCED",
            Category::Other => "OTHER",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// The record a label was derived from.
#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
pub struct Evidence {
    pub stage: Stage,
    pub name: String,
    pub status: CheckStatus,
    pub failure_kind: Option<FailureReason>,
    /// Leading part of the record's error string.
    pub error: Option<String>,
    /// The error pattern that selected the category, if any.
    pub matched_pattern: Option<String>,
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
pub struct TaxonomyLabel {
    pub category: Category,
    pub evidence: Evidence,
}

/// One classification rule. Present fields must all match; within a list
/// any entry may match.
#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct Rule {
    pub category: Category,
    #[serde(default)]
    pub stages: Option<Vec<Stage>>,
    #[serde(default)]
    pub names: Option<Vec<String>>,
    #[serde(default)]
    pub failure_kinds: Option<Vec<FailureReason>>,
    #[serde(default)]
    pub error_contains: Option<Vec<String>>,
}

impl Rule {
    /// `Some(pattern)` when the rule matches, with the matched error pattern.
    fn matches(&self, r: &CheckRecord) -> Option<Option<&str>> {
        if self.stages.as_ref().is_some_and(|s| !s.contains(&r.stage)) {
            return None;
        }
        if self.names.as_ref().is_some_and(|n| !n.iter().any(|n| *n == r.name)) {
            return None;
        }
        if let Some(kinds) = &self.failure_kinds {
            if !r.failure_kind.is_some_and(|k| kinds.contains(&k)) {
                return None;
            }
        }
        match &self.error_contains {
            None => Some(None),
            Some(patterns) => {
                let error = r.error.as_deref()?;
                patterns.iter().find(|p| error.contains(p.as_str())).map(|p| Some(p.as_str()))
            }
        }
    }
}

#[derive(Debug, Error)]
pub enum RuleError {
    #[error("malformed rule table: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("rule table has no catch-all rule")]
    NoFallback,
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
pub struct RuleTable {
    pub version: u32,
    pub rules: Vec<Rule>,
}

impl RuleTable {
    pub fn from_json(text: &str) -> Result<Self, RuleError> {
        let table: RuleTable = serde_json::from_str(text)?;
        let catch_all =
            |r: &Rule| r.stages.is_none() && r.names.is_none() && r.failure_kinds.is_none() && r.error_contains.is_none();
        if !table.rules.iter().any(catch_all) {
            return Err(RuleError::NoFallback);
        }
        Ok(table)
    }

    /// Category and matched pattern for one failing record.
    pub fn categorize<'a>(&'a self, record: &CheckRecord) -> (Category, Option<&'a str>) {
        self.rules
            .iter()
            .find_map(|rule| rule.matches(record).map(|p| (rule.category, p)))
            .unwrap_or((Category::Other, None))
    }

    /// Labels of a report: one per category, evidenced by the first failing
    /// record in report order. Blocked records never produce labels.
    pub fn classify(&self, report: &VerificationReport) -> Vec<TaxonomyLabel> {
        let mut labels: BTreeMap<Category, TaxonomyLabel> = BTreeMap::new();
        // Preflight failures are the reference's; they are only labeled
        // when the candidate-facing stages never ran.
        let records: Vec<&CheckRecord> = if report.preflight.passed() {
            report.stages.iter().flat_map(|s| &s.records).collect()
        } else {
            report.records().collect()
        };
        for r in records.into_iter().filter(|r| r.is_failure()) {
            let (category, pattern) = self.categorize(r);
            labels.entry(category).or_insert_with(|| TaxonomyLabel {
                category,
                evidence: Evidence {
                    stage: r.stage,
                    name: r.name.clone(),
                    status: r.status,
                    failure_kind: r.failure_kind,
                    error: r.error.as_deref().map(excerpt),
                    matched_pattern: pattern.map(str::to_string),
                },
            });
        }
        labels.into_values().collect()
    }
}

impl Default for RuleTable {
    fn default() -> Self {
        RuleTable::from_json(DEFAULT_RULES).expect("shipped rule table is valid")
    }
}

fn excerpt(s: &str) -> String {
    match s.char_indices().nth(EXCERPT_CHARS) {
        Some((i, _)) => format!("{}…", &s[..i]),
        None => s.to_string(),
    }
}

/// Classify with the shipped rule table.
pub fn classify(report: &VerificationReport) -> Vec<TaxonomyLabel> {
    thread_local! {
        static TABLE: RuleTable = RuleTable::default();
    }
    TABLE.with(|t| t.classify(report))
}
