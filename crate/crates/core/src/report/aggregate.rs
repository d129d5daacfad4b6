//! Corpus aggregation: pass@k, stage-conditional rates, taxonomy counts and
//! the self-report gap, per system.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::taxonomy::{Category, RuleTable};
use super::VerificationReport;
use crate::contract::Method;
use crate::pipeline::Stage;

#[derive(Debug, Error)]
pub enum AggregateError {
    #[error("reading {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {message}")]
    Malformed { path: PathBuf, message: String },
    #[error("mixed report schema major versions: {0:?}")]
    MixedSchema(BTreeSet<String>),
    #[error("k must be at least 1")]
    BadK,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> AggregateError + '_ {
    move |source| AggregateError::Io { path: path.to_path_buf(), source }
}

/// One attempt of one system at one task.
#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
pub struct AttemptMeta {
    pub attempt_id: String,
    pub system_id: String,
    pub task_id: String,
    #[serde(default)]
    pub self_reported_pass: Option<bool>,
    /// Report path, relative to the reports directory.
    pub report: String,
    /// Attempt order within (system, task); metadata order when absent.
    #[serde(default)]
    pub attempt_index: Option<u32>,
    #[serde(default)]
    pub tokens: Option<u64>,
}

#[derive(Clone, Debug)]
pub struct CorpusEntry {
    pub meta: AttemptMeta,
    pub report: VerificationReport,
}

#[derive(Clone, Debug, Default)]
pub struct Corpus {
    pub entries: Vec<CorpusEntry>,
}

/// Every report file under `dir` (recursively), sorted by path. JSON files
/// that are not verification reports are skipped.
pub fn load_reports(dir: &Path) -> Result<Vec<(PathBuf, VerificationReport)>, AggregateError> {
    let mut files = Vec::new();
    collect_json(dir, &mut files)?;
    files.sort();
    let mut out = Vec::new();
    for path in files {
        let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
        let Ok(value) = serde_json::from_str::<serde_json::Value>(&text) else { continue };
        if value.get("schema_version").is_none() || value.get("stages").is_none() {
            continue;
        }
        let report = serde_json::from_value(value)
            .map_err(|e| AggregateError::Malformed { path: path.clone(), message: e.to_string() })?;
        out.push((path, report));
    }
    check_schema(out.iter().map(|(_, r)| r))?;
    Ok(out)
}

fn collect_json(dir: &Path, out: &mut Vec<PathBuf>) -> Result<(), AggregateError> {
    for entry in std::fs::read_dir(dir).map_err(io_err(dir))? {
        let path = entry.map_err(io_err(dir))?.path();
        if path.is_dir() {
            collect_json(&path, out)?;
        } else if path.extension().is_some_and(|e| e == "json") {
            out.push(path);
        }
    }
    Ok(())
}

fn check_schema<'a>(reports: impl Iterator<Item = &'a VerificationReport>) -> Result<(), AggregateError> {
    let majors: BTreeSet<String> =
        reports.map(|r| r.schema_version.split('.').next().unwrap_or_default().to_string()).collect();
    if majors.len() > 1 {
        return Err(AggregateError::MixedSchema(majors));
    }
    Ok(())
}

impl Corpus {
    /// Load the metadata file (JSON lines) and the reports it references.
    pub fn load(reports_dir: &Path, meta_path: &Path) -> Result<Self, AggregateError> {
        let text = std::fs::read_to_string(meta_path).map_err(io_err(meta_path))?;
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let meta: AttemptMeta = serde_json::from_str(line).map_err(|e| AggregateError::Malformed {
                path: meta_path.to_path_buf(),
                message: format!("line {}: {e}", i + 1),
            })?;
            if meta.attempt_id.is_empty() || meta.system_id.is_empty() || meta.task_id.is_empty() {
                return Err(AggregateError::Malformed {
                    path: meta_path.to_path_buf(),
                    message: format!("line {}: ids must be non-empty", i + 1),
                });
            }
            let path = reports_dir.join(&meta.report);
            let report_text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
            let report = VerificationReport::from_json(&report_text)
                .map_err(|e| AggregateError::Malformed { path: path.clone(), message: e.to_string() })?;
            entries.push(CorpusEntry { meta, report });
        }
        let corpus = Corpus { entries };
        check_schema(corpus.entries.iter().map(|e| &e.report))?;
        Ok(corpus)
    }

    /// Attempts grouped by system then task, each in attempt order.
    fn grouped(&self) -> BTreeMap<&str, BTreeMap<&str, Vec<&CorpusEntry>>> {
        let mut out: BTreeMap<&str, BTreeMap<&str, Vec<&CorpusEntry>>> = BTreeMap::new();
        for e in &self.entries {
            out.entry(e.meta.system_id.as_str()).or_default().entry(e.meta.task_id.as_str()).or_default().push(e);
        }
        for tasks in out.values_mut() {
            for attempts in tasks.values_mut() {
                // Stable: metadata order breaks ties and fills missing indices.
                attempts.sort_by_key(|e| e.meta.attempt_index.unwrap_or(u32::MAX));
            }
        }
        out
    }
}

/// `passed / total` as a percentage; an empty denominator is 0%.
#[derive(Serialize, Deserialize, Clone, Copy, Debug, Default, PartialEq)]
pub struct Rate {
    pub passed: usize,
    pub total: usize,
    pub percent: f64,
}

impl Rate {
    pub fn new(passed: usize, total: usize) -> Self {
        let percent = if total == 0 { 0.0 } else { 100.0 * passed as f64 / total as f64 };
        Self { passed, total, percent }
    }

    pub fn fraction(&self) -> f64 {
        self.percent / 100.0
    }
}

#[derive(Serialize, Deserialize, Clone, Copy, Debug, Default, PartialEq)]
pub struct PassAtK {
    pub at_1: Rate,
    pub at_k: Rate,
}

/// First-attempt stage rates: Spec over all tasks, Numeric given Spec,
/// Behavioral given Numeric.
#[derive(Serialize, Deserialize, Clone, Copy, Debug, Default, PartialEq)]
pub struct StageRates {
    pub spec: Rate,
    pub numeric_given_spec: Rate,
    pub behavioral_given_numeric: Rate,
    pub overall: Rate,
}

#[derive(Serialize, Deserialize, Clone, Debug, Default, PartialEq)]
pub struct SystemSummary {
    pub tasks: usize,
    pub attempts: usize,
    pub overall: PassAtK,
    pub per_method: BTreeMap<Method, PassAtK>,
    pub stages_at_1: StageRates,
    /// Distinct attempts carrying each category.
    pub taxonomy: BTreeMap<Category, usize>,
    /// Tasks with fewer than k attempts; their pass@k uses what exists.
    pub tasks_short_of_k: usize,
}

#[derive(Serialize, Deserialize, Clone, Debug, Default, PartialEq)]
pub struct Summary {
    pub k: u32,
    pub systems: BTreeMap<String, SystemSummary>,
}

fn stage_passed(r: &VerificationReport, stage: Stage) -> bool {
    r.stage(stage).is_some_and(|s| s.passed())
}

fn method_of(e: &CorpusEntry) -> Method {
    e.report.contract.method()
}

/// Aggregate a corpus with the shipped taxonomy rules.
pub fn aggregate(corpus: &Corpus, k: u32) -> Result<Summary, AggregateError> {
    aggregate_with(corpus, k, &RuleTable::default())
}

pub fn aggregate_with(corpus: &Corpus, k: u32, rules: &RuleTable) -> Result<Summary, AggregateError> {
    if k == 0 {
        return Err(AggregateError::BadK);
    }
    let mut systems = BTreeMap::new();
    for (system, tasks) in corpus.grouped() {
        let mut s = SystemSummary { tasks: tasks.len(), ..Default::default() };
        let (mut p1, mut pk) = (0, 0);
        let mut per_method: BTreeMap<Method, (usize, usize, usize)> = BTreeMap::new();
        let (mut spec, mut num, mut beh) = (0, 0, 0);
        for attempts in tasks.values() {
            s.attempts += attempts.len();
            if attempts.len() < k as usize {
                s.tasks_short_of_k += 1;
            }
            let first = attempts[0];
            let a1 = first.report.passed();
            let ak = attempts.iter().take(k as usize).any(|e| e.report.passed());
            p1 += a1 as usize;
            pk += ak as usize;
            let m = per_method.entry(method_of(first)).or_default();
            m.0 += a1 as usize;
            m.1 += ak as usize;
            m.2 += 1;

            let r = &first.report;
            if stage_passed(r, Stage::Spec) {
                spec += 1;
                if stage_passed(r, Stage::Numeric) {
                    num += 1;
                    if stage_passed(r, Stage::Behavioral) {
                        beh += 1;
                    }
                }
            }
            for e in attempts {
                let cats: BTreeSet<Category> = rules.classify(&e.report).into_iter().map(|l| l.category).collect();
                for c in cats {
                    *s.taxonomy.entry(c).or_default() += 1;
                }
            }
        }
        let n = tasks.len();
        s.overall = PassAtK { at_1: Rate::new(p1, n), at_k: Rate::new(pk, n) };
        s.per_method = per_method
            .into_iter()
            .map(|(m, (a1, ak, total))| (m, PassAtK { at_1: Rate::new(a1, total), at_k: Rate::new(ak, total) }))
            .collect();
        s.stages_at_1 = StageRates {
            spec: Rate::new(spec, n),
            numeric_given_spec: Rate::new(num, spec),
            behavioral_given_numeric: Rate::new(beh, num),
            overall: Rate::new(p1, n),
        };
        systems.insert(system.to_string(), s);
    }
    Ok(Summary { k, systems })
}

#[derive(Serialize, Deserialize, Clone, Copy, Debug, Default, PartialEq)]
pub struct SelfReportGap {
    pub self_rate: f64,
    pub measured_rate: f64,
    /// Percentage points: self − measured.
    pub gap: f64,
    /// First attempts without a self-report.
    pub exclusions: usize,
}

/// Self-reported versus measured first-attempt pass rate, per system.
pub fn self_report_gap(corpus: &Corpus) -> BTreeMap<String, SelfReportGap> {
    let mut out = BTreeMap::new();
    for (system, tasks) in corpus.grouped() {
        let mut exclusions = 0;
        let (mut claimed, mut measured, mut n) = (0, 0, 0);
        for attempts in tasks.values() {
            let first = attempts[0];
            match first.meta.self_reported_pass {
                None => exclusions += 1,
                Some(claim) => {
                    n += 1;
                    claimed += claim as usize;
                    measured += first.report.passed() as usize;
                }
            }
        }
        let (self_rate, measured_rate) = (Rate::new(claimed, n).percent, Rate::new(measured, n).percent);
        out.insert(
            system.to_string(),
            SelfReportGap { self_rate, measured_rate, gap: self_rate - measured_rate, exclusions },
        );
    }
    out
}

/// Aligned-column table: overall and per-method pass@1/pass@k, then the
/// first-attempt stage rates.
pub fn render_table(summary: &Summary, gaps: &BTreeMap<String, SelfReportGap>) -> String {
    let k = summary.k;
    let mut header = vec!["System".to_string(), "Overall@1".into(), format!("Overall@{k}")];
    for m in Method::ALL {
        let m = m.as_str().to_uppercase();
        header.push(format!("{m}@1"));
        header.push(format!("{m}@{k}"));
    }
    header.extend(["Spec".into(), "Num.".into(), "Beh.".into(), "Self".into(), "Gap".into()]);
    let pct = |r: &Rate| format!("{:.1}", r.percent);
    let mut rows = vec![header];
    for (name, s) in &summary.systems {
        let mut row = vec![name.clone(), pct(&s.overall.at_1), pct(&s.overall.at_k)];
        for m in Method::ALL {
            match s.per_method.get(&m) {
                Some(p) => row.extend([pct(&p.at_1), pct(&p.at_k)]),
                None => row.extend(["-".into(), "-".into()]),
            }
        }
        row.extend([
            pct(&s.stages_at_1.spec),
            pct(&s.stages_at_1.numeric_given_spec),
            pct(&s.stages_at_1.behavioral_given_numeric),
        ]);
        match gaps.get(name) {
            Some(g) => row.extend([format!("{:.1}", g.self_rate), format!("{:.1}", g.gap)]),
            None => row.extend(["-".into(), "-".into()]),
        }
        rows.push(row);
    }
    let widths: Vec<usize> =
        (0..rows[0].len()).map(|c| rows.iter().map(|r| r[c].chars().count()).max().unwrap_or(0)).collect();
    let mut out = String::new();
    for row in &rows {
        let cells: Vec<String> = row
            .iter()
            .enumerate()
            .map(|(i, c)| if i == 0 { format!("{c:<w$}", w = widths[i]) } else { format!("{c:>w$}", w = widths[i]) })
            .collect();
        let _ = writeln!(out, "{}", cells.join("  ").trim_end());
    }
    let short: usize = summary.systems.values().map(|s| s.tasks_short_of_k).sum();
    if short > 0 {
        let _ = writeln!(out, "note: {short} task(s) had fewer than {k} attempts; pass@{k} uses the available attempts");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rate_rounding_convention() {
        assert_eq!(format!("{:.1}", Rate::new(13, 45).percent), "28.9");
        assert_eq!(Rate::new(0, 0).percent, 0.0);
    }
}
