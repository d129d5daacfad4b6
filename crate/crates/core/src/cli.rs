//! Command-line entry points.
//!
//! Exit codes: 0 on PASS (or success), 1 on a FAIL verdict, 2 on engine or
//! usage errors. Logs go to standard error as JSON lines.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Parser, Subcommand};
use rayon::prelude::*;
use serde::Deserialize;
use serde_json::json;
use thiserror::Error;

use crate::contract::{parse_config, BoundedConfig, ConfigError, Method};
use crate::pipeline::{run_preflight, verify_with, RuntimeSource, VerifyOptions};
use crate::report::aggregate::{load_reports, render_table};
use crate::report::taxonomy::RuleTable;
use crate::report::{aggregate, self_report_gap, AggregateError, Corpus, Summary, VerificationReport};
use crate::runtime::serve::{serve, ServeOptions};
use crate::runtime::Descriptor;
use crate::toy::{self, FaultId};

pub const EXIT_PASS: i32 = 0;
pub const EXIT_FAIL: i32 = 1;
pub const EXIT_ERROR: i32 = 2;

/// Overrides the per-probe timeout, in seconds.
pub const ENV_PROBE_TIMEOUT: &str = "EQV_PROBE_TIMEOUT";
/// Overrides the wire-protocol frame cap, in bytes.
pub const ENV_FRAME_CAP: &str = "EQV_FRAME_CAP";

#[derive(Parser, Debug)]
#[command(name = "eqv", version, about = "Differential equivalence verifier for training runtimes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Verify a candidate runtime against a reference and write report.json.
    Verify {
        #[arg(long)]
        config: PathBuf,
        /// Descriptor: JSON, `toy:NAME[:FAULT]`, or a JSON file. Defaults to
        /// the config document's `reference`, then the method's toy.
        #[arg(long)]
        reference: Option<String>,
        /// Descriptor; defaults to the config document's `candidate`.
        #[arg(long)]
        candidate: Option<String>,
        #[arg(long)]
        out: PathBuf,
        /// Overwrite an existing report.
        #[arg(long)]
        force: bool,
    },
    /// Run reference preflight only.
    Preflight {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        reference: Option<String>,
    },
    /// Describe or serve a fault-injected toy.
    Inject {
        #[arg(long)]
        fault: String,
        #[arg(long)]
        method: Method,
        /// Serve the injected toy over standard streams.
        #[arg(long)]
        serve: bool,
    },
    /// Serve a toy runtime over the wire protocol on standard streams.
    ServeToy {
        #[arg(long)]
        toy: String,
        #[arg(long)]
        fault: Option<String>,
        /// Exit abruptly on receiving the k-th request (0-based).
        #[arg(long)]
        crash_at_probe: Option<usize>,
    },
    /// Label every report under a directory with root-cause categories.
    Classify {
        #[arg(long)]
        reports_dir: PathBuf,
        /// Replacement rule table (JSON).
        #[arg(long)]
        rules: Option<PathBuf>,
    },
    /// Aggregate a report corpus into pass@k and stage rates.
    Aggregate {
        #[arg(long)]
        reports_dir: PathBuf,
        /// Attempt metadata (JSON lines); defaults to REPORTS_DIR/attempts.jsonl.
        #[arg(long)]
        meta: Option<PathBuf>,
        #[arg(long, default_value_t = 3)]
        k: u32,
        /// Also write the summary as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run many verifications from a task list (JSON lines) in parallel.
    Batch {
        #[arg(long)]
        tasks: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long)]
        force: bool,
    },
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Aggregate(#[from] AggregateError),
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.to_path_buf(), source }
}

/// Install the JSON-lines stderr logger (idempotent).
pub fn init_logging() {
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format(|buf, record| {
            let line = json!({
                "level": record.level().as_str(),
                "target": record.target(),
                "msg": record.args().to_string(),
            });
            writeln!(buf, "{line}")
        })
        .try_init();
}

/// Parse arguments and run; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_ERROR } else { EXIT_PASS };
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            log::error!("{e}");
            eprintln!("error: {e}");
            EXIT_ERROR
        }
    }
}

fn dispatch(command: Command) -> Result<i32, CliError> {
    match command {
        Command::Verify { config, reference, candidate, out, force } => {
            let doc = ConfigDoc::load(&config)?;
            let reference = doc.reference(reference.as_deref())?;
            let candidate = doc.candidate(candidate.as_deref())?;
            let report = verify_one(&doc.config, reference, candidate, &out, force)?;
            Ok(verdict_code(&report))
        }
        Command::Preflight { config, reference } => {
            let doc = ConfigDoc::load(&config)?;
            let reference = doc.reference(reference.as_deref())?;
            check_resolvable(&reference)?;
            let (summary, contract) = run_preflight(reference, &doc.config, &verify_options()?)?;
            let out = json!({ "preflight": summary, "ppo_value_mode": contract.ppo_value_mode() });
            println!("{}", crate::canonical_json(&out));
            Ok(if summary.passed() { EXIT_PASS } else { EXIT_FAIL })
        }
        Command::Inject { fault, method, serve: serving } => {
            let fault = parse_fault(&fault)?;
            if !fault.applies_to(method) {
                return Err(CliError::Usage(format!("fault {fault} does not apply to {method}")));
            }
            let descriptor = Descriptor::faulty_toy(toy::reference_toy(method), fault);
            if serving {
                serve_toy(toy::reference_toy(method), Some(fault), None)
            } else {
                println!("{}", serde_json::to_string(&descriptor).expect("serializable descriptor"));
                Ok(EXIT_PASS)
            }
        }
        Command::ServeToy { toy, fault, crash_at_probe } => {
            let fault = fault.as_deref().map(parse_fault).transpose()?;
            serve_toy(&toy, fault, crash_at_probe)
        }
        Command::Classify { reports_dir, rules } => {
            let table = match rules {
                Some(p) => RuleTable::from_json(&std::fs::read_to_string(&p).map_err(io(&p))?)
                    .map_err(|e| CliError::Usage(e.to_string()))?,
                None => RuleTable::default(),
            };
            let reports = load_reports(&reports_dir)?;
            let mut counts = std::collections::BTreeMap::new();
            let mut entries = Vec::new();
            for (path, report) in &reports {
                let labels = table.classify(report);
                for l in &labels {
                    *counts.entry(l.category).or_insert(0usize) += 1;
                }
                let rel = path.strip_prefix(&reports_dir).unwrap_or(path);
                entries.push(json!({ "report": rel, "overall": report.overall, "labels": labels }));
            }
            println!("{}", crate::canonical_json(&json!({ "reports": entries, "counts": counts })));
            Ok(EXIT_PASS)
        }
        Command::Aggregate { reports_dir, meta, k, out } => {
            if !reports_dir.is_dir() {
                return Err(CliError::Usage(format!("{} is not a directory", reports_dir.display())));
            }
            let meta = meta.unwrap_or_else(|| reports_dir.join("attempts.jsonl"));
            let corpus = if meta.exists() { Corpus::load(&reports_dir, &meta)? } else { Corpus::default() };
            let summary: Summary = aggregate(&corpus, k)?;
            let gaps = self_report_gap(&corpus);
            print!("{}", render_table(&summary, &gaps));
            if let Some(out) = out {
                let doc = json!({ "summary": summary, "self_report_gap": gaps });
                std::fs::write(&out, crate::canonical_json(&doc)).map_err(io(&out))?;
            }
            Ok(EXIT_PASS)
        }
        Command::Batch { tasks, out, jobs, force } => batch(&tasks, &out, jobs, force),
    }
}

fn verdict_code(report: &VerificationReport) -> i32 {
    if report.passed() {
        EXIT_PASS
    } else {
        EXIT_FAIL
    }
}

fn parse_fault(s: &str) -> Result<FaultId, CliError> {
    s.parse::<FaultId>().map_err(|e| {
        let ids: Vec<&str> = FaultId::ALL.iter().map(|f| f.as_str()).collect();
        CliError::Usage(format!("{e}; valid fault ids: {}", ids.join(", ")))
    })
}

fn serve_toy(name: &str, fault: Option<FaultId>, crash_at_probe: Option<usize>) -> Result<i32, CliError> {
    let mut runtime = toy::resolve(name, fault).map_err(CliError::Usage)?;
    let frame_cap = env_parse::<usize>(ENV_FRAME_CAP)?;
    let opts = ServeOptions { frame_cap, crash_at_probe };
    let stdin = std::io::stdin().lock();
    let stdout = std::io::stdout().lock();
    match serve(runtime.as_mut(), stdin, std::io::BufWriter::new(stdout), opts) {
        Ok(()) => Ok(EXIT_PASS),
        Err(e) => {
            log::error!("serve-toy: {e}");
            Ok(EXIT_ERROR)
        }
    }
}

fn env_parse<T: std::str::FromStr>(name: &str) -> Result<Option<T>, CliError> {
    match std::env::var(name) {
        Ok(v) => v.trim().parse().map(Some).map_err(|_| CliError::Usage(format!("{name}: cannot parse '{v}'"))),
        Err(_) => Ok(None),
    }
}

/// Engine options from the environment.
pub fn verify_options() -> Result<VerifyOptions, CliError> {
    let timeout = env_parse::<f64>(ENV_PROBE_TIMEOUT)?;
    if timeout.is_some_and(|t| !(t.is_finite() && t > 0.0)) {
        return Err(CliError::Usage(format!("{ENV_PROBE_TIMEOUT} must be a positive number of seconds")));
    }
    Ok(VerifyOptions {
        probe_timeout: timeout.map(Duration::from_secs_f64),
        frame_cap: env_parse(ENV_FRAME_CAP)?,
        kill_grace: None,
    })
}

/// Parse a descriptor argument: inline JSON, `toy:NAME[:FAULT]`, or a path
/// to a JSON file.
pub fn parse_descriptor(arg: &str) -> Result<Descriptor, CliError> {
    let arg = arg.trim();
    if let Some(rest) = arg.strip_prefix("toy:") {
        let mut parts = rest.splitn(2, ':');
        let name = parts.next().unwrap_or_default().to_string();
        let fault = parts.next().map(parse_fault).transpose()?;
        return Ok(Descriptor::Toy { toy: name, fault });
    }
    let text = if arg.starts_with('{') {
        arg.to_string()
    } else {
        let p = Path::new(arg);
        std::fs::read_to_string(p).map_err(io(p))?
    };
    serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("malformed descriptor '{arg}': {e}")))
}

/// Reference descriptors must resolve; only candidates may be missing.
fn check_resolvable(d: &Descriptor) -> Result<(), CliError> {
    match d {
        Descriptor::Toy { toy: name, .. } if toy::toy_spec(name).is_none() => {
            Err(CliError::Usage(format!("unknown toy runtime '{name}'")))
        }
        Descriptor::Command { cmd, .. } if cmd.is_empty() => Err(CliError::Usage("empty command descriptor".into())),
        Descriptor::Command { cmd, cwd, .. } if !program_exists(&cmd[0], cwd.as_deref()) => {
            Err(CliError::Usage(format!("command not found: {}", cmd[0])))
        }
        _ => Ok(()),
    }
}

fn program_exists(program: &str, cwd: Option<&Path>) -> bool {
    let p = Path::new(program);
    if p.components().count() > 1 {
        return match cwd {
            Some(dir) if p.is_relative() => dir.join(p).exists(),
            _ => p.exists(),
        };
    }
    std::env::var_os("PATH").is_some_and(|paths| std::env::split_paths(&paths).any(|d| d.join(program).is_file()))
}

/// A config document: a bare config or `{config, reference?, candidate?}`.
struct ConfigDoc {
    config: BoundedConfig,
    reference: Option<Descriptor>,
    candidate: Option<Descriptor>,
}

#[derive(Deserialize)]
struct Wrapper {
    #[serde(default)]
    reference: Option<Descriptor>,
    #[serde(default)]
    candidate: Option<Descriptor>,
}

impl ConfigDoc {
    fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(io(path))?;
        Self::parse(&text)
    }

    fn parse(text: &str) -> Result<Self, CliError> {
        let config = parse_config(text)?;
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        let wrapper: Wrapper = if value.get("config").is_some() {
            serde_json::from_value(value).map_err(|e| ConfigError::Parse(e.to_string()))?
        } else {
            Wrapper { reference: None, candidate: None }
        };
        Ok(Self { config, reference: wrapper.reference, candidate: wrapper.candidate })
    }

    fn reference(&self, arg: Option<&str>) -> Result<Descriptor, CliError> {
        Ok(match arg {
            Some(a) => parse_descriptor(a)?,
            None => self.reference.clone().unwrap_or_else(|| Descriptor::toy(toy::reference_toy(self.config.method))),
        })
    }

    fn candidate(&self, arg: Option<&str>) -> Result<Descriptor, CliError> {
        match arg {
            Some(a) => parse_descriptor(a),
            None => self.candidate.clone().ok_or_else(|| CliError::Usage("no candidate descriptor given".into())),
        }
    }
}

fn verify_one(
    config: &BoundedConfig,
    reference: Descriptor,
    candidate: Descriptor,
    out: &Path,
    force: bool,
) -> Result<VerificationReport, CliError> {
    check_resolvable(&reference)?;
    let path = out.join("report.json");
    if path.exists() && !force {
        return Err(CliError::Usage(format!("{} exists; pass --force to overwrite", path.display())));
    }
    std::fs::create_dir_all(out).map_err(io(out))?;
    let report = verify_with(RuntimeSource::from(reference), RuntimeSource::from(candidate), config, &verify_options()?)?;
    std::fs::write(&path, report.to_canonical_json()).map_err(io(&path))?;
    let first = report.first_failure().map(|r| r.qualified_name());
    log::info!("{} overall={:?} first_failure={}", path.display(), report.overall, first.as_deref().unwrap_or("-"));
    Ok(report)
}

/// One line of a batch task file.
#[derive(Deserialize)]
struct BatchTask {
    id: String,
    /// Path (relative to the task file) or inline config document.
    config: serde_json::Value,
    /// Descriptor object or any string accepted by `--candidate`.
    #[serde(default)]
    reference: Option<serde_json::Value>,
    #[serde(default)]
    candidate: Option<serde_json::Value>,
}

fn descriptor_value(v: serde_json::Value) -> Result<Descriptor, CliError> {
    match v {
        serde_json::Value::String(s) => parse_descriptor(&s),
        other => serde_json::from_value(other).map_err(|e| CliError::Usage(format!("invalid descriptor: {e}"))),
    }
}

fn batch(tasks_path: &Path, out: &Path, jobs: usize, force: bool) -> Result<i32, CliError> {
    let text = std::fs::read_to_string(tasks_path).map_err(io(tasks_path))?;
    let base = tasks_path.parent().unwrap_or(Path::new("."));
    let mut tasks = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let task: BatchTask = serde_json::from_str(line)
            .map_err(|e| CliError::Usage(format!("{}:{}: {e}", tasks_path.display(), i + 1)))?;
        if task.id.is_empty() || task.id.contains(['/', '\\']) || task.id.starts_with('.') {
            return Err(CliError::Usage(format!("{}:{}: invalid task id", tasks_path.display(), i + 1)));
        }
        let doc = match &task.config {
            serde_json::Value::String(p) => ConfigDoc::load(&base.join(p))?,
            inline => ConfigDoc::parse(&inline.to_string())?,
        };
        let reference = match task.reference {
            Some(v) => descriptor_value(v)?,
            None => doc.reference(None)?,
        };
        let candidate = match task.candidate {
            Some(v) => descriptor_value(v)?,
            None => doc.candidate(None)?,
        };
        tasks.push((task.id, doc.config, reference, candidate));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let results: Vec<(String, Result<VerificationReport, CliError>)> = pool.install(|| {
        tasks
            .into_par_iter()
            .map(|(id, config, r, c)| {
                let result = verify_one(&config, r, c, &out.join(&id), force);
                (id, result)
            })
            .collect()
    });
    let mut code = EXIT_PASS;
    for (id, result) in results {
        match result {
            Ok(report) => {
                println!("{id}\t{:?}", report.overall);
                code = code.max(verdict_code(&report));
            }
            Err(e) => {
                println!("{id}\tERROR\t{e}");
                code = EXIT_ERROR;
            }
        }
    }
    Ok(code)
}
