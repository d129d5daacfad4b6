//! The frozen equivalence contract.
//!
//! A contract fixes everything a verification run is allowed to depend on:
//! the bounded configuration, the ordered probe list, the artifacts expected
//! from each probe, and the tolerance profile. It is built once from a
//! [`BoundedConfig`] and never mutated afterwards; the only refinement, the
//! PPO value mode discovered during reference preflight, produces a new
//! contract value through [`EquivalenceContract::with_value_mode`].

use std::collections::BTreeSet;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Training method whose artifacts the contract covers.
#[derive(Serialize, Deserialize, Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Sft,
    Dpo,
    Ppo,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Sft, Method::Dpo, Method::Ppo];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Sft => "sft",
            Method::Dpo => "dpo",
            Method::Ppo => "ppo",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Method {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "sft" => Ok(Method::Sft),
            "dpo" => Ok(Method::Dpo),
            "ppo" => Ok(Method::Ppo),
            other => Err(ConfigError::Invalid(format!("unknown method '{other}'"))),
        }
    }
}

#[derive(Serialize, Deserialize, Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[serde(rename_all = "snake_case")]
pub enum PrecisionProfile {
    Fp16Compare,
    Bf16Compare,
}

/// Comparator thresholds: pass iff `max_abs_err <= max_abs`,
/// `max_rel_err <= max_rel`, `cosine >= cos_floor` and, for logits,
/// `max_token_kl <= kl_ceiling`.
#[derive(Serialize, Deserialize, Clone, Copy, Debug, PartialEq)]
pub struct ToleranceProfile {
    pub max_abs: f64,
    pub max_rel: f64,
    pub cos_floor: f64,
    pub kl_ceiling: f64,
}

pub const FP16_COMPARE: ToleranceProfile = ToleranceProfile {
    max_abs: 2e-2,
    max_rel: 2e-2,
    cos_floor: 0.995,
    kl_ceiling: 2e-2,
};

pub const BF16_COMPARE: ToleranceProfile = ToleranceProfile {
    max_abs: 4e-2,
    max_rel: 4e-2,
    cos_floor: 0.99,
    kl_ceiling: 4e-2,
};

pub fn tolerance_for(profile: PrecisionProfile) -> ToleranceProfile {
    match profile {
        PrecisionProfile::Fp16Compare => FP16_COMPARE,
        PrecisionProfile::Bf16Compare => BF16_COMPARE,
    }
}

#[derive(Serialize, Deserialize, Clone, Copy, Debug, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum DpoLossType {
    Sigmoid,
    Orpo,
    Simpo,
}

/// Preference-loss arguments shared by both runtimes.
#[derive(Serialize, Deserialize, Clone, Copy, Debug, PartialEq)]
#[serde(default)]
pub struct DpoSettings {
    pub beta: f64,
    pub loss_type: DpoLossType,
    pub label_smoothing: f64,
    pub simpo_margin: f64,
}

impl Default for DpoSettings {
    fn default() -> Self {
        Self {
            beta: 0.1,
            loss_type: DpoLossType::Sigmoid,
            label_smoothing: 0.0,
            simpo_margin: 0.0,
        }
    }
}

pub const DEFAULT_PROBE_TIMEOUT_SECS: f64 = 120.0;

/// Number of learning-rate steps exposed by every runtime.
pub const LR_SCHEDULE_LEN: usize = 8;

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct BoundedConfig {
    pub seed: u64,
    pub method: Method,
    pub precision_profile: PrecisionProfile,
    pub num_examples: u32,
    pub batch_size: u32,
    pub replay_horizon: u32,
    pub max_new_tokens: u32,
    pub compare_hidden_states: bool,
    pub probe_timeout_secs: f64,
    #[serde(default)]
    pub dpo: DpoSettings,
}

impl BoundedConfig {
    /// seed 42, one example, batch 1, two replay steps, 8 new tokens,
    /// hidden states off, bf16 thresholds.
    pub fn reported_default(method: Method) -> Self {
        Self {
            seed: 42,
            method,
            precision_profile: PrecisionProfile::Bf16Compare,
            num_examples: 1,
            batch_size: 1,
            replay_horizon: 2,
            max_new_tokens: 8,
            compare_hidden_states: false,
            probe_timeout_secs: DEFAULT_PROBE_TIMEOUT_SECS,
            dpo: DpoSettings::default(),
        }
    }

    pub fn with_batch(mut self, batch_size: u32) -> Self {
        self.batch_size = batch_size;
        self.num_examples = self.num_examples.max(batch_size);
        self
    }

    pub fn with_profile(mut self, profile: PrecisionProfile) -> Self {
        self.precision_profile = profile;
        self
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.probe_timeout_secs = timeout.as_secs_f64();
        self
    }

    pub fn probe_timeout(&self) -> Duration {
        Duration::from_secs_f64(self.probe_timeout_secs)
    }

    /// Examples in the first collated batch. DPO rows are twice this
    /// (chosen then rejected).
    pub fn effective_batch(&self) -> u32 {
        self.batch_size.min(self.num_examples)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.num_examples == 0 {
            return Err(ConfigError::Invalid("num_examples must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(ConfigError::Invalid("batch_size must be >= 1".into()));
        }
        if self.replay_horizon == 0 {
            return Err(ConfigError::Invalid("replay_horizon must be >= 1".into()));
        }
        if self.replay_horizon as usize > LR_SCHEDULE_LEN {
            return Err(ConfigError::Invalid(format!(
                "replay_horizon {} exceeds the {LR_SCHEDULE_LEN}-step learning-rate vector",
                self.replay_horizon
            )));
        }
        if !(self.probe_timeout_secs.is_finite() && self.probe_timeout_secs > 0.0) {
            return Err(ConfigError::Invalid("probe_timeout_secs must be a positive number".into()));
        }
        let dpo = &self.dpo;
        if !(dpo.beta.is_finite() && dpo.beta > 0.0) {
            return Err(ConfigError::Invalid("dpo.beta must be > 0".into()));
        }
        if !(0.0..0.5).contains(&dpo.label_smoothing) {
            return Err(ConfigError::Invalid("dpo.label_smoothing must lie in [0, 0.5)".into()));
        }
        if !(dpo.simpo_margin.is_finite() && dpo.simpo_margin >= 0.0) {
            return Err(ConfigError::Invalid("dpo.simpo_margin must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("malformed configuration document: {0}")]
    Parse(String),
}

#[derive(Serialize, Deserialize, Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ProbeKind {
    Init,
    ExportParams,
    CollateBatch,
    Forward,
    Gradient,
    ReplayStep,
    Generate,
    Shutdown,
}

#[derive(Serialize, Deserialize, Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct ForwardFlags {
    pub use_cache: bool,
    pub output_hidden_states: bool,
    pub drop_labels: bool,
}

#[derive(Serialize, Deserialize, Clone, Copy, Debug, PartialEq)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ProbeArgs {
    None,
    Forward { flags: ForwardFlags },
    Replay { step: u32 },
    Generate { max_new_tokens: u32 },
}

/// One bounded interaction with a runtime.
#[derive(Serialize, Deserialize, Clone, Copy, Debug, PartialEq)]
pub struct ProbeSpec {
    pub kind: ProbeKind,
    pub args: ProbeArgs,
}

impl ProbeSpec {
    pub fn simple(kind: ProbeKind) -> Self {
        Self { kind, args: ProbeArgs::None }
    }

    pub fn forward(flags: ForwardFlags) -> Self {
        Self { kind: ProbeKind::Forward, args: ProbeArgs::Forward { flags } }
    }

    pub fn replay(step: u32) -> Self {
        Self { kind: ProbeKind::ReplayStep, args: ProbeArgs::Replay { step } }
    }

    pub fn generate(max_new_tokens: u32) -> Self {
        Self { kind: ProbeKind::Generate, args: ProbeArgs::Generate { max_new_tokens } }
    }
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
pub struct ContractProbe {
    pub probe: ProbeSpec,
    pub expected: BTreeSet<String>,
}

/// How PPO values are obtained, derived from the reference runtime.
#[derive(Serialize, Deserialize, Clone, Copy, Debug, PartialEq, Eq)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum PpoValueMode {
    OutputField,
    HiddenStatesValueHead,
    Missing,
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
#[serde(tag = "status", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum AccumulationSupport {
    Supported,
    NotSupported { reason: String },
}

/// Artifact names shared between runtimes, the contract and the pipeline.
pub mod names {
    pub const LR_SCHEDULE: &str = "lr_schedule";
    pub const INPUT_IDS: &str = "input_ids";
    pub const ATTENTION_MASK: &str = "attention_mask";
    pub const LABELS: &str = "labels";
    pub const POSITION_IDS: &str = "position_ids";
    pub const LOGITS: &str = "logits";
    pub const LOSS: &str = "loss";
    pub const REF_LOGITS: &str = "ref_logits";
    pub const VALUES: &str = "values";
    pub const HIDDEN_STATES_PREFIX: &str = "hidden_states.";
    pub const FIRST_HIDDEN_STATE: &str = "hidden_states.0";
    pub const GRAD_PREFIX: &str = "grad.";
    pub const GRAD_NORM: &str = "grad_norm";
    pub const GENERATED_IDS: &str = "generated_ids";
    pub const VALUE_HEAD_PARAM: &str = "v_head.weight";
}

/// Capabilities a runtime may declare at handshake.
pub mod capabilities {
    pub const GENERATE: &str = "generate";
    pub const REF_MODEL: &str = "ref_model";
    pub const VALUES: &str = "values";
    pub const REPLAY: &str = "replay";
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
pub struct EquivalenceContract {
    config: BoundedConfig,
    probes: Vec<ContractProbe>,
    tolerance: ToleranceProfile,
    /// Quantities the engine derives itself from raw artifacts.
    derived: BTreeSet<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    ppo_value_mode: Option<PpoValueMode>,
    gradient_accumulation: AccumulationSupport,
}

impl EquivalenceContract {
    pub fn build(config: BoundedConfig) -> Result<Self, ConfigError> {
        config.validate()?;
        let value_mode = (config.method == Method::Ppo).then_some(PpoValueMode::OutputField);
        Ok(Self::assemble(config, value_mode))
    }

    /// Rebuild the probe table under a PPO value mode derived from the
    /// reference. Non-PPO contracts are returned unchanged.
    pub fn with_value_mode(&self, mode: PpoValueMode) -> Self {
        if self.config.method != Method::Ppo {
            return self.clone();
        }
        Self::assemble(self.config.clone(), Some(mode))
    }

    fn assemble(config: BoundedConfig, ppo_value_mode: Option<PpoValueMode>) -> Self {
        use names::*;
        let method = config.method;
        let set = |items: &[&str]| items.iter().map(|s| s.to_string()).collect::<BTreeSet<_>>();

        let mut probes = vec![
            ContractProbe { probe: ProbeSpec::simple(ProbeKind::Init), expected: set(&[LR_SCHEDULE]) },
            ContractProbe { probe: ProbeSpec::simple(ProbeKind::ExportParams), expected: BTreeSet::new() },
            ContractProbe {
                probe: ProbeSpec::simple(ProbeKind::CollateBatch),
                expected: set(&[INPUT_IDS, ATTENTION_MASK, LABELS]),
            },
        ];

        let flags = forward_flags_for(&config, ppo_value_mode);
        let mut forward = set(&[LOGITS]);
        match method {
            Method::Sft => {
                forward.insert(LOSS.into());
            }
            Method::Dpo => {
                forward.insert(LOSS.into());
                forward.insert(REF_LOGITS.into());
            }
            Method::Ppo => match ppo_value_mode {
                Some(PpoValueMode::OutputField) => {
                    forward.insert(VALUES.into());
                }
                Some(PpoValueMode::HiddenStatesValueHead) => {
                    forward.insert(FIRST_HIDDEN_STATE.into());
                }
                Some(PpoValueMode::Missing) | None => {}
            },
        }
        if config.compare_hidden_states {
            forward.insert(FIRST_HIDDEN_STATE.into());
        }
        probes.push(ContractProbe { probe: ProbeSpec::forward(flags), expected: forward });
        probes.push(ContractProbe { probe: ProbeSpec::simple(ProbeKind::Gradient), expected: set(&[LOSS]) });
        for step in 0..config.replay_horizon {
            probes.push(ContractProbe { probe: ProbeSpec::replay(step), expected: set(&[LOSS, GRAD_NORM]) });
        }
        if method == Method::Sft && config.max_new_tokens > 0 {
            probes.push(ContractProbe {
                probe: ProbeSpec::generate(config.max_new_tokens),
                expected: set(&[GENERATED_IDS]),
            });
        }
        probes.push(ContractProbe { probe: ProbeSpec::simple(ProbeKind::Shutdown), expected: BTreeSet::new() });

        let derived = set(derived_artifacts(method));
        let gradient_accumulation = accumulation_support(&config);
        let tolerance = tolerance_for(config.precision_profile);
        Self { config, probes, tolerance, derived, ppo_value_mode, gradient_accumulation }
    }

    pub fn config(&self) -> &BoundedConfig {
        &self.config
    }

    pub fn method(&self) -> Method {
        self.config.method
    }

    pub fn probes(&self) -> &[ContractProbe] {
        &self.probes
    }

    pub fn tolerance(&self) -> ToleranceProfile {
        self.tolerance
    }

    pub fn ppo_value_mode(&self) -> Option<PpoValueMode> {
        self.ppo_value_mode
    }

    pub fn gradient_accumulation(&self) -> &AccumulationSupport {
        &self.gradient_accumulation
    }

    /// First contract probe of the given kind.
    pub fn probe(&self, kind: ProbeKind) -> Option<&ContractProbe> {
        self.probes.iter().find(|p| p.probe.kind == kind)
    }

    pub fn expected(&self, kind: ProbeKind) -> BTreeSet<String> {
        self.probe(kind).map(|p| p.expected.clone()).unwrap_or_default()
    }

    pub fn forward_flags(&self) -> ForwardFlags {
        forward_flags_for(&self.config, self.ppo_value_mode)
    }

    pub fn has_generation(&self) -> bool {
        self.probe(ProbeKind::Generate).is_some()
    }

    pub fn derived(&self) -> &BTreeSet<String> {
        &self.derived
    }

    /// Union of expected artifact names across all probes plus the
    /// engine-derived quantities.
    pub fn expected_inventory(&self) -> BTreeSet<String> {
        self.probes.iter().flat_map(|p| p.expected.iter().cloned()).chain(self.derived.iter().cloned()).collect()
    }

    pub fn to_canonical_json(&self) -> String {
        crate::canonical_json(self)
    }
}

/// Engine-derived quantities per method.
pub fn derived_artifacts(method: Method) -> &'static [&'static str] {
    match method {
        Method::Sft => &[derived::METHOD_LOSS],
        Method::Dpo => &[derived::METHOD_LOSS, derived::LOG_PROBS, derived::REF_LOG_PROBS],
        Method::Ppo => &[
            derived::METHOD_LOSS,
            derived::TOKEN_LOGPROBS,
            derived::REWARDS,
            derived::ADVANTAGES,
            derived::RETURNS,
        ],
    }
}

/// Names of engine-derived quantities.
pub mod derived {
    pub const METHOD_LOSS: &str = "method_loss";
    pub const LOG_PROBS: &str = "log_probs";
    pub const REF_LOG_PROBS: &str = "ref_log_probs";
    pub const TOKEN_LOGPROBS: &str = "token_logprobs";
    pub const REWARDS: &str = "rewards";
    pub const ADVANTAGES: &str = "advantages";
    pub const RETURNS: &str = "returns";
}

fn forward_flags_for(config: &BoundedConfig, mode: Option<PpoValueMode>) -> ForwardFlags {
    let ppo = config.method == Method::Ppo;
    ForwardFlags {
        use_cache: false,
        output_hidden_states: config.compare_hidden_states
            || (ppo && mode == Some(PpoValueMode::HiddenStatesValueHead)),
        drop_labels: ppo,
    }
}

fn accumulation_support(config: &BoundedConfig) -> AccumulationSupport {
    let batch = config.effective_batch();
    let required = match config.method {
        Method::Dpo => 4,
        Method::Sft | Method::Ppo => 2,
    };
    if batch >= required {
        AccumulationSupport::Supported
    } else {
        AccumulationSupport::NotSupported {
            reason: format!(
                "gradient accumulation needs batch size >= {required} for {}, configured {batch}",
                config.method
            ),
        }
    }
}

/// Parse a config document, accepting either a bare config object or a
/// wrapper `{"config": {...}, ...}` that also carries launch descriptors.
pub fn parse_config(text: &str) -> Result<BoundedConfig, ConfigError> {
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
    let inner = value.get("config").cloned().unwrap_or(value);
    let config: BoundedConfig =
        serde_json::from_value(inner).map_err(|e| ConfigError::Parse(e.to_string()))?;
    config.validate()?;
    Ok(config)
}
