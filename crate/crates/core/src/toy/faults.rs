//! Fault injectors: each perturbs exactly one behavior of a healthy toy.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::artifact::FailureReason;
use crate::contract::{Method, ProbeKind};
use crate::pipeline::Stage;

#[derive(Serialize, Deserialize, Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum FaultId {
    InitModuleMissing,
    ParamExtraKeys,
    ParamPrefixedKeys,
    BatchDropKey,
    BatchDtypeDrift,
    ForwardReturnsMethodLoss,
    LogitsNoise,
    MissingValues,
    MissingRefLogps,
    ShapeCollapse,
    GradSignFlip,
    LrScheduleOffByOne,
    SkipParamUpdate,
    GenerationDiverge,
    NonfiniteLoss,
    HangOnForward,
    CrashOnGradient,
    ArtifactNeverProduced,
    // Signature-only injectors: surface a verbatim runtime error.
    BoundarySeam,
    DeviceMismatch,
    DtypeUnsupported,
    ArtifactContractDrift,
    KvCacheMismatch,
}

/// The first failing record a fault is expected to produce.
#[derive(Serialize, Clone, Copy, Debug, PartialEq, Eq)]
pub struct Detection {
    pub stage: Stage,
    pub check: &'static str,
    pub failure_kind: Option<FailureReason>,
}

impl FaultId {
    pub const ALL: [FaultId; 23] = [
        FaultId::InitModuleMissing,
        FaultId::ParamExtraKeys,
        FaultId::ParamPrefixedKeys,
        FaultId::BatchDropKey,
        FaultId::BatchDtypeDrift,
        FaultId::ForwardReturnsMethodLoss,
        FaultId::LogitsNoise,
        FaultId::MissingValues,
        FaultId::MissingRefLogps,
        FaultId::ShapeCollapse,
        FaultId::GradSignFlip,
        FaultId::LrScheduleOffByOne,
        FaultId::SkipParamUpdate,
        FaultId::GenerationDiverge,
        FaultId::NonfiniteLoss,
        FaultId::HangOnForward,
        FaultId::CrashOnGradient,
        FaultId::ArtifactNeverProduced,
        FaultId::BoundarySeam,
        FaultId::DeviceMismatch,
        FaultId::DtypeUnsupported,
        FaultId::ArtifactContractDrift,
        FaultId::KvCacheMismatch,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            FaultId::InitModuleMissing => "INIT_MODULE_MISSING",
            FaultId::ParamExtraKeys => "PARAM_EXTRA_KEYS",
            FaultId::ParamPrefixedKeys => "PARAM_PREFIXED_KEYS",
            FaultId::BatchDropKey => "BATCH_DROP_KEY",
            FaultId::BatchDtypeDrift => "BATCH_DTYPE_DRIFT",
            FaultId::ForwardReturnsMethodLoss => "FORWARD_RETURNS_METHOD_LOSS",
            FaultId::LogitsNoise => "LOGITS_NOISE",
            FaultId::MissingValues => "MISSING_VALUES",
            FaultId::MissingRefLogps => "MISSING_REF_LOGPS",
            FaultId::ShapeCollapse => "SHAPE_COLLAPSE",
            FaultId::GradSignFlip => "GRAD_SIGN_FLIP",
            FaultId::LrScheduleOffByOne => "LR_SCHEDULE_OFF_BY_ONE",
            FaultId::SkipParamUpdate => "SKIP_PARAM_UPDATE",
            FaultId::GenerationDiverge => "GENERATION_DIVERGE",
            FaultId::NonfiniteLoss => "NONFINITE_LOSS",
            FaultId::HangOnForward => "HANG_ON_FORWARD",
            FaultId::CrashOnGradient => "CRASH_ON_GRADIENT",
            FaultId::ArtifactNeverProduced => "ARTIFACT_NEVER_PRODUCED",
            FaultId::BoundarySeam => "BOUNDARY_SEAM",
            FaultId::DeviceMismatch => "DEVICE_MISMATCH",
            FaultId::DtypeUnsupported => "DTYPE_UNSUPPORTED",
            FaultId::ArtifactContractDrift => "ARTIFACT_CONTRACT_DRIFT",
            FaultId::KvCacheMismatch => "KV_CACHE_MISMATCH",
        }
    }

    /// Whether the fault is meaningful for a method.
    pub fn applies_to(self, method: Method) -> bool {
        match self {
            FaultId::ForwardReturnsMethodLoss | FaultId::MissingRefLogps => method == Method::Dpo,
            FaultId::MissingValues => method == Method::Ppo,
            FaultId::GenerationDiverge | FaultId::KvCacheMismatch => method == Method::Sft,
            _ => true,
        }
    }

    /// Probe kinds whose responses the fault changes; every other response
    /// is bitwise equal to the healthy toy's.
    pub fn affected_probes(self) -> &'static [ProbeKind] {
        use ProbeKind::*;
        match self {
            FaultId::InitModuleMissing | FaultId::LrScheduleOffByOne => &[Init],
            FaultId::ParamExtraKeys | FaultId::ParamPrefixedKeys => &[ExportParams],
            FaultId::BatchDropKey | FaultId::BatchDtypeDrift => &[CollateBatch],
            FaultId::ForwardReturnsMethodLoss
            | FaultId::LogitsNoise
            | FaultId::MissingValues
            | FaultId::MissingRefLogps
            | FaultId::ShapeCollapse
            | FaultId::HangOnForward
            | FaultId::DeviceMismatch
            | FaultId::DtypeUnsupported => &[Forward],
            FaultId::GradSignFlip => &[Gradient, ReplayStep],
            FaultId::NonfiniteLoss
            | FaultId::CrashOnGradient
            | FaultId::BoundarySeam
            | FaultId::ArtifactContractDrift => &[Gradient],
            FaultId::SkipParamUpdate => &[ReplayStep],
            FaultId::GenerationDiverge | FaultId::KvCacheMismatch => &[Generate],
            FaultId::ArtifactNeverProduced => &[Init, ExportParams, CollateBatch, Forward, Gradient, ReplayStep, Generate, Shutdown],
        }
    }

    /// Verbatim runtime error surfaced by signature-only injectors.
    pub fn signature(self) -> Option<&'static str> {
        match self {
            FaultId::BoundarySeam => Some("[jax] 'jaxlib._jax.ArrayImpl' object has no attribute 'backward'"),
            FaultId::DeviceMismatch => {
                Some("[jax] Can't export tensors on a different CUDA device index. Expected: 1. Current device: 0.")
            }
            FaultId::DtypeUnsupported => Some("[jax] Got unsupported ScalarType BFloat16"),
            FaultId::ArtifactContractDrift => {
                Some("[jax] float() argument must be a string or a real number, not 'dict'")
            }
            FaultId::KvCacheMismatch => Some("[jax] Key and Value must have the same sequence length"),
            _ => None,
        }
    }

    /// The first failing record expected when this fault is verified
    /// against the healthy toy of the same method.
    pub fn expected_detection(self) -> Detection {
        use FailureReason as F;
        let d = |stage, check, failure_kind| Detection { stage, check, failure_kind };
        match self {
            FaultId::InitModuleMissing | FaultId::ArtifactNeverProduced => {
                d(Stage::Spec, "candidate_init", Some(F::InitError))
            }
            FaultId::ParamExtraKeys | FaultId::ParamPrefixedKeys => {
                d(Stage::Spec, "weight_loading", Some(F::SchemaMismatch))
            }
            FaultId::BatchDropKey | FaultId::BatchDtypeDrift => d(Stage::Spec, "data_pipeline", Some(F::SchemaMismatch)),
            FaultId::ForwardReturnsMethodLoss => d(Stage::Numeric, "forward_loss", None),
            FaultId::LogitsNoise => d(Stage::Numeric, "forward_logits", None),
            FaultId::MissingValues => d(Stage::Numeric, "method_loss", Some(F::MissingArtifact)),
            FaultId::MissingRefLogps => d(Stage::Numeric, "ref_log_probs", Some(F::MissingArtifact)),
            FaultId::ShapeCollapse => d(Stage::Numeric, "forward_logits", Some(F::SchemaMismatch)),
            FaultId::GradSignFlip => d(Stage::Numeric, "gradient_loss", None),
            FaultId::LrScheduleOffByOne => d(Stage::Numeric, "lr_schedule", None),
            FaultId::SkipParamUpdate => d(Stage::Behavioral, "loss_curve", None),
            FaultId::GenerationDiverge => d(Stage::Behavioral, "generation", None),
            FaultId::NonfiniteLoss => d(Stage::Numeric, "gradient_loss", Some(F::Nonfinite)),
            FaultId::HangOnForward => d(Stage::Numeric, "numeric_runtime", Some(F::Timeout)),
            FaultId::CrashOnGradient
            | FaultId::BoundarySeam
            | FaultId::DeviceMismatch
            | FaultId::DtypeUnsupported
            | FaultId::ArtifactContractDrift => d(Stage::Numeric, "numeric_runtime", Some(F::RuntimeError)),
            FaultId::KvCacheMismatch => d(Stage::Behavioral, "behavior_runtime", Some(F::RuntimeError)),
        }
    }
}

impl fmt::Display for FaultId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FaultId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let wanted = s.trim().to_ascii_uppercase().replace('-', "_");
        FaultId::ALL
            .iter()
            .copied()
            .find(|f| f.as_str() == wanted)
            .ok_or_else(|| format!("unknown fault '{s}'"))
    }
}
