//! Named tensor observations and the failure symbol.

use std::collections::BTreeMap;

use ndarray::{ArrayViewD, IxDyn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::contract::ProbeKind;

/// Longest error string kept on a [`Bottom`].
pub const MAX_ERROR_BYTES: usize = 8 * 1024;

/// Declared origin dtype. Data is always carried with f32 semantics.
#[derive(Serialize, Deserialize, Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F16,
    Bf16,
    I64,
    Bool,
}

#[derive(Serialize, Deserialize, Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum FailureReason {
    InitError,
    Timeout,
    Nonfinite,
    SchemaMismatch,
    MissingArtifact,
    RuntimeError,
    OomLike,
    ProtocolError,
}

impl FailureReason {
    pub fn as_str(self) -> &'static str {
        match self {
            FailureReason::InitError => "INIT_ERROR",
            FailureReason::Timeout => "TIMEOUT",
            FailureReason::Nonfinite => "NONFINITE",
            FailureReason::SchemaMismatch => "SCHEMA_MISMATCH",
            FailureReason::MissingArtifact => "MISSING_ARTIFACT",
            FailureReason::RuntimeError => "RUNTIME_ERROR",
            FailureReason::OomLike => "OOM_LIKE",
            FailureReason::ProtocolError => "PROTOCOL_ERROR",
        }
    }
}

impl std::fmt::Display for FailureReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// The failure symbol: any condition that prevents a meaningful comparison.
#[derive(Serialize, Deserialize, Clone, Debug, PartialEq, Eq)]
pub struct Bottom {
    pub reason: FailureReason,
    pub error: String,
}

impl Bottom {
    pub fn new(reason: FailureReason, error: impl Into<String>) -> Self {
        Self { reason, error: truncate_error(error.into()) }
    }

    pub fn missing(name: &str) -> Self {
        Self::new(FailureReason::MissingArtifact, format!("missing artifact '{name}'"))
    }
}

impl std::fmt::Display for Bottom {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.reason, self.error)
    }
}

fn truncate_error(mut s: String) -> String {
    if s.len() > MAX_ERROR_BYTES {
        let mut cut = MAX_ERROR_BYTES;
        while !s.is_char_boundary(cut) {
            cut -= 1;
        }
        s.truncate(cut);
    }
    s
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ArtifactError {
    #[error("artifact '{name}': data length {len} does not match shape {shape:?}")]
    LengthMismatch { name: String, shape: Vec<usize>, len: usize },
    #[error("artifact name must be non-empty")]
    EmptyName,
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
pub struct TensorArtifact {
    name: String,
    shape: Vec<usize>,
    dtype: DType,
    data: Vec<f64>,
}

impl TensorArtifact {
    pub fn new(
        name: impl Into<String>,
        shape: Vec<usize>,
        dtype: DType,
        data: Vec<f64>,
    ) -> Result<Self, ArtifactError> {
        let name = name.into();
        if name.is_empty() {
            return Err(ArtifactError::EmptyName);
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(ArtifactError::LengthMismatch { name, shape, len: data.len() });
        }
        Ok(Self { name, shape, dtype, data })
    }

    /// f32 tensor; values are rounded to f32 on construction.
    pub fn f32(name: impl Into<String>, shape: Vec<usize>, data: impl IntoIterator<Item = f64>) -> Self {
        let data: Vec<f64> = data.into_iter().map(round_f32).collect();
        Self::new(name, shape, DType::F32, data).expect("shape and data length agree")
    }

    pub fn scalar(name: impl Into<String>, value: f64) -> Self {
        Self::f32(name, vec![], [value])
    }

    pub fn i64(name: impl Into<String>, shape: Vec<usize>, data: &[i64]) -> Self {
        let data = data.iter().map(|&v| round_f32(v as f64)).collect();
        Self::new(name, shape, DType::I64, data).expect("shape and data length agree")
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn renamed(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn with_dtype(mut self, dtype: DType) -> Self {
        self.dtype = dtype;
        self
    }

    pub fn with_data(mut self, data: Vec<f64>) -> Result<Self, ArtifactError> {
        if data.len() != self.data.len() {
            return Err(ArtifactError::LengthMismatch { name: self.name, shape: self.shape, len: data.len() });
        }
        self.data = data;
        Ok(self)
    }

    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self, ArtifactError> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(ArtifactError::LengthMismatch { name: self.name, shape, len: self.data.len() });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn view(&self) -> ArrayViewD<'_, f64> {
        ArrayViewD::from_shape(IxDyn(&self.shape), &self.data).expect("length invariant holds")
    }

    /// Integer view of the data, for id/label/mask tensors.
    pub fn to_i64(&self) -> Vec<i64> {
        self.data.iter().map(|&v| v.round() as i64).collect()
    }
}

/// Round an f64 to the nearest f32 value.
pub fn round_f32(v: f64) -> f64 {
    v as f32 as f64
}

/// Largest magnitude below which every integer is exact in f32.
const F32_EXACT_INT: f64 = 16_777_216.0;

/// Re-express a tensor with f32 semantics. The dtype tag is kept as
/// provenance; the operation is idempotent.
pub fn normalize_to_f32(artifact: &TensorArtifact) -> TensorArtifact {
    let data = match artifact.dtype {
        DType::Bool => artifact.data.iter().map(|&v| if v != 0.0 { 1.0 } else { 0.0 }).collect(),
        DType::I64 => {
            if artifact.data.iter().any(|v| v.abs() > F32_EXACT_INT) {
                log::warn!("artifact '{}': integer values beyond exact f32 range were rounded", artifact.name);
            }
            artifact.data.iter().map(|&v| round_f32(v)).collect()
        }
        DType::F32 | DType::F16 | DType::Bf16 => artifact.data.iter().map(|&v| round_f32(v)).collect(),
    };
    TensorArtifact { data, ..artifact.clone() }
}

/// Round a value to the precision implied by `dtype`, as an adapter would
/// before putting half-precision data on the wire.
pub fn quantize(value: f64, dtype: DType) -> f64 {
    match dtype {
        DType::F32 => round_f32(value),
        DType::F16 => half::f16::from_f64(value).to_f64(),
        DType::Bf16 => half::bf16::from_f64(value).to_f64(),
        DType::I64 => value.round(),
        DType::Bool => {
            if value != 0.0 {
                1.0
            } else {
                0.0
            }
        }
    }
}

/// Either an observed tensor or the failure symbol.
#[derive(Clone, Debug, PartialEq)]
pub enum ArtifactValue {
    Tensor(TensorArtifact),
    Bottom(Bottom),
}

impl ArtifactValue {
    pub fn bottom(reason: FailureReason, error: impl Into<String>) -> Self {
        ArtifactValue::Bottom(Bottom::new(reason, error))
    }

    pub fn as_tensor(&self) -> Result<&TensorArtifact, &Bottom> {
        match self {
            ArtifactValue::Tensor(t) => Ok(t),
            ArtifactValue::Bottom(b) => Err(b),
        }
    }

    pub fn is_bottom(&self) -> bool {
        matches!(self, ArtifactValue::Bottom(_))
    }
}

impl From<TensorArtifact> for ArtifactValue {
    fn from(t: TensorArtifact) -> Self {
        ArtifactValue::Tensor(t)
    }
}

impl From<Bottom> for ArtifactValue {
    fn from(b: Bottom) -> Self {
        ArtifactValue::Bottom(b)
    }
}

impl From<Result<TensorArtifact, Bottom>> for ArtifactValue {
    fn from(r: Result<TensorArtifact, Bottom>) -> Self {
        match r {
            Ok(t) => ArtifactValue::Tensor(t),
            Err(b) => ArtifactValue::Bottom(b),
        }
    }
}

/// Artifacts returned by one probe. Lookups of absent names yield
/// `Bottom(MISSING_ARTIFACT)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ArtifactSet {
    probe: ProbeKind,
    values: BTreeMap<String, ArtifactValue>,
}

impl ArtifactSet {
    pub fn new(probe: ProbeKind) -> Self {
        Self { probe, values: BTreeMap::new() }
    }

    pub fn probe(&self) -> ProbeKind {
        self.probe
    }

    pub fn insert(&mut self, name: impl Into<String>, value: impl Into<ArtifactValue>) {
        self.values.insert(name.into(), value.into());
    }

    pub fn get(&self, name: &str) -> ArtifactValue {
        self.values.get(name).cloned().unwrap_or_else(|| Bottom::missing(name).into())
    }

    pub fn tensor(&self, name: &str) -> Result<&TensorArtifact, Bottom> {
        match self.values.get(name) {
            Some(ArtifactValue::Tensor(t)) => Ok(t),
            Some(ArtifactValue::Bottom(b)) => Err(b.clone()),
            None => Err(Bottom::missing(name)),
        }
    }

    /// True only when the name maps to an actual tensor.
    pub fn has_tensor(&self, name: &str) -> bool {
        matches!(self.values.get(name), Some(ArtifactValue::Tensor(_)))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.values.keys().map(String::as_str)
    }

    pub fn tensors(&self) -> impl Iterator<Item = &TensorArtifact> {
        self.values.values().filter_map(|v| match v {
            ArtifactValue::Tensor(t) => Some(t),
            ArtifactValue::Bottom(_) => None,
        })
    }

    pub fn bottoms(&self) -> impl Iterator<Item = (&str, &Bottom)> {
        self.values.iter().filter_map(|(k, v)| match v {
            ArtifactValue::Bottom(b) => Some((k.as_str(), b)),
            ArtifactValue::Tensor(_) => None,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}
