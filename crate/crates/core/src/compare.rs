//! Artifact-wise disagreement measures, their extension to ⊥, and the
//! pass/fail threshold predicates.
//!
//! All metrics accumulate in f64. The comparator does not re-normalize its
//! inputs; precision normalization happens when artifacts are decoded.

use serde::{Deserialize, Serialize};

use crate::artifact::{ArtifactValue, Bottom, FailureReason, TensorArtifact};
use crate::contract::ToleranceProfile;

/// Floor of the relative-error denominator.
pub const REL_DENOM_FLOOR: f64 = 1e-6;

/// Serde helper: non-finite floats serialize as `null` and read back as NaN.
pub mod nullable_f64 {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
    }
}

/// Same as [`nullable_f64`] for optional metrics; an absent metric and a
/// non-finite one both serialize as `null`.
pub mod nullable_opt_f64 {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(x) if x.is_finite() => s.serialize_some(x),
            _ => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
        Option::<f64>::deserialize(d)
    }
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
pub struct CompareMetrics {
    pub shape_match: bool,
    pub all_finite: bool,
    #[serde(with = "nullable_f64")]
    pub max_abs_err: f64,
    #[serde(with = "nullable_f64")]
    pub mean_abs_err: f64,
    #[serde(with = "nullable_f64")]
    pub max_rel_err: f64,
    #[serde(with = "nullable_f64")]
    pub cosine_sim: f64,
    #[serde(default, with = "nullable_opt_f64", skip_serializing_if = "Option::is_none")]
    pub max_token_kl: Option<f64>,
}

#[derive(Serialize, Deserialize, Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum CompareStatus {
    Pass,
    Fail,
    HardFail,
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
pub struct CompareVerdict {
    pub status: CompareStatus,
    pub metrics: Option<CompareMetrics>,
    /// Set for hard failures only.
    pub failure_kind: Option<FailureReason>,
    pub reason: String,
}

impl CompareVerdict {
    pub fn passed(&self) -> bool {
        self.status == CompareStatus::Pass
    }

    fn hard(kind: FailureReason, metrics: Option<CompareMetrics>, reason: String) -> Self {
        Self { status: CompareStatus::HardFail, metrics, failure_kind: Some(kind), reason }
    }

    fn from_bottom(side: &str, b: &Bottom) -> Self {
        Self::hard(b.reason, None, format!("{side} is ⊥({}): {}", b.reason, b.error))
    }
}

/// (a·b)/(‖a‖‖b‖); both zero → 1, exactly one zero → 0.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if !(dot.is_finite() && na.is_finite() && nb.is_finite()) {
        return f64::NAN;
    }
    match (na == 0.0, nb == 0.0) {
        (true, true) => 1.0,
        (true, false) | (false, true) => 0.0,
        _ => (dot / (na * nb).sqrt()).clamp(-1.0, 1.0),
    }
}

/// Elementwise metrics over the overlapping flat prefix of `r` and `c`.
fn elementwise(r: &[f64], c: &[f64]) -> (f64, f64, f64) {
    let n = r.len().min(c.len());
    let (mut max_abs, mut sum_abs, mut max_rel) = (0.0f64, 0.0f64, 0.0f64);
    for i in 0..n {
        let d = (c[i] - r[i]).abs();
        let rel = d / r[i].abs().max(REL_DENOM_FLOOR);
        // NaN-propagating max
        max_abs = if d.is_nan() || d > max_abs { d } else { max_abs };
        max_rel = if rel.is_nan() || rel > max_rel { rel } else { max_rel };
        sum_abs += d;
    }
    let mean = if n == 0 { 0.0 } else { sum_abs / n as f64 };
    (max_abs, mean, max_rel)
}

/// Log-softmax of one row with max subtraction.
pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|x| (x - m).exp()).sum::<f64>().ln() + m;
    row.iter().map(|x| x - lse).collect()
}

/// Max over leading positions of KL(p_ref ‖ p_cand) along the last axis.
pub fn max_token_kl(ref_t: &TensorArtifact, cand_t: &TensorArtifact) -> Option<f64> {
    if ref_t.shape() != cand_t.shape() {
        return None;
    }
    let vocab = ref_t.shape().last().copied().unwrap_or(1);
    if vocab == 0 {
        return Some(0.0);
    }
    let mut worst = 0.0f64;
    for (r, c) in ref_t.data().chunks(vocab).zip(cand_t.data().chunks(vocab)) {
        let (lr, lc) = (log_softmax(r), log_softmax(c));
        let kl: f64 = lr.iter().zip(&lc).map(|(a, b)| a.exp() * (a - b)).sum();
        if kl.is_nan() {
            return Some(f64::NAN);
        }
        worst = worst.max(kl.max(0.0));
    }
    Some(worst)
}

fn metrics_for(r: &TensorArtifact, c: &TensorArtifact) -> CompareMetrics {
    let n = r.numel().min(c.numel());
    let (rd, cd) = (&r.data()[..n], &c.data()[..n]);
    let (max_abs_err, mean_abs_err, max_rel_err) = elementwise(rd, cd);
    CompareMetrics {
        shape_match: r.shape() == c.shape(),
        all_finite: r.is_finite() && c.is_finite(),
        max_abs_err,
        mean_abs_err,
        max_rel_err,
        cosine_sim: cosine_similarity(rd, cd),
        max_token_kl: None,
    }
}

fn judge(metrics: CompareMetrics, r: &TensorArtifact, c: &TensorArtifact, tol: &ToleranceProfile) -> CompareVerdict {
    if !metrics.shape_match {
        let reason = format!("shape mismatch: reference {:?} vs candidate {:?}", r.shape(), c.shape());
        return CompareVerdict::hard(FailureReason::SchemaMismatch, Some(metrics), reason);
    }
    if !metrics.all_finite {
        let side = if r.is_finite() { "candidate" } else { "reference" };
        let reason = format!("non-finite values in {side} '{}'", r.name());
        return CompareVerdict::hard(FailureReason::Nonfinite, Some(metrics), reason);
    }
    let mut violations = Vec::new();
    if metrics.max_abs_err > tol.max_abs {
        violations.push(format!("max_abs_err {:e} > {:e}", metrics.max_abs_err, tol.max_abs));
    }
    if metrics.max_rel_err > tol.max_rel {
        violations.push(format!("max_rel_err {:e} > {:e}", metrics.max_rel_err, tol.max_rel));
    }
    if metrics.cosine_sim < tol.cos_floor {
        violations.push(format!("cosine_sim {} < {}", metrics.cosine_sim, tol.cos_floor));
    }
    if let Some(kl) = metrics.max_token_kl {
        if !(kl <= tol.kl_ceiling) {
            violations.push(format!("max_token_kl {:e} > {:e}", kl, tol.kl_ceiling));
        }
    }
    let status = if violations.is_empty() { CompareStatus::Pass } else { CompareStatus::Fail };
    CompareVerdict { status, metrics: Some(metrics), failure_kind: None, reason: violations.join("; ") }
}

fn unwrap_pair<'a>(
    r: &'a ArtifactValue,
    c: &'a ArtifactValue,
) -> Result<(&'a TensorArtifact, &'a TensorArtifact), CompareVerdict> {
    match (r, c) {
        (ArtifactValue::Bottom(b), _) => Err(CompareVerdict::from_bottom("reference", b)),
        (_, ArtifactValue::Bottom(b)) => Err(CompareVerdict::from_bottom("candidate", b)),
        (ArtifactValue::Tensor(r), ArtifactValue::Tensor(c)) => Ok((r, c)),
    }
}

/// Elementwise comparison with the ⊥ extension.
pub fn compare_arrays(r: &ArtifactValue, c: &ArtifactValue, tol: &ToleranceProfile) -> CompareVerdict {
    match unwrap_pair(r, c) {
        Ok((r, c)) => compare_tensors(r, c, tol),
        Err(v) => v,
    }
}

pub fn compare_tensors(r: &TensorArtifact, c: &TensorArtifact, tol: &ToleranceProfile) -> CompareVerdict {
    judge(metrics_for(r, c), r, c, tol)
}

/// [`compare_arrays`] plus the per-token KL gate over the last axis.
pub fn compare_logits(r: &ArtifactValue, c: &ArtifactValue, tol: &ToleranceProfile) -> CompareVerdict {
    match unwrap_pair(r, c) {
        Ok((r, c)) => compare_logit_tensors(r, c, tol),
        Err(v) => v,
    }
}

pub fn compare_logit_tensors(r: &TensorArtifact, c: &TensorArtifact, tol: &ToleranceProfile) -> CompareVerdict {
    let mut metrics = metrics_for(r, c);
    metrics.max_token_kl = max_token_kl(r, c);
    judge(metrics, r, c, tol)
}
