//! Compare tensors under both precision profiles: elementwise metrics, the
//! per-token KL gate for logits, and the ⊥ extension.
//!
//! Run with `cargo run --example compare_tensors`.

use eqv::artifact::{ArtifactValue, FailureReason, TensorArtifact};
use eqv::compare::{compare_arrays, compare_logits, cosine_similarity};
use eqv::contract::{tolerance_for, PrecisionProfile};

fn show(label: &str, v: &eqv::compare::CompareVerdict) {
    match &v.metrics {
        Some(m) => println!(
            "{label:<34} {:?}  max_abs={:.3e} mean_abs={:.3e} max_rel={:.3e} cos={:.6} kl={}  {}",
            v.status,
            m.max_abs_err,
            m.mean_abs_err,
            m.max_rel_err,
            m.cosine_sim,
            m.max_token_kl.map(|k| format!("{k:.3e}")).unwrap_or_else(|| "-".into()),
            v.reason
        ),
        None => println!("{label:<34} {:?}  {}", v.status, v.reason),
    }
}

fn main() {
    let bf16 = tolerance_for(PrecisionProfile::Bf16Compare);
    let fp16 = tolerance_for(PrecisionProfile::Fp16Compare);
    println!("fp16 profile {fp16:?}\nbf16 profile {bf16:?}\n");

    let t = |v: &[f64]| ArtifactValue::from(TensorArtifact::f32("x", vec![v.len()], v.iter().copied()));
    show("identical", &compare_arrays(&t(&[1.0, 2.0, 3.0]), &t(&[1.0, 2.0, 3.0]), &bf16));
    // The second element's denominator is floored at 1e-6.
    show("relative floor", &compare_arrays(&t(&[1.0, 0.0]), &t(&[1.01, 0.001]), &bf16));
    show("within bf16, beyond fp16 (bf16)", &compare_arrays(&t(&[1.0, 2.0]), &t(&[1.03, 2.0]), &bf16));
    show("within bf16, beyond fp16 (fp16)", &compare_arrays(&t(&[1.0, 2.0]), &t(&[1.03, 2.0]), &fp16));

    // Softmax is shift invariant: KL is zero but the raw logits differ.
    let logits = |v: &[f64]| ArtifactValue::from(TensorArtifact::f32("logits", vec![1, v.len()], v.iter().copied()));
    show("shifted logits", &compare_logits(&logits(&[0.0, 0.0]), &logits(&[1.0, 1.0]), &bf16));
    show("nan candidate", &compare_logits(&logits(&[0.0, 1.0]), &logits(&[0.0, f64::NAN]), &bf16));

    let missing = ArtifactValue::bottom(FailureReason::RuntimeError, "'float' object has no attribute 'backward'");
    show("candidate is ⊥", &compare_arrays(&t(&[1.0, 2.0]), &missing, &bf16));

    println!("\ncos([0,0],[0,0]) = {}", cosine_similarity(&[0.0, 0.0], &[0.0, 0.0]));
    println!("cos([0,0],[1,0]) = {}", cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]));
}
