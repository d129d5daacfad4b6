//! Differential equivalence verification for post-training runtimes.
//!
//! A reference runtime and a candidate runtime are driven through the same
//! bounded probe sequence derived from an [`contract::EquivalenceContract`];
//! the artifacts they return are compared by a three-stage gated pipeline
//! (Spec, Numeric, Behavioral) after a reference-only preflight.

pub mod artifact;
pub mod cli;
pub mod compare;
pub mod contract;
pub mod kernels;
pub mod pipeline;
pub mod protocol;
pub mod report;
pub mod runtime;
pub mod toy;

use serde::Serialize;

/// Pretty JSON with object keys in sorted order.
pub fn canonical_json<T: Serialize>(value: &T) -> String {
    let v = serde_json::to_value(value).expect("serializable value");
    serde_json::to_string_pretty(&v).expect("json value")
}
