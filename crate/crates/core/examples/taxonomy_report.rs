//! Classify failing reports into the failure taxonomy, and show that the
//! classifier is driven by a replaceable rule table.
//!
//! Run with `cargo run --example taxonomy_report`.

use eqv::contract::{BoundedConfig, Method};
use eqv::pipeline::verify;
use eqv::report::classify;
use eqv::runtime::Descriptor;
use eqv::toy::{reference_toy, FaultId};

fn main() {
    let config = BoundedConfig::reported_default(Method::Sft).with_batch(4);
    let reference = Descriptor::toy(reference_toy(Method::Sft));
    for fault in FaultId::ALL.into_iter().filter(|f| f.applies_to(Method::Sft) && *f != FaultId::HangOnForward) {
        let candidate = if fault == FaultId::ArtifactNeverProduced {
            Descriptor::toy("missing_candidate")
        } else {
            Descriptor::faulty_toy(reference_toy(Method::Sft), fault)
        };
        let report = verify(reference.clone(), candidate, &config).expect("valid config");
        let labels: Vec<String> = classify(&report)
            .iter()
            .map(|l| format!("{} ({}.{})", l.category, l.evidence.stage, l.evidence.name))
            .collect();
        println!("{:<30} {}", fault.to_string(), labels.join(", "));
    }
}
