//! Verify every applicable injected fault against its healthy toy and show
//! the first failing record next to the expected detection.
//!
//! Run with `cargo run --example fault_matrix`.

use std::time::Duration;

use eqv::contract::{BoundedConfig, Method};
use eqv::pipeline::{verify_with, VerifyOptions};
use eqv::report::classify;
use eqv::runtime::Descriptor;
use eqv::toy::{reference_toy, FaultId};

fn main() {
    // Keeps HANG_ON_FORWARD short.
    let opts = VerifyOptions { probe_timeout: Some(Duration::from_secs(1)), ..Default::default() };
    let mut mismatches = 0;
    for method in Method::ALL {
        let config = BoundedConfig::reported_default(method).with_batch(4);
        for fault in FaultId::ALL.into_iter().filter(|f| f.applies_to(method)) {
            let reference = Descriptor::toy(reference_toy(method));
            let candidate = if fault == FaultId::ArtifactNeverProduced {
                Descriptor::toy("missing_candidate")
            } else {
                Descriptor::faulty_toy(reference_toy(method), fault)
            };
            let report = verify_with(reference, candidate, &config, &opts).expect("valid config");
            let expected = fault.expected_detection();
            let first = report.first_failure();
            let got = first.map(|r| (r.stage, r.name.as_str(), r.failure_kind));
            let ok = got == Some((expected.stage, expected.check, expected.failure_kind));
            mismatches += usize::from(!ok);
            let labels: Vec<String> = classify(&report).iter().map(|l| l.category.to_string()).collect();
            println!(
                "{} {method} {fault:<28} first={:<32} kind={:<18} labels={}",
                if ok { "ok  " } else { "MISS" },
                first.map(|r| r.qualified_name()).unwrap_or_default(),
                first.and_then(|r| r.failure_kind).map(|k| k.as_str()).unwrap_or("-"),
                labels.join(","),
            );
            if !ok {
                println!("      expected {}.{} {:?}; error: {:?}", expected.stage, expected.check, expected.failure_kind, first.and_then(|r| r.error.clone()));
            }
        }
    }
    println!("{mismatches} mismatches");
}
