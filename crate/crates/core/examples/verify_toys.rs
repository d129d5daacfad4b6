//! Verify a candidate toy against its reference, print the staged report,
//! then repeat with an injected fault and show where it is caught.
//!
//! Run with `cargo run --example verify_toys -- [method] [FAULT_ID]`,
//! e.g. `cargo run --example verify_toys -- dpo FORWARD_RETURNS_METHOD_LOSS`.

use eqv::contract::{BoundedConfig, Method};
use eqv::pipeline::verify;
use eqv::report::VerificationReport;
use eqv::runtime::Descriptor;
use eqv::toy::{reference_toy, FaultId};

fn summarize(label: &str, report: &VerificationReport) {
    println!("== {label}: {:?}", report.overall);
    for stage in &report.stages {
        println!("  {:<11} {:?} ({} probes)", stage.stage.to_string(), stage.status, stage.probes_sent);
        for r in &stage.records {
            let metric = r.metrics.as_ref().map(|m| format!(" max_abs={:.2e}", m.max_abs_err)).unwrap_or_default();
            println!("    {:<28} {:?}{metric}", r.name, r.status);
        }
    }
    if let Some(first) = report.first_failure() {
        println!("  first failure: {} {:?} {}", first.qualified_name(), first.failure_kind, first.error.as_deref().unwrap_or(""));
    }
}

fn main() {
    let mut args = std::env::args().skip(1);
    let method: Method = args.next().map(|m| m.parse().expect("sft, dpo or ppo")).unwrap_or(Method::Sft);
    let fault: FaultId = args.next().map(|f| f.parse().expect("known fault id")).unwrap_or(FaultId::GradSignFlip);
    let config = BoundedConfig::reported_default(method).with_batch(4);
    let reference = Descriptor::toy(reference_toy(method));

    let healthy = verify(reference.clone(), reference.clone(), &config).expect("valid config");
    summarize("healthy clone", &healthy);

    let faulty = verify(reference, Descriptor::faulty_toy(reference_toy(method), fault), &config).expect("valid config");
    summarize(&format!("{fault}"), &faulty);
    let want = fault.expected_detection();
    println!("  expected:      {}.{} {:?}", want.stage, want.check, want.failure_kind);
}
