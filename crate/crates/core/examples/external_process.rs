//! Drive a runtime in a child process over the length-prefixed wire
//! protocol: the `eqv serve-toy` subcommand stands in for an adapter. Shows
//! parity with the in-process toy, a crash mid-run, and a missing program.
//!
//! Build the binary first, then run:
//! `cargo build && cargo run --example external_process`.

use std::path::PathBuf;
use std::time::Duration;

use eqv::contract::{BoundedConfig, Method};
use eqv::pipeline::{verify_with, VerifyOptions};
use eqv::runtime::Descriptor;

fn eqv_binary() -> PathBuf {
    let exe = std::env::current_exe().expect("example path");
    // target/<profile>/examples/<name> → target/<profile>/eqv
    let bin = exe.parent().and_then(|p| p.parent()).expect("target dir").join("eqv");
    assert!(bin.exists(), "{} not built; run `cargo build` first", bin.display());
    bin
}

fn main() {
    let bin = eqv_binary();
    let bin = bin.to_str().expect("utf-8 path");
    let config = BoundedConfig::reported_default(Method::Sft);
    let opts = VerifyOptions { probe_timeout: Some(Duration::from_secs(5)), ..Default::default() };
    let reference = Descriptor::toy("sft_ref");

    let cases = [
        ("child process, healthy", Descriptor::command([bin, "serve-toy", "--toy", "sft_ref"])),
        ("child crashes at probe 3", Descriptor::command([bin, "serve-toy", "--toy", "sft_ref", "--crash-at-probe", "3"])),
        ("child with GRAD_SIGN_FLIP", Descriptor::command([bin, "serve-toy", "--toy", "sft_ref", "--fault", "GRAD_SIGN_FLIP"])),
        ("program does not exist", Descriptor::command(["/nonexistent/adapter"])),
    ];
    for (label, candidate) in cases {
        let report = verify_with(reference.clone(), candidate, &config, &opts).expect("valid config");
        let first = report.first_failure();
        println!(
            "{label:<28} overall={:?} outcome={:?} first={} kind={:?}",
            report.overall,
            report.outcome,
            first.map(|r| r.qualified_name()).unwrap_or_else(|| "-".into()),
            first.and_then(|r| r.failure_kind),
        );
    }
}
