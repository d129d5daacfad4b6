//! Aggregate a small attempt corpus: pass@1/pass@k, first-attempt stage
//! rates whose product is the overall rate, taxonomy counts and the
//! self-report gap.
//!
//! Run with `cargo run --example aggregate_corpus`.

use eqv::contract::{BoundedConfig, Method};
use eqv::pipeline::verify;
use eqv::report::aggregate::render_table;
use eqv::report::{aggregate, self_report_gap, AttemptMeta, Corpus, CorpusEntry, VerificationReport};
use eqv::runtime::Descriptor;
use eqv::toy::{reference_toy, FaultId};

fn run(method: Method, fault: Option<FaultId>) -> VerificationReport {
    let reference = Descriptor::toy(reference_toy(method));
    let candidate = match fault {
        Some(f) => Descriptor::faulty_toy(reference_toy(method), f),
        None => reference.clone(),
    };
    verify(reference, candidate, &BoundedConfig::reported_default(method)).expect("valid config")
}

fn main() {
    // (system, task, per-attempt fault, self-reported pass on the first attempt)
    let plan: &[(&str, &str, Method, &[Option<FaultId>], bool)] = &[
        ("agent-a", "llama-sft", Method::Sft, &[None], true),
        ("agent-a", "qwen-dpo", Method::Dpo, &[Some(FaultId::ForwardReturnsMethodLoss), None], true),
        ("agent-a", "gpt2-ppo", Method::Ppo, &[Some(FaultId::GradSignFlip), Some(FaultId::LrScheduleOffByOne), None], true),
        ("agent-b", "llama-sft", Method::Sft, &[Some(FaultId::ParamExtraKeys)], false),
        ("agent-b", "qwen-dpo", Method::Dpo, &[Some(FaultId::SkipParamUpdate), Some(FaultId::SkipParamUpdate)], true),
        ("agent-b", "gpt2-ppo", Method::Ppo, &[None], true),
    ];
    let mut corpus = Corpus::default();
    for (system, task, method, attempts, claim) in plan {
        for (i, fault) in attempts.iter().enumerate() {
            let meta = AttemptMeta {
                attempt_id: format!("{system}/{task}/{i}"),
                system_id: system.to_string(),
                task_id: task.to_string(),
                self_reported_pass: (i == 0).then_some(*claim),
                report: format!("{system}/{task}/{i}.json"),
                attempt_index: Some(i as u32),
                tokens: None,
            };
            corpus.entries.push(CorpusEntry { meta, report: run(*method, *fault) });
        }
    }
    let summary = aggregate(&corpus, 3).expect("k ≥ 1");
    print!("{}", render_table(&summary, &self_report_gap(&corpus)));
    for (system, s) in &summary.systems {
        let st = &s.stages_at_1;
        println!(
            "{system}: overall@1 {:.3} = spec {:.3} × num|spec {:.3} × beh|num {:.3}; taxonomy {:?}",
            st.overall.fraction(),
            st.spec.fraction(),
            st.numeric_given_spec.fraction(),
            st.behavioral_given_numeric.fraction(),
            s.taxonomy
        );
    }
}
