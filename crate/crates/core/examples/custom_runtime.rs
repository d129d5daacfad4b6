//! Plug an in-process runtime of your own into the verifier through a
//! factory. The wrapper here perturbs forward logits; a small perturbation
//! stays within tolerance while a large one is caught at forward_logits.
//!
//! Run with `cargo run --example custom_runtime`.

use std::sync::Arc;

use eqv::contract::{BoundedConfig, Method};
use eqv::pipeline::{verify, RuntimeSource};
use eqv::protocol::{Handshake, Request, Response};
use eqv::runtime::{CancelToken, Descriptor, Runtime, RuntimeFactory};
use eqv::toy;

/// Adds `offset` to every other logit of each forward response.
struct NoisyLogits {
    inner: Box<dyn Runtime>,
    offset: f64,
}

impl Runtime for NoisyLogits {
    fn handshake(&self) -> Handshake {
        self.inner.handshake()
    }

    fn handle(&mut self, request: &Request, cancel: &CancelToken) -> Response {
        let mut response = self.inner.handle(request, cancel);
        if let (Request::Forward { .. }, Response::Ok { artifacts }) = (request, &mut response) {
            if let Some(logits) = artifacts.remove("logits") {
                let data = logits.data().iter().enumerate().map(|(i, x)| x + if i % 2 == 0 { self.offset } else { 0.0 });
                let noisy = logits.clone().with_data(data.collect()).expect("same length");
                artifacts.insert("logits".into(), noisy);
            }
        }
        response
    }
}

fn main() {
    let config = BoundedConfig::reported_default(Method::Sft);
    for offset in [1e-4, 0.5] {
        let factory: RuntimeFactory = Arc::new(move || {
            Box::new(NoisyLogits { inner: toy::resolve("sft_ref", None).expect("registered"), offset }) as Box<dyn Runtime>
        });
        let candidate = RuntimeSource::factory(format!("noisy logits {offset}"), factory);
        let report = verify(Descriptor::toy("sft_ref"), candidate, &config).expect("valid config");
        let first = report.first_failure();
        println!(
            "offset {offset:<6} overall={:?} first={}",
            report.overall,
            first.map(|r| r.qualified_name()).unwrap_or_else(|| "-".into())
        );
    }
}
