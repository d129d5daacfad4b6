//! Deterministic in-process runtimes for SFT, DPO and PPO, plus the fault
//! injectors that reproduce each failure category at desk scale.
//!
//! Every toy shares one tiny analytic model (see [`model`]); methods differ
//! only in their training objective and exposed artifacts.

use std::fmt;

use ndarray::{Array2, Array3};

use crate::artifact::{DType, FailureReason, TensorArtifact};
use crate::contract::{capabilities, names, BoundedConfig, ForwardFlags, Method, LR_SCHEDULE_LEN};
use crate::kernels::{self, DpoInputs, KernelError, ScheduleKind, Warmup};
use crate::protocol::{Handshake, Request, Response, PROTOCOL_VERSION};
use crate::runtime::{CancelToken, Runtime};

pub mod data;
pub mod faults;
pub mod model;

pub use data::ToyBatch;
pub use faults::{Detection, FaultId};
pub use model::{ToyModel, DIM, SEQ, VOCAB};

/// Training arguments every toy reports. DPO gradients carry a factor β,
/// so its toys step ten times harder to move the loss visibly in one step.
pub const BASE_LR: f64 = 2.0;
pub const DPO_BASE_LR: f64 = 20.0;
pub const WARMUP_STEPS: u32 = 2;
pub const TOTAL_STEPS: u32 = 8;

const REF_MODEL_SEED: u64 = 0xD1B5_4A32_D192_ED03;
const NOISE_SEED: u64 = 0x5851_F42D_4C95_7F2D;
const LOGITS_NOISE: f64 = 0.25;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ValueExposure {
    /// `values` returned by FORWARD.
    Output,
    /// Values only derivable from hidden states and the value-head weight.
    HiddenOnly,
    Absent,
}

#[derive(Clone, Copy, Debug)]
pub struct ToySpec {
    pub name: &'static str,
    pub method: Method,
    pub generate: bool,
    pub ref_model: bool,
    pub values: ValueExposure,
    pub params: bool,
}

const fn spec(name: &'static str, method: Method) -> ToySpec {
    let ppo = matches!(method, Method::Ppo);
    ToySpec {
        name,
        method,
        generate: matches!(method, Method::Sft),
        ref_model: !matches!(method, Method::Sft),
        values: if ppo { ValueExposure::Output } else { ValueExposure::Absent },
        params: true,
    }
}

/// Registered toy runtimes.
pub const TOYS: [ToySpec; 8] = [
    spec("sft_ref", Method::Sft),
    spec("dpo_ref", Method::Dpo),
    spec("ppo_ref", Method::Ppo),
    ToySpec { values: ValueExposure::HiddenOnly, ..spec("ppo_hidden", Method::Ppo) },
    ToySpec { values: ValueExposure::Absent, ..spec("ppo_novalues", Method::Ppo) },
    ToySpec { generate: false, ..spec("sft_nogen", Method::Sft) },
    ToySpec { params: false, ..spec("sft_noparams", Method::Sft) },
    ToySpec { ref_model: false, ..spec("dpo_noref", Method::Dpo) },
];

pub fn toy_spec(name: &str) -> Option<ToySpec> {
    TOYS.iter().copied().find(|t| t.name == name)
}

/// Name of the healthy reference toy for a method.
pub fn reference_toy(method: Method) -> &'static str {
    match method {
        Method::Sft => "sft_ref",
        Method::Dpo => "dpo_ref",
        Method::Ppo => "ppo_ref",
    }
}

/// Resolve a toy descriptor; `Err` means no runtime can ever be produced.
pub fn resolve(name: &str, fault: Option<FaultId>) -> Result<Box<dyn Runtime>, String> {
    let spec = toy_spec(name).ok_or_else(|| format!("no toy runtime named '{name}'"))?;
    if fault == Some(FaultId::ArtifactNeverProduced) {
        return Err(format!("toy '{name}' finished without producing a runtime"));
    }
    Ok(Box::new(ToyRuntime::new(spec, fault)))
}

pub fn base_lr(method: Method) -> f64 {
    match method {
        Method::Dpo => DPO_BASE_LR,
        Method::Sft | Method::Ppo => BASE_LR,
    }
}

/// The eight-step learning-rate vector of the toy training arguments.
pub fn toy_schedule(method: Method) -> [f64; LR_SCHEDULE_LEN] {
    kernels::lr_schedule(base_lr(method), Warmup::Steps(WARMUP_STEPS), ScheduleKind::Linear, TOTAL_STEPS)
        .expect("valid toy schedule")
}

struct Session {
    config: BoundedConfig,
    model: ToyModel,
    ref_model: Option<ToyModel>,
    replay: ToyModel,
    batch: ToyBatch,
}

pub struct ToyRuntime {
    spec: ToySpec,
    fault: Option<FaultId>,
    session: Option<Session>,
}

impl fmt::Debug for ToyRuntime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ToyRuntime").field("spec", &self.spec.name).field("fault", &self.fault).finish()
    }
}

fn tensor3(name: &str, a: &Array3<f64>) -> TensorArtifact {
    let (b, t, v) = a.dim();
    TensorArtifact::f32(name, vec![b, t, v], a.iter().copied())
}

fn tensor2(name: &str, a: &Array2<f64>) -> TensorArtifact {
    TensorArtifact::f32(name, vec![a.nrows(), a.ncols()], a.iter().copied())
}

fn kernel_err(e: KernelError) -> Response {
    Response::err(FailureReason::RuntimeError, e.to_string())
}

impl ToyRuntime {
    pub fn new(spec: ToySpec, fault: Option<FaultId>) -> Self {
        Self { spec, fault, session: None }
    }

    pub fn spec(&self) -> &ToySpec {
        &self.spec
    }

    fn has(&self, f: FaultId) -> bool {
        self.fault == Some(f)
    }

    fn init(&mut self, config: &BoundedConfig) -> Response {
        if self.has(FaultId::InitModuleMissing) {
            return Response::err(
                FailureReason::InitError,
                format!("No module named '_jax_{}_shared'", self.spec.method.as_str()),
            );
        }
        if let Err(e) = config.validate() {
            return Response::err(FailureReason::InitError, e.to_string());
        }
        if config.method != self.spec.method {
            return Response::err(
                FailureReason::InitError,
                format!("toy '{}' implements {}, config requests {}", self.spec.name, self.spec.method, config.method),
            );
        }
        let value_head = self.spec.method == Method::Ppo && self.spec.values != ValueExposure::Absent;
        let model = ToyModel::init(config.seed, value_head);
        let ref_model = self.spec.ref_model.then(|| ToyModel::init(config.seed ^ REF_MODEL_SEED, value_head));
        let groups = config.effective_batch() as usize;
        let batch = ToyBatch::generate(config.seed, groups, self.spec.method == Method::Dpo);
        self.session = Some(Session { config: config.clone(), replay: model.clone(), model, ref_model, batch });

        let mut schedule = toy_schedule(self.spec.method);
        if self.has(FaultId::LrScheduleOffByOne) {
            schedule.rotate_left(1);
            schedule[LR_SCHEDULE_LEN - 1] = 0.0;
        }
        Response::ok([TensorArtifact::f32(names::LR_SCHEDULE, vec![LR_SCHEDULE_LEN], schedule)])
    }

    fn export_params(&self, s: &Session) -> Response {
        if !self.spec.params {
            return Response::empty();
        }
        let prefix = if self.has(FaultId::ParamPrefixedKeys) { "pt_model." } else { "" };
        let mut out: Vec<TensorArtifact> = s
            .model
            .params()
            .into_iter()
            .map(|(name, shape, data)| TensorArtifact::f32(format!("{prefix}{name}"), shape, data))
            .collect();
        if self.has(FaultId::ParamExtraKeys) {
            out.push(TensorArtifact::f32("v_head.lora_A.weight", vec![DIM, 2], vec![0.0; DIM * 2]));
            out.push(TensorArtifact::f32("v_head.lora_B.weight", vec![2, 1], vec![0.0; 2]));
        }
        Response::ok(out)
    }

    fn collate(&self, s: &Session) -> Response {
        let mut out = s.batch.artifacts();
        if self.has(FaultId::BatchDropKey) {
            out.retain(|t| t.name() != names::POSITION_IDS);
        }
        if self.has(FaultId::BatchDtypeDrift) {
            out = out
                .into_iter()
                .map(|t| if t.name() == names::ATTENTION_MASK { t.with_dtype(DType::F32) } else { t })
                .collect();
        }
        Response::ok(out)
    }

    fn forward(&self, s: &Session, flags: ForwardFlags, cancel: &CancelToken) -> Response {
        if self.has(FaultId::HangOnForward) {
            while !cancel.is_cancelled() {
                std::thread::sleep(std::time::Duration::from_millis(10));
            }
            return Response::err(FailureReason::Timeout, "forward cancelled");
        }
        if let Some(sig) = self.fault.filter(|f| matches!(f, FaultId::DeviceMismatch | FaultId::DtypeUnsupported)) {
            return Response::err(FailureReason::RuntimeError, sig.signature().unwrap_or_default());
        }
        let ids = s.batch.input_ids.view();
        let act = s.model.forward(ids);
        let mut out = Vec::new();

        let mut logits = act.logits.clone();
        if self.has(FaultId::LogitsNoise) {
            let mut g = model::Lcg::new(s.config.seed ^ NOISE_SEED);
            logits.mapv_inplace(|x| x + LOGITS_NOISE * (2.0 * g.uniform() - 1.0));
        }
        let logits_t = tensor3(names::LOGITS, &logits);
        if self.has(FaultId::ShapeCollapse) {
            let (b, t, v) = logits.dim();
            out.push(logits_t.reshaped(vec![b * t, v]).expect("same element count"));
        } else {
            out.push(logits_t);
        }

        if !flags.drop_labels && self.spec.method != Method::Ppo {
            let loss = if self.has(FaultId::ForwardReturnsMethodLoss) {
                self.objective(s, &s.model).map(|(l, _)| l)
            } else {
                kernels::shifted_causal_ce(act.logits.view(), s.batch.labels.view())
            };
            if let Ok(l) = loss {
                out.push(TensorArtifact::scalar(names::LOSS, l));
            }
        }
        if let Some(rm) = &s.ref_model {
            if self.spec.method == Method::Dpo && !self.has(FaultId::MissingRefLogps) {
                out.push(tensor3(names::REF_LOGITS, &rm.forward(ids).logits));
            }
        }
        if self.spec.values == ValueExposure::Output && !self.has(FaultId::MissingValues) {
            if let Some(v) = &act.values {
                out.push(tensor2(names::VALUES, v));
            }
        }
        if flags.output_hidden_states {
            out.push(tensor3("hidden_states.0", &act.emb));
            out.push(tensor3("hidden_states.1", &act.hidden));
        }
        Response::ok(out)
    }

    /// The method's training loss and its parameter gradients.
    fn objective(&self, s: &Session, m: &ToyModel) -> Result<(f64, model::Grads), KernelError> {
        let b = &s.batch;
        let ids = b.input_ids.view();
        let act = m.forward(ids);
        match self.spec.method {
            Method::Sft => {
                let (loss, dl) = kernels::shifted_causal_ce_with_grad(act.logits.view(), b.labels.view())?;
                Ok((loss, m.backward(ids, &act, dl.view(), None)))
            }
            Method::Dpo => {
                let logps = kernels::sequence_logprobs(act.logits.view(), b.labels.view())?;
                let ref_logps = match &s.ref_model {
                    Some(rm) => Some(kernels::sequence_logprobs(rm.forward(ids).logits.view(), b.labels.view())?),
                    None => None,
                };
                let inputs = DpoInputs {
                    policy_logps: logps,
                    ref_logps,
                    lengths: kernels::supervised_lengths(b.labels.view()),
                    settings: s.config.dpo,
                };
                let (loss, dlp) = kernels::dpo_loss_with_grad(&inputs)?;
                let dl = kernels::sequence_logprobs_vjp(act.logits.view(), b.labels.view(), &dlp)?;
                Ok((loss, m.backward(ids, &act, dl.view(), None)))
            }
            Method::Ppo => {
                let values = act.values.clone().unwrap_or_else(|| Array2::zeros(b.input_ids.dim()));
                let mask = b.mask_f64();
                let out = kernels::ppo_method_loss(act.logits.view(), values.view(), b.labels.view(), mask.view())?;
                let (dl, dv) = kernels::ppo::ppo_loss_grad(act.logits.view(), values.view(), b.labels.view(), &out);
                Ok((out.loss, m.backward(ids, &act, dl.view(), Some(dv.view()))))
            }
        }
    }

    fn gradient(&self, s: &Session) -> Response {
        if let Some(sig) = self.fault.filter(|f| matches!(f, FaultId::BoundarySeam | FaultId::ArtifactContractDrift)) {
            return Response::err(FailureReason::RuntimeError, sig.signature().unwrap_or_default());
        }
        if self.has(FaultId::CrashOnGradient) {
            std::panic::resume_unwind(Box::new("runtime crashed during backward pass".to_string()));
        }
        let (mut loss, mut grads) = match self.objective(s, &s.model) {
            Ok(r) => r,
            Err(e) => return kernel_err(e),
        };
        if self.has(FaultId::GradSignFlip) {
            loss = -loss;
            grads = grads.scaled(-1.0);
        }
        if self.has(FaultId::NonfiniteLoss) {
            loss = f64::NAN;
        }
        let mut out = vec![TensorArtifact::scalar(names::LOSS, loss)];
        out.extend(
            grads
                .named()
                .into_iter()
                .map(|(name, shape, data)| TensorArtifact::f32(format!("{}{name}", names::GRAD_PREFIX), shape, data)),
        );
        Response::ok(out)
    }

    fn replay_step(&mut self, lr: f64) -> Response {
        let s = self.session.as_ref().expect("checked by caller");
        let (mut loss, mut grads) = match self.objective(s, &s.replay) {
            Ok(r) => r,
            Err(e) => return kernel_err(e),
        };
        if self.has(FaultId::GradSignFlip) {
            loss = -loss;
            grads = grads.scaled(-1.0);
        }
        let norm = grads.global_norm();
        if !self.has(FaultId::SkipParamUpdate) {
            self.session.as_mut().expect("checked by caller").replay.sgd(&grads, lr);
        }
        Response::ok([TensorArtifact::scalar(names::LOSS, loss), TensorArtifact::scalar(names::GRAD_NORM, norm)])
    }

    fn generate(&self, s: &Session, max_new_tokens: u32) -> Response {
        if self.has(FaultId::KvCacheMismatch) {
            return Response::err(FailureReason::RuntimeError, FaultId::KvCacheMismatch.signature().unwrap_or_default());
        }
        if !self.spec.generate {
            return Response::err(FailureReason::RuntimeError, "generation is not supported by this runtime");
        }
        let rows = s.batch.rows();
        let n = max_new_tokens as usize;
        let mut out = Vec::with_capacity(rows * n);
        let pick_rank = if self.has(FaultId::GenerationDiverge) { 1 } else { 0 };
        for r in 0..rows {
            let mut tok = s.batch.input_ids[[r, s.batch.last_token_index(r)]];
            for _ in 0..n {
                let ids = Array2::from_elem((1, 1), tok);
                let logits = s.model.forward(ids.view()).logits;
                let mut order: Vec<usize> = (0..VOCAB).collect();
                // highest logit first, ties to the lower id
                order.sort_by(|&a, &b| logits[[0, 0, b]].total_cmp(&logits[[0, 0, a]]).then(a.cmp(&b)));
                tok = order[pick_rank] as i64;
                out.push(tok);
            }
        }
        Response::ok([TensorArtifact::i64(names::GENERATED_IDS, vec![rows, n], &out)])
    }
}

impl Runtime for ToyRuntime {
    fn handshake(&self) -> Handshake {
        let mut caps = Vec::new();
        if self.spec.generate {
            caps.push(capabilities::GENERATE.to_string());
        }
        if self.spec.ref_model {
            caps.push(capabilities::REF_MODEL.to_string());
        }
        if self.spec.values == ValueExposure::Output {
            caps.push(capabilities::VALUES.to_string());
        }
        caps.push(capabilities::REPLAY.to_string());
        Handshake { protocol: PROTOCOL_VERSION, method: self.spec.method, capabilities: caps }
    }

    fn handle(&mut self, request: &Request, cancel: &CancelToken) -> Response {
        match request {
            Request::Init { config } => return self.init(config),
            Request::Shutdown => {
                self.session = None;
                return Response::empty();
            }
            _ => {}
        }
        let Some(s) = self.session.as_ref() else {
            return Response::err(FailureReason::RuntimeError, format!("{} before init", request.op()));
        };
        match request {
            Request::ExportParams => self.export_params(s),
            Request::CollateBatch => self.collate(s),
            Request::Forward { flags } => self.forward(s, *flags, cancel),
            Request::Gradient => self.gradient(s),
            Request::ReplayStep { lr, .. } => self.replay_step(*lr),
            Request::Generate { max_new_tokens } => self.generate(s, *max_new_tokens),
            Request::Init { .. } | Request::Shutdown => unreachable!("handled above"),
        }
    }
}

/// Outcome of a central finite-difference check of a toy's gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientCheck {
    /// Parameter entries compared.
    pub checked: usize,
    /// Largest |fd − analytic| / max(|fd|, |analytic|, 1e-5).
    pub worst_rel_err: f64,
    /// `param[index]` where the worst error occurred.
    pub worst_entry: String,
}

/// Compare every analytic gradient entry of the method's reference toy with
/// a central difference of step `h`. PPO advantages and returns are held at
/// their unperturbed values, as in the analytic gradient.
pub fn gradient_check(method: Method, batch: u32, h: f64) -> GradientCheck {
    let mut toy = ToyRuntime::new(toy_spec(reference_toy(method)).expect("registered"), None);
    let config = BoundedConfig::reported_default(method).with_batch(batch);
    let init = toy.handle(&Request::Init { config }, &CancelToken::new());
    assert!(matches!(init, Response::Ok { .. }), "healthy toy initializes");
    let s = toy.session.as_ref().expect("initialized");
    let (_, grads) = toy.objective(s, &s.model).expect("healthy objective");
    let frozen = (method == Method::Ppo).then(|| {
        let act = s.model.forward(s.batch.input_ids.view());
        let v = act.values.expect("value head");
        kernels::ppo_method_loss(act.logits.view(), v.view(), s.batch.labels.view(), s.batch.mask_f64().view())
            .expect("healthy PPO loss")
    });
    let loss_at = |m: &ToyModel| match &frozen {
        None => toy.objective(s, m).expect("healthy objective").0,
        Some(out) => {
            let act = m.forward(s.batch.input_ids.view());
            let lp = kernels::ppo::token_logprobs(act.logits.view(), s.batch.labels.view(), s.batch.mask_f64().view())
                .expect("healthy logprobs");
            let n = out.valid.sum();
            -(&lp * &out.advantages * &out.valid).sum() / n
                + ((act.values.expect("value head") - &out.returns).mapv(|d| d * d) * &out.valid).sum() / n
        }
    };
    let mut check = GradientCheck { checked: 0, worst_rel_err: 0.0, worst_entry: String::new() };
    for (pname, _, analytic) in grads.named() {
        for (i, g) in analytic.iter().enumerate() {
            let mut plus = s.model.clone();
            *plus.param_mut(pname, i) += h;
            let mut minus = s.model.clone();
            *minus.param_mut(pname, i) -= h;
            let fd = (loss_at(&plus) - loss_at(&minus)) / (2.0 * h);
            let rel = (fd - g).abs() / fd.abs().max(g.abs()).max(1e-5);
            if rel > check.worst_rel_err {
                check.worst_rel_err = rel;
                check.worst_entry = format!("{pname}[{i}]");
            }
            check.checked += 1;
        }
    }
    check
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn analytic_gradients_match_finite_differences() {
        for method in Method::ALL {
            for batch in [1, 4] {
                let c = gradient_check(method, batch, 1e-3);
                assert!(c.checked >= 88, "{method}: {} entries", c.checked);
                assert!(c.worst_rel_err <= 1e-4, "{method} B={batch}: {} at {}", c.worst_rel_err, c.worst_entry);
            }
        }
    }

    #[test]
    fn handshake_capabilities() {
        let caps = |n: &str| resolve(n, None).unwrap().handshake().capabilities;
        assert!(caps("sft_ref").contains(&"generate".to_string()));
        assert!(caps("dpo_ref").contains(&"ref_model".to_string()));
        assert!(caps("ppo_ref").contains(&"values".to_string()));
        assert!(!caps("ppo_hidden").contains(&"values".to_string()));
        assert!(!caps("sft_nogen").contains(&"generate".to_string()));
        assert!(resolve("nope", None).is_err());
        assert!(resolve("sft_ref", Some(FaultId::ArtifactNeverProduced)).is_err());
    }

    #[test]
    fn ppo_forward_exposes_values() {
        let mut toy = resolve("ppo_ref", None).unwrap();
        let c = CancelToken::new();
        let config = BoundedConfig::reported_default(Method::Ppo);
        toy.handle(&Request::Init { config }, &c);
        let flags = ForwardFlags { use_cache: false, output_hidden_states: false, drop_labels: true };
        let Response::Ok { artifacts } = toy.handle(&Request::Forward { flags }, &c) else { panic!() };
        assert_eq!(artifacts["values"].shape(), &[1, SEQ]);
        assert!(!artifacts.contains_key("loss"));
    }

    #[test]
    fn schedule_shape() {
        let s = toy_schedule(Method::Sft);
        assert_eq!(s[0], BASE_LR / 2.0);
        assert_eq!(s[1], BASE_LR);
        assert_eq!(s[7], BASE_LR / 6.0);
        assert_eq!(toy_schedule(Method::Dpo)[1], DPO_BASE_LR);
    }
}
