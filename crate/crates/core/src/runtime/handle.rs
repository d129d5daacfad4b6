//! Runtime handles and the total probe function.

use std::collections::BTreeSet;
use std::time::{Duration, Instant};

use super::external::{ExternalTransport, LaunchError};
use super::inprocess::InProcessTransport;
use super::{Descriptor, HandleKind, HandleOptions, Role, Runtime, RuntimeFactory};
use crate::artifact::{normalize_to_f32, ArtifactSet, Bottom, FailureReason};
use crate::contract::{Method, ProbeKind};
use crate::protocol::{Handshake, ProtocolError, Request, Response};
use crate::toy;

/// Error prefix for descriptors that never yield a runtime.
pub const NEVER_PRODUCED_ERROR: &str = "No candidate runtime found";

pub(super) enum TransportFault {
    Timeout,
    Died(String),
    Protocol(ProtocolError),
}

pub(super) trait Transport: Send {
    fn call(&mut self, request: &Request, timeout: Duration) -> Result<Response, TransportFault>;
    fn diagnostics(&self) -> String;
    fn terminate(&mut self);
}

enum State {
    Live,
    Poisoned(Bottom),
    Shutdown,
}

#[derive(Clone)]
enum Origin {
    Descriptor(Descriptor),
    Factory(RuntimeFactory),
}

/// Outcome of one probe: artifacts or ⊥, plus wall time.
#[derive(Clone, Debug)]
pub struct ProbeResult {
    pub kind: ProbeKind,
    pub artifacts: Result<ArtifactSet, Bottom>,
    pub wall_time: Duration,
}

impl ProbeResult {
    pub fn bottom(&self) -> Option<&Bottom> {
        self.artifacts.as_ref().err()
    }
}

/// A connected runtime (or a poisoned placeholder for one that failed to
/// start). Every probe on a poisoned or shut-down handle yields ⊥.
pub struct RuntimeHandle {
    origin: Origin,
    role: Role,
    kind: HandleKind,
    opts: HandleOptions,
    handshake: Option<Handshake>,
    state: State,
    transport: Option<Box<dyn Transport>>,
    never_produced: bool,
    /// Diagnostics retained after the transport is gone.
    diagnostics: String,
}

impl RuntimeHandle {
    /// Resolve a descriptor and connect. Never fails: launch problems yield
    /// a poisoned handle whose first probe returns `Bottom(INIT_ERROR)`.
    pub fn spawn(descriptor: &Descriptor, role: Role, opts: &HandleOptions) -> Self {
        let mut handle = Self {
            origin: Origin::Descriptor(descriptor.clone()),
            role,
            kind: HandleKind::InProcessToy,
            opts: *opts,
            handshake: None,
            state: State::Live,
            transport: None,
            never_produced: false,
            diagnostics: String::new(),
        };
        match descriptor {
            Descriptor::Toy { toy: name, fault } => match toy::resolve(name, *fault) {
                Ok(runtime) => handle.attach(runtime),
                Err(reason) => handle.mark_never_produced(&reason),
            },
            Descriptor::Command { cmd, cwd, env } => {
                handle.kind = HandleKind::ExternalProcess;
                if let Some(dir) = cwd.as_ref().filter(|d| !d.is_dir()) {
                    handle.mark_never_produced(&format!("working directory {} does not exist", dir.display()));
                    return handle;
                }
                match ExternalTransport::launch(cmd, cwd.as_deref(), env, opts) {
                    Ok((transport, hs)) => {
                        handle.handshake = Some(hs);
                        handle.transport = Some(Box::new(transport));
                    }
                    Err(LaunchError::NotFound(why)) => handle.mark_never_produced(&why),
                    Err(LaunchError::Spawn(msg) | LaunchError::Exited(msg)) => {
                        handle.state = State::Poisoned(Bottom::new(FailureReason::InitError, msg));
                    }
                    Err(LaunchError::Timeout) => {
                        handle.state = State::Poisoned(Bottom::new(
                            FailureReason::InitError,
                            format!("no handshake within {:.1}s", opts.timeout.as_secs_f64()),
                        ));
                    }
                    Err(LaunchError::Protocol(p)) => {
                        handle.state = State::Poisoned(Bottom::new(p.failure_reason(), p.to_string()));
                    }
                }
            }
        }
        handle
    }

    /// Connect a custom in-process runtime; `factory` is re-invoked on
    /// [`RuntimeHandle::reinitialize`].
    pub fn from_factory(factory: RuntimeFactory, role: Role, opts: &HandleOptions) -> Self {
        let mut handle = Self {
            origin: Origin::Factory(factory.clone()),
            role,
            kind: HandleKind::InProcessToy,
            opts: *opts,
            handshake: None,
            state: State::Live,
            transport: None,
            never_produced: false,
            diagnostics: String::new(),
        };
        handle.attach(factory());
        handle
    }

    fn attach(&mut self, runtime: Box<dyn Runtime>) {
        self.handshake = Some(runtime.handshake());
        self.transport = Some(Box::new(InProcessTransport::start(runtime)));
    }

    fn mark_never_produced(&mut self, why: &str) {
        self.never_produced = true;
        self.state = State::Poisoned(Bottom::new(
            FailureReason::InitError,
            format!("{NEVER_PRODUCED_ERROR}: {why}"),
        ));
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn kind(&self) -> HandleKind {
        self.kind
    }

    pub fn descriptor(&self) -> Option<&Descriptor> {
        match &self.origin {
            Origin::Descriptor(d) => Some(d),
            Origin::Factory(_) => None,
        }
    }

    pub fn handshake(&self) -> Option<&Handshake> {
        self.handshake.as_ref()
    }

    pub fn method(&self) -> Option<Method> {
        self.handshake.as_ref().map(|h| h.method)
    }

    /// Capabilities not declared at handshake are unsupported.
    pub fn has_capability(&self, name: &str) -> bool {
        self.handshake.as_ref().is_some_and(|h| h.capabilities.iter().any(|c| c == name))
    }

    pub fn never_produced(&self) -> bool {
        self.never_produced
    }

    /// The failure that poisoned this handle, if any.
    pub fn fault(&self) -> Option<&Bottom> {
        match &self.state {
            State::Poisoned(b) => Some(b),
            _ => None,
        }
    }

    pub fn is_live(&self) -> bool {
        matches!(self.state, State::Live)
    }

    /// Captured child diagnostics (stderr), empty for in-process runtimes.
    pub fn diagnostics(&self) -> String {
        match &self.transport {
            Some(t) => t.diagnostics(),
            None => self.diagnostics.clone(),
        }
    }

    fn poison(&mut self, bottom: Bottom) {
        if let Some(mut t) = self.transport.take() {
            t.terminate();
            self.diagnostics = t.diagnostics();
        }
        self.state = State::Poisoned(bottom);
    }

    /// Execute one probe. Total: every fault becomes ⊥.
    ///
    /// Absent `expected` artifacts become `Bottom(MISSING_ARTIFACT)` and
    /// tensors containing NaN/Inf become `Bottom(NONFINITE)` inside the set.
    pub fn run_probe(&mut self, request: &Request, expected: &BTreeSet<String>) -> ProbeResult {
        let start = Instant::now();
        let kind = request.kind();
        let artifacts = self.exchange(request).map(|resp| into_set(kind, resp, expected));
        let artifacts = artifacts.and_then(|r| r);
        ProbeResult { kind, artifacts, wall_time: start.elapsed() }
    }

    fn exchange(&mut self, request: &Request) -> Result<Response, Bottom> {
        match &self.state {
            State::Poisoned(b) => return Err(b.clone()),
            State::Shutdown => {
                return Err(Bottom::new(FailureReason::RuntimeError, format!("{} after shutdown", request.op())))
            }
            State::Live => {}
        }
        let timeout = self.opts.timeout;
        let transport = self.transport.as_mut().expect("live handle has a transport");
        match transport.call(request, timeout) {
            Ok(resp) => {
                if matches!(request, Request::Shutdown) {
                    self.close();
                }
                Ok(resp)
            }
            Err(fault) => {
                let bottom = match fault {
                    TransportFault::Timeout => Bottom::new(
                        FailureReason::Timeout,
                        format!("{} exceeded probe timeout of {:.1}s", request.op(), timeout.as_secs_f64()),
                    ),
                    TransportFault::Died(msg) => Bottom::new(FailureReason::RuntimeError, msg),
                    TransportFault::Protocol(p) => Bottom::new(p.failure_reason(), p.to_string()),
                };
                self.poison(bottom.clone());
                Err(bottom)
            }
        }
    }

    fn close(&mut self) {
        if let Some(mut t) = self.transport.take() {
            t.terminate();
            self.diagnostics = t.diagnostics();
        }
        self.state = State::Shutdown;
    }

    /// Send SHUTDOWN if live, then release the runtime.
    pub fn shutdown(&mut self) {
        if self.is_live() {
            let _ = self.exchange(&Request::Shutdown);
        }
        self.close_keep_fault();
    }

    fn close_keep_fault(&mut self) {
        if let Some(mut t) = self.transport.take() {
            t.terminate();
            self.diagnostics = t.diagnostics();
        }
        if self.is_live() {
            self.state = State::Shutdown;
        }
    }

    /// Terminate this runtime and connect a fresh one from the same origin.
    pub fn reinitialize(&mut self) {
        self.close_keep_fault();
        let fresh = match &self.origin {
            Origin::Descriptor(d) => Self::spawn(d, self.role, &self.opts),
            Origin::Factory(f) => Self::from_factory(f.clone(), self.role, &self.opts),
        };
        *self = fresh;
    }
}

impl Drop for RuntimeHandle {
    fn drop(&mut self) {
        if let Some(mut t) = self.transport.take() {
            t.terminate();
        }
    }
}

fn into_set(kind: ProbeKind, resp: Response, expected: &BTreeSet<String>) -> Result<ArtifactSet, Bottom> {
    match resp {
        Response::Err { kind, error } => Err(Bottom::new(kind, error)),
        Response::Ok { artifacts } => {
            let mut set = ArtifactSet::new(kind);
            for (name, tensor) in artifacts {
                let tensor = normalize_to_f32(&tensor.renamed(name.clone()));
                if tensor.is_finite() {
                    set.insert(name, tensor);
                } else {
                    set.insert(name.clone(), Bottom::new(FailureReason::Nonfinite, format!("non-finite values in '{name}'")));
                }
            }
            for name in expected {
                if set.get(name).is_bottom() && !set.names().any(|n| n == name) {
                    set.insert(name.clone(), Bottom::missing(name));
                }
            }
            Ok(set)
        }
    }
}
