//! Probe runner: owns runtime lifecycles, timeouts, and the total mapping
//! from a probe to artifacts-or-⊥.
//!
//! A runtime is anything that answers protocol requests: an in-process
//! [`Runtime`] driven on a worker thread, or an external process speaking the
//! wire protocol over its standard streams.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::protocol::{Handshake, Request, Response, DEFAULT_FRAME_CAP};
use crate::toy::FaultId;

mod external;
mod handle;
mod inprocess;
pub mod serve;

pub use handle::{ProbeResult, RuntimeHandle, NEVER_PRODUCED_ERROR};

/// Grace period between a soft terminate and a hard kill.
pub const KILL_GRACE: Duration = Duration::from_secs(5);

/// Cooperative cancellation flag handed to in-process runtimes.
#[derive(Clone, Debug, Default)]
pub struct CancelToken(Arc<AtomicBool>);

impl CancelToken {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn cancel(&self) {
        self.0.store(true, Ordering::SeqCst);
    }

    pub fn is_cancelled(&self) -> bool {
        self.0.load(Ordering::SeqCst)
    }
}

/// An in-process runtime. Implementations answer one request at a time and
/// should poll `cancel` during long-running work.
pub trait Runtime: Send {
    fn handshake(&self) -> Handshake;
    fn handle(&mut self, request: &Request, cancel: &CancelToken) -> Response;
}

/// Builds fresh runtime instances; used to re-initialize custom runtimes.
pub type RuntimeFactory = Arc<dyn Fn() -> Box<dyn Runtime> + Send + Sync>;

/// Launch descriptor from a verification config.
#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
#[serde(untagged)]
pub enum Descriptor {
    Toy {
        toy: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        fault: Option<FaultId>,
    },
    Command {
        cmd: Vec<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        cwd: Option<PathBuf>,
        #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
        env: BTreeMap<String, String>,
    },
}

impl Descriptor {
    pub fn toy(name: impl Into<String>) -> Self {
        Descriptor::Toy { toy: name.into(), fault: None }
    }

    pub fn faulty_toy(name: impl Into<String>, fault: FaultId) -> Self {
        Descriptor::Toy { toy: name.into(), fault: Some(fault) }
    }

    pub fn command<S: Into<String>>(cmd: impl IntoIterator<Item = S>) -> Self {
        Descriptor::Command { cmd: cmd.into_iter().map(Into::into).collect(), cwd: None, env: BTreeMap::new() }
    }
}

#[derive(Serialize, Deserialize, Clone, Copy, Debug, PartialEq, Eq)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Role {
    Reference,
    Candidate,
}

#[derive(Serialize, Deserialize, Clone, Copy, Debug, PartialEq, Eq)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum HandleKind {
    InProcessToy,
    ExternalProcess,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HandleOptions {
    pub timeout: Duration,
    pub frame_cap: usize,
    pub grace: Duration,
}

impl HandleOptions {
    pub fn with_timeout(timeout: Duration) -> Self {
        Self { timeout, ..Self::default() }
    }
}

impl Default for HandleOptions {
    fn default() -> Self {
        Self {
            timeout: Duration::from_secs_f64(crate::contract::DEFAULT_PROBE_TIMEOUT_SECS),
            frame_cap: DEFAULT_FRAME_CAP,
            grace: KILL_GRACE,
        }
    }
}
