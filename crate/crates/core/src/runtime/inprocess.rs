//! In-process transport: the runtime lives on a worker thread so that a
//! hung or panicking probe cannot take the engine down with it.

use std::any::Any;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::mpsc::{channel, Receiver, RecvTimeoutError, Sender};
use std::thread;
use std::time::Duration;

use super::handle::{Transport, TransportFault};
use super::{CancelToken, Runtime};
use crate::protocol::{Request, Response};

type Reply = Result<Response, String>;

pub(super) struct InProcessTransport {
    requests: Option<Sender<(Request, CancelToken)>>,
    replies: Receiver<Reply>,
    inflight: Option<CancelToken>,
}

fn panic_message(payload: Box<dyn Any + Send>) -> String {
    if let Some(s) = payload.downcast_ref::<&str>() {
        s.to_string()
    } else if let Some(s) = payload.downcast_ref::<String>() {
        s.clone()
    } else {
        "runtime panicked".to_string()
    }
}

impl InProcessTransport {
    pub(super) fn start(mut runtime: Box<dyn Runtime>) -> Self {
        let (req_tx, req_rx) = channel::<(Request, CancelToken)>();
        let (rep_tx, rep_rx) = channel::<Reply>();
        thread::Builder::new()
            .name("eqv-runtime".into())
            .spawn(move || {
                while let Ok((req, cancel)) = req_rx.recv() {
                    match catch_unwind(AssertUnwindSafe(|| runtime.handle(&req, &cancel))) {
                        Ok(resp) => {
                            if rep_tx.send(Ok(resp)).is_err() {
                                break;
                            }
                        }
                        Err(payload) => {
                            let _ = rep_tx.send(Err(panic_message(payload)));
                            break;
                        }
                    }
                }
            })
            .expect("spawn runtime worker");
        Self { requests: Some(req_tx), replies: rep_rx, inflight: None }
    }
}

impl Transport for InProcessTransport {
    fn call(&mut self, request: &Request, timeout: Duration) -> Result<Response, TransportFault> {
        let Some(tx) = &self.requests else {
            return Err(TransportFault::Died("runtime worker already stopped".into()));
        };
        let cancel = CancelToken::new();
        if tx.send((request.clone(), cancel.clone())).is_err() {
            return Err(TransportFault::Died("runtime worker stopped".into()));
        }
        self.inflight = Some(cancel.clone());
        let reply = self.replies.recv_timeout(timeout);
        self.inflight = None;
        match reply {
            Ok(Ok(resp)) => Ok(resp),
            Ok(Err(msg)) => Err(TransportFault::Died(msg)),
            Err(RecvTimeoutError::Timeout) => {
                cancel.cancel();
                Err(TransportFault::Timeout)
            }
            Err(RecvTimeoutError::Disconnected) => Err(TransportFault::Died("runtime worker exited".into())),
        }
    }

    fn diagnostics(&self) -> String {
        String::new()
    }

    fn terminate(&mut self) {
        if let Some(c) = self.inflight.take() {
            c.cancel();
        }
        // Dropping the sender ends the worker loop; a worker stuck in a
        // non-cooperative runtime is detached rather than joined.
        self.requests = None;
    }
}
