//! External-process transport: protocol frames over the child's standard
//! streams, stderr captured for the report, grace-kill on timeout.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;
use std::process::{Child, ChildStdin, Command, ExitStatus, Stdio};
use std::sync::mpsc::{channel, Receiver, RecvTimeoutError};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use super::handle::{Transport, TransportFault};
use super::HandleOptions;
use crate::protocol::{self, FrameDecoder, Handshake, ProtocolError, Request, Response};

/// Bytes of child stderr retained (most recent).
const STDERR_KEEP: usize = 64 * 1024;

type Frames = Receiver<Result<Vec<u8>, ProtocolError>>;

pub(super) struct ExternalTransport {
    child: Child,
    stdin: Option<ChildStdin>,
    frames: Frames,
    stderr: Arc<Mutex<Vec<u8>>>,
    grace: Duration,
}

/// Spawn failures before a handshake was obtained.
pub(super) enum LaunchError {
    /// The program does not exist: nothing was ever produced to run.
    NotFound(String),
    Spawn(String),
    Exited(String),
    Timeout,
    Protocol(ProtocolError),
}

fn pump_stdout(mut out: impl Read + Send + 'static, cap: usize) -> Frames {
    let (tx, rx) = channel();
    thread::spawn(move || {
        let mut dec = FrameDecoder::new(cap);
        let mut buf = vec![0u8; 64 * 1024];
        loop {
            let n = match out.read(&mut buf) {
                Ok(0) | Err(_) => return,
                Ok(n) => n,
            };
            dec.push(&buf[..n]);
            loop {
                match dec.next_frame() {
                    Ok(Some(frame)) => {
                        if tx.send(Ok(frame)).is_err() {
                            return;
                        }
                    }
                    Ok(None) => break,
                    Err(e) => {
                        let _ = tx.send(Err(e));
                        return;
                    }
                }
            }
        }
    });
    rx
}

fn pump_stderr(mut err: impl Read + Send + 'static) -> Arc<Mutex<Vec<u8>>> {
    let store = Arc::new(Mutex::new(Vec::new()));
    let sink = store.clone();
    thread::spawn(move || {
        let mut buf = [0u8; 8192];
        while let Ok(n) = err.read(&mut buf) {
            if n == 0 {
                break;
            }
            let mut s = sink.lock().unwrap_or_else(|p| p.into_inner());
            s.extend_from_slice(&buf[..n]);
            if s.len() > STDERR_KEEP {
                let cut = s.len() - STDERR_KEEP;
                s.drain(..cut);
            }
        }
    });
    store
}

fn describe_exit(status: Option<ExitStatus>) -> String {
    match status.and_then(|s| s.code()) {
        Some(code) => format!("exit status {code}"),
        None => "termination by signal".to_string(),
    }
}

impl ExternalTransport {
    pub(super) fn launch(
        cmd: &[String],
        cwd: Option<&Path>,
        env: &BTreeMap<String, String>,
        opts: &HandleOptions,
    ) -> Result<(Self, Handshake), LaunchError> {
        let Some((program, args)) = cmd.split_first() else {
            return Err(LaunchError::Spawn("empty command line".into()));
        };
        let mut command = Command::new(program);
        command.args(args).envs(env).stdin(Stdio::piped()).stdout(Stdio::piped()).stderr(Stdio::piped());
        if let Some(dir) = cwd {
            command.current_dir(dir);
        }
        let mut child = command.spawn().map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => LaunchError::NotFound(format!("{program}: {e}")),
            _ => LaunchError::Spawn(format!("{program}: {e}")),
        })?;
        let stdin = child.stdin.take();
        let frames = pump_stdout(child.stdout.take().expect("piped stdout"), opts.frame_cap);
        let stderr = pump_stderr(child.stderr.take().expect("piped stderr"));
        let mut transport = Self { child, stdin, frames, stderr, grace: opts.grace };

        let first = transport.frames.recv_timeout(opts.timeout);
        let handshake = match first {
            Ok(Ok(body)) => protocol::decode_handshake_body(&body).map_err(LaunchError::Protocol),
            Ok(Err(e)) => Err(LaunchError::Protocol(e)),
            Err(RecvTimeoutError::Timeout) => Err(LaunchError::Timeout),
            Err(RecvTimeoutError::Disconnected) => {
                let status = transport.reap(Duration::from_secs(2));
                let tail = transport.stderr_text();
                let msg = if tail.trim().is_empty() {
                    format!("runtime exited before handshake ({})", describe_exit(status))
                } else {
                    tail.trim().to_string()
                };
                Err(LaunchError::Exited(msg))
            }
        };
        match handshake {
            Ok(h) => Ok((transport, h)),
            Err(e) => {
                transport.terminate();
                Err(e)
            }
        }
    }

    fn stderr_text(&self) -> String {
        String::from_utf8_lossy(&self.stderr.lock().unwrap_or_else(|p| p.into_inner())).into_owned()
    }

    /// Wait up to `limit` for the child to exit.
    fn reap(&mut self, limit: Duration) -> Option<ExitStatus> {
        let start = Instant::now();
        loop {
            match self.child.try_wait() {
                Ok(Some(status)) => return Some(status),
                Ok(None) if start.elapsed() < limit => thread::sleep(Duration::from_millis(10)),
                _ => return None,
            }
        }
    }

    fn soft_terminate(&self) {
        #[cfg(unix)]
        {
            // SAFETY: plain signal delivery to a child we spawned and have not reaped.
            unsafe {
                libc::kill(self.child.id() as libc::pid_t, libc::SIGTERM);
            }
        }
    }

    fn died(&mut self, request: &Request) -> TransportFault {
        let status = self.reap(Duration::from_secs(2));
        let tail = self.stderr_text();
        let mut msg = format!("runtime process died during {} ({})", request.op(), describe_exit(status));
        let tail = tail.trim();
        if !tail.is_empty() {
            msg.push_str(": ");
            msg.push_str(tail);
        }
        TransportFault::Died(msg)
    }
}

impl Transport for ExternalTransport {
    fn call(&mut self, request: &Request, timeout: Duration) -> Result<Response, TransportFault> {
        let frame = protocol::encode_request(request).map_err(TransportFault::Protocol)?;
        let written = match self.stdin.as_mut() {
            Some(stdin) => stdin.write_all(&frame).and_then(|_| stdin.flush()).is_ok(),
            None => false,
        };
        if !written {
            return Err(self.died(request));
        }
        match self.frames.recv_timeout(timeout) {
            Ok(Ok(body)) => protocol::decode_response_body(&body).map_err(TransportFault::Protocol),
            Ok(Err(e)) => Err(TransportFault::Protocol(e)),
            Err(RecvTimeoutError::Timeout) => Err(TransportFault::Timeout),
            Err(RecvTimeoutError::Disconnected) => Err(self.died(request)),
        }
    }

    fn diagnostics(&self) -> String {
        self.stderr_text()
    }

    fn terminate(&mut self) {
        self.stdin = None;
        if self.reap(Duration::from_millis(50)).is_some() {
            return;
        }
        self.soft_terminate();
        if self.reap(self.grace).is_none() {
            let _ = self.child.kill();
            let _ = self.child.wait();
        }
    }
}

impl Drop for ExternalTransport {
    fn drop(&mut self) {
        if matches!(self.child.try_wait(), Ok(None)) {
            let _ = self.child.kill();
            let _ = self.child.wait();
        }
    }
}
