//! Server side of the wire protocol: exposes an in-process runtime over a
//! byte stream (normally the process's stdin/stdout).

use std::io::{Read, Write};

use super::{CancelToken, Runtime};
use crate::artifact::FailureReason;
use crate::protocol::{self, ProtocolError, Request, Response};

/// Exit code used by the crash-at-probe test hook.
pub const CRASH_EXIT_CODE: i32 = 101;

#[derive(Clone, Copy, Debug, Default)]
pub struct ServeOptions {
    pub frame_cap: Option<usize>,
    /// Exit abruptly upon receiving the k-th request (0-based).
    pub crash_at_probe: Option<usize>,
}

/// Write the handshake, then answer requests until SHUTDOWN or end of input.
pub fn serve(
    runtime: &mut dyn Runtime,
    mut input: impl Read,
    mut output: impl Write,
    opts: ServeOptions,
) -> Result<(), ProtocolError> {
    let cap = opts.frame_cap.unwrap_or(protocol::DEFAULT_FRAME_CAP);
    protocol::write_frame(&mut output, &protocol::encode_handshake(&runtime.handshake())?)?;
    let cancel = CancelToken::new();
    let mut index = 0usize;
    loop {
        let body = match protocol::read_frame(&mut input, cap) {
            Ok(b) => b,
            Err(ProtocolError::Closed) => return Ok(()),
            Err(e) => return Err(e),
        };
        if opts.crash_at_probe == Some(index) {
            let _ = output.flush();
            std::process::exit(CRASH_EXIT_CODE);
        }
        index += 1;
        let (response, done) = match protocol::decode_request_body(&body) {
            Ok(req) => (runtime.handle(&req, &cancel), matches!(req, Request::Shutdown)),
            Err(e) => (Response::err(FailureReason::ProtocolError, format!("unrecognized request: {e}")), false),
        };
        protocol::write_frame(&mut output, &protocol::encode_response(&response)?)?;
        if done {
            return Ok(());
        }
    }
}
