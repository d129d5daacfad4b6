//! Protocol v1: length-prefixed JSON frames between the engine and a runtime.
//!
//! Each frame is a 4-byte big-endian body length followed by a UTF-8 JSON
//! body with sorted keys. Tensor data travels as base64 of little-endian f32.
//! The runtime speaks first with a [`Handshake`]; afterwards every
//! [`Request`] is answered by exactly one [`Response`].

use std::collections::BTreeMap;
use std::io::{Read, Write};

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::artifact::{DType, FailureReason, TensorArtifact};
use crate::contract::{BoundedConfig, ForwardFlags, Method, ProbeKind};

pub const PROTOCOL_VERSION: u32 = 1;
pub const DEFAULT_FRAME_CAP: usize = 256 * 1024 * 1024;
const HEADER_LEN: usize = 4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProtocolError {
    #[error("truncated frame: need {needed} bytes at offset {offset}, have {available}")]
    Truncated { offset: usize, needed: usize, available: usize },
    #[error("frame length {len} exceeds cap {cap}")]
    FrameTooLarge { len: usize, cap: usize },
    #[error("{trailing} trailing bytes after frame end at offset {offset}")]
    TrailingBytes { offset: usize, trailing: usize },
    #[error("invalid UTF-8 in frame body at offset {offset}")]
    Utf8 { offset: usize },
    #[error("malformed JSON at offset {offset}: {message}")]
    Json { offset: usize, message: String },
    #[error("artifact '{name}': {message}")]
    Tensor { name: String, message: String },
    #[error("non-finite value in field '{field}'")]
    NonFinite { field: &'static str },
    #[error("unsupported protocol version {0}")]
    Version(u32),
    #[error("stream error: {0}")]
    Io(String),
    #[error("stream closed")]
    Closed,
}

impl ProtocolError {
    /// How a codec failure surfaces as a failure symbol upstream.
    pub fn failure_reason(&self) -> FailureReason {
        match self {
            ProtocolError::FrameTooLarge { .. } => FailureReason::OomLike,
            ProtocolError::Closed | ProtocolError::Io(_) => FailureReason::RuntimeError,
            _ => FailureReason::ProtocolError,
        }
    }
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Request {
    Init { config: BoundedConfig },
    ExportParams,
    CollateBatch,
    Forward { flags: ForwardFlags },
    Gradient,
    ReplayStep { step: u32, lr: f64 },
    Generate { max_new_tokens: u32 },
    Shutdown,
}

impl Request {
    pub fn op(&self) -> &'static str {
        match self {
            Request::Init { .. } => "init",
            Request::ExportParams => "export_params",
            Request::CollateBatch => "collate_batch",
            Request::Forward { .. } => "forward",
            Request::Gradient => "gradient",
            Request::ReplayStep { .. } => "replay_step",
            Request::Generate { .. } => "generate",
            Request::Shutdown => "shutdown",
        }
    }

    pub fn kind(&self) -> ProbeKind {
        match self {
            Request::Init { .. } => ProbeKind::Init,
            Request::ExportParams => ProbeKind::ExportParams,
            Request::CollateBatch => ProbeKind::CollateBatch,
            Request::Forward { .. } => ProbeKind::Forward,
            Request::Gradient => ProbeKind::Gradient,
            Request::ReplayStep { .. } => ProbeKind::ReplayStep,
            Request::Generate { .. } => ProbeKind::Generate,
            Request::Shutdown => ProbeKind::Shutdown,
        }
    }

    fn check_finite(&self) -> Result<(), ProtocolError> {
        match self {
            Request::ReplayStep { lr, .. } if !lr.is_finite() => Err(ProtocolError::NonFinite { field: "lr" }),
            Request::Init { config } => {
                let fields = [
                    ("config.probe_timeout_secs", config.probe_timeout_secs),
                    ("config.dpo.beta", config.dpo.beta),
                    ("config.dpo.label_smoothing", config.dpo.label_smoothing),
                    ("config.dpo.simpo_margin", config.dpo.simpo_margin),
                ];
                match fields.iter().find(|(_, v)| !v.is_finite()) {
                    Some((field, _)) => Err(ProtocolError::NonFinite { field }),
                    None => Ok(()),
                }
            }
            _ => Ok(()),
        }
    }
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq, Eq)]
pub struct Handshake {
    pub protocol: u32,
    pub method: Method,
    pub capabilities: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Response {
    Ok { artifacts: BTreeMap<String, TensorArtifact> },
    Err { kind: FailureReason, error: String },
}

impl Response {
    pub fn ok(artifacts: impl IntoIterator<Item = TensorArtifact>) -> Self {
        Response::Ok { artifacts: artifacts.into_iter().map(|t| (t.name().to_string(), t)).collect() }
    }

    pub fn empty() -> Self {
        Response::Ok { artifacts: BTreeMap::new() }
    }

    pub fn err(kind: FailureReason, error: impl Into<String>) -> Self {
        Response::Err { kind, error: error.into() }
    }
}

#[derive(Serialize, Deserialize)]
struct WireTensor {
    shape: Vec<usize>,
    dtype: DType,
    data: String,
}

#[derive(Serialize, Deserialize)]
struct WireResponse {
    ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    artifacts: Option<BTreeMap<String, WireTensor>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    kind: Option<FailureReason>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

fn tensor_to_wire(t: &TensorArtifact) -> WireTensor {
    let mut bytes = Vec::with_capacity(t.numel() * 4);
    for &v in t.data() {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    WireTensor { shape: t.shape().to_vec(), dtype: t.dtype(), data: BASE64.encode(bytes) }
}

fn tensor_from_wire(name: &str, w: WireTensor) -> Result<TensorArtifact, ProtocolError> {
    let bad = |message: String| ProtocolError::Tensor { name: name.to_string(), message };
    let bytes = BASE64.decode(w.data.as_bytes()).map_err(|e| bad(format!("invalid base64: {e}")))?;
    let numel: usize = w.shape.iter().product();
    if bytes.len() != numel * 4 {
        return Err(bad(format!(
            "data has {} bytes, shape {:?} needs {}",
            bytes.len(),
            w.shape,
            numel * 4
        )));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    TensorArtifact::new(name, w.shape, w.dtype, data).map_err(|e| bad(e.to_string()))
}

impl Serialize for Response {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let wire = match self {
            Response::Ok { artifacts } => WireResponse {
                ok: true,
                artifacts: Some(artifacts.iter().map(|(k, t)| (k.clone(), tensor_to_wire(t))).collect()),
                kind: None,
                error: None,
            },
            Response::Err { kind, error } => {
                WireResponse { ok: false, artifacts: None, kind: Some(*kind), error: Some(error.clone()) }
            }
        };
        wire.serialize(serializer)
    }
}

fn response_from_wire(w: WireResponse) -> Result<Response, ProtocolError> {
    if w.ok {
        let mut artifacts = BTreeMap::new();
        for (name, t) in w.artifacts.unwrap_or_default() {
            let tensor = tensor_from_wire(&name, t)?;
            artifacts.insert(name, tensor);
        }
        Ok(Response::Ok { artifacts })
    } else {
        Ok(Response::Err {
            kind: w.kind.unwrap_or(FailureReason::RuntimeError),
            error: w.error.unwrap_or_default(),
        })
    }
}

/// Serialize with sorted object keys.
fn canonical_body<T: Serialize>(payload: &T) -> Result<Vec<u8>, ProtocolError> {
    let value = serde_json::to_value(payload).map_err(|e| ProtocolError::Json { offset: 0, message: e.to_string() })?;
    serde_json::to_vec(&value).map_err(|e| ProtocolError::Json { offset: 0, message: e.to_string() })
}

fn frame(body: Vec<u8>) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + body.len());
    out.extend_from_slice(&(body.len() as u32).to_be_bytes());
    out.extend_from_slice(&body);
    out
}

pub fn encode_request(req: &Request) -> Result<Vec<u8>, ProtocolError> {
    req.check_finite()?;
    Ok(frame(canonical_body(req)?))
}

pub fn encode_response(resp: &Response) -> Result<Vec<u8>, ProtocolError> {
    Ok(frame(canonical_body(resp)?))
}

pub fn encode_handshake(h: &Handshake) -> Result<Vec<u8>, ProtocolError> {
    Ok(frame(canonical_body(h)?))
}

/// Split one complete frame off the front of `bytes`; returns the body and
/// the number of bytes consumed.
pub fn split_frame(bytes: &[u8], cap: usize) -> Result<(&[u8], usize), ProtocolError> {
    if bytes.len() < HEADER_LEN {
        return Err(ProtocolError::Truncated { offset: 0, needed: HEADER_LEN, available: bytes.len() });
    }
    let len = u32::from_be_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]) as usize;
    if len > cap {
        return Err(ProtocolError::FrameTooLarge { len, cap });
    }
    let available = bytes.len() - HEADER_LEN;
    if available < len {
        return Err(ProtocolError::Truncated { offset: HEADER_LEN, needed: len, available });
    }
    Ok((&bytes[HEADER_LEN..HEADER_LEN + len], HEADER_LEN + len))
}

/// Decode exactly one frame occupying all of `bytes`.
fn single_body(bytes: &[u8], cap: usize) -> Result<&[u8], ProtocolError> {
    let (body, used) = split_frame(bytes, cap)?;
    if used != bytes.len() {
        return Err(ProtocolError::TrailingBytes { offset: used, trailing: bytes.len() - used });
    }
    Ok(body)
}

fn parse_body<T: for<'de> Deserialize<'de>>(body: &[u8]) -> Result<T, ProtocolError> {
    if let Err(e) = std::str::from_utf8(body) {
        return Err(ProtocolError::Utf8 { offset: HEADER_LEN + e.valid_up_to() });
    }
    serde_json::from_slice(body).map_err(|e| ProtocolError::Json {
        offset: HEADER_LEN + e.column().saturating_sub(1),
        message: e.to_string(),
    })
}

pub fn decode_request_body(body: &[u8]) -> Result<Request, ProtocolError> {
    parse_body(body)
}

pub fn decode_response_body(body: &[u8]) -> Result<Response, ProtocolError> {
    response_from_wire(parse_body(body)?)
}

pub fn decode_handshake_body(body: &[u8]) -> Result<Handshake, ProtocolError> {
    let h: Handshake = parse_body(body)?;
    if h.protocol != PROTOCOL_VERSION {
        return Err(ProtocolError::Version(h.protocol));
    }
    Ok(h)
}

pub fn decode_request(bytes: &[u8]) -> Result<Request, ProtocolError> {
    decode_request_body(single_body(bytes, DEFAULT_FRAME_CAP)?)
}

pub fn decode_response(bytes: &[u8]) -> Result<Response, ProtocolError> {
    decode_response_body(single_body(bytes, DEFAULT_FRAME_CAP)?)
}

pub fn decode_handshake(bytes: &[u8]) -> Result<Handshake, ProtocolError> {
    decode_handshake_body(single_body(bytes, DEFAULT_FRAME_CAP)?)
}

/// Incremental frame splitter; output does not depend on how input bytes
/// are chunked.
#[derive(Debug)]
pub struct FrameDecoder {
    buf: Vec<u8>,
    cap: usize,
}

impl FrameDecoder {
    pub fn new(cap: usize) -> Self {
        Self { buf: Vec::new(), cap }
    }

    pub fn push(&mut self, bytes: &[u8]) {
        self.buf.extend_from_slice(bytes);
    }

    /// Next complete frame body, `Ok(None)` if more bytes are needed.
    pub fn next_frame(&mut self) -> Result<Option<Vec<u8>>, ProtocolError> {
        match split_frame(&self.buf, self.cap) {
            Ok((body, used)) => {
                let body = body.to_vec();
                self.buf.drain(..used);
                Ok(Some(body))
            }
            Err(ProtocolError::Truncated { .. }) => Ok(None),
            Err(e) => Err(e),
        }
    }

    pub fn pending(&self) -> usize {
        self.buf.len()
    }
}

/// Blocking read of one frame body from a stream.
pub fn read_frame<R: Read>(reader: &mut R, cap: usize) -> Result<Vec<u8>, ProtocolError> {
    let mut header = [0u8; HEADER_LEN];
    if let Err(e) = reader.read_exact(&mut header) {
        return Err(match e.kind() {
            std::io::ErrorKind::UnexpectedEof => ProtocolError::Closed,
            _ => ProtocolError::Io(e.to_string()),
        });
    }
    let len = u32::from_be_bytes(header) as usize;
    if len > cap {
        return Err(ProtocolError::FrameTooLarge { len, cap });
    }
    let mut body = vec![0u8; len];
    reader.read_exact(&mut body).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => ProtocolError::Truncated { offset: HEADER_LEN, needed: len, available: 0 },
        _ => ProtocolError::Io(e.to_string()),
    })?;
    Ok(body)
}

pub fn write_frame<W: Write>(writer: &mut W, frame: &[u8]) -> Result<(), ProtocolError> {
    writer.write_all(frame).and_then(|_| writer.flush()).map_err(|e| ProtocolError::Io(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn scalar_one_encodes_as_little_endian_f32() {
        let resp = Response::ok([TensorArtifact::scalar("loss", 1.0)]);
        let bytes = encode_response(&resp).unwrap();
        let body: serde_json::Value = serde_json::from_slice(&bytes[4..]).unwrap();
        let data = body["artifacts"]["loss"]["data"].as_str().unwrap();
        assert_eq!(BASE64.decode(data).unwrap(), vec![0x00, 0x00, 0x80, 0x3F]);
        assert_eq!(body["artifacts"]["loss"]["shape"], serde_json::json!([]));
        assert_eq!(decode_response(&bytes).unwrap(), resp);
    }

    #[test]
    fn empty_tensor_keeps_its_shape() {
        let resp = Response::ok([TensorArtifact::f32("e", vec![0], [])]);
        let bytes = encode_response(&resp).unwrap();
        let body: serde_json::Value = serde_json::from_slice(&bytes[4..]).unwrap();
        assert_eq!(body["artifacts"]["e"]["data"], "");
        assert_eq!(body["artifacts"]["e"]["shape"], serde_json::json!([0]));
        assert_eq!(decode_response(&bytes).unwrap(), resp);
    }

    #[test]
    fn header_is_big_endian_length() {
        let bytes = encode_request(&Request::Gradient).unwrap();
        let len = u32::from_be_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]) as usize;
        assert_eq!(len, bytes.len() - 4);
        assert_eq!(&bytes[4..], br#"{"op":"gradient"}"#);
    }

    #[test]
    fn keys_are_sorted() {
        let req = Request::ReplayStep { step: 1, lr: 0.5 };
        let bytes = encode_request(&req).unwrap();
        assert_eq!(&bytes[4..], br#"{"lr":0.5,"op":"replay_step","step":1}"#);
    }

    #[test]
    fn non_finite_request_fields_rejected() {
        let err = encode_request(&Request::ReplayStep { step: 0, lr: f64::NAN }).unwrap_err();
        assert_eq!(err, ProtocolError::NonFinite { field: "lr" });
    }

    #[test]
    fn non_finite_tensor_data_is_carried() {
        let resp = Response::ok([TensorArtifact::f32("x", vec![2], [f64::NAN, f64::INFINITY])]);
        let back = decode_response(&encode_response(&resp).unwrap()).unwrap();
        let Response::Ok { artifacts } = back else { panic!() };
        assert!(artifacts["x"].data()[0].is_nan());
        assert_eq!(artifacts["x"].data()[1], f64::INFINITY);
    }

    #[test]
    fn truncated_frame_is_an_error() {
        let bytes = encode_response(&Response::empty()).unwrap();
        let err = decode_response(&bytes[..bytes.len() - 1]).unwrap_err();
        assert!(matches!(err, ProtocolError::Truncated { offset: 4, .. }));
        assert_eq!(err.failure_reason(), FailureReason::ProtocolError);
        assert!(matches!(decode_response(&bytes[..2]), Err(ProtocolError::Truncated { offset: 0, .. })));
    }

    #[test]
    fn data_length_must_match_shape() {
        let body = br#"{"artifacts":{"x":{"data":"AACAPw==","dtype":"f32","shape":[2]}},"ok":true}"#;
        let err = decode_response(&frame(body.to_vec())).unwrap_err();
        assert!(matches!(err, ProtocolError::Tensor { ref name, .. } if name == "x"));
        assert_eq!(err.failure_reason(), FailureReason::ProtocolError);
    }

    #[test]
    fn oversized_frames_are_refused() {
        let mut bytes = (1024u32).to_be_bytes().to_vec();
        bytes.extend(vec![b' '; 1024]);
        let err = split_frame(&bytes, 512).unwrap_err();
        assert_eq!(err, ProtocolError::FrameTooLarge { len: 1024, cap: 512 });
        assert_eq!(err.failure_reason(), FailureReason::OomLike);
    }

    #[test]
    fn malformed_json_reports_offset() {
        let err = decode_response(&frame(br#"{"ok":tru}"#.to_vec())).unwrap_err();
        match err {
            ProtocolError::Json { offset, .. } => assert!(offset >= 4 && offset < 14),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn handshake_version_gate() {
        let h = Handshake { protocol: 2, method: Method::Sft, capabilities: vec![] };
        let bytes = encode_handshake(&h).unwrap();
        assert_eq!(decode_handshake(&bytes).unwrap_err(), ProtocolError::Version(2));
    }

    #[test]
    fn error_response_wire_shape() {
        let resp = Response::err(FailureReason::InitError, "No module named '_jax_sft_shared'");
        let bytes = encode_response(&resp).unwrap();
        assert_eq!(
            std::str::from_utf8(&bytes[4..]).unwrap(),
            r#"{"error":"No module named '_jax_sft_shared'","kind":"INIT_ERROR","ok":false}"#
        );
        assert_eq!(decode_response(&bytes).unwrap(), resp);
    }

    #[test]
    fn unknown_op_fails_to_decode() {
        let err = decode_request(&frame(br#"{"op":"teleport"}"#.to_vec())).unwrap_err();
        assert!(matches!(err, ProtocolError::Json { .. }));
    }

    fn dtype_strategy() -> impl Strategy<Value = DType> {
        prop_oneof![Just(DType::F32), Just(DType::F16), Just(DType::Bf16), Just(DType::I64), Just(DType::Bool)]
    }

    fn tensor_strategy() -> impl Strategy<Value = TensorArtifact> {
        (prop::collection::vec(0usize..4, 0..4), dtype_strategy(), "[a-z][a-z_.0-9]{0,12}").prop_flat_map(
            |(shape, dtype, name)| {
                let n: usize = shape.iter().product();
                prop::collection::vec(-1e6f32..1e6f32, n).prop_map(move |data| {
                    TensorArtifact::new(name.clone(), shape.clone(), dtype, data.into_iter().map(f64::from).collect())
                        .unwrap()
                })
            },
        )
    }

    fn response_strategy() -> impl Strategy<Value = Response> {
        prop_oneof![
            prop::collection::vec(tensor_strategy(), 0..5).prop_map(Response::ok),
            ".{0,40}".prop_map(|e| Response::err(FailureReason::RuntimeError, e)),
        ]
    }

    proptest! {
        #[test]
        fn response_round_trip(resp in response_strategy()) {
            let bytes = encode_response(&resp).unwrap();
            prop_assert_eq!(decode_response(&bytes).unwrap(), resp);
        }

        #[test]
        fn request_round_trip(step in 0u32..100, lr in 0.0f64..10.0, n in 0u32..64, hidden: bool) {
            for req in [
                Request::ReplayStep { step, lr },
                Request::Generate { max_new_tokens: n },
                Request::Forward { flags: ForwardFlags { use_cache: false, output_hidden_states: hidden, drop_labels: !hidden } },
                Request::Init { config: BoundedConfig::reported_default(Method::Dpo) },
            ] {
                let bytes = encode_request(&req).unwrap();
                prop_assert_eq!(decode_request(&bytes).unwrap(), req);
            }
        }

        #[test]
        fn chunking_does_not_change_decoded_frames(
            resps in prop::collection::vec(response_strategy(), 1..4),
            chunk in 1usize..17,
        ) {
            let stream: Vec<u8> = resps.iter().flat_map(|r| encode_response(r).unwrap()).collect();
            let mut dec = FrameDecoder::new(DEFAULT_FRAME_CAP);
            let mut out = Vec::new();
            for piece in stream.chunks(chunk) {
                dec.push(piece);
                while let Some(body) = dec.next_frame().unwrap() {
                    out.push(decode_response_body(&body).unwrap());
                }
            }
            prop_assert_eq!(dec.pending(), 0);
            prop_assert_eq!(out, resps);
        }
    }
}
