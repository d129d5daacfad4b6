//! The checked-in golden frame file decodes to the documented messages and
//! re-encodes to identical bytes; damaged copies are protocol errors.

use std::collections::BTreeMap;

use eqv::artifact::{DType, FailureReason, TensorArtifact};
use eqv::contract::Method;
use eqv::protocol::{
    decode_handshake_body, decode_response_body, encode_handshake, encode_response, FrameDecoder, Handshake,
    ProtocolError, Response, DEFAULT_FRAME_CAP,
};

const GOLDEN: &[u8] = include_bytes!("fixtures/golden_v1.frames");

fn t(name: &str, shape: Vec<usize>, dtype: DType, data: &[f64]) -> TensorArtifact {
    TensorArtifact::new(name, shape, dtype, data.to_vec()).unwrap()
}

fn ok(tensors: Vec<TensorArtifact>) -> Response {
    Response::Ok { artifacts: tensors.into_iter().map(|t| (t.name().to_string(), t)).collect::<BTreeMap<_, _>>() }
}

/// The fixture's documented content: a handshake then five responses.
fn documented() -> (Handshake, Vec<Response>) {
    let handshake =
        Handshake { protocol: 1, method: Method::Sft, capabilities: vec!["generate".into(), "replay".into()] };
    let responses = vec![
        ok(vec![t("embed.weight", vec![2, 2], DType::F32, &[0.5, -1.25, 0.1f32 as f64, 3.0])]),
        ok(vec![
            t("attention_mask", vec![1, 3], DType::Bool, &[1.0, 1.0, 0.0]),
            t("input_ids", vec![1, 3], DType::I64, &[5.0, 9.0, 0.0]),
            t("labels", vec![1, 3], DType::I64, &[-100.0, 9.0, -100.0]),
        ]),
        ok(vec![
            t("empty", vec![0], DType::F32, &[]),
            t("logits", vec![1, 2, 3], DType::Bf16, &[0.0, 1.0, -2.0, 0.5, 0.25, -0.125]),
            t("loss", vec![], DType::F32, &[1.0]),
        ]),
        Response::err(
            FailureReason::RuntimeError,
            "'float' object has no attribute 'backward' — \"quoted\" \\ tab\there",
        ),
        Response::empty(),
    ];
    (handshake, responses)
}

fn frames(bytes: &[u8]) -> Result<Vec<Vec<u8>>, ProtocolError> {
    let mut d = FrameDecoder::new(DEFAULT_FRAME_CAP);
    d.push(bytes);
    let mut out = Vec::new();
    while let Some(f) = d.next_frame()? {
        out.push(f);
    }
    if d.pending() != 0 {
        return Err(ProtocolError::Truncated { offset: bytes.len() - d.pending(), needed: 4, available: d.pending() });
    }
    Ok(out)
}

fn decode_all(bytes: &[u8]) -> Result<(Handshake, Vec<Response>), ProtocolError> {
    let frames = frames(bytes)?;
    let (first, rest) = frames.split_first().ok_or(ProtocolError::Closed)?;
    let handshake = decode_handshake_body(first)?;
    let responses = rest.iter().map(|b| decode_response_body(b)).collect::<Result<_, _>>()?;
    Ok((handshake, responses))
}

#[test]
fn golden_file_decodes_to_documented_messages() {
    let (handshake, responses) = decode_all(GOLDEN).unwrap();
    let (want_h, want_r) = documented();
    assert_eq!(handshake, want_h);
    assert_eq!(responses, want_r);
}

#[test]
fn engine_encoder_reproduces_golden_bytes() {
    let (h, responses) = documented();
    let mut bytes = encode_handshake(&h).unwrap();
    for r in &responses {
        bytes.extend(encode_response(r).unwrap());
    }
    assert_eq!(bytes, GOLDEN);
}

#[test]
fn scalar_one_is_little_endian_f32() {
    // "loss" holds 1.0 → 00 00 80 3F → "AACAPw==".
    let text = String::from_utf8_lossy(GOLDEN);
    assert!(text.contains(r#""loss":{"data":"AACAPw==","dtype":"f32","shape":[]}"#));
}

#[test]
fn truncated_golden_file_is_a_protocol_error() {
    let err = decode_all(&GOLDEN[..GOLDEN.len() - 3]).unwrap_err();
    assert_eq!(err.failure_reason(), FailureReason::ProtocolError);
}

#[test]
fn corrupted_golden_file_is_a_protocol_error() {
    // Flip bytes inside the third frame's JSON body.
    let mut bad = GOLDEN.to_vec();
    let pos = bad.windows(6).position(|w| w == b"shape\"").unwrap();
    bad[pos] = b'{';
    let err = decode_all(&bad).unwrap_err();
    assert_eq!(err.failure_reason(), FailureReason::ProtocolError);

    // A length prefix beyond the cap.
    let mut huge = GOLDEN.to_vec();
    huge[..4].copy_from_slice(&u32::MAX.to_be_bytes());
    assert!(matches!(frames(&huge), Err(ProtocolError::FrameTooLarge { .. })));

    // Tensor data length that disagrees with its shape.
    let mut short = GOLDEN.to_vec();
    let pos = short.windows(10).position(|w| w == b"\"AACAPw==\"").unwrap();
    short.splice(pos..pos + 10, b"\"AACA\"    ".iter().copied());
    let err = decode_all(&short).unwrap_err();
    assert_eq!(err.failure_reason(), FailureReason::ProtocolError);
}
