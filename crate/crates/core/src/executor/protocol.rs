//! Frame protocol spoken between the orchestrator and sandbox workers.
//!
//! A frame is a 4-byte big-endian body length followed by a UTF-8 JSON body.
//! The worker opens the session with a `hello` frame carrying its protocol
//! version; afterwards every request gets exactly one response.

use std::io::{self, Read, Write};

use serde::{Deserialize, Serialize};

use crate::datamodel::ExecStatus;

pub const PROTOCOL_VERSION: u32 = 1;

/// Frames above this size are treated as protocol violations.
pub const MAX_FRAME_BYTES: usize = 64 * 1024 * 1024;

#[derive(Debug, thiserror::Error)]
pub enum FrameError {
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("frame of {0} bytes exceeds the {MAX_FRAME_BYTES} byte limit")]
    TooLarge(usize),
    #[error("stream ended inside a frame")]
    Truncated,
    #[error("frame body is not valid UTF-8")]
    NotUtf8,
    #[error("frame body is not a valid message: {0}")]
    BadMessage(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Op {
    Exec,
    Echo,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WireImage {
    pub name: String,
    pub b64: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestFrame {
    pub id: String,
    pub op: Op,
    #[serde(default)]
    pub code: String,
    #[serde(default)]
    pub images: Vec<WireImage>,
    #[serde(default)]
    pub timeout_ms: u64,
    #[serde(default)]
    pub mem_mb: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub payload: Option<serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseFrame {
    pub id: String,
    pub status: ExecStatus,
    #[serde(default)]
    pub images: Vec<String>,
    #[serde(default)]
    pub stdout: String,
    #[serde(default)]
    pub trace: String,
    #[serde(default)]
    pub duration_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub payload: Option<serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Hello {
    pub op: String,
    pub protocol_version: u32,
}

impl Hello {
    pub fn current() -> Self {
        Self {
            op: "hello".into(),
            protocol_version: PROTOCOL_VERSION,
        }
    }
}

pub fn write_frame<W: Write>(out: &mut W, body: &[u8]) -> Result<(), FrameError> {
    if body.len() > MAX_FRAME_BYTES {
        return Err(FrameError::TooLarge(body.len()));
    }
    out.write_all(&(body.len() as u32).to_be_bytes())?;
    out.write_all(body)?;
    out.flush()?;
    Ok(())
}

pub fn write_message<W: Write, T: Serialize>(out: &mut W, msg: &T) -> Result<(), FrameError> {
    let body = serde_json::to_vec(msg).map_err(|e| FrameError::BadMessage(e.to_string()))?;
    write_frame(out, &body)
}

/// Reads one frame; `Ok(None)` on a clean end of stream before any header byte.
pub fn read_frame<R: Read>(input: &mut R) -> Result<Option<Vec<u8>>, FrameError> {
    let mut header = [0u8; 4];
    let mut filled = 0;
    while filled < 4 {
        match input.read(&mut header[filled..]) {
            Ok(0) if filled == 0 => return Ok(None),
            Ok(0) => return Err(FrameError::Truncated),
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let len = u32::from_be_bytes(header) as usize;
    if len > MAX_FRAME_BYTES {
        return Err(FrameError::TooLarge(len));
    }
    let mut body = vec![0u8; len];
    input.read_exact(&mut body).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => FrameError::Truncated,
        _ => FrameError::Io(e),
    })?;
    Ok(Some(body))
}

fn decode<T: serde::de::DeserializeOwned>(body: &[u8]) -> Result<T, FrameError> {
    let text = std::str::from_utf8(body).map_err(|_| FrameError::NotUtf8)?;
    serde_json::from_str(text).map_err(|e| FrameError::BadMessage(e.to_string()))
}

pub fn decode_request(body: &[u8]) -> Result<RequestFrame, FrameError> {
    decode(body)
}

pub fn decode_response(body: &[u8]) -> Result<ResponseFrame, FrameError> {
    decode(body)
}

pub fn decode_hello(body: &[u8]) -> Result<Hello, FrameError> {
    let hello: Hello = decode(body)?;
    if hello.op != "hello" {
        return Err(FrameError::BadMessage(format!(
            "expected a hello frame, got op {:?}",
            hello.op
        )));
    }
    Ok(hello)
}

/// Splits a byte buffer into frames, stopping at the first malformed one.
pub fn split_frames(mut data: &[u8]) -> (Vec<Vec<u8>>, Option<FrameError>) {
    let mut frames = Vec::new();
    loop {
        match read_frame(&mut data) {
            Ok(Some(f)) => frames.push(f),
            Ok(None) => return (frames, None),
            Err(e) => return (frames, Some(e)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_layout_is_length_prefixed() {
        let mut buf = Vec::new();
        write_frame(&mut buf, b"{\"a\":1}").unwrap();
        assert_eq!(&buf[..4], &[0, 0, 0, 7]);
        assert_eq!(&buf[4..], b"{\"a\":1}");
        let mut cursor = buf.as_slice();
        assert_eq!(read_frame(&mut cursor).unwrap().unwrap(), b"{\"a\":1}");
        assert!(read_frame(&mut cursor).unwrap().is_none());
    }

    #[test]
    fn truncated_and_oversized_frames() {
        let mut cursor: &[u8] = &[0, 0, 0, 9, b'{'];
        assert!(matches!(read_frame(&mut cursor), Err(FrameError::Truncated)));
        let mut cursor: &[u8] = &[0, 0];
        assert!(matches!(read_frame(&mut cursor), Err(FrameError::Truncated)));
        let mut cursor: &[u8] = &[0xff, 0xff, 0xff, 0xff];
        assert!(matches!(read_frame(&mut cursor), Err(FrameError::TooLarge(_))));
    }

    #[test]
    fn request_wire_shape() {
        let req = RequestFrame {
            id: "r1".into(),
            op: Op::Exec,
            code: "pass".into(),
            images: vec![WireImage {
                name: "img0".into(),
                b64: "AA==".into(),
            }],
            timeout_ms: 1000,
            mem_mb: 512,
            payload: None,
        };
        let json: serde_json::Value = serde_json::to_value(&req).unwrap();
        assert_eq!(json["op"], "exec");
        assert_eq!(json["images"][0]["name"], "img0");
        assert_eq!(json["mem_mb"], 512);
        let hello = serde_json::to_value(Hello::current()).unwrap();
        assert_eq!(hello, serde_json::json!({"op": "hello", "protocol_version": 1}));
    }

    #[test]
    fn decode_rejects_garbage() {
        assert!(decode_request(b"\xff\xfe").is_err());
        assert!(decode_request(b"{\"id\":1}").is_err());
        assert!(decode_hello(b"{\"op\":\"exec\",\"protocol_version\":1}").is_err());
    }
}
