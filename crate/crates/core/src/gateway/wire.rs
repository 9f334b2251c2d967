//! Framed request/response documents for remote backends.
//!
//! Each frame is a 4-byte big-endian length followed by that many bytes of
//! UTF-8 JSON. A request carries `{version, role, operation, payload}`, the
//! reply `{status, payload}` where `status` is `"ok"` or `"error"` (payload
//! then holds a message string).

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{GatewayError, Role};

pub const WIRE_VERSION: u32 = 1;
pub const MAX_FRAME: usize = 64 << 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireRequest {
    pub version: u32,
    pub role: Role,
    pub operation: String,
    pub payload: Value,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WireStatus {
    Ok,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireResponse {
    pub status: WireStatus,
    pub payload: Value,
}

impl WireResponse {
    pub fn ok(payload: Value) -> Self {
        Self { status: WireStatus::Ok, payload }
    }

    pub fn error(message: impl Into<String>) -> Self {
        Self { status: WireStatus::Error, payload: Value::String(message.into()) }
    }
}

pub fn write_frame<W: Write, T: Serialize>(w: &mut W, doc: &T) -> Result<(), GatewayError> {
    let body = serde_json::to_vec(doc).map_err(|e| GatewayError::Protocol(e.to_string()))?;
    if body.len() > MAX_FRAME {
        return Err(GatewayError::Protocol(format!("frame of {} bytes exceeds limit", body.len())));
    }
    let len = u32::try_from(body.len()).expect("bounded by MAX_FRAME");
    w.write_all(&len.to_be_bytes()).map_err(io_err)?;
    w.write_all(&body).map_err(io_err)?;
    w.flush().map_err(io_err)
}

pub fn read_frame<R: Read, T: for<'de> Deserialize<'de>>(r: &mut R) -> Result<T, GatewayError> {
    let mut len = [0u8; 4];
    r.read_exact(&mut len).map_err(io_err)?;
    let len = u32::from_be_bytes(len) as usize;
    if len > MAX_FRAME {
        return Err(GatewayError::Protocol(format!("frame of {len} bytes exceeds limit")));
    }
    let mut body = vec![0u8; len];
    r.read_exact(&mut body).map_err(io_err)?;
    let text = std::str::from_utf8(&body).map_err(|e| GatewayError::Protocol(e.to_string()))?;
    serde_json::from_str(text).map_err(|e| GatewayError::Protocol(e.to_string()))
}

fn io_err(e: std::io::Error) -> GatewayError {
    GatewayError::Protocol(e.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_round_trip() {
        let req = WireRequest {
            version: WIRE_VERSION,
            role: Role::Vqa,
            operation: "vqa_answer".into(),
            payload: serde_json::json!({"question": "is it tuna?"}),
        };
        let mut buf = Vec::new();
        write_frame(&mut buf, &req).unwrap();
        assert_eq!(&buf[..4], &((buf.len() - 4) as u32).to_be_bytes());
        let back: WireRequest = read_frame(&mut buf.as_slice()).unwrap();
        assert_eq!(back, req);
    }

    #[test]
    fn truncated_frame_is_protocol_error() {
        let mut buf = Vec::new();
        write_frame(&mut buf, &WireResponse::ok(Value::from("yes"))).unwrap();
        buf.truncate(buf.len() - 1);
        let r: Result<WireResponse, _> = read_frame(&mut buf.as_slice());
        assert!(matches!(r, Err(GatewayError::Protocol(_))));
    }
}
