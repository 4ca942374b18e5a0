//! Wire format of the operator API, version 1.
//!
//! Every message is one JSON object in one WebSocket text frame and carries
//! `"v": 1`. Requests may carry an `id`, which the matching reply echoes.
//! See `docs/api.md` for the full schema.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::bridge::Snapshot;
use crate::simkernel::Micros;

pub const PROTOCOL_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Request {
    Snapshot,
    SetSwitch { index: u8, on: bool },
    Subscribe,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Incoming {
    pub id: Option<u64>,
    pub request: Request,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    BadRequest,
    UnsupportedVersion,
    Rejected,
    Unavailable,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Response {
    Hello { server: String, versions: Vec<u32> },
    Snapshot { snapshot: Snapshot },
    Ack { applied_at_us: Micros },
    Subscribed,
    Event { seq: u64, snapshot: Snapshot },
    Error { code: ErrorCode, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Outgoing {
    pub v: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub id: Option<u64>,
    #[serde(flatten)]
    pub body: Response,
}

impl Outgoing {
    pub fn new(id: Option<u64>, body: Response) -> Self {
        Outgoing {
            v: PROTOCOL_VERSION,
            id,
            body,
        }
    }

    pub fn error(id: Option<u64>, code: ErrorCode, message: impl Into<String>) -> Self {
        Outgoing::new(
            id,
            Response::Error {
                code,
                message: message.into(),
            },
        )
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("protocol messages always serialize")
    }
}

/// Decodes one request. A failure comes back as the error reply to send.
#[allow(clippy::result_large_err)]
pub fn decode_request(text: &str) -> Result<Incoming, Outgoing> {
    let mut value: Value = serde_json::from_str(text)
        .map_err(|e| Outgoing::error(None, ErrorCode::BadRequest, e.to_string()))?;
    let Some(object) = value.as_object_mut() else {
        return Err(Outgoing::error(
            None,
            ErrorCode::BadRequest,
            "expected a JSON object",
        ));
    };
    let id = object.remove("id").and_then(|id| id.as_u64());
    match object.remove("v").map(|v| v.as_u64()) {
        Some(Some(v)) if v == u64::from(PROTOCOL_VERSION) => {}
        Some(Some(v)) => {
            return Err(Outgoing::error(
                id,
                ErrorCode::UnsupportedVersion,
                format!("version {v} is not supported; this server speaks {PROTOCOL_VERSION}"),
            ))
        }
        _ => {
            return Err(Outgoing::error(
                id,
                ErrorCode::BadRequest,
                "missing integer field \"v\"",
            ))
        }
    }
    let request = serde_json::from_value(value)
        .map_err(|e| Outgoing::error(id, ErrorCode::BadRequest, e.to_string()))?;
    Ok(Incoming { id, request })
}
