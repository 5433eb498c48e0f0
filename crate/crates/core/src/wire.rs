//! Length-prefixed JSON framing and the message schema spoken between devices,
//! the store, and network control.
//!
//! ```text
//! +---------------------+---------------------------+
//! | length (u32, BE)    | canonical JSON (length B) |
//! +---------------------+---------------------------+
//! ```
//!
//! A message is `{"kind": ..., "correlation_id": ..., "body": {...}}`. Responses
//! echo the correlation id of their request; `Event` frames are unsolicited and
//! carry correlation id 0.

use std::fmt;

use base64::Engine;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::domain::{canonical_json, Entitlement, ObjectiveStats, TransferableObject};

pub const PROTOCOL_VERSION: u32 = 1;
pub const MAX_FRAME_LEN: usize = 16 * 1024 * 1024;
pub const LENGTH_PREFIX: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum MessageKind {
    Hello,
    ToRequest,
    ToResponse,
    OpenSession,
    SessionOpened,
    Data,
    CloseSession,
    SessionClosed,
    Subscribe,
    Event,
    Sample,
    Error,
    /// Generic named RPC for registry administration and path allocation.
    Call,
    Reply,
}

impl MessageKind {
    pub const ALL: [MessageKind; 14] = [
        MessageKind::Hello,
        MessageKind::ToRequest,
        MessageKind::ToResponse,
        MessageKind::OpenSession,
        MessageKind::SessionOpened,
        MessageKind::Data,
        MessageKind::CloseSession,
        MessageKind::SessionClosed,
        MessageKind::Subscribe,
        MessageKind::Event,
        MessageKind::Sample,
        MessageKind::Error,
        MessageKind::Call,
        MessageKind::Reply,
    ];

    /// The success response kind for a request kind. `Error` may stand in for
    /// any response; `Event`, `Error` and the response kinds themselves have none.
    pub fn response_kind(self) -> Option<MessageKind> {
        use MessageKind::*;
        match self {
            Hello => Some(Hello),
            ToRequest => Some(ToResponse),
            OpenSession => Some(SessionOpened),
            Data => Some(Data),
            CloseSession => Some(SessionClosed),
            Subscribe => Some(Subscribe),
            Sample => Some(Sample),
            Call => Some(Reply),
            ToResponse | SessionOpened | SessionClosed | Event | Error | Reply => None,
        }
    }
}

impl fmt::Display for MessageKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub kind: MessageKind,
    pub correlation_id: u64,
    pub body: Value,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum WireError {
    #[error("frame of {0} bytes exceeds the {MAX_FRAME_LEN} byte bound")]
    FrameTooLarge(usize),
    #[error("protocol error: {0}")]
    Protocol(String),
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DecodeError {
    #[error("incomplete frame")]
    NeedMoreBytes,
    #[error("protocol error: {0}")]
    Protocol(String),
}

impl Message {
    pub fn new<B: Serialize>(kind: MessageKind, correlation_id: u64, body: &B) -> Self {
        let body = serde_json::to_value(body).expect("message bodies serialize to JSON");
        Self { kind, correlation_id, body }
    }

    pub fn empty(kind: MessageKind, correlation_id: u64) -> Self {
        Self { kind, correlation_id, body: Value::Object(Default::default()) }
    }

    pub fn error(correlation_id: u64, code: impl Into<String>, message: impl Into<String>) -> Self {
        Self::new(MessageKind::Error, correlation_id, &ErrorBody { code: code.into(), message: message.into() })
    }

    /// Builds the success response to this request.
    pub fn reply<B: Serialize>(&self, body: &B) -> Self {
        let kind = self.kind.response_kind().unwrap_or(MessageKind::Error);
        Self::new(kind, self.correlation_id, body)
    }

    pub fn body_as<T: DeserializeOwned>(&self) -> Result<T, WireError> {
        serde_json::from_value(self.body.clone())
            .map_err(|e| WireError::Protocol(format!("bad {} body: {e}", self.kind)))
    }

    /// Interprets this message as the response to a `request_kind` request.
    /// `Error` responses become [`RemoteError`].
    pub fn expect_response<T: DeserializeOwned>(&self, request_kind: MessageKind) -> Result<T, RemoteError> {
        if self.kind == MessageKind::Error {
            let body: ErrorBody = self
                .body_as()
                .map_err(|e| RemoteError { code: "ProtocolError".into(), message: e.to_string() })?;
            return Err(RemoteError { code: body.code, message: body.message });
        }
        if Some(self.kind) != request_kind.response_kind() {
            return Err(RemoteError {
                code: "ProtocolError".into(),
                message: format!("unexpected {} in response to {}", self.kind, request_kind),
            });
        }
        self.body_as().map_err(|e| RemoteError { code: "ProtocolError".into(), message: e.to_string() })
    }
}

/// An `Error` response decoded on the requesting side.
#[derive(Debug, Clone, Error, PartialEq, Eq, Serialize, Deserialize)]
#[error("{code}: {message}")]
pub struct RemoteError {
    pub code: String,
    pub message: String,
}

pub fn encode_frame(msg: &Message) -> Result<Vec<u8>, WireError> {
    let payload = canonical_json(msg).map_err(|e| WireError::Protocol(e.to_string()))?;
    frame_payload(payload.as_bytes())
}

/// Wraps raw payload bytes in a length prefix.
pub fn frame_payload(payload: &[u8]) -> Result<Vec<u8>, WireError> {
    if payload.len() > MAX_FRAME_LEN {
        return Err(WireError::FrameTooLarge(payload.len()));
    }
    let mut out = Vec::with_capacity(LENGTH_PREFIX + payload.len());
    out.extend_from_slice(&(payload.len() as u32).to_be_bytes());
    out.extend_from_slice(payload);
    Ok(out)
}

/// Decodes one frame from the front of `buf`, returning the message and the
/// unconsumed remainder.
pub fn decode_frame(buf: &[u8]) -> Result<(Message, &[u8]), DecodeError> {
    if buf.len() < LENGTH_PREFIX {
        return Err(DecodeError::NeedMoreBytes);
    }
    let len = u32::from_be_bytes([buf[0], buf[1], buf[2], buf[3]]) as usize;
    if len > MAX_FRAME_LEN {
        return Err(DecodeError::Protocol(format!("declared length {len} exceeds bound")));
    }
    let end = LENGTH_PREFIX + len;
    if buf.len() < end {
        return Err(DecodeError::NeedMoreBytes);
    }
    let msg = parse_payload(&buf[LENGTH_PREFIX..end])?;
    Ok((msg, &buf[end..]))
}

fn parse_payload(payload: &[u8]) -> Result<Message, DecodeError> {
    let msg: Message =
        serde_json::from_slice(payload).map_err(|e| DecodeError::Protocol(format!("malformed payload: {e}")))?;
    if !msg.body.is_object() {
        return Err(DecodeError::Protocol("body is not an object".into()));
    }
    Ok(msg)
}

/// Incremental decoder for one byte stream.
#[derive(Debug, Default)]
pub struct FrameDecoder {
    buf: Vec<u8>,
}

impl FrameDecoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, bytes: &[u8]) {
        self.buf.extend_from_slice(bytes);
    }

    /// Next complete message, `Ok(None)` if more bytes are needed.
    pub fn next_message(&mut self) -> Result<Option<Message>, DecodeError> {
        match decode_frame(&self.buf) {
            Ok((msg, rest)) => {
                let consumed = self.buf.len() - rest.len();
                self.buf.drain(..consumed);
                Ok(Some(msg))
            }
            Err(DecodeError::NeedMoreBytes) => Ok(None),
            Err(e) => Err(e),
        }
    }

    pub fn buffered(&self) -> usize {
        self.buf.len()
    }
}

pub fn read_message<R: std::io::Read>(reader: &mut R) -> std::io::Result<Option<Message>> {
    let mut prefix = [0u8; LENGTH_PREFIX];
    match reader.read_exact(&mut prefix) {
        Ok(()) => {}
        Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e),
    }
    let len = u32::from_be_bytes(prefix) as usize;
    if len > MAX_FRAME_LEN {
        return Err(std::io::Error::new(std::io::ErrorKind::InvalidData, "declared length exceeds bound"));
    }
    let mut payload = vec![0u8; len];
    reader.read_exact(&mut payload)?;
    parse_payload(&payload)
        .map(Some)
        .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e.to_string()))
}

pub fn write_message<W: std::io::Write>(writer: &mut W, msg: &Message) -> std::io::Result<()> {
    let frame = encode_frame(msg).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidInput, e.to_string()))?;
    writer.write_all(&frame)?;
    writer.flush()
}

/// Payload bytes travel base64-encoded inside JSON bodies.
pub mod b64 {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn encode(bytes: &[u8]) -> String {
        base64::engine::general_purpose::STANDARD.encode(bytes)
    }

    pub fn decode(s: &str) -> Result<Vec<u8>, base64::DecodeError> {
        base64::engine::general_purpose::STANDARD.decode(s)
    }

    pub fn serialize<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let s = String::deserialize(d)?;
        decode(&s).map_err(serde::de::Error::custom)
    }

    pub mod list {
        use super::*;

        pub fn serialize<S: Serializer>(items: &[Vec<u8>], s: S) -> Result<S::Ok, S::Error> {
            s.collect_seq(items.iter().map(|b| encode(b)))
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Vec<u8>>, D::Error> {
            let items = Vec::<String>::deserialize(d)?;
            items.iter().map(|s| decode(s).map_err(serde::de::Error::custom)).collect()
        }
    }
}

// ---- message bodies ----

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HelloBody {
    pub protocol_version: u32,
    #[serde(default)]
    pub role: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    #[serde(default)]
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToRequestBody {
    pub entitlement: Entitlement,
    pub module_key: String,
    #[serde(default)]
    pub cached_version: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum ToResponse {
    UpToDate { version: u32 },
    NewTo { to: TransferableObject },
    /// The module ships no device behavior; the default redirect applies.
    DefaultDevice { version: u32 },
}

impl ToResponse {
    pub fn version(&self) -> u32 {
        match self {
            ToResponse::UpToDate { version } | ToResponse::DefaultDevice { version } => *version,
            ToResponse::NewTo { to } => to.version,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Peer {
    pub protocol: String,
    pub ip: String,
    pub port: u16,
}

impl Peer {
    pub fn new(protocol: impl Into<String>, ip: impl Into<String>, port: u16) -> Self {
        Self { protocol: protocol.into(), ip: ip.into(), port }
    }
}

impl fmt::Display for Peer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}://{}:{}", self.protocol, self.ip, self.port)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpenSessionBody {
    pub entitlement: Entitlement,
    pub module_key: String,
    pub module_id: String,
    /// Address of the requesting device.
    pub src_ip: String,
    pub dst: Peer,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionOpenedBody {
    pub sso_id: u64,
    pub reactivated: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum DataOp {
    Send {
        #[serde(with = "b64")]
        payload: Vec<u8>,
    },
    /// Behavior-specific control verb (e.g. `undo`, `redo`).
    Control { verb: String },
    Poll,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataBody {
    pub sso_id: u64,
    #[serde(flatten)]
    pub op: DataOp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Notification {
    ObjectiveViolation { value: Option<f64>, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataReplyBody {
    pub sso_id: u64,
    #[serde(with = "b64::list", default)]
    pub inbound: Vec<Vec<u8>>,
    #[serde(default)]
    pub notifications: Vec<Notification>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CloseSessionBody {
    pub sso_id: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CloseOutcome {
    Pooled,
    Destroyed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionClosedBody {
    pub sso_id: u64,
    pub outcome: CloseOutcome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleBody {
    pub sso_id: u64,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleReplyBody {
    pub sso_id: u64,
    pub stats: ObjectiveStats,
    pub ewma: f64,
    pub violation: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubscribeBody {
    pub subscriber: String,
    pub event_types: Vec<crate::netsim::EventType>,
    #[serde(default)]
    pub links: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubscribedBody {
    pub subscription_id: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventBody {
    pub subscription_id: u64,
    pub event: crate::netsim::NetworkEvent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CallBody {
    pub method: String,
    #[serde(default)]
    pub args: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplyBody {
    #[serde(default)]
    pub result: Value,
}
