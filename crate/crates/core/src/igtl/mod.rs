//! OpenIGTLink message framing.
//!
//! Every message is a fixed 58-byte big-endian header followed by a body:
//!
//! ```text
//! [version:2][type_name:12][device_name:20][timestamp:8][body_size:8][body_crc:8][body:N]
//! ```
//!
//! Only TRANSFORM, POINT and STATUS bodies are modeled. Anything else is
//! carried through as [`Body::Opaque`]. Version 2 headers are accepted on
//! decode (the extended header and metadata are stripped), but encoding
//! always produces version 1.

mod body;
mod crc;
mod framing;

pub use body::{PointBody, PointElement, StatusBody, TransformBody, STATUS_OK};
pub use crc::{crc64, crc64_update};
pub use framing::{frame_stream, FrameDecoder, MessageReader, StreamError};

use thiserror::Error;

pub const HEADER_SIZE: usize = 58;
pub const DEFAULT_PORT: u16 = 18944;
pub const TYPE_NAME_LEN: usize = 12;
pub const DEVICE_NAME_LEN: usize = 20;

/// Upper bound on a single body; anything larger is treated as a corrupt header.
pub const MAX_BODY_SIZE: u64 = 256 * 1024 * 1024;

const EXT_HEADER_MIN: usize = 12;

#[derive(Debug, Error, PartialEq)]
pub enum ProtocolError {
    #[error("truncated stream: need {needed} bytes, have {available}")]
    Truncated { needed: usize, available: usize },
    #[error("stream ended with {buffered} bytes of an incomplete message")]
    UnexpectedEof { buffered: usize },
    #[error("body CRC mismatch: header {expected:#018x}, computed {actual:#018x}")]
    CrcMismatch { expected: u64, actual: u64 },
    #[error("body size disagreement: header says {declared}, got {actual}")]
    BodySizeMismatch { declared: u64, actual: u64 },
    #[error("unsupported header version {0}")]
    UnsupportedVersion(u16),
    #[error("{field} is {len} bytes, limit is {max}")]
    NameTooLong {
        field: &'static str,
        len: usize,
        max: usize,
    },
    #[error("{field} must be ASCII")]
    NonAscii { field: &'static str },
    #[error("unsupported message type {0:?}")]
    UnsupportedType(String),
    #[error("malformed {type_name} body: {reason}")]
    MalformedBody {
        type_name: &'static str,
        reason: String,
    },
    #[error("rotation is not proper orthonormal (det = {det})")]
    InvalidRotation { det: f32 },
}

/// 64-bit fixed point time: whole seconds since the Unix epoch in the upper
/// 32 bits, fraction of a second in the lower 32.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Timestamp(pub u64);

impl Timestamp {
    pub fn from_parts(seconds: u32, fraction: u32) -> Self {
        Timestamp(((seconds as u64) << 32) | fraction as u64)
    }

    pub fn from_secs_f64(secs: f64) -> Self {
        let secs = secs.max(0.0);
        let whole = secs.floor();
        let frac = ((secs - whole) * 4_294_967_296.0).floor().min(u32::MAX as f64);
        Self::from_parts(whole.min(u32::MAX as f64) as u32, frac as u32)
    }

    pub fn now() -> Self {
        let now = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .unwrap_or_default();
        Self::from_secs_f64(now.as_secs_f64())
    }

    pub fn seconds(self) -> u32 {
        (self.0 >> 32) as u32
    }

    pub fn fraction(self) -> u32 {
        self.0 as u32
    }

    pub fn as_secs_f64(self) -> f64 {
        self.seconds() as f64 + self.fraction() as f64 / 4_294_967_296.0
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MessageHeader {
    pub version: u16,
    pub type_name: String,
    pub device_name: String,
    pub timestamp: Timestamp,
    pub body_size: u64,
    pub body_crc: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Body {
    Transform(TransformBody),
    Point(PointBody),
    Status(StatusBody),
    /// A message type this crate does not model, kept as raw body bytes.
    Opaque { type_name: String, data: Vec<u8> },
}

impl Body {
    pub fn type_name(&self) -> &str {
        match self {
            Body::Transform(_) => "TRANSFORM",
            Body::Point(_) => "POINT",
            Body::Status(_) => "STATUS",
            Body::Opaque { type_name, .. } => type_name,
        }
    }

    fn encode(&self) -> Result<Vec<u8>, ProtocolError> {
        match self {
            Body::Transform(t) => t.encode(),
            Body::Point(p) => p.encode(),
            Body::Status(s) => s.encode(),
            Body::Opaque { type_name, data } => {
                if type_name.is_empty() || is_modeled_type(type_name) {
                    return Err(ProtocolError::UnsupportedType(type_name.clone()));
                }
                Ok(data.clone())
            }
        }
    }

    fn decode(type_name: &str, content: &[u8]) -> Result<Body, ProtocolError> {
        Ok(match type_name {
            "TRANSFORM" => Body::Transform(TransformBody::decode(content)?),
            "POINT" => Body::Point(PointBody::decode(content)?),
            "STATUS" => Body::Status(StatusBody::decode(content)?),
            other => Body::Opaque {
                type_name: other.to_string(),
                data: content.to_vec(),
            },
        })
    }
}

fn is_modeled_type(name: &str) -> bool {
    matches!(name, "TRANSFORM" | "POINT" | "STATUS")
}

/// A message as seen by application code: the header fields that are not
/// derived from the body, plus the typed body.
#[derive(Debug, Clone, PartialEq)]
pub struct Message {
    pub device_name: String,
    pub timestamp: Timestamp,
    pub body: Body,
}

impl Message {
    pub fn new(device_name: impl Into<String>, timestamp: Timestamp, body: Body) -> Self {
        Message {
            device_name: device_name.into(),
            timestamp,
            body,
        }
    }

    pub fn encode(&self) -> Result<Vec<u8>, ProtocolError> {
        encode_message(&self.device_name, self.timestamp, &self.body)
    }
}

/// Result of decoding one complete message.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoded {
    pub header: MessageHeader,
    pub body: Body,
}

impl Decoded {
    pub fn into_message(self) -> Message {
        let timestamp = self.timestamp();
        Message {
            device_name: self.header.device_name,
            timestamp,
            body: self.body,
        }
    }

    pub fn timestamp(&self) -> Timestamp {
        self.header.timestamp
    }
}

pub(crate) fn put_fixed_str(
    out: &mut Vec<u8>,
    value: &str,
    width: usize,
    field: &'static str,
) -> Result<(), ProtocolError> {
    if !value.is_ascii() {
        return Err(ProtocolError::NonAscii { field });
    }
    if value.len() > width {
        return Err(ProtocolError::NameTooLong {
            field,
            len: value.len(),
            max: width,
        });
    }
    out.extend_from_slice(value.as_bytes());
    out.resize(out.len() + width - value.len(), 0);
    Ok(())
}

/// Reads a NUL-padded ASCII field. Bytes after the first NUL are ignored.
pub(crate) fn get_fixed_str(bytes: &[u8], field: &'static str) -> Result<String, ProtocolError> {
    let end = bytes.iter().position(|&b| b == 0).unwrap_or(bytes.len());
    let s = &bytes[..end];
    if !s.is_ascii() {
        return Err(ProtocolError::NonAscii { field });
    }
    Ok(String::from_utf8_lossy(s).into_owned())
}

/// Encodes a version 1 message. `body_size` and `body_crc` are derived from
/// the encoded body.
pub fn encode_message(
    device_name: &str,
    timestamp: Timestamp,
    body: &Body,
) -> Result<Vec<u8>, ProtocolError> {
    let type_name = body.type_name();
    let payload = body.encode()?;
    let mut out = Vec::with_capacity(HEADER_SIZE + payload.len());
    out.extend_from_slice(&1u16.to_be_bytes());
    put_fixed_str(&mut out, type_name, TYPE_NAME_LEN, "type_name")?;
    put_fixed_str(&mut out, device_name, DEVICE_NAME_LEN, "device_name")?;
    out.extend_from_slice(&timestamp.0.to_be_bytes());
    out.extend_from_slice(&(payload.len() as u64).to_be_bytes());
    out.extend_from_slice(&crc64(&payload).to_be_bytes());
    debug_assert_eq!(out.len(), HEADER_SIZE);
    out.extend_from_slice(&payload);
    Ok(out)
}

/// Parses the fixed header. Does not look at the body.
pub fn decode_header(bytes: &[u8]) -> Result<MessageHeader, ProtocolError> {
    if bytes.len() < HEADER_SIZE {
        return Err(ProtocolError::Truncated {
            needed: HEADER_SIZE,
            available: bytes.len(),
        });
    }
    let be_u64 = |at: usize| u64::from_be_bytes(bytes[at..at + 8].try_into().unwrap());
    let version = u16::from_be_bytes([bytes[0], bytes[1]]);
    if !(1..=2).contains(&version) {
        return Err(ProtocolError::UnsupportedVersion(version));
    }
    Ok(MessageHeader {
        version,
        type_name: get_fixed_str(&bytes[2..14], "type_name")?,
        device_name: get_fixed_str(&bytes[14..34], "device_name")?,
        timestamp: Timestamp(be_u64(34)),
        body_size: be_u64(42),
        body_crc: be_u64(50),
    })
}

/// Decodes exactly one message occupying all of `bytes`.
pub fn decode_message(bytes: &[u8]) -> Result<Decoded, ProtocolError> {
    let header = decode_header(bytes)?;
    if header.body_size > MAX_BODY_SIZE {
        return Err(ProtocolError::BodySizeMismatch {
            declared: header.body_size,
            actual: (bytes.len() - HEADER_SIZE) as u64,
        });
    }
    let total = HEADER_SIZE + header.body_size as usize;
    if bytes.len() < total {
        return Err(ProtocolError::Truncated {
            needed: total,
            available: bytes.len(),
        });
    }
    if bytes.len() > total {
        return Err(ProtocolError::BodySizeMismatch {
            declared: header.body_size,
            actual: (bytes.len() - HEADER_SIZE) as u64,
        });
    }
    let body = &bytes[HEADER_SIZE..];
    let actual = crc64(body);
    if actual != header.body_crc {
        return Err(ProtocolError::CrcMismatch {
            expected: header.body_crc,
            actual,
        });
    }
    let content = if header.version == 2 {
        strip_extended_header(body)?
    } else {
        body
    };
    let body = Body::decode(&header.type_name, content)?;
    Ok(Decoded { header, body })
}

/// Version 2 bodies are `[ext header][content][metadata header][metadata]`.
fn strip_extended_header(body: &[u8]) -> Result<&[u8], ProtocolError> {
    let bad = |reason: String| ProtocolError::MalformedBody {
        type_name: "extended header",
        reason,
    };
    if body.len() < EXT_HEADER_MIN {
        return Err(bad(format!("body of {} bytes has no extended header", body.len())));
    }
    let ext_size = u16::from_be_bytes([body[0], body[1]]) as usize;
    let meta_header_size = u16::from_be_bytes([body[2], body[3]]) as usize;
    let meta_size = u32::from_be_bytes(body[4..8].try_into().unwrap()) as usize;
    if ext_size < EXT_HEADER_MIN {
        return Err(bad(format!("extended header size {ext_size} below minimum")));
    }
    let trailer = meta_header_size + meta_size;
    if ext_size + trailer > body.len() {
        return Err(bad(format!(
            "extended header {ext_size} + metadata {trailer} exceed body of {}",
            body.len()
        )));
    }
    Ok(&body[ext_size..body.len() - trailer])
}
