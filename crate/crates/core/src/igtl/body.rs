use nalgebra::{Matrix3, Vector3};

use super::{get_fixed_str, put_fixed_str, ProtocolError};

pub const STATUS_OK: u16 = 1;

const TRANSFORM_SIZE: usize = 48;
const POINT_ELEMENT_SIZE: usize = 136;
const STATUS_FIXED_SIZE: usize = 30;

/// Rigid pose on the wire: twelve big-endian `f32`, rotation column by column
/// then translation in millimeters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransformBody {
    pub rotation: Matrix3<f32>,
    pub translation: Vector3<f32>,
}

impl TransformBody {
    pub fn new(rotation: Matrix3<f32>, translation: Vector3<f32>) -> Self {
        TransformBody {
            rotation,
            translation,
        }
    }

    pub fn is_rigid(&self) -> bool {
        let det = self.rotation.determinant();
        det.is_finite() && (det - 1.0).abs() < 1e-5 && self.translation.iter().all(|v| v.is_finite())
    }

    pub(crate) fn encode(&self) -> Result<Vec<u8>, ProtocolError> {
        let det = self.rotation.determinant();
        if !self.is_rigid() {
            return Err(ProtocolError::InvalidRotation { det });
        }
        let mut out = Vec::with_capacity(TRANSFORM_SIZE);
        // nalgebra storage is column-major, which is the wire order.
        for v in self.rotation.iter().chain(self.translation.iter()) {
            out.extend_from_slice(&v.to_be_bytes());
        }
        Ok(out)
    }

    pub(crate) fn decode(bytes: &[u8]) -> Result<Self, ProtocolError> {
        if bytes.len() != TRANSFORM_SIZE {
            return Err(ProtocolError::MalformedBody {
                type_name: "TRANSFORM",
                reason: format!("expected {TRANSFORM_SIZE} bytes, got {}", bytes.len()),
            });
        }
        let mut vals = [0f32; 12];
        for (v, chunk) in vals.iter_mut().zip(bytes.chunks_exact(4)) {
            *v = f32::from_be_bytes(chunk.try_into().unwrap());
        }
        Ok(TransformBody {
            rotation: Matrix3::from_column_slice(&vals[..9]),
            translation: Vector3::new(vals[9], vals[10], vals[11]),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointElement {
    pub name: String,
    pub group: String,
    pub rgba: [u8; 4],
    pub position: Vector3<f32>,
    pub diameter: f32,
    pub owner: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointBody {
    pub elements: Vec<PointElement>,
}

impl PointBody {
    pub(crate) fn encode(&self) -> Result<Vec<u8>, ProtocolError> {
        let mut out = Vec::with_capacity(self.elements.len() * POINT_ELEMENT_SIZE);
        for el in &self.elements {
            put_fixed_str(&mut out, &el.name, 64, "point name")?;
            put_fixed_str(&mut out, &el.group, 32, "point group")?;
            out.extend_from_slice(&el.rgba);
            for v in el.position.iter() {
                out.extend_from_slice(&v.to_be_bytes());
            }
            out.extend_from_slice(&el.diameter.to_be_bytes());
            put_fixed_str(&mut out, &el.owner, 20, "point owner")?;
        }
        Ok(out)
    }

    pub(crate) fn decode(bytes: &[u8]) -> Result<Self, ProtocolError> {
        if !bytes.len().is_multiple_of(POINT_ELEMENT_SIZE) {
            return Err(ProtocolError::MalformedBody {
                type_name: "POINT",
                reason: format!("{} bytes is not a multiple of {POINT_ELEMENT_SIZE}", bytes.len()),
            });
        }
        let f32_at = |b: &[u8], at: usize| f32::from_be_bytes(b[at..at + 4].try_into().unwrap());
        let elements = bytes
            .chunks_exact(POINT_ELEMENT_SIZE)
            .map(|b| {
                Ok(PointElement {
                    name: get_fixed_str(&b[0..64], "point name")?,
                    group: get_fixed_str(&b[64..96], "point group")?,
                    rgba: [b[96], b[97], b[98], b[99]],
                    position: Vector3::new(f32_at(b, 100), f32_at(b, 104), f32_at(b, 108)),
                    diameter: f32_at(b, 112),
                    owner: get_fixed_str(&b[116..136], "point owner")?,
                })
            })
            .collect::<Result<_, ProtocolError>>()?;
        Ok(PointBody { elements })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StatusBody {
    pub code: u16,
    pub subcode: i64,
    pub error_name: String,
    pub message: String,
}

impl StatusBody {
    pub fn ok(message: impl Into<String>) -> Self {
        StatusBody {
            code: STATUS_OK,
            subcode: 0,
            error_name: String::new(),
            message: message.into(),
        }
    }

    pub fn is_ok(&self) -> bool {
        self.code == STATUS_OK
    }

    pub(crate) fn encode(&self) -> Result<Vec<u8>, ProtocolError> {
        if !self.message.is_ascii() {
            return Err(ProtocolError::NonAscii {
                field: "status message",
            });
        }
        if self.message.contains('\0') {
            return Err(ProtocolError::MalformedBody {
                type_name: "STATUS",
                reason: "message contains NUL".into(),
            });
        }
        let mut out = Vec::with_capacity(STATUS_FIXED_SIZE + self.message.len() + 1);
        out.extend_from_slice(&self.code.to_be_bytes());
        out.extend_from_slice(&self.subcode.to_be_bytes());
        put_fixed_str(&mut out, &self.error_name, 20, "status error name")?;
        out.extend_from_slice(self.message.as_bytes());
        out.push(0);
        Ok(out)
    }

    pub(crate) fn decode(bytes: &[u8]) -> Result<Self, ProtocolError> {
        if bytes.len() < STATUS_FIXED_SIZE {
            return Err(ProtocolError::MalformedBody {
                type_name: "STATUS",
                reason: format!("{} bytes, need at least {STATUS_FIXED_SIZE}", bytes.len()),
            });
        }
        Ok(StatusBody {
            code: u16::from_be_bytes([bytes[0], bytes[1]]),
            subcode: i64::from_be_bytes(bytes[2..10].try_into().unwrap()),
            error_name: get_fixed_str(&bytes[10..30], "status error name")?,
            message: get_fixed_str(&bytes[30..], "status message")?,
        })
    }
}
