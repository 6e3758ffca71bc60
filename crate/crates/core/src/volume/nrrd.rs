//! NRRD reader and writer for 3-D scalar volumes with attached raw data.

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::{Point3, Vector3};

use super::{ScalarType, Volume, VolumeData, VolumeError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Endian {
    Little,
    Big,
}

pub fn load_nrrd(path: impl AsRef<Path>) -> Result<Volume, VolumeError> {
    parse_nrrd(&fs::read(path)?)
}

#[derive(Default)]
struct Header {
    scalar: Option<ScalarType>,
    dimension: Option<usize>,
    sizes: Option<Vec<usize>>,
    endian: Option<Endian>,
    encoding: Option<String>,
    origin: Option<Vector3<f64>>,
    directions: Option<Vec<Vector3<f64>>>,
    spacings: Option<Vec<f64>>,
    byte_skip: i64,
    line_skip: usize,
}

pub fn parse_nrrd(bytes: &[u8]) -> Result<Volume, VolumeError> {
    if !bytes.starts_with(b"NRRD000") {
        return Err(VolumeError::NotNrrd("missing NRRD000x magic".into()));
    }
    let (header_bytes, data) = split_header(bytes)?;
    let text = std::str::from_utf8(header_bytes)
        .map_err(|_| VolumeError::Header("header is not valid UTF-8".into()))?;
    let mut h = Header::default();
    for line in text.lines().skip(1) {
        let line = line.trim_end_matches('\r');
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        // key/value pairs carry metadata only
        if let Some(idx) = line.find(":=") {
            if line[..idx].find(": ").is_none() {
                continue;
            }
        }
        let (field, value) = line
            .split_once(": ")
            .ok_or_else(|| VolumeError::Header(format!("cannot parse line {line:?}")))?;
        apply_field(&mut h, &field.to_ascii_lowercase(), value.trim())?;
    }
    build(h, data)
}

fn split_header(bytes: &[u8]) -> Result<(&[u8], &[u8]), VolumeError> {
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'\n' {
            let rest = &bytes[i + 1..];
            if rest.first() == Some(&b'\n') {
                return Ok((&bytes[..i], &rest[1..]));
            }
            if rest.starts_with(b"\r\n") {
                return Ok((&bytes[..i], &rest[2..]));
            }
        }
        i += 1;
    }
    Err(VolumeError::Header("no blank line ends the header".into()))
}

fn apply_field(h: &mut Header, field: &str, value: &str) -> Result<(), VolumeError> {
    match field {
        "type" => h.scalar = Some(parse_type(value)?),
        "dimension" => h.dimension = Some(parse_num(field, value)?),
        "sizes" => {
            h.sizes = Some(
                value
                    .split_whitespace()
                    .map(|s| parse_num("sizes", s))
                    .collect::<Result<_, _>>()?,
            )
        }
        "endian" => {
            h.endian = Some(match value {
                "little" => Endian::Little,
                "big" => Endian::Big,
                _ => return Err(unsupported("endian", value)),
            })
        }
        "encoding" => h.encoding = Some(value.to_ascii_lowercase()),
        "space origin" => h.origin = Some(parse_vector(value)?),
        "space directions" => {
            h.directions = Some(
                split_vectors(value)?
                    .into_iter()
                    .map(|v| match v {
                        Some(v) => Ok(v),
                        None => Err(unsupported("space directions", value)),
                    })
                    .collect::<Result<_, _>>()?,
            )
        }
        "spacings" => {
            h.spacings = Some(
                value
                    .split_whitespace()
                    .map(|s| parse_num::<f64>("spacings", s))
                    .collect::<Result<_, _>>()?,
            )
        }
        "data file" | "datafile" => return Err(unsupported("data file", value)),
        "byte skip" | "byteskip" => h.byte_skip = parse_num(field, value)?,
        "line skip" | "lineskip" => h.line_skip = parse_num(field, value)?,
        "space" => {
            // Anatomical space names fix the world frame; patient coordinates
            // are taken as given.
        }
        _ => {}
    }
    Ok(())
}

fn parse_type(value: &str) -> Result<ScalarType, VolumeError> {
    Ok(match value {
        "uchar" | "unsigned char" | "uint8" | "uint8_t" => ScalarType::U8,
        "short" | "short int" | "signed short" | "signed short int" | "int16" | "int16_t" => ScalarType::I16,
        "ushort" | "unsigned short" | "unsigned short int" | "uint16" | "uint16_t" => ScalarType::U16,
        "float" => ScalarType::F32,
        _ => return Err(unsupported("type", value)),
    })
}

fn parse_num<T: std::str::FromStr>(field: &str, value: &str) -> Result<T, VolumeError> {
    value
        .trim()
        .parse()
        .map_err(|_| VolumeError::Header(format!("bad {field} value {value:?}")))
}

fn unsupported(field: &'static str, value: &str) -> VolumeError {
    VolumeError::Unsupported {
        field,
        value: value.to_string(),
    }
}

fn parse_vector(value: &str) -> Result<Vector3<f64>, VolumeError> {
    match split_vectors(value)?.as_slice() {
        [Some(v)] => Ok(*v),
        _ => Err(VolumeError::Header(format!("expected one vector, got {value:?}"))),
    }
}

/// Parses `(a,b,c) (d,e,f) none ...`.
fn split_vectors(value: &str) -> Result<Vec<Option<Vector3<f64>>>, VolumeError> {
    let mut out = Vec::new();
    let mut rest = value.trim();
    while !rest.is_empty() {
        if let Some(r) = rest.strip_prefix("none") {
            out.push(None);
            rest = r.trim_start();
            continue;
        }
        let bad = || VolumeError::Header(format!("bad vector list {value:?}"));
        let r = rest.strip_prefix('(').ok_or_else(bad)?;
        let close = r.find(')').ok_or_else(bad)?;
        let comps: Vec<f64> = r[..close]
            .split(',')
            .map(|s| parse_num("vector component", s))
            .collect::<Result<_, _>>()?;
        if comps.len() != 3 {
            return Err(bad());
        }
        out.push(Some(Vector3::new(comps[0], comps[1], comps[2])));
        rest = r[close + 1..].trim_start();
    }
    Ok(out)
}

fn build(h: Header, data: &[u8]) -> Result<Volume, VolumeError> {
    let scalar = h.scalar.ok_or_else(|| VolumeError::Header("missing type".into()))?;
    let dimension = h.dimension.ok_or_else(|| VolumeError::Header("missing dimension".into()))?;
    if dimension != 3 {
        return Err(unsupported("dimension", &dimension.to_string()));
    }
    let sizes = h.sizes.ok_or_else(|| VolumeError::Header("missing sizes".into()))?;
    if sizes.len() != 3 {
        return Err(VolumeError::Header(format!("sizes has {} entries, expected 3", sizes.len())));
    }
    let encoding = h.encoding.ok_or_else(|| VolumeError::Header("missing encoding".into()))?;
    if encoding != "raw" {
        return Err(unsupported("encoding", &encoding));
    }
    let endian = match (scalar.size(), h.endian) {
        (1, e) => e.unwrap_or(Endian::Little),
        (_, Some(e)) => e,
        (_, None) => return Err(VolumeError::Header("multi-byte type without endian".into())),
    };
    let spacing = match (&h.directions, &h.spacings) {
        (Some(dirs), _) => axis_aligned_spacing(dirs)?,
        (None, Some(s)) if s.len() == 3 => Vector3::new(s[0], s[1], s[2]),
        (None, Some(s)) => {
            return Err(VolumeError::Header(format!("spacings has {} entries, expected 3", s.len())))
        }
        (None, None) => Vector3::repeat(1.0),
    };
    let origin = Point3::from(h.origin.unwrap_or_else(Vector3::zeros));

    let n: usize = sizes.iter().product();
    let needed = n * scalar.size();
    let mut data = data;
    for _ in 0..h.line_skip {
        let nl = data
            .iter()
            .position(|&b| b == b'\n')
            .ok_or(VolumeError::Truncated { needed, available: 0 })?;
        data = &data[nl + 1..];
    }
    let data = match h.byte_skip {
        -1 => {
            if data.len() < needed {
                return Err(VolumeError::Truncated {
                    needed,
                    available: data.len(),
                });
            }
            &data[data.len() - needed..]
        }
        skip if skip >= 0 => data.get(skip as usize..).unwrap_or(&[]),
        skip => return Err(unsupported("byte skip", &skip.to_string())),
    };
    if data.len() < needed {
        return Err(VolumeError::Truncated {
            needed,
            available: data.len(),
        });
    }
    let raw = &data[..needed];
    let values = decode_samples(scalar, endian, raw);
    Volume::new([sizes[0], sizes[1], sizes[2]], spacing, origin, values)
}

fn axis_aligned_spacing(dirs: &[Vector3<f64>]) -> Result<Vector3<f64>, VolumeError> {
    if dirs.len() != 3 {
        return Err(VolumeError::Header(format!("{} space directions, expected 3", dirs.len())));
    }
    let mut spacing = Vector3::zeros();
    for (axis, d) in dirs.iter().enumerate() {
        let diag = d[axis];
        let off = (0..3).filter(|&c| c != axis).map(|c| d[c].abs()).fold(0.0, f64::max);
        if diag.is_nan() || diag <= 0.0 || off > 1e-9 * diag {
            return Err(VolumeError::NonAxisAligned(format!(
                "axis {axis} direction ({}, {}, {})",
                d.x, d.y, d.z
            )));
        }
        spacing[axis] = diag;
    }
    Ok(spacing)
}

fn decode_samples(scalar: ScalarType, endian: Endian, raw: &[u8]) -> VolumeData {
    macro_rules! words {
        ($t:ty, $n:literal) => {
            raw.chunks_exact($n)
                .map(|c| {
                    let b: [u8; $n] = c.try_into().unwrap();
                    match endian {
                        Endian::Little => <$t>::from_le_bytes(b),
                        Endian::Big => <$t>::from_be_bytes(b),
                    }
                })
                .collect()
        };
    }
    match scalar {
        ScalarType::U8 => VolumeData::U8(raw.to_vec()),
        ScalarType::I16 => VolumeData::I16(words!(i16, 2)),
        ScalarType::U16 => VolumeData::U16(words!(u16, 2)),
        ScalarType::F32 => VolumeData::F32(words!(f32, 4)),
    }
}

pub fn save_nrrd(path: impl AsRef<Path>, volume: &Volume, endian: Endian) -> Result<(), VolumeError> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    write_nrrd(&mut f, volume, endian)?;
    f.flush()?;
    Ok(())
}

pub fn write_nrrd<W: Write>(mut w: W, volume: &Volume, endian: Endian) -> Result<(), VolumeError> {
    let type_name = match volume.scalar_type() {
        ScalarType::U8 => "uint8",
        ScalarType::I16 => "int16",
        ScalarType::U16 => "uint16",
        ScalarType::F32 => "float",
    };
    let [nx, ny, nz] = volume.dims();
    let s = volume.spacing();
    let o = volume.origin();
    writeln!(w, "NRRD0004")?;
    writeln!(w, "type: {type_name}")?;
    writeln!(w, "dimension: 3")?;
    writeln!(w, "space dimension: 3")?;
    writeln!(w, "sizes: {nx} {ny} {nz}")?;
    writeln!(w, "space directions: ({},0,0) (0,{},0) (0,0,{})", s.x, s.y, s.z)?;
    writeln!(w, "kinds: domain domain domain")?;
    writeln!(w, "endian: {}", if endian == Endian::Big { "big" } else { "little" })?;
    writeln!(w, "encoding: raw")?;
    writeln!(w, "space origin: ({},{},{})", o.x, o.y, o.z)?;
    writeln!(w)?;
    macro_rules! put {
        ($v:expr) => {
            for x in $v {
                match endian {
                    Endian::Little => w.write_all(&x.to_le_bytes())?,
                    Endian::Big => w.write_all(&x.to_be_bytes())?,
                }
            }
        };
    }
    match volume.data() {
        VolumeData::U8(v) => w.write_all(v)?,
        VolumeData::I16(v) => put!(v),
        VolumeData::U16(v) => put!(v),
        VolumeData::F32(v) => put!(v),
    }
    Ok(())
}
