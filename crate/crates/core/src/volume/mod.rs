//! CT volumes and the 2-D slices cut from them.

mod nrrd;
mod slice;

pub use nrrd::{load_nrrd, parse_nrrd, save_nrrd, write_nrrd, Endian};
pub use slice::{reslice_plane, slice_axis, window_level, GrayImage, SliceGeometry, SliceImage};

use nalgebra::{Point3, Vector3};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum VolumeError {
    #[error("not an NRRD file: {0}")]
    NotNrrd(String),
    #[error("malformed NRRD header: {0}")]
    Header(String),
    #[error("unsupported NRRD {field}: {value}")]
    Unsupported { field: &'static str, value: String },
    #[error("space directions are not axis aligned: {0}")]
    NonAxisAligned(String),
    #[error("truncated data: need {needed} bytes, have {available}")]
    Truncated { needed: usize, available: usize },
    #[error("invalid volume: {0}")]
    Invalid(String),
    #[error("slice index {index} out of range for axis {axis} with {size} voxels")]
    IndexOutOfRange { axis: usize, index: usize, size: usize },
    #[error("slice basis is not orthonormal")]
    DegenerateBasis,
    #[error("window must be positive, got {0}")]
    InvalidWindow(f64),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScalarType {
    U8,
    I16,
    U16,
    F32,
}

impl ScalarType {
    pub fn size(self) -> usize {
        match self {
            ScalarType::U8 => 1,
            ScalarType::I16 | ScalarType::U16 => 2,
            ScalarType::F32 => 4,
        }
    }

    /// Lowest representable value; used as the out-of-volume fill.
    pub fn min_value(self) -> f64 {
        match self {
            ScalarType::U8 | ScalarType::U16 => 0.0,
            ScalarType::I16 => i16::MIN as f64,
            ScalarType::F32 => f32::MIN as f64,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum VolumeData {
    U8(Vec<u8>),
    I16(Vec<i16>),
    U16(Vec<u16>),
    F32(Vec<f32>),
}

impl VolumeData {
    pub fn len(&self) -> usize {
        match self {
            VolumeData::U8(v) => v.len(),
            VolumeData::I16(v) => v.len(),
            VolumeData::U16(v) => v.len(),
            VolumeData::F32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn scalar_type(&self) -> ScalarType {
        match self {
            VolumeData::U8(_) => ScalarType::U8,
            VolumeData::I16(_) => ScalarType::I16,
            VolumeData::U16(_) => ScalarType::U16,
            VolumeData::F32(_) => ScalarType::F32,
        }
    }

    #[inline]
    pub fn get(&self, i: usize) -> f64 {
        match self {
            VolumeData::U8(v) => v[i] as f64,
            VolumeData::I16(v) => v[i] as f64,
            VolumeData::U16(v) => v[i] as f64,
            VolumeData::F32(v) => v[i] as f64,
        }
    }
}

/// Scalar image on a regular grid. Voxel `(i, j, k)` is centered at
/// `origin + (i·sx, j·sy, k·sz)`; `i` varies fastest in `data`.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    spacing: Vector3<f64>,
    origin: Point3<f64>,
    data: VolumeData,
}

impl Volume {
    pub fn new(
        dims: [usize; 3],
        spacing: Vector3<f64>,
        origin: Point3<f64>,
        data: VolumeData,
    ) -> Result<Self, VolumeError> {
        if dims.contains(&0) {
            return Err(VolumeError::Invalid(format!("dims {dims:?} must be positive")));
        }
        if spacing.iter().any(|s| *s <= 0.0 || !s.is_finite()) {
            return Err(VolumeError::Invalid(format!("spacing {spacing:?} must be positive")));
        }
        if origin.iter().any(|v| !v.is_finite()) {
            return Err(VolumeError::Invalid("origin must be finite".into()));
        }
        let n = dims.iter().product::<usize>();
        if data.len() != n {
            return Err(VolumeError::Invalid(format!(
                "data has {} values, dims need {n}",
                data.len()
            )));
        }
        Ok(Volume {
            dims,
            spacing,
            origin,
            data,
        })
    }

    /// Builds a float volume from a function of the voxel index.
    pub fn from_fn(
        dims: [usize; 3],
        spacing: Vector3<f64>,
        origin: Point3<f64>,
        f: impl Fn(usize, usize, usize) -> f32,
    ) -> Result<Self, VolumeError> {
        let mut data = Vec::with_capacity(dims.iter().product());
        for k in 0..dims[2] {
            for j in 0..dims[1] {
                for i in 0..dims[0] {
                    data.push(f(i, j, k));
                }
            }
        }
        Volume::new(dims, spacing, origin, VolumeData::F32(data))
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> Vector3<f64> {
        self.spacing
    }

    pub fn origin(&self) -> Point3<f64> {
        self.origin
    }

    pub fn data(&self) -> &VolumeData {
        &self.data
    }

    pub fn scalar_type(&self) -> ScalarType {
        self.data.scalar_type()
    }

    #[inline]
    pub fn linear_index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data.get(self.linear_index(i, j, k))
    }

    pub fn voxel_center(&self, i: usize, j: usize, k: usize) -> Point3<f64> {
        Point3::new(
            self.origin.x + i as f64 * self.spacing.x,
            self.origin.y + j as f64 * self.spacing.y,
            self.origin.z + k as f64 * self.spacing.z,
        )
    }

    /// Fractional voxel coordinates of a world point.
    pub fn continuous_index(&self, p: &Point3<f64>) -> Vector3<f64> {
        (p - self.origin).component_div(&self.spacing)
    }

    pub fn nearest_voxel(&self, p: &Point3<f64>) -> Option<[usize; 3]> {
        let c = self.continuous_index(p);
        let mut out = [0; 3];
        for k in 0..3 {
            let r = c[k].round();
            if r < 0.0 || r >= self.dims[k] as f64 {
                return None;
            }
            out[k] = r as usize;
        }
        Some(out)
    }

    /// Trilinear interpolation at a world point; the type minimum outside the
    /// voxel-center lattice.
    pub fn sample(&self, p: &Point3<f64>) -> f64 {
        const SNAP: f64 = 1e-9;
        let c = self.continuous_index(p);
        let mut base = [0usize; 3];
        let mut frac = [0f64; 3];
        for k in 0..3 {
            let mut x = c[k];
            let r = x.round();
            if (x - r).abs() < SNAP {
                x = r;
            }
            let max = (self.dims[k] - 1) as f64;
            if !(0.0..=max).contains(&x) {
                return self.scalar_type().min_value();
            }
            if self.dims[k] == 1 {
                continue;
            }
            let b = (x.floor() as usize).min(self.dims[k] - 2);
            base[k] = b;
            frac[k] = x - b as f64;
        }
        let step = |k: usize| usize::from(self.dims[k] > 1);
        let (i0, j0, k0) = (base[0], base[1], base[2]);
        let (i1, j1, k1) = (i0 + step(0), j0 + step(1), k0 + step(2));
        let [fx, fy, fz] = frac;
        let lerp = |a: f64, b: f64, t: f64| a * (1.0 - t) + b * t;
        let c00 = lerp(self.get(i0, j0, k0), self.get(i1, j0, k0), fx);
        let c10 = lerp(self.get(i0, j1, k0), self.get(i1, j1, k0), fx);
        let c01 = lerp(self.get(i0, j0, k1), self.get(i1, j0, k1), fx);
        let c11 = lerp(self.get(i0, j1, k1), self.get(i1, j1, k1), fx);
        lerp(lerp(c00, c10, fy), lerp(c01, c11, fy), fz)
    }
}
