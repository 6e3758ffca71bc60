use nalgebra::{Point3, Vector3};
use serde::Serialize;

use super::{Volume, VolumeError};

/// A resampled plane through a volume. Pixel `(c, r)` sits at
/// `origin + c·spacing[0]·u + r·spacing[1]·v` and is stored at `r·width + c`.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceImage {
    pub width: usize,
    pub height: usize,
    pub pixel_spacing: [f64; 2],
    pub origin: Point3<f64>,
    pub u: Vector3<f64>,
    pub v: Vector3<f64>,
    pub data: Vec<f64>,
}

impl SliceImage {
    pub fn pixel_world(&self, c: usize, r: usize) -> Point3<f64> {
        self.origin + self.u * (c as f64 * self.pixel_spacing[0]) + self.v * (r as f64 * self.pixel_spacing[1])
    }

    pub fn get(&self, c: usize, r: usize) -> f64 {
        self.data[r * self.width + c]
    }

    pub fn normal(&self) -> Vector3<f64> {
        self.u.cross(&self.v)
    }

    /// Sidecar description used to place the image in world space.
    pub fn geometry(&self) -> SliceGeometry {
        SliceGeometry {
            width: self.width,
            height: self.height,
            pixel_spacing: self.pixel_spacing,
            origin: self.origin.coords.into(),
            u: self.u.into(),
            v: self.v.into(),
            normal: self.normal().into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct SliceGeometry {
    pub width: usize,
    pub height: usize,
    pub pixel_spacing: [f64; 2],
    pub origin: [f64; 3],
    pub u: [f64; 3],
    pub v: [f64; 3],
    pub normal: [f64; 3],
}

/// The plane of voxels with coordinate `index` along `axis`. The in-plane
/// axes are the two remaining ones in increasing order.
pub fn slice_axis(volume: &Volume, axis: usize, index: usize) -> Result<SliceImage, VolumeError> {
    if axis > 2 {
        return Err(VolumeError::Invalid(format!("axis {axis} is not 0, 1 or 2")));
    }
    let dims = volume.dims();
    if index >= dims[axis] {
        return Err(VolumeError::IndexOutOfRange {
            axis,
            index,
            size: dims[axis],
        });
    }
    let (a, b) = match axis {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    };
    let (width, height) = (dims[a], dims[b]);
    let mut data = Vec::with_capacity(width * height);
    let mut ijk = [0usize; 3];
    ijk[axis] = index;
    for r in 0..height {
        ijk[b] = r;
        for c in 0..width {
            ijk[a] = c;
            data.push(volume.get(ijk[0], ijk[1], ijk[2]));
        }
    }
    let spacing = volume.spacing();
    let mut corner = [0usize; 3];
    corner[axis] = index;
    Ok(SliceImage {
        width,
        height,
        pixel_spacing: [spacing[a], spacing[b]],
        origin: volume.voxel_center(corner[0], corner[1], corner[2]),
        u: Vector3::ith(a, 1.0),
        v: Vector3::ith(b, 1.0),
        data,
    })
}

/// Samples an arbitrary plane with trilinear interpolation. `u` and `v` must
/// be orthonormal; points off the voxel lattice read as the type minimum.
pub fn reslice_plane(
    volume: &Volume,
    origin: Point3<f64>,
    u: Vector3<f64>,
    v: Vector3<f64>,
    size: [usize; 2],
    pixel_spacing: [f64; 2],
) -> Result<SliceImage, VolumeError> {
    const TOL: f64 = 1e-6;
    if (u.norm() - 1.0).abs() > TOL || (v.norm() - 1.0).abs() > TOL || u.dot(&v).abs() > TOL {
        return Err(VolumeError::DegenerateBasis);
    }
    if pixel_spacing.iter().any(|s| *s <= 0.0 || !s.is_finite()) {
        return Err(VolumeError::Invalid(format!("pixel spacing {pixel_spacing:?} must be positive")));
    }
    if size.contains(&0) {
        return Err(VolumeError::Invalid("slice size must be positive".into()));
    }
    let mut img = SliceImage {
        width: size[0],
        height: size[1],
        pixel_spacing,
        origin,
        u,
        v,
        data: Vec::with_capacity(size[0] * size[1]),
    };
    for r in 0..size[1] {
        for c in 0..size[0] {
            let p = img.pixel_world(c, r);
            img.data.push(volume.sample(&p));
        }
    }
    Ok(img)
}

/// 8-bit grayscale image, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl GrayImage {
    pub fn to_png(&self) -> Vec<u8> {
        let mut out = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut out, self.width as u32, self.height as u32);
            enc.set_color(png::ColorType::Grayscale);
            enc.set_depth(png::BitDepth::Eight);
            // Writing into a Vec with matching dimensions cannot fail.
            let mut writer = enc.write_header().expect("png header");
            writer.write_image_data(&self.data).expect("png data");
        }
        out
    }
}

/// Maps `[level - window/2, level + window/2]` linearly onto 0..=255,
/// clamping outside and rounding half up.
pub fn window_level(image: &SliceImage, window: f64, level: f64) -> Result<GrayImage, VolumeError> {
    if window <= 0.0 || !window.is_finite() || !level.is_finite() {
        return Err(VolumeError::InvalidWindow(window));
    }
    let lo = level - window / 2.0;
    let data = image
        .data
        .iter()
        .map(|&x| {
            let t = ((x - lo) / window).clamp(0.0, 1.0);
            (t * 255.0 + 0.5).floor() as u8
        })
        .collect();
    Ok(GrayImage {
        width: image.width,
        height: image.height,
        data,
    })
}
