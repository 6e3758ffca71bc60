//! Paired-point rigid registration from tracker space into CT space.
//!
//! The solver is the SVD (Kabsch) least-squares fit without scaling. Given
//! centered point sets `P` (tracker) and `Q` (CT), `H = Σ pᵢ qᵢᵀ = U S Vᵀ` and
//! `R = V diag(1, 1, d) Uᵀ` where `d = sign(det(V Uᵀ))` keeps `det(R) = +1`.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::io::{BufRead, Write};

use nalgebra::{Matrix3, Matrix4, Point3, Vector3, SVD};
use thiserror::Error;

/// Relative singular-value floor below which centered tracker points are
/// considered to span less than a plane.
const RANK_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Error, PartialEq)]
pub enum RegistrationError {
    #[error("need at least 3 fiducial pairs, got {0}")]
    TooFewPairs(usize),
    #[error("tracker points are collinear or coincident; the rotation is not determined")]
    Degenerate,
    #[error("fiducial {0:?} has a non-finite coordinate")]
    NonFinite(String),
    #[error("duplicate fiducial label {0:?}")]
    DuplicateLabel(String),
    #[error("SVD did not converge")]
    SvdFailed,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        RigidTransform {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        Self::new(Matrix3::identity(), Vector3::zeros())
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self::new(Matrix3::identity(), translation)
    }

    /// `R·p + t`
    pub fn apply(&self, p: &Point3<f64>) -> Point3<f64> {
        Point3::from(self.rotation * p.coords + self.translation)
    }

    pub fn invert(&self) -> Self {
        let rt = self.rotation.transpose();
        Self::new(rt, -(rt * self.translation))
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &RigidTransform) -> Self {
        Self::new(
            self.rotation * other.rotation,
            self.rotation * other.translation + self.translation,
        )
    }

    /// True when `RᵀR = I` and `det(R) = 1` within `tol`.
    pub fn is_proper(&self, tol: f64) -> bool {
        let ortho = (self.rotation.transpose() * self.rotation - Matrix3::identity()).abs().max();
        ortho < tol && (self.rotation.determinant() - 1.0).abs() < tol
    }

    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn from_homogeneous(m: &Matrix4<f64>) -> Self {
        Self::new(
            m.fixed_view::<3, 3>(0, 0).into_owned(),
            m.fixed_view::<3, 1>(0, 3).into_owned(),
        )
    }

    /// Four lines of four space-separated values. Values use the shortest
    /// representation that parses back to the same `f64`.
    pub fn to_matrix_text(&self) -> String {
        let m = self.to_homogeneous();
        let mut out = String::new();
        for r in 0..4 {
            let row: Vec<String> = (0..4).map(|c| format!("{}", m[(r, c)])).collect();
            let _ = writeln!(out, "{}", row.join(" "));
        }
        out
    }

    pub fn parse_matrix_text(text: &str) -> Result<Self, FormatError> {
        let rows: Vec<&str> = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .collect();
        if rows.len() != 4 {
            return Err(FormatError::new(0, format!("expected 4 matrix rows, found {}", rows.len())));
        }
        let mut m = Matrix4::zeros();
        for (r, line) in rows.iter().enumerate() {
            let vals: Vec<&str> = line.split_whitespace().collect();
            if vals.len() != 4 {
                return Err(FormatError::new(r + 1, format!("expected 4 values, found {}", vals.len())));
            }
            for (c, v) in vals.iter().enumerate() {
                m[(r, c)] = v
                    .parse()
                    .map_err(|_| FormatError::new(r + 1, format!("bad number {v:?}")))?;
            }
        }
        Ok(Self::from_homogeneous(&m))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FiducialPair {
    pub label: String,
    pub tracker_point: Point3<f64>,
    pub ct_point: Point3<f64>,
}

impl FiducialPair {
    pub fn new(label: impl Into<String>, tracker_point: Point3<f64>, ct_point: Point3<f64>) -> Self {
        FiducialPair {
            label: label.into(),
            tracker_point,
            ct_point,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegistrationResult {
    pub transform: RigidTransform,
    /// Root-mean-square residual, mm.
    pub fre: f64,
    pub per_point_residuals: Vec<f64>,
}

pub fn solve_rigid(pairs: &[FiducialPair]) -> Result<RegistrationResult, RegistrationError> {
    if pairs.len() < 3 {
        return Err(RegistrationError::TooFewPairs(pairs.len()));
    }
    let mut seen = HashSet::new();
    for p in pairs {
        if !seen.insert(p.label.as_str()) {
            return Err(RegistrationError::DuplicateLabel(p.label.clone()));
        }
        let finite = p.tracker_point.iter().chain(p.ct_point.iter()).all(|v| v.is_finite());
        if !finite {
            return Err(RegistrationError::NonFinite(p.label.clone()));
        }
    }

    let n = pairs.len() as f64;
    let src_mean = pairs.iter().fold(Vector3::zeros(), |acc, p| acc + p.tracker_point.coords) / n;
    let dst_mean = pairs.iter().fold(Vector3::zeros(), |acc, p| acc + p.ct_point.coords) / n;

    let mut cov = Matrix3::zeros();
    let mut scatter = Matrix3::zeros();
    for p in pairs {
        let a = p.tracker_point.coords - src_mean;
        let b = p.ct_point.coords - dst_mean;
        cov += a * b.transpose();
        scatter += a * a.transpose();
    }

    // Singular values of the centered tracker points are the square roots of
    // the eigenvalues of their scatter matrix.
    let mut eig: Vec<f64> = scatter.symmetric_eigenvalues().iter().map(|v| v.max(0.0)).collect();
    eig.sort_by(|a, b| b.total_cmp(a));
    if eig[0] <= 0.0 || eig[1].sqrt() <= RANK_TOLERANCE * eig[0].sqrt() {
        return Err(RegistrationError::Degenerate);
    }

    let svd = SVD::try_new(cov, true, true, f64::EPSILON, 0).ok_or(RegistrationError::SvdFailed)?;
    let u = svd.u.ok_or(RegistrationError::SvdFailed)?;
    let v = svd.v_t.ok_or(RegistrationError::SvdFailed)?.transpose();
    let d = (v * u.transpose()).determinant().signum();
    let rotation = v * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d)) * u.transpose();
    let translation = dst_mean - rotation * src_mean;
    let transform = RigidTransform::new(rotation, translation);

    let per_point_residuals: Vec<f64> = pairs
        .iter()
        .map(|p| (transform.apply(&p.tracker_point) - p.ct_point).norm())
        .collect();
    let fre = (per_point_residuals.iter().map(|r| r * r).sum::<f64>() / n).sqrt();
    Ok(RegistrationResult {
        transform,
        fre,
        per_point_residuals,
    })
}

/// Free-function form of [`RigidTransform::apply`].
pub fn apply(transform: &RigidTransform, point: &Point3<f64>) -> Point3<f64> {
    transform.apply(point)
}

pub fn invert(transform: &RigidTransform) -> RigidTransform {
    transform.invert()
}

#[derive(Debug, Error, PartialEq)]
#[error("line {line}: {message}")]
pub struct FormatError {
    pub line: usize,
    pub message: String,
}

impl FormatError {
    pub(crate) fn new(line: usize, message: impl Into<String>) -> Self {
        FormatError {
            line,
            message: message.into(),
        }
    }
}

fn parse_fields(line: &str, lineno: usize, expected: usize) -> Result<Option<Vec<String>>, FormatError> {
    let line = line.trim();
    if line.is_empty() || line.starts_with('#') {
        return Ok(None);
    }
    let fields: Vec<String> = line.split(',').map(|f| f.trim().to_string()).collect();
    if fields.len() != expected {
        return Err(FormatError::new(
            lineno,
            format!("expected {expected} comma-separated fields, found {}", fields.len()),
        ));
    }
    // optional header row
    if lineno == 1 && fields[1].parse::<f64>().is_err() {
        return Ok(None);
    }
    Ok(Some(fields))
}

fn parse_coords(fields: &[String], lineno: usize) -> Result<Point3<f64>, FormatError> {
    let mut v = [0.0; 3];
    for (slot, f) in v.iter_mut().zip(fields) {
        *slot = f
            .parse()
            .map_err(|_| FormatError::new(lineno, format!("bad number {f:?}")))?;
    }
    Ok(Point3::from(v))
}

/// Reads `label, tx, ty, tz, cx, cy, cz` rows (mm). A header row, blank lines
/// and `#` comments are skipped.
pub fn read_fiducial_pairs(reader: impl BufRead) -> Result<Vec<FiducialPair>, FormatError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| FormatError::new(i + 1, e.to_string()))?;
        if let Some(f) = parse_fields(&line, i + 1, 7)? {
            out.push(FiducialPair {
                label: f[0].clone(),
                tracker_point: parse_coords(&f[1..4], i + 1)?,
                ct_point: parse_coords(&f[4..7], i + 1)?,
            });
        }
    }
    Ok(out)
}

/// Reads `label, x, y, z` rows, the CT-side fiducial list.
pub fn read_labeled_points(reader: impl BufRead) -> Result<Vec<(String, Point3<f64>)>, FormatError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| FormatError::new(i + 1, e.to_string()))?;
        if let Some(f) = parse_fields(&line, i + 1, 4)? {
            out.push((f[0].clone(), parse_coords(&f[1..4], i + 1)?));
        }
    }
    Ok(out)
}

pub fn write_fiducial_pairs(mut w: impl Write, pairs: &[FiducialPair]) -> std::io::Result<()> {
    writeln!(w, "label,tx,ty,tz,cx,cy,cz")?;
    for p in pairs {
        let t = p.tracker_point;
        let c = p.ct_point;
        writeln!(w, "{},{},{},{},{},{},{}", p.label, t.x, t.y, t.z, c.x, c.y, c.z)?;
    }
    Ok(())
}
