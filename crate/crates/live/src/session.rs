//! On-disk session layout and the offline reader used by `navcli analyze`.
//!
//! ```text
//! <session_root>/<session id>/
//!   trajectory.csv      raw tracker-frame samples, append-only
//!   manifest.toml       parameters, registration summary, final metrics
//!   registration.txt    4×4 tracker→CT matrix (after registration)
//!   annotations.csv     stone markers (at export)
//!   trajectory_ct.csv   registered samples in CT frame (at export)
//! ```

use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use nalgebra::Point3;
use scopenav_core::geometry::{analyze_points, read_trajectory, write_sample_row, TRAJECTORY_HEADER};
use scopenav_core::registration::FormatError;
use scopenav_core::{Frame, RigidTransform, TrackedSample, Trajectory, TrajectoryMetrics};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::protocol::{AnatomyMode, StoneAnnotation};

pub const TRAJECTORY_FILE: &str = "trajectory.csv";
pub const MANIFEST_FILE: &str = "manifest.toml";
pub const REGISTRATION_FILE: &str = "registration.txt";
pub const ANNOTATIONS_FILE: &str = "annotations.csv";
pub const TRAJECTORY_CT_FILE: &str = "trajectory_ct.csv";

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: {message}")]
    Manifest { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    Log {
        path: PathBuf,
        #[source]
        source: scopenav_core::geometry::GeometryError,
    },
    #[error("{path}: {source}")]
    Registration {
        path: PathBuf,
        #[source]
        source: FormatError,
    },
    #[error("{path}: registered at sample {at} but the log has {rows} rows")]
    ShortLog { path: PathBuf, at: u64, rows: usize },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> SessionError + '_ {
    move |source| SessionError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRegistration {
    pub file: String,
    pub registered_at_sample: u64,
    pub fre_mm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestMetrics {
    pub sample_count: u64,
    pub n_samples: usize,
    pub n_inliers: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub outlier_fraction: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hull_volume_mm3: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path_length_mm: Option<f64>,
}

impl ManifestMetrics {
    pub fn new(sample_count: u64, m: &TrajectoryMetrics) -> Self {
        ManifestMetrics {
            sample_count,
            n_samples: m.n_samples,
            n_inliers: m.n_inliers,
            outlier_fraction: m.outlier_fraction,
            hull_volume_mm3: m.hull_volume_mm3,
            path_length_mm: m.path_length_mm,
        }
    }

    pub fn metrics(&self) -> TrajectoryMetrics {
        TrajectoryMetrics {
            n_samples: self.n_samples,
            n_inliers: self.n_inliers,
            outlier_fraction: self.outlier_fraction,
            hull_volume_mm3: self.hull_volume_mm3,
            path_length_mm: self.path_length_mm,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub session_id: String,
    /// Seconds since the Unix epoch.
    pub started_at: f64,
    pub threshold: f64,
    pub decimation_mm: f64,
    pub trajectory_file: String,
    pub sample_count: u64,
    pub anatomy_mode: AnatomyMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exported_at: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub registration: Option<ManifestRegistration>,
    /// Final live metrics, written at export.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<ManifestMetrics>,
}

impl Manifest {
    pub fn new(session_id: impl Into<String>, started_at: f64, threshold: f64, decimation_mm: f64) -> Self {
        Manifest {
            session_id: session_id.into(),
            started_at,
            threshold,
            decimation_mm,
            trajectory_file: TRAJECTORY_FILE.into(),
            sample_count: 0,
            anatomy_mode: AnatomyMode::Full,
            exported_at: None,
            registration: None,
            metrics: None,
        }
    }
}

/// Writes through a temporary file and a rename, so a reader never sees a
/// half-written file.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<(), SessionError> {
    let tmp = path.with_extension("tmp");
    let mut f = File::create(&tmp).map_err(io_err(&tmp))?;
    f.write_all(contents).map_err(io_err(&tmp))?;
    f.sync_all().map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

pub fn write_manifest(dir: &Path, manifest: &Manifest) -> Result<(), SessionError> {
    let path = dir.join(MANIFEST_FILE);
    let text = toml::to_string(manifest).map_err(|e| SessionError::Manifest {
        path: path.clone(),
        message: e.to_string(),
    })?;
    write_atomic(&path, text.as_bytes())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest, SessionError> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    toml::from_str(&text).map_err(|e| SessionError::Manifest {
        path,
        message: e.message().to_string(),
    })
}

pub fn write_registration(dir: &Path, transform: &RigidTransform) -> Result<(), SessionError> {
    write_atomic(&dir.join(REGISTRATION_FILE), transform.to_matrix_text().as_bytes())
}

pub fn read_registration(dir: &Path, file: &str) -> Result<RigidTransform, SessionError> {
    let path = dir.join(file);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    RigidTransform::parse_matrix_text(&text).map_err(|source| SessionError::Registration { path, source })
}

pub fn write_annotations(dir: &Path, annotations: &[StoneAnnotation]) -> Result<(), SessionError> {
    let path = dir.join(ANNOTATIONS_FILE);
    let mut w = csv::Writer::from_writer(Vec::new());
    let res: csv::Result<()> = (|| {
        w.write_record(["id", "label", "x_mm", "y_mm", "z_mm", "r", "g", "b", "a", "created_at"])?;
        for a in annotations {
            let [x, y, z] = a.position;
            let [r, g, b, al] = a.color;
            w.write_record([
                a.id.to_string(),
                a.label.clone(),
                x.to_string(),
                y.to_string(),
                z.to_string(),
                r.to_string(),
                g.to_string(),
                b.to_string(),
                al.to_string(),
                a.created_at.to_string(),
            ])?;
        }
        Ok(())
    })();
    res.map_err(|e| SessionError::Io {
        path: path.clone(),
        source: io::Error::other(e),
    })?;
    let bytes = w.into_inner().map_err(|e| SessionError::Io {
        path: path.clone(),
        source: io::Error::other(e.to_string()),
    })?;
    write_atomic(&path, &bytes)
}

/// The append-only raw sample log. Each batch goes out in one write call;
/// once `append` returns the rows are in the kernel and survive the process.
pub struct TrajectoryLog {
    file: File,
    path: PathBuf,
    rows: u64,
    buf: Vec<u8>,
}

impl TrajectoryLog {
    pub fn create(path: &Path) -> Result<Self, SessionError> {
        let mut file = OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(path)
            .map_err(io_err(path))?;
        writeln!(file, "{TRAJECTORY_HEADER}").map_err(io_err(path))?;
        Ok(TrajectoryLog {
            file,
            path: path.to_path_buf(),
            rows: 0,
            buf: Vec::new(),
        })
    }

    /// Returns the total number of rows now in the log.
    pub fn append(&mut self, samples: &[TrackedSample]) -> Result<u64, SessionError> {
        self.buf.clear();
        for s in samples {
            write_sample_row(&mut self.buf, s).expect("writing to a Vec cannot fail");
        }
        self.file.write_all(&self.buf).map_err(io_err(&self.path))?;
        self.file.flush().map_err(io_err(&self.path))?;
        self.rows += samples.len() as u64;
        Ok(self.rows)
    }

    pub fn rows(&self) -> u64 {
        self.rows
    }
}

/// Reads a session log. A final line without its newline (torn by a kill
/// mid-write) is dropped.
pub fn read_log(path: &Path) -> Result<Trajectory, SessionError> {
    let mut bytes = fs::read(path).map_err(io_err(path))?;
    if let Some(end) = bytes.iter().rposition(|&b| b == b'\n') {
        bytes.truncate(end + 1);
    }
    read_trajectory(&bytes[..], Frame::Tracker).map_err(|source| SessionError::Log {
        path: path.to_path_buf(),
        source,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionAnalysis {
    pub session_id: String,
    pub frame: Frame,
    /// Rows in the raw log.
    pub log_rows: usize,
    /// The samples the metrics ran on, in `frame`.
    pub samples: Trajectory,
    pub metrics: TrajectoryMetrics,
    /// Final live metrics recorded in the manifest, if exported.
    pub recorded: Option<TrajectoryMetrics>,
}

/// Recomputes the session metrics from the raw log: rows from the
/// registration onward, mapped into CT. An unregistered session is analyzed
/// in the tracker frame (the metrics are invariant under rigid motion).
pub fn analyze_session(dir: &Path, threshold: Option<f64>) -> Result<SessionAnalysis, SessionError> {
    let manifest = read_manifest(dir)?;
    let log_path = dir.join(&manifest.trajectory_file);
    let log = read_log(&log_path)?;
    let threshold = threshold.unwrap_or(manifest.threshold);
    let (frame, samples) = match &manifest.registration {
        Some(reg) => {
            let at = reg.registered_at_sample;
            if at as usize > log.len() {
                return Err(SessionError::ShortLog {
                    path: log_path,
                    at,
                    rows: log.len(),
                });
            }
            let transform = read_registration(dir, &reg.file)?;
            let tail = log.select(|i| i as u64 >= at);
            (Frame::Ct, tail.transformed(&transform))
        }
        None => (Frame::Tracker, log.clone()),
    };
    let points: Vec<Point3<f64>> = samples.positions();
    Ok(SessionAnalysis {
        session_id: manifest.session_id.clone(),
        frame,
        log_rows: log.len(),
        metrics: analyze_points(&points, threshold),
        samples,
        recorded: manifest.metrics.as_ref().map(ManifestMetrics::metrics),
    })
}
