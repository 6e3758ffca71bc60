use std::io::{Read, Write};

use nalgebra::{Point3, Quaternion};
use serde::{Deserialize, Serialize};

use super::GeometryError;
use crate::registration::RigidTransform;

pub const TRAJECTORY_HEADER: &str = "t_seconds,x_mm,y_mm,z_mm,qw,qx,qy,qz";

const QUAT_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Frame {
    #[default]
    Tracker,
    Ct,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackedSample {
    /// Seconds.
    pub t: f64,
    pub position: Point3<f64>,
    /// Unit quaternion (w, x, y, z) when the source reports orientation.
    pub orientation: Option<Quaternion<f64>>,
}

impl TrackedSample {
    pub fn at(t: f64, position: Point3<f64>) -> Self {
        TrackedSample {
            t,
            position,
            orientation: None,
        }
    }
}

/// Time-ordered scope-tip samples in one coordinate frame.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trajectory {
    frame: Frame,
    samples: Vec<TrackedSample>,
}

impl Trajectory {
    pub fn new(frame: Frame) -> Self {
        Trajectory {
            frame,
            samples: Vec::new(),
        }
    }

    pub fn from_samples(frame: Frame, samples: Vec<TrackedSample>) -> Result<Self, GeometryError> {
        let mut t = Trajectory::new(frame);
        t.samples.reserve(samples.len());
        for s in samples {
            t.push(s)?;
        }
        Ok(t)
    }

    /// Positions stamped at a fixed period starting from zero.
    pub fn from_positions(frame: Frame, positions: impl IntoIterator<Item = Point3<f64>>, period: f64) -> Self {
        Trajectory {
            frame,
            samples: positions
                .into_iter()
                .enumerate()
                .map(|(i, p)| TrackedSample::at(i as f64 * period, p))
                .collect(),
        }
    }

    pub fn push(&mut self, sample: TrackedSample) -> Result<(), GeometryError> {
        let idx = self.samples.len();
        if !sample.t.is_finite() || sample.position.iter().any(|v| !v.is_finite()) {
            return Err(GeometryError::InvalidTrajectory(format!("sample {idx} is not finite")));
        }
        if let Some(prev) = self.samples.last() {
            if sample.t < prev.t {
                return Err(GeometryError::InvalidTrajectory(format!(
                    "sample {idx}: timestamp {} precedes {}",
                    sample.t, prev.t
                )));
            }
        }
        if let Some(q) = sample.orientation {
            if (q.norm() - 1.0).abs() > QUAT_TOLERANCE {
                return Err(GeometryError::InvalidTrajectory(format!(
                    "sample {idx}: quaternion norm {} is not 1",
                    q.norm()
                )));
            }
        }
        self.samples.push(sample);
        Ok(())
    }

    pub fn frame(&self) -> Frame {
        self.frame
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[TrackedSample] {
        &self.samples
    }

    #[cfg(test)]
    pub(crate) fn samples_mut(&mut self) -> &mut [TrackedSample] {
        &mut self.samples
    }

    pub fn positions(&self) -> Vec<Point3<f64>> {
        self.samples.iter().map(|s| s.position).collect()
    }

    /// Keeps the samples whose index satisfies `keep`, preserving order.
    pub fn select(&self, keep: impl Fn(usize) -> bool) -> Trajectory {
        Trajectory {
            frame: self.frame,
            samples: self
                .samples
                .iter()
                .enumerate()
                .filter(|(i, _)| keep(*i))
                .map(|(_, s)| *s)
                .collect(),
        }
    }

    /// Maps positions through `transform` and relabels the frame as CT.
    /// Orientations are rotated as well.
    pub fn transformed(&self, transform: &RigidTransform) -> Trajectory {
        let rot = nalgebra::UnitQuaternion::from_matrix(&transform.rotation);
        Trajectory {
            frame: Frame::Ct,
            samples: self
                .samples
                .iter()
                .map(|s| TrackedSample {
                    t: s.t,
                    position: transform.apply(&s.position),
                    orientation: s.orientation.map(|q| rot.into_inner() * q),
                })
                .collect(),
        }
    }
}

pub fn polyline_length(points: &[Point3<f64>]) -> f64 {
    points.windows(2).map(|w| (w[1] - w[0]).norm()).sum()
}

/// Sum of consecutive sample distances, in input order.
pub fn path_length(trajectory: &Trajectory) -> Result<f64, GeometryError> {
    if trajectory.len() < 2 {
        return Err(GeometryError::TooFewSamples {
            needed: 2,
            got: trajectory.len(),
        });
    }
    Ok(trajectory
        .samples
        .windows(2)
        .map(|w| (w[1].position - w[0].position).norm())
        .sum())
}

/// Appends one CSV row. Numbers use the shortest form that parses back to
/// the same `f64`, so logs reload bit-exactly.
pub fn write_sample_row(mut w: impl Write, s: &TrackedSample) -> std::io::Result<()> {
    let p = s.position;
    match s.orientation {
        Some(q) => writeln!(w, "{},{},{},{},{},{},{},{}", s.t, p.x, p.y, p.z, q.w, q.i, q.j, q.k),
        None => writeln!(w, "{},{},{},{},,,,", s.t, p.x, p.y, p.z),
    }
}

pub fn write_trajectory(mut w: impl Write, trajectory: &Trajectory) -> std::io::Result<()> {
    writeln!(w, "{TRAJECTORY_HEADER}")?;
    for s in &trajectory.samples {
        write_sample_row(&mut w, s)?;
    }
    Ok(())
}

/// Reads the trajectory CSV: header row, then `t, x, y, z` with optional
/// `qw, qx, qy, qz` columns (which may be left empty per row).
pub fn read_trajectory(reader: impl Read, frame: Frame) -> Result<Trajectory, GeometryError> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .flexible(false)
        .comment(Some(b'#'))
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let names: Vec<&str> = headers.iter().collect();
    let expected: Vec<&str> = TRAJECTORY_HEADER.split(',').collect();
    if names != expected[..4] && names != expected[..] {
        return Err(GeometryError::Malformed {
            line: 1,
            message: format!("unexpected header {names:?}, want {TRAJECTORY_HEADER}"),
        });
    }

    let mut traj = Trajectory::new(frame);
    for (i, record) in rdr.records().enumerate() {
        let record = record?;
        let line = record.position().map(|p| p.line() as usize).unwrap_or(i + 2);
        let num = |k: usize| -> Result<Option<f64>, GeometryError> {
            let f = record.get(k).unwrap_or("");
            if f.is_empty() {
                return Ok(None);
            }
            f.parse().map(Some).map_err(|_| GeometryError::Malformed {
                line,
                message: format!("column {} is not a number: {f:?}", k + 1),
            })
        };
        let req = |k: usize| {
            num(k)?.ok_or_else(|| GeometryError::Malformed {
                line,
                message: format!("column {} is empty", k + 1),
            })
        };
        let position = Point3::new(req(1)?, req(2)?, req(3)?);
        let orientation = if record.len() == 8 {
            let q: Vec<Option<f64>> = (4..8).map(num).collect::<Result<_, _>>()?;
            match q.as_slice() {
                [Some(w), Some(x), Some(y), Some(z)] => Some(Quaternion::new(*w, *x, *y, *z)),
                [None, None, None, None] => None,
                _ => {
                    return Err(GeometryError::Malformed {
                        line,
                        message: "partial quaternion".into(),
                    })
                }
            }
        } else {
            None
        };
        traj.push(TrackedSample {
            t: req(0)?,
            position,
            orientation,
        })
        .map_err(|e| GeometryError::Malformed {
            line,
            message: e.to_string(),
        })?;
    }
    Ok(traj)
}
