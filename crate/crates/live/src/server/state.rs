//! The session state machine. It has no I/O: every mutation returns the
//! viewer messages it produced, numbered in one sequence.

use std::collections::{BTreeMap, VecDeque};

use nalgebra::Point3;
use scopenav_core::registration::solve_rigid;
use scopenav_core::{FiducialPair, RegistrationResult, TrackedSample};
use thiserror::Error;

use crate::protocol::{
    AnatomyMode, AnnotationOp, FiducialCapture, LiveMetrics, MeshUrls, Pose, RegistrationInfo, ServerMsg,
    SliceDescriptor, Snapshot, StoneAnnotation, Trail, Xyz,
};

/// How far back raw samples are kept for fiducial capture, seconds.
const RECENT_HORIZON_S: f64 = 60.0;

pub const PALETTE: [[u8; 4]; 8] = [
    [230, 25, 75, 255],
    [60, 180, 75, 255],
    [255, 225, 25, 255],
    [0, 130, 200, 255],
    [245, 130, 48, 255],
    [145, 30, 180, 255],
    [70, 240, 240, 255],
    [240, 50, 230, 255],
];

#[derive(Debug, Error, PartialEq)]
pub enum CommandError {
    #[error("no samples received in the last {0} ms")]
    NoSamples(u64),
    #[error("capture label must not be empty")]
    EmptyLabel,
    #[error("no CT fiducial named {0:?}")]
    LabelMismatch(String),
    #[error("need at least 3 label-matched fiducial pairs, have {0}")]
    TooFewPairs(usize),
    #[error(transparent)]
    Registration(#[from] scopenav_core::registration::RegistrationError),
    #[error("session is not registered")]
    NotRegistered,
    #[error("no pose received yet")]
    NoPose,
    #[error("position must be finite")]
    NonFinite,
    #[error("no annotation with id {0}")]
    UnknownAnnotation(u64),
    #[error("no volume loaded")]
    NoVolume,
    #[error("{0}")]
    Slice(String),
    #[error("export failed: {0}")]
    Export(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct StateConfig {
    pub decimation_mm: f64,
    pub trail_capacity: usize,
    pub capture_window_ms: u64,
}

#[derive(Debug, Clone)]
pub struct Registered {
    pub result: RegistrationResult,
    pub info: RegistrationInfo,
}

pub struct SessionState {
    session_id: String,
    cfg: StateConfig,
    seq: u64,
    sample_count: u64,
    logged: u64,
    pose: Option<Pose>,
    recent: VecDeque<(f64, Point3<f64>)>,
    registration: Option<Registered>,
    /// Every CT-frame position since the registration, undecimated.
    ct_points: Vec<Point3<f64>>,
    trail: VecDeque<Xyz>,
    trail_epoch: u64,
    trail_start: u64,
    pending_trail: Vec<Xyz>,
    annotations: BTreeMap<u64, StoneAnnotation>,
    next_annotation: u64,
    anatomy_mode: AnatomyMode,
    slice: Option<SliceDescriptor>,
    metrics: Option<LiveMetrics>,
    captures: BTreeMap<String, FiducialCapture>,
    ct_fiducials: BTreeMap<String, Point3<f64>>,
    meshes: MeshUrls,
}

impl SessionState {
    pub fn new(
        session_id: impl Into<String>,
        cfg: StateConfig,
        ct_fiducials: BTreeMap<String, Point3<f64>>,
        meshes: MeshUrls,
    ) -> Self {
        SessionState {
            session_id: session_id.into(),
            cfg,
            seq: 0,
            sample_count: 0,
            logged: 0,
            pose: None,
            recent: VecDeque::new(),
            registration: None,
            ct_points: Vec::new(),
            trail: VecDeque::new(),
            trail_epoch: 0,
            trail_start: 0,
            pending_trail: Vec::new(),
            annotations: BTreeMap::new(),
            next_annotation: 1,
            anatomy_mode: AnatomyMode::default(),
            slice: None,
            metrics: None,
            captures: BTreeMap::new(),
            ct_fiducials,
            meshes,
        }
    }

    fn next_seq(&mut self) -> u64 {
        self.seq += 1;
        self.seq
    }

    pub fn sample_count(&self) -> u64 {
        self.sample_count
    }

    pub fn registration(&self) -> Option<&Registered> {
        self.registration.as_ref()
    }

    pub fn ct_points(&self) -> &[Point3<f64>] {
        &self.ct_points
    }

    pub fn trail_len(&self) -> usize {
        self.trail.len()
    }

    pub fn trail_points(&self) -> impl Iterator<Item = &Xyz> {
        self.trail.iter()
    }

    pub fn annotations(&self) -> impl Iterator<Item = &StoneAnnotation> {
        self.annotations.values()
    }

    pub fn anatomy_mode(&self) -> AnatomyMode {
        self.anatomy_mode
    }

    pub fn metrics(&self) -> Option<&LiveMetrics> {
        self.metrics.as_ref()
    }

    /// One pose from the tracker. `sample.t` is the session receive time.
    pub fn ingest(&mut self, sample: &TrackedSample) -> ServerMsg {
        self.sample_count += 1;
        let p = sample.position;
        self.recent.push_back((sample.t, p));
        while self.recent.front().is_some_and(|(t, _)| sample.t - t > RECENT_HORIZON_S) {
            self.recent.pop_front();
        }
        let ct = self.registration.as_ref().map(|r| r.result.transform.apply(&p));
        if let Some(c) = ct {
            self.ct_points.push(c);
            let far_enough = match self.trail.back() {
                Some(last) => (c - Point3::from(*last)).norm() >= self.cfg.decimation_mm,
                None => true,
            };
            if far_enough {
                let xyz: Xyz = c.into();
                self.trail.push_back(xyz);
                self.pending_trail.push(xyz);
                while self.trail.len() > self.cfg.trail_capacity {
                    self.trail.pop_front();
                    self.trail_start += 1;
                }
            }
        }
        let pose = Pose {
            t: sample.t,
            sample_count: self.sample_count,
            raw_xyz: p.into(),
            ct_xyz: ct.map(Into::into),
        };
        self.pose = Some(pose.clone());
        ServerMsg::Pose {
            seq: self.next_seq(),
            pose,
        }
    }

    /// Closes an ingest batch once its samples are on disk: the trail points
    /// it added, then the durable count.
    pub fn end_batch(&mut self, logged: u64) -> Vec<ServerMsg> {
        let mut out = Vec::new();
        if !self.pending_trail.is_empty() {
            let points = std::mem::take(&mut self.pending_trail);
            let end = self.trail_start + self.trail.len() as u64;
            out.push(ServerMsg::TrailDelta {
                seq: self.next_seq(),
                epoch: self.trail_epoch,
                reset: false,
                start: end - points.len() as u64,
                capacity: self.cfg.trail_capacity,
                points,
            });
        }
        self.logged = logged;
        out.push(ServerMsg::Ack {
            seq: self.next_seq(),
            logged,
        });
        out
    }

    /// Averages the raw positions received within `window_ms` before `now`.
    pub fn capture_fiducial(
        &mut self,
        label: &str,
        window_ms: Option<u64>,
        now: f64,
    ) -> Result<(FiducialCapture, ServerMsg), CommandError> {
        if label.is_empty() {
            return Err(CommandError::EmptyLabel);
        }
        let window_ms = window_ms.unwrap_or(self.cfg.capture_window_ms);
        let from = now - window_ms as f64 / 1000.0;
        let picked: Vec<Point3<f64>> = self.recent.iter().filter(|(t, _)| *t >= from).map(|(_, p)| *p).collect();
        if picked.is_empty() {
            return Err(CommandError::NoSamples(window_ms));
        }
        let mean = picked.iter().fold(nalgebra::Vector3::zeros(), |acc, p| acc + p.coords) / picked.len() as f64;
        let capture = FiducialCapture {
            label: label.to_string(),
            tracker_point: mean.into(),
            n_samples_averaged: picked.len(),
        };
        self.captures.insert(label.to_string(), capture.clone());
        let msg = ServerMsg::Capture {
            seq: self.next_seq(),
            capture: capture.clone(),
        };
        Ok((capture, msg))
    }

    /// Solves from the label-matched captures. The trail and the analytics
    /// sample set restart from here.
    pub fn register(
        &mut self,
        ct_override: Option<&BTreeMap<String, Xyz>>,
    ) -> Result<(RegistrationInfo, Vec<ServerMsg>), CommandError> {
        let ct: BTreeMap<String, Point3<f64>> = match ct_override {
            Some(m) => m.iter().map(|(k, v)| (k.clone(), Point3::from(*v))).collect(),
            None => self.ct_fiducials.clone(),
        };
        let mut pairs = Vec::new();
        for (label, cap) in &self.captures {
            let target = ct.get(label).ok_or_else(|| CommandError::LabelMismatch(label.clone()))?;
            pairs.push(FiducialPair::new(label.clone(), Point3::from(cap.tracker_point), *target));
        }
        if pairs.len() < 3 {
            return Err(CommandError::TooFewPairs(pairs.len()));
        }
        let result = solve_rigid(&pairs)?;
        let h = result.transform.to_homogeneous();
        let info = RegistrationInfo {
            fre_mm: result.fre,
            matrix: std::array::from_fn(|r| std::array::from_fn(|c| h[(r, c)])),
            residuals_mm: pairs.iter().map(|p| p.label.clone()).zip(result.per_point_residuals.iter().copied()).collect(),
            registered_at_sample: self.sample_count,
        };
        self.registration = Some(Registered {
            result,
            info: info.clone(),
        });
        self.ct_points.clear();
        self.trail.clear();
        self.pending_trail.clear();
        self.trail_epoch += 1;
        self.trail_start = 0;
        self.metrics = None;
        let msgs = vec![
            ServerMsg::Registration {
                seq: self.next_seq(),
                registration: info.clone(),
            },
            ServerMsg::TrailDelta {
                seq: self.next_seq(),
                epoch: self.trail_epoch,
                reset: true,
                start: 0,
                capacity: self.cfg.trail_capacity,
                points: Vec::new(),
            },
        ];
        Ok((info, msgs))
    }

    pub fn annotate(
        &mut self,
        position: Option<Xyz>,
        color: Option<[u8; 4]>,
        label: Option<String>,
        created_at: f64,
    ) -> Result<(StoneAnnotation, ServerMsg), CommandError> {
        let position = match position {
            Some(p) => p,
            None => {
                if self.registration.is_none() {
                    return Err(CommandError::NotRegistered);
                }
                self.pose.as_ref().and_then(|p| p.ct_xyz).ok_or(CommandError::NoPose)?
            }
        };
        if position.iter().any(|v| !v.is_finite()) {
            return Err(CommandError::NonFinite);
        }
        let id = self.next_annotation;
        self.next_annotation += 1;
        let annotation = StoneAnnotation {
            id,
            position,
            color: color.unwrap_or(PALETTE[(id as usize - 1) % PALETTE.len()]),
            label: label.unwrap_or_else(|| format!("stone {id}")),
            created_at,
        };
        self.annotations.insert(id, annotation.clone());
        let msg = ServerMsg::Annotation {
            seq: self.next_seq(),
            op: AnnotationOp::Add,
            id,
            annotation: Some(annotation.clone()),
        };
        Ok((annotation, msg))
    }

    pub fn remove_annotation(&mut self, id: u64) -> Result<ServerMsg, CommandError> {
        self.annotations.remove(&id).ok_or(CommandError::UnknownAnnotation(id))?;
        Ok(ServerMsg::Annotation {
            seq: self.next_seq(),
            op: AnnotationOp::Remove,
            id,
            annotation: None,
        })
    }

    pub fn set_slice(&mut self, descriptor: SliceDescriptor) -> ServerMsg {
        self.slice = Some(descriptor.clone());
        ServerMsg::Slice {
            seq: self.next_seq(),
            descriptor,
        }
    }

    pub fn set_anatomy_mode(&mut self, mode: AnatomyMode) -> ServerMsg {
        self.anatomy_mode = mode;
        ServerMsg::AnatomyMode {
            seq: self.next_seq(),
            mode,
        }
    }

    /// Accepts a finished computation unless a newer one already landed.
    pub fn set_metrics(&mut self, metrics: LiveMetrics) -> Option<ServerMsg> {
        self.registration.as_ref()?;
        if self.metrics.as_ref().is_some_and(|m| m.sample_count > metrics.sample_count) {
            return None;
        }
        self.metrics = Some(metrics.clone());
        Some(ServerMsg::Metrics {
            seq: self.next_seq(),
            metrics,
        })
    }

    pub fn snapshot(&self) -> ServerMsg {
        ServerMsg::Snapshot {
            seq: self.seq,
            state: Box::new(Snapshot {
                session_id: self.session_id.clone(),
                sample_count: self.sample_count,
                logged: self.logged,
                pose: self.pose.clone(),
                trail: Trail {
                    epoch: self.trail_epoch,
                    start: self.trail_start,
                    capacity: self.cfg.trail_capacity,
                    points: self.trail.iter().copied().collect(),
                },
                annotations: self.annotations.values().cloned().collect(),
                anatomy_mode: self.anatomy_mode,
                slice: self.slice.clone(),
                metrics: self.metrics.clone(),
                registration: self.registration.as_ref().map(|r| r.info.clone()),
                captures: self.captures.values().cloned().collect(),
                ct_fiducial_labels: self.ct_fiducials.keys().cloned().collect(),
                meshes: self.meshes.clone(),
                decimation_mm: self.cfg.decimation_mm,
            }),
        }
    }
}
