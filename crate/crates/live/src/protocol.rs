//! Viewer channel messages. Each WebSocket text frame carries one JSON object
//! on a single line; server messages are tagged by `type`, commands by `cmd`.
//!
//! Every state-changing server message carries a sequence number. A snapshot
//! reports the sequence number it reflects, so a client applies only messages
//! with a larger one.

use std::collections::BTreeMap;

use scopenav_core::geometry::TrajectoryMetrics;
use scopenav_core::volume::SliceGeometry;
use serde::{Deserialize, Serialize};

pub type Xyz = [f64; 3];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnatomyMode {
    #[default]
    Full,
    CollectingSystem,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoneAnnotation {
    pub id: u64,
    pub position: Xyz,
    pub color: [u8; 4],
    pub label: String,
    /// Seconds since the Unix epoch.
    pub created_at: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FiducialCapture {
    pub label: String,
    pub tracker_point: Xyz,
    pub n_samples_averaged: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistrationInfo {
    pub fre_mm: f64,
    /// Row-major homogeneous tracker→CT matrix.
    pub matrix: [[f64; 4]; 4],
    pub residuals_mm: BTreeMap<String, f64>,
    /// Number of samples ingested before the registration took effect.
    pub registered_at_sample: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LiveMetrics {
    /// Total samples ingested when the computation started.
    pub sample_count: u64,
    #[serde(flatten)]
    pub metrics: TrajectoryMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PlaneRequest {
    Axis {
        axis: usize,
        index: usize,
    },
    Oblique {
        origin: Xyz,
        u: Xyz,
        v: Xyz,
        width: usize,
        height: usize,
        spacing: [f64; 2],
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceDescriptor {
    /// Content id; the PNG is served at `url`.
    pub id: String,
    pub url: String,
    pub geometry: SliceGeometry,
    pub window: f64,
    pub level: f64,
    pub request: PlaneRequest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    /// Session-relative receive time, seconds.
    pub t: f64,
    pub sample_count: u64,
    pub raw_xyz: Xyz,
    pub ct_xyz: Option<Xyz>,
}

/// The trail as a window onto an append-only sequence: `points[i]` has
/// global index `start + i` within `epoch`. A registration opens a new epoch.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Trail {
    pub epoch: u64,
    pub start: u64,
    pub capacity: usize,
    pub points: Vec<Xyz>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MeshUrls {
    pub anatomy: Option<String>,
    pub collecting_system: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub session_id: String,
    pub sample_count: u64,
    pub logged: u64,
    pub pose: Option<Pose>,
    pub trail: Trail,
    pub annotations: Vec<StoneAnnotation>,
    pub anatomy_mode: AnatomyMode,
    pub slice: Option<SliceDescriptor>,
    pub metrics: Option<LiveMetrics>,
    pub registration: Option<RegistrationInfo>,
    pub captures: Vec<FiducialCapture>,
    pub ct_fiducial_labels: Vec<String>,
    pub meshes: MeshUrls,
    pub decimation_mm: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnnotationOp {
    Add,
    Remove,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerMsg {
    Snapshot {
        seq: u64,
        state: Box<Snapshot>,
    },
    Pose {
        seq: u64,
        pose: Pose,
    },
    TrailDelta {
        seq: u64,
        epoch: u64,
        reset: bool,
        start: u64,
        capacity: usize,
        points: Vec<Xyz>,
    },
    Annotation {
        seq: u64,
        op: AnnotationOp,
        id: u64,
        annotation: Option<StoneAnnotation>,
    },
    Slice {
        seq: u64,
        descriptor: SliceDescriptor,
    },
    Metrics {
        seq: u64,
        metrics: LiveMetrics,
    },
    Registration {
        seq: u64,
        registration: RegistrationInfo,
    },
    Capture {
        seq: u64,
        capture: FiducialCapture,
    },
    AnatomyMode {
        seq: u64,
        mode: AnatomyMode,
    },
    /// Samples durably written to the session log.
    Ack {
        seq: u64,
        logged: u64,
    },
    /// Answer to one command, sent only to the connection that issued it.
    Reply {
        req_id: u64,
        ok: bool,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        error: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        data: Option<serde_json::Value>,
    },
}

impl ServerMsg {
    pub fn seq(&self) -> Option<u64> {
        match self {
            ServerMsg::Snapshot { seq, .. }
            | ServerMsg::Pose { seq, .. }
            | ServerMsg::TrailDelta { seq, .. }
            | ServerMsg::Annotation { seq, .. }
            | ServerMsg::Slice { seq, .. }
            | ServerMsg::Metrics { seq, .. }
            | ServerMsg::Registration { seq, .. }
            | ServerMsg::Capture { seq, .. }
            | ServerMsg::AnatomyMode { seq, .. }
            | ServerMsg::Ack { seq, .. } => Some(*seq),
            ServerMsg::Reply { .. } => None,
        }
    }

    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("server messages always serialize")
    }

    pub fn ok(req_id: u64, data: Option<serde_json::Value>) -> Self {
        ServerMsg::Reply {
            req_id,
            ok: true,
            error: None,
            data,
        }
    }

    pub fn err(req_id: u64, error: impl ToString) -> Self {
        ServerMsg::Reply {
            req_id,
            ok: false,
            error: Some(error.to_string()),
            data: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "cmd", rename_all = "snake_case")]
pub enum Command {
    CaptureFiducial {
        #[serde(default)]
        req_id: u64,
        label: String,
        #[serde(default)]
        window_ms: Option<u64>,
    },
    /// Pairs the captures with CT fiducials by label. `ct_points` overrides
    /// the session's fiducial file.
    Register {
        #[serde(default)]
        req_id: u64,
        #[serde(default)]
        ct_points: Option<BTreeMap<String, Xyz>>,
    },
    /// Places a stone marker; without `position` it goes at the current
    /// registered scope tip.
    Annotate {
        #[serde(default)]
        req_id: u64,
        #[serde(default)]
        position: Option<Xyz>,
        #[serde(default)]
        color: Option<[u8; 4]>,
        #[serde(default)]
        label: Option<String>,
    },
    RemoveAnnotation {
        #[serde(default)]
        req_id: u64,
        id: u64,
    },
    SetSlice {
        #[serde(default)]
        req_id: u64,
        plane: PlaneRequest,
        #[serde(default)]
        window: Option<f64>,
        #[serde(default)]
        level: Option<f64>,
    },
    SetAnatomyMode {
        #[serde(default)]
        req_id: u64,
        mode: AnatomyMode,
    },
    Export {
        #[serde(default)]
        req_id: u64,
    },
    /// Requests a fresh snapshot on this connection.
    Resync {
        #[serde(default)]
        req_id: u64,
    },
}

impl Command {
    pub fn req_id(&self) -> u64 {
        match self {
            Command::CaptureFiducial { req_id, .. }
            | Command::Register { req_id, .. }
            | Command::Annotate { req_id, .. }
            | Command::RemoveAnnotation { req_id, .. }
            | Command::SetSlice { req_id, .. }
            | Command::SetAnatomyMode { req_id, .. }
            | Command::Export { req_id }
            | Command::Resync { req_id } => *req_id,
        }
    }

    pub fn set_req_id(&mut self, id: u64) {
        match self {
            Command::CaptureFiducial { req_id, .. }
            | Command::Register { req_id, .. }
            | Command::Annotate { req_id, .. }
            | Command::RemoveAnnotation { req_id, .. }
            | Command::SetSlice { req_id, .. }
            | Command::SetAnatomyMode { req_id, .. }
            | Command::Export { req_id }
            | Command::Resync { req_id } => *req_id = id,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wire_shape() {
        let m = ServerMsg::Ack { seq: 4, logged: 100 };
        assert_eq!(m.to_line(), r#"{"type":"ack","seq":4,"logged":100}"#);
        let c: Command = serde_json::from_str(r#"{"cmd":"capture_fiducial","req_id":3,"label":"F1"}"#).unwrap();
        assert_eq!(
            c,
            Command::CaptureFiducial {
                req_id: 3,
                label: "F1".into(),
                window_ms: None
            }
        );
        let c: Command =
            serde_json::from_str(r#"{"cmd":"set_slice","plane":{"kind":"axis","axis":2,"index":5}}"#).unwrap();
        assert_eq!(c.req_id(), 0);
    }

    #[test]
    fn metrics_flatten_round_trip() {
        let m = ServerMsg::Metrics {
            seq: 9,
            metrics: LiveMetrics {
                sample_count: 10,
                metrics: TrajectoryMetrics {
                    n_samples: 8,
                    n_inliers: 7,
                    outlier_fraction: Some(0.125),
                    hull_volume_mm3: Some(1000.0000000000001),
                    path_length_mm: None,
                },
            },
        };
        let line = m.to_line();
        assert!(line.contains(r#""hull_volume_mm3":1000.0000000000001"#));
        assert_eq!(serde_json::from_str::<ServerMsg>(&line).unwrap(), m);
    }
}
