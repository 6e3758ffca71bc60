//! Headless viewer: connects to the WebSocket channel, keeps a
//! [`ViewerState`] in step with the server and issues commands.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::time::Duration;

use futures::{SinkExt, StreamExt};
use thiserror::Error;
use tokio::net::TcpStream;
use tokio_tungstenite::tungstenite::Message;
use tokio_tungstenite::{MaybeTlsStream, WebSocketStream};

use crate::protocol::{
    AnatomyMode, AnnotationOp, Command, FiducialCapture, LiveMetrics, MeshUrls, Pose, RegistrationInfo, ServerMsg,
    SliceDescriptor, Snapshot, StoneAnnotation, Trail,
};

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("websocket: {0}")]
    Ws(#[from] tokio_tungstenite::tungstenite::Error),
    #[error("connection closed")]
    Closed,
    #[error("bad server message: {0}")]
    Json(#[from] serde_json::Error),
    #[error("expected a snapshot first, got {0}")]
    NoSnapshot(String),
    #[error("timed out")]
    Timeout,
    #[error("http: {0}")]
    Http(#[from] reqwest::Error),
    #[error("command {req_id} failed: {error}")]
    Rejected { req_id: u64, error: String },
}

/// What a viewer knows, rebuilt from one snapshot plus the messages after it.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewerState {
    pub seq: u64,
    pub session_id: String,
    pub sample_count: u64,
    pub logged: u64,
    pub pose: Option<Pose>,
    pub trail: Trail,
    pub annotations: BTreeMap<u64, StoneAnnotation>,
    pub anatomy_mode: AnatomyMode,
    pub slice: Option<SliceDescriptor>,
    pub metrics: Option<LiveMetrics>,
    pub registration: Option<RegistrationInfo>,
    pub captures: BTreeMap<String, FiducialCapture>,
    pub ct_fiducial_labels: Vec<String>,
    pub meshes: MeshUrls,
    pub decimation_mm: f64,
}

impl ViewerState {
    pub fn from_snapshot(seq: u64, s: &Snapshot) -> Self {
        ViewerState {
            seq,
            session_id: s.session_id.clone(),
            sample_count: s.sample_count,
            logged: s.logged,
            pose: s.pose.clone(),
            trail: s.trail.clone(),
            annotations: s.annotations.iter().map(|a| (a.id, a.clone())).collect(),
            anatomy_mode: s.anatomy_mode,
            slice: s.slice.clone(),
            metrics: s.metrics.clone(),
            registration: s.registration.clone(),
            captures: s.captures.iter().map(|c| (c.label.clone(), c.clone())).collect(),
            ct_fiducial_labels: s.ct_fiducial_labels.clone(),
            meshes: s.meshes.clone(),
            decimation_mm: s.decimation_mm,
        }
    }

    /// Applies one message. Anything at or below the current sequence number
    /// is ignored, so replays are harmless. Returns whether it changed state.
    pub fn apply(&mut self, msg: &ServerMsg) -> bool {
        let Some(seq) = msg.seq() else {
            return false;
        };
        if let ServerMsg::Snapshot { state, .. } = msg {
            if seq < self.seq {
                return false;
            }
            *self = ViewerState::from_snapshot(seq, state);
            return true;
        }
        if seq <= self.seq {
            return false;
        }
        self.seq = seq;
        match msg {
            ServerMsg::Pose { pose, .. } => {
                self.sample_count = pose.sample_count;
                self.pose = Some(pose.clone());
            }
            ServerMsg::TrailDelta {
                epoch,
                reset,
                start,
                capacity,
                points,
                ..
            } => {
                if *reset || *epoch != self.trail.epoch {
                    self.trail = Trail {
                        epoch: *epoch,
                        start: *start,
                        capacity: *capacity,
                        points: Vec::new(),
                    };
                }
                self.trail.capacity = *capacity;
                let end = self.trail.start + self.trail.points.len() as u64;
                let skip = end.saturating_sub(*start) as usize;
                self.trail.points.extend(points.iter().skip(skip));
                let excess = self.trail.points.len().saturating_sub(*capacity);
                if excess > 0 {
                    self.trail.points.drain(..excess);
                    self.trail.start += excess as u64;
                }
            }
            ServerMsg::Annotation { op, id, annotation, .. } => match (op, annotation) {
                (AnnotationOp::Add, Some(a)) => {
                    self.annotations.insert(*id, a.clone());
                }
                _ => {
                    self.annotations.remove(id);
                }
            },
            ServerMsg::Slice { descriptor, .. } => self.slice = Some(descriptor.clone()),
            ServerMsg::Metrics { metrics, .. } => self.metrics = Some(metrics.clone()),
            ServerMsg::Registration { registration, .. } => {
                self.registration = Some(registration.clone());
                self.metrics = None;
            }
            ServerMsg::Capture { capture, .. } => {
                self.captures.insert(capture.label.clone(), capture.clone());
            }
            ServerMsg::AnatomyMode { mode, .. } => self.anatomy_mode = *mode,
            ServerMsg::Ack { logged, .. } => self.logged = *logged,
            ServerMsg::Snapshot { .. } | ServerMsg::Reply { .. } => unreachable!(),
        }
        true
    }
}

pub struct ViewerClient {
    ws: WebSocketStream<MaybeTlsStream<TcpStream>>,
    http: reqwest::Client,
    base: String,
    next_req: u64,
    pub state: ViewerState,
    /// Highest `logged` count ever acknowledged on this connection.
    pub max_acked: u64,
    /// Highest sample count ever seen, for regression checks.
    pub max_sample_count: u64,
}

impl ViewerClient {
    pub async fn connect(addr: SocketAddr) -> Result<Self, ClientError> {
        let (mut ws, _) = tokio_tungstenite::connect_async(format!("ws://{addr}/ws")).await?;
        let first = read_msg(&mut ws).await?;
        let ServerMsg::Snapshot { seq, state } = &first else {
            return Err(ClientError::NoSnapshot(first.to_line()));
        };
        let state = ViewerState::from_snapshot(*seq, state);
        Ok(ViewerClient {
            ws,
            http: reqwest::Client::new(),
            base: format!("http://{addr}"),
            next_req: 1,
            max_acked: state.logged,
            max_sample_count: state.sample_count,
            state,
        })
    }

    fn observe(&mut self, msg: &ServerMsg) {
        self.state.apply(msg);
        self.max_acked = self.max_acked.max(self.state.logged);
        self.max_sample_count = self.max_sample_count.max(self.state.sample_count);
    }

    /// Reads and applies the next message.
    pub async fn next(&mut self) -> Result<ServerMsg, ClientError> {
        let msg = read_msg(&mut self.ws).await?;
        self.observe(&msg);
        Ok(msg)
    }

    /// Reads until `done` holds for the state, or the timeout passes.
    pub async fn wait_until(
        &mut self,
        timeout: Duration,
        mut done: impl FnMut(&ViewerState) -> bool,
    ) -> Result<(), ClientError> {
        let deadline = tokio::time::Instant::now() + timeout;
        while !done(&self.state) {
            match tokio::time::timeout_at(deadline, self.next()).await {
                Ok(r) => {
                    r?;
                }
                Err(_) => return Err(ClientError::Timeout),
            }
        }
        Ok(())
    }

    /// Sends a command and applies incoming messages until its reply arrives.
    /// A rejected command is an error.
    pub async fn command(&mut self, mut cmd: Command) -> Result<Option<serde_json::Value>, ClientError> {
        let req = self.next_req;
        self.next_req += 1;
        cmd.set_req_id(req);
        let text = serde_json::to_string(&cmd)?;
        self.ws.send(Message::Text(text.into())).await?;
        loop {
            if let ServerMsg::Reply {
                req_id, ok, error, data, ..
            } = self.next().await?
            {
                if req_id != req {
                    continue;
                }
                return match ok {
                    true => Ok(data),
                    false => Err(ClientError::Rejected {
                        req_id,
                        error: error.unwrap_or_default(),
                    }),
                };
            }
        }
    }

    /// GET relative to the server, e.g. a slice or mesh URL.
    pub async fn fetch(&self, path: &str) -> Result<Vec<u8>, ClientError> {
        let resp = self.http.get(format!("{}{path}", self.base)).send().await?.error_for_status()?;
        Ok(resp.bytes().await?.to_vec())
    }

    pub async fn close(mut self) {
        let _ = self.ws.close(None).await;
    }
}

async fn read_msg(ws: &mut WebSocketStream<MaybeTlsStream<TcpStream>>) -> Result<ServerMsg, ClientError> {
    loop {
        match ws.next().await {
            Some(Ok(Message::Text(t))) => return Ok(serde_json::from_str(&t)?),
            Some(Ok(Message::Close(_))) | None => return Err(ClientError::Closed),
            Some(Ok(_)) => continue,
            Some(Err(e)) => return Err(e.into()),
        }
    }
}
