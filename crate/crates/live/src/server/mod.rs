//! The navigation server: an IGTL listener for poses, a single task that owns
//! the session state, and an HTTP/WebSocket endpoint for viewers.
//!
//! All state changes go through the owner task as messages; viewers get a
//! snapshot on connect and the owner's broadcast stream afterwards.

mod config;
mod ingest;
mod owner;
mod state;
mod web;

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fs;
use std::io::{self, BufReader};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use nalgebra::{Point3, Vector3};
use scopenav_core::geometry::parse_obj;
use scopenav_core::registration::read_labeled_points;
use scopenav_core::volume::{load_nrrd, reslice_plane, slice_axis, window_level, SliceGeometry, VolumeError};
use scopenav_core::{TrajectoryMetrics, Volume};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use tokio::net::TcpListener;
use tokio::sync::{broadcast, mpsc, oneshot, watch};
use tokio::task::JoinHandle;

pub use config::SessionConfig;
pub use state::{CommandError, Registered, SessionState, StateConfig, PALETTE};

use crate::protocol::{Command, MeshUrls, PlaneRequest, ServerMsg};
use crate::session::{SessionError, TrajectoryLog, TRAJECTORY_FILE};
use owner::{Input, Owner};

pub const ANATOMY_MESH_URL: &str = "/meshes/anatomy.obj";
pub const COLLECTING_SYSTEM_MESH_URL: &str = "/meshes/collecting_system.obj";
/// Slice PNGs kept for GET after their descriptor was replaced.
const SLICE_CACHE_SIZE: usize = 64;
const BROADCAST_CAPACITY: usize = 4096;
const INPUT_CAPACITY: usize = 4096;

#[derive(Debug, Error)]
pub enum ServerError {
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {message}")]
    Asset { path: PathBuf, message: String },
    #[error("cannot bind {addr}: {source}")]
    Bind {
        addr: String,
        #[source]
        source: io::Error,
    },
    #[error(transparent)]
    Session(#[from] SessionError),
    #[error("export failed: {0}")]
    Export(String),
    #[error("server is not running")]
    Stopped,
}

impl ServerError {
    pub fn is_network(&self) -> bool {
        matches!(self, ServerError::Bind { .. })
    }
}

/// Loaded session inputs.
pub(crate) struct Assets {
    pub anatomy_obj: Option<Arc<[u8]>>,
    pub collecting_system_obj: Option<Arc<[u8]>>,
    pub volume: Option<Arc<Volume>>,
    pub ct_fiducials: BTreeMap<String, Point3<f64>>,
}

fn asset_err(path: &Path, message: impl ToString) -> ServerError {
    ServerError::Asset {
        path: path.to_path_buf(),
        message: message.to_string(),
    }
}

fn load_mesh_bytes(path: &Path) -> Result<Arc<[u8]>, ServerError> {
    let bytes = fs::read(path).map_err(|e| asset_err(path, e))?;
    parse_obj(&bytes[..]).map_err(|e| asset_err(path, e))?;
    Ok(bytes.into())
}

impl Assets {
    fn load(cfg: &SessionConfig) -> Result<Self, ServerError> {
        let anatomy_obj = cfg.anatomy_mesh.as_deref().map(load_mesh_bytes).transpose()?;
        let collecting_system_obj = cfg.collecting_system_mesh.as_deref().map(load_mesh_bytes).transpose()?;
        let volume = match &cfg.volume {
            Some(p) => Some(Arc::new(load_nrrd(p).map_err(|e| asset_err(p, e))?)),
            None => None,
        };
        let mut ct_fiducials = BTreeMap::new();
        if let Some(p) = &cfg.ct_fiducials {
            let f = fs::File::open(p).map_err(|e| asset_err(p, e))?;
            for (label, point) in read_labeled_points(BufReader::new(f)).map_err(|e| asset_err(p, e))? {
                if ct_fiducials.insert(label.clone(), point).is_some() {
                    return Err(asset_err(p, format!("duplicate fiducial label {label:?}")));
                }
            }
        }
        Ok(Assets {
            anatomy_obj,
            collecting_system_obj,
            volume,
            ct_fiducials,
        })
    }

    fn mesh_urls(&self) -> MeshUrls {
        MeshUrls {
            anatomy: self.anatomy_obj.as_ref().map(|_| ANATOMY_MESH_URL.to_string()),
            collecting_system: self.collecting_system_obj.as_ref().map(|_| COLLECTING_SYSTEM_MESH_URL.to_string()),
        }
    }
}

/// Rendered slice PNGs by content id, oldest evicted first.
#[derive(Default)]
pub(crate) struct SliceCache {
    images: HashMap<String, Arc<[u8]>>,
    order: VecDeque<String>,
}

impl SliceCache {
    fn insert(&mut self, id: String, png: Arc<[u8]>) {
        if self.images.insert(id.clone(), png).is_none() {
            self.order.push_back(id);
        }
        while self.order.len() > SLICE_CACHE_SIZE {
            if let Some(old) = self.order.pop_front() {
                self.images.remove(&old);
            }
        }
    }

    pub fn get(&self, id: &str) -> Option<Arc<[u8]>> {
        self.images.get(id).cloned()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedSlice {
    pub geometry: SliceGeometry,
    pub png: Vec<u8>,
    /// First 16 hex digits of the PNG's SHA-256.
    pub content_id: String,
}

/// Extracts the requested plane, applies the window and encodes a PNG.
pub fn render_slice(
    volume: &Volume,
    plane: &PlaneRequest,
    window: f64,
    level: f64,
) -> Result<RenderedSlice, VolumeError> {
    let image = match plane {
        PlaneRequest::Axis { axis, index } => slice_axis(volume, *axis, *index)?,
        PlaneRequest::Oblique {
            origin,
            u,
            v,
            width,
            height,
            spacing,
        } => reslice_plane(
            volume,
            Point3::from(*origin),
            Vector3::from(*u),
            Vector3::from(*v),
            [*width, *height],
            *spacing,
        )?,
    };
    let png = window_level(&image, window, level)?.to_png();
    let digest = Sha256::digest(&png);
    let content_id = digest[..8].iter().map(|b| format!("{b:02x}")).collect();
    Ok(RenderedSlice {
        geometry: image.geometry(),
        png,
        content_id,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportSummary {
    pub session_id: String,
    pub session_dir: PathBuf,
    pub sample_count: u64,
    pub metrics: Option<TrajectoryMetrics>,
}

/// What the web layer and the handle share.
#[derive(Clone)]
pub(crate) struct Shared {
    pub inputs: mpsc::Sender<Input>,
    pub slices: Arc<Mutex<SliceCache>>,
    pub anatomy_obj: Option<Arc<[u8]>>,
    pub collecting_system_obj: Option<Arc<[u8]>>,
}

impl Shared {
    pub async fn command(&self, cmd: Command) -> ServerMsg {
        let req_id = cmd.req_id();
        let (reply, rx) = oneshot::channel();
        if self.inputs.send(Input::Command { cmd, reply }).await.is_err() {
            return ServerMsg::err(req_id, ServerError::Stopped);
        }
        rx.await.unwrap_or_else(|_| ServerMsg::err(req_id, ServerError::Stopped))
    }

    /// A snapshot line and a receiver positioned right after it.
    pub async fn subscribe(&self) -> Option<(String, broadcast::Receiver<Arc<str>>)> {
        let (reply, rx) = oneshot::channel();
        self.inputs.send(Input::Subscribe { reply }).await.ok()?;
        rx.await.ok()
    }
}

/// A running session. Dropping the handle leaves the server running until
/// the runtime shuts down; call [`ServerHandle::shutdown`] to stop it.
pub struct ServerHandle {
    pub session_id: String,
    pub session_dir: PathBuf,
    pub igtl_addr: SocketAddr,
    pub viewer_addr: SocketAddr,
    shared: Shared,
    stop: watch::Sender<bool>,
    tasks: Vec<JoinHandle<()>>,
}

impl ServerHandle {
    pub async fn command(&self, cmd: Command) -> ServerMsg {
        self.shared.command(cmd).await
    }

    /// The current state as a snapshot message.
    pub async fn snapshot(&self) -> Result<ServerMsg, ServerError> {
        let (line, _) = self.shared.subscribe().await.ok_or(ServerError::Stopped)?;
        Ok(serde_json::from_str(&line).expect("snapshot lines are produced by this crate"))
    }

    /// Writes the export files and returns the final metrics.
    pub async fn export(&self) -> Result<ExportSummary, ServerError> {
        let (reply, rx) = oneshot::channel();
        self.shared
            .inputs
            .send(Input::Export { reply })
            .await
            .map_err(|_| ServerError::Stopped)?;
        rx.await.map_err(|_| ServerError::Stopped)?.map_err(ServerError::Export)
    }

    /// Exports, then stops every task.
    pub async fn shutdown(self) -> Result<ExportSummary, ServerError> {
        let summary = self.export().await;
        let _ = self.stop.send(true);
        for t in self.tasks {
            let _ = t.await;
        }
        summary
    }
}

async fn bind(host: &str, port: u16) -> Result<TcpListener, ServerError> {
    let addr = format!("{host}:{port}");
    TcpListener::bind(&addr).await.map_err(|source| ServerError::Bind { addr, source })
}

/// Loads the assets, binds both listeners, opens the session log and spawns
/// the server tasks. Port 0 binds an ephemeral port; the handle reports the
/// actual addresses.
pub async fn start_session(cfg: SessionConfig) -> Result<ServerHandle, ServerError> {
    cfg.validate()?;
    let assets = Assets::load(&cfg)?;
    let igtl = bind(&cfg.bind, cfg.igtl_port).await?;
    let viewer = bind(&cfg.bind, cfg.viewer_port).await?;
    let igtl_addr = igtl.local_addr().map_err(|source| ServerError::Bind {
        addr: cfg.bind.clone(),
        source,
    })?;
    let viewer_addr = viewer.local_addr().map_err(|source| ServerError::Bind {
        addr: cfg.bind.clone(),
        source,
    })?;

    let session_id = uuid::Uuid::new_v4().simple().to_string();
    let session_dir = cfg.session_root.join(&session_id);
    fs::create_dir_all(&session_dir).map_err(|source| SessionError::Io {
        path: session_dir.clone(),
        source,
    })?;
    let log = TrajectoryLog::create(&session_dir.join(TRAJECTORY_FILE))?;

    let (inputs, input_rx) = mpsc::channel(INPUT_CAPACITY);
    let (stop, stop_rx) = watch::channel(false);
    let slices = Arc::new(Mutex::new(SliceCache::default()));
    let shared = Shared {
        inputs: inputs.clone(),
        slices: slices.clone(),
        anatomy_obj: assets.anatomy_obj.clone(),
        collecting_system_obj: assets.collecting_system_obj.clone(),
    };
    let owner = Owner::new(
        &cfg,
        session_id.clone(),
        session_dir.clone(),
        log,
        &assets,
        inputs.clone(),
        slices,
        broadcast::channel(BROADCAST_CAPACITY).0,
    )?;

    let tasks = vec![
        tokio::spawn(owner.run(input_rx, stop_rx.clone())),
        tokio::spawn(ingest::accept_loop(igtl, inputs, stop_rx.clone())),
        tokio::spawn(web::serve(viewer, shared.clone(), stop_rx)),
    ];
    tracing::info!(%session_id, %igtl_addr, %viewer_addr, dir = %session_dir.display(), "session started");
    Ok(ServerHandle {
        session_id,
        session_dir,
        igtl_addr,
        viewer_addr,
        shared,
        stop,
        tasks,
    })
}
