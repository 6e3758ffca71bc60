//! The single writer of the session state.

use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use scopenav_core::geometry::{analyze_points, write_trajectory};
use scopenav_core::{TrackedSample, Volume};
use tokio::sync::{broadcast, mpsc, oneshot, watch};

use super::state::{CommandError, SessionState, StateConfig};
use super::{render_slice, Assets, ExportSummary, ServerError, SessionConfig, SliceCache};
use crate::protocol::{Command, LiveMetrics, ServerMsg, SliceDescriptor};
use crate::session::{
    read_log, write_annotations, write_manifest, write_atomic, write_registration, Manifest, ManifestMetrics,
    ManifestRegistration, TrajectoryLog, REGISTRATION_FILE, TRAJECTORY_CT_FILE,
};

/// Poses written and acknowledged together.
pub(crate) const MAX_BATCH: usize = 100;

pub(crate) enum Input {
    Pose(TrackedSample),
    Command {
        cmd: Command,
        reply: oneshot::Sender<ServerMsg>,
    },
    Subscribe {
        reply: oneshot::Sender<(String, broadcast::Receiver<Arc<str>>)>,
    },
    Export {
        reply: oneshot::Sender<Result<ExportSummary, String>>,
    },
    MetricsReady {
        epoch: u64,
        metrics: LiveMetrics,
    },
    SliceReady {
        descriptor: SliceDescriptor,
        png: Arc<[u8]>,
        reply: oneshot::Sender<ServerMsg>,
        req_id: u64,
    },
}

pub(crate) struct Owner {
    state: SessionState,
    dir: PathBuf,
    log: TrajectoryLog,
    manifest: Manifest,
    clock: Instant,
    threshold: f64,
    metrics_interval: Duration,
    window: f64,
    level: f64,
    volume: Option<Arc<Volume>>,
    slices: Arc<Mutex<SliceCache>>,
    inputs: mpsc::Sender<Input>,
    out: broadcast::Sender<Arc<str>>,
    /// Bumped by every registration; metrics computed for an older one are
    /// discarded.
    reg_epoch: u64,
    metrics_inflight: bool,
    metrics_at: u64,
}

fn unix_now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

impl Owner {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        cfg: &SessionConfig,
        session_id: String,
        dir: PathBuf,
        log: TrajectoryLog,
        assets: &Assets,
        inputs: mpsc::Sender<Input>,
        slices: Arc<Mutex<SliceCache>>,
        out: broadcast::Sender<Arc<str>>,
    ) -> Result<Self, ServerError> {
        let manifest = Manifest::new(session_id.clone(), unix_now(), cfg.threshold, cfg.decimation_mm);
        write_manifest(&dir, &manifest)?;
        let state = SessionState::new(
            session_id,
            StateConfig {
                decimation_mm: cfg.decimation_mm,
                trail_capacity: cfg.trail_capacity,
                capture_window_ms: cfg.capture_window_ms,
            },
            assets.ct_fiducials.clone(),
            assets.mesh_urls(),
        );
        Ok(Owner {
            state,
            dir,
            log,
            manifest,
            clock: Instant::now(),
            threshold: cfg.threshold,
            metrics_interval: Duration::from_millis(cfg.metrics_interval_ms),
            window: cfg.window,
            level: cfg.level,
            volume: assets.volume.clone(),
            slices,
            inputs,
            out,
            reg_epoch: 0,
            metrics_inflight: false,
            metrics_at: 0,
        })
    }

    fn now(&self) -> f64 {
        self.clock.elapsed().as_secs_f64()
    }

    fn send(&self, msg: &ServerMsg) {
        // no receivers is fine
        let _ = self.out.send(Arc::from(msg.to_line()));
    }

    fn send_all(&self, msgs: &[ServerMsg]) {
        for m in msgs {
            self.send(m);
        }
    }

    pub async fn run(mut self, mut rx: mpsc::Receiver<Input>, mut stop: watch::Receiver<bool>) {
        let mut tick = tokio::time::interval(self.metrics_interval);
        tick.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
        loop {
            tokio::select! {
                biased;
                _ = stop.changed() => break,
                input = rx.recv() => match input {
                    Some(Input::Pose(first)) => {
                        let mut batch = vec![first];
                        let mut deferred = None;
                        while batch.len() < MAX_BATCH {
                            match rx.try_recv() {
                                Ok(Input::Pose(s)) => batch.push(s),
                                Ok(other) => {
                                    deferred = Some(other);
                                    break;
                                }
                                Err(_) => break,
                            }
                        }
                        self.ingest_batch(batch);
                        if let Some(input) = deferred {
                            self.handle(input).await;
                        }
                    }
                    Some(input) => self.handle(input).await,
                    None => break,
                },
                _ = tick.tick() => self.start_metrics(),
            }
        }
        tracing::info!(samples = self.state.sample_count(), "session owner stopped");
    }

    /// Applies the poses, appends them to the log, and acknowledges them only
    /// once the write succeeded.
    fn ingest_batch(&mut self, mut batch: Vec<TrackedSample>) {
        for s in &mut batch {
            s.t = self.now();
            let msg = self.state.ingest(s);
            self.send(&msg);
        }
        match self.log.append(&batch) {
            Ok(rows) => {
                let msgs = self.state.end_batch(rows);
                self.send_all(&msgs);
            }
            Err(e) => tracing::error!("session log write failed, batch not acknowledged: {e}"),
        }
    }

    fn start_metrics(&mut self) {
        let count = self.state.sample_count();
        if self.metrics_inflight || self.state.registration().is_none() || count == self.metrics_at {
            return;
        }
        self.metrics_inflight = true;
        self.metrics_at = count;
        let points = self.state.ct_points().to_vec();
        let threshold = self.threshold;
        let epoch = self.reg_epoch;
        let inputs = self.inputs.clone();
        tokio::spawn(async move {
            let metrics = tokio::task::spawn_blocking(move || analyze_points(&points, threshold)).await;
            if let Ok(metrics) = metrics {
                let metrics = LiveMetrics {
                    sample_count: count,
                    metrics,
                };
                let _ = inputs.send(Input::MetricsReady { epoch, metrics }).await;
            }
        });
    }

    async fn handle(&mut self, input: Input) {
        match input {
            Input::Pose(s) => self.ingest_batch(vec![s]),
            Input::Subscribe { reply } => {
                let line = self.state.snapshot().to_line();
                let _ = reply.send((line, self.out.subscribe()));
            }
            Input::Command { cmd, reply } => self.command(cmd, reply),
            Input::Export { reply } => {
                let _ = reply.send(self.export().map_err(|e| e.to_string()));
            }
            Input::MetricsReady { epoch, metrics } => {
                self.metrics_inflight = false;
                if epoch == self.reg_epoch {
                    if let Some(msg) = self.state.set_metrics(metrics) {
                        self.send(&msg);
                    }
                }
            }
            Input::SliceReady {
                descriptor,
                png,
                reply,
                req_id,
            } => {
                self.slices.lock().expect("slice cache lock").insert(descriptor.id.clone(), png);
                let msg = self.state.set_slice(descriptor.clone());
                self.send(&msg);
                let _ = reply.send(ServerMsg::ok(req_id, serde_json::to_value(&descriptor).ok()));
            }
        }
    }

    /// Runs one command. Slice rendering replies later, from `SliceReady`.
    fn command(&mut self, cmd: Command, reply: oneshot::Sender<ServerMsg>) {
        let req_id = cmd.req_id();
        let result: Result<Option<serde_json::Value>, CommandError> = match cmd {
            Command::CaptureFiducial { label, window_ms, .. } => {
                let now = self.now();
                self.state.capture_fiducial(&label, window_ms, now).map(|(cap, msg)| {
                    self.send(&msg);
                    serde_json::to_value(cap).ok()
                })
            }
            Command::Register { ct_points, .. } => self.register(ct_points.as_ref()),
            Command::Annotate {
                position, color, label, ..
            } => self.state.annotate(position, color, label, unix_now()).and_then(|(a, msg)| {
                self.send(&msg);
                self.persist_annotations()?;
                Ok(serde_json::to_value(a).ok())
            }),
            Command::RemoveAnnotation { id, .. } => self.state.remove_annotation(id).and_then(|msg| {
                self.send(&msg);
                self.persist_annotations()?;
                Ok(None)
            }),
            Command::SetAnatomyMode { mode, .. } => {
                let msg = self.state.set_anatomy_mode(mode);
                self.send(&msg);
                self.manifest.anatomy_mode = mode;
                Ok(None)
            }
            Command::SetSlice {
                plane, window, level, ..
            } => {
                let Some(volume) = self.volume.clone() else {
                    let _ = reply.send(ServerMsg::err(req_id, CommandError::NoVolume));
                    return;
                };
                let (window, level) = (window.unwrap_or(self.window), level.unwrap_or(self.level));
                let inputs = self.inputs.clone();
                tokio::spawn(async move {
                    let plane2 = plane.clone();
                    let rendered =
                        tokio::task::spawn_blocking(move || render_slice(&volume, &plane2, window, level)).await;
                    match rendered {
                        Ok(Ok(r)) => {
                            let descriptor = SliceDescriptor {
                                url: format!("/slices/{}.png", r.content_id),
                                id: r.content_id,
                                geometry: r.geometry,
                                window,
                                level,
                                request: plane,
                            };
                            let _ = inputs
                                .send(Input::SliceReady {
                                    descriptor,
                                    png: r.png.into(),
                                    reply,
                                    req_id,
                                })
                                .await;
                        }
                        Ok(Err(e)) => {
                            let _ = reply.send(ServerMsg::err(req_id, CommandError::Slice(e.to_string())));
                        }
                        Err(e) => {
                            let _ = reply.send(ServerMsg::err(req_id, CommandError::Slice(e.to_string())));
                        }
                    }
                });
                return;
            }
            Command::Export { .. } => self.export().map(|s| serde_json::to_value(s).ok()),
            Command::Resync { .. } => Ok(serde_json::to_value(self.state.snapshot()).ok()),
        };
        let msg = match result {
            Ok(data) => ServerMsg::ok(req_id, data),
            Err(e) => ServerMsg::err(req_id, e),
        };
        let _ = reply.send(msg);
    }

    fn register(
        &mut self,
        ct_points: Option<&std::collections::BTreeMap<String, crate::protocol::Xyz>>,
    ) -> Result<Option<serde_json::Value>, CommandError> {
        let (info, msgs) = self.state.register(ct_points)?;
        self.reg_epoch += 1;
        self.metrics_inflight = false;
        self.metrics_at = 0;
        self.send_all(&msgs);
        let reg = self.state.registration().expect("just registered");
        write_registration(&self.dir, &reg.result.transform).map_err(|e| CommandError::Export(e.to_string()))?;
        self.manifest.registration = Some(ManifestRegistration {
            file: REGISTRATION_FILE.into(),
            registered_at_sample: info.registered_at_sample,
            fre_mm: info.fre_mm,
        });
        self.manifest.metrics = None;
        self.manifest.sample_count = self.state.sample_count();
        write_manifest(&self.dir, &self.manifest).map_err(|e| CommandError::Export(e.to_string()))?;
        Ok(serde_json::to_value(info).ok())
    }

    fn persist_annotations(&self) -> Result<(), CommandError> {
        let list: Vec<_> = self.state.annotations().cloned().collect();
        write_annotations(&self.dir, &list).map_err(|e| CommandError::Export(e.to_string()))
    }

    /// Final metrics over every registered sample, plus the export files.
    fn export(&mut self) -> Result<ExportSummary, CommandError> {
        let fail = |e: crate::session::SessionError| CommandError::Export(e.to_string());
        let count = self.state.sample_count();
        let mut final_metrics = None;
        if self.state.registration().is_some() {
            let metrics = analyze_points(self.state.ct_points(), self.threshold);
            let live = LiveMetrics {
                sample_count: count,
                metrics: metrics.clone(),
            };
            if let Some(msg) = self.state.set_metrics(live) {
                self.send(&msg);
            }
            self.metrics_at = count;
            final_metrics = Some(metrics);
        }

        if let Some(reg) = self.state.registration() {
            let at = reg.info.registered_at_sample;
            let log = read_log(&self.dir.join(&self.manifest.trajectory_file)).map_err(fail)?;
            let ct = log.select(|i| i as u64 >= at).transformed(&reg.result.transform);
            let mut buf = Vec::new();
            write_trajectory(&mut buf, &ct).expect("writing to a Vec cannot fail");
            write_atomic(&self.dir.join(TRAJECTORY_CT_FILE), &buf).map_err(fail)?;
        }
        self.persist_annotations()?;
        self.manifest.sample_count = count;
        self.manifest.exported_at = Some(unix_now());
        self.manifest.anatomy_mode = self.state.anatomy_mode();
        self.manifest.metrics = final_metrics.as_ref().map(|m| ManifestMetrics::new(count, m));
        write_manifest(&self.dir, &self.manifest).map_err(fail)?;
        tracing::info!(samples = count, dir = %self.dir.display(), "session exported");
        Ok(ExportSummary {
            session_id: self.manifest.session_id.clone(),
            session_dir: self.dir.clone(),
            sample_count: count,
            metrics: final_metrics,
        })
    }
}
