//! Stand-in for the EM tracker and its streaming toolkit: replays recorded
//! trajectories or synthesizes scope paths inside a mesh, then pushes them as
//! TRANSFORM messages.

use std::io::{self, BufWriter, Read, Write};
use std::net::{Shutdown, TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use nalgebra::{Matrix4, Point3, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use scopenav_core::geometry::{
    load_obj, read_trajectory, write_sample_row, GeometryError, InsideTester, TRAJECTORY_HEADER,
};
use scopenav_core::igtl::{frame_stream, Body, StatusBody, StreamError, Timestamp, TransformBody};
use scopenav_core::{Frame, Mesh, RigidTransform, TrackedSample, Trajectory};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tracked_sample;

pub const DEVICE_NAME: &str = "ScopeTip";
/// Sample period assigned to synthesized paths, matching the default rate.
pub const SYNTH_PERIOD: f64 = 0.025;
const MAX_ATTEMPTS: usize = 1_000_000;
const STEP_MM: f64 = 1.0;
/// Spacing of the containment checks along each candidate segment.
const CHECK_STEP_MM: f64 = 0.1;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    Scenario(String),
    #[error("no interior point found after {0} rejection-sampling attempts")]
    SamplingFailed(usize),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("cannot reach {addr}: {source}")]
    Connect { addr: String, source: io::Error },
    #[error("connection lost after {sent} messages: {source}")]
    Disconnected { sent: usize, source: io::Error },
    #[error(transparent)]
    Stream(#[from] StreamError),
    #[error(transparent)]
    Protocol(#[from] scopenav_core::igtl::ProtocolError),
    #[error("scenario file: {0}")]
    Toml(#[from] toml::de::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl SimError {
    /// True for failures of the network rather than of the inputs.
    pub fn is_network(&self) -> bool {
        matches!(self, SimError::Connect { .. } | SimError::Disconnected { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimMode {
    Replay,
    #[default]
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimScenario {
    pub mode: SimMode,
    /// Trajectory file to replay, tracker frame.
    pub trajectory: Option<PathBuf>,
    /// Mesh for synthetic paths; the built-in phantom when absent.
    pub mesh: Option<PathBuf>,
    pub seed: u64,
    pub n_waypoints: usize,
    /// Stream only the first samples of the path.
    pub max_samples: Option<usize>,
    pub rate_hz: f64,
    pub noise_sigma_mm: f64,
    pub dropout_prob: f64,
    pub time_scale: f64,
    /// Row-major homogeneous tracker→CT transform. Synthetic paths are built
    /// in CT space and streamed through its inverse.
    pub tracker_to_ct: Option<[[f64; 4]; 4]>,
    pub device_name: String,
}

impl Default for SimScenario {
    fn default() -> Self {
        SimScenario {
            mode: SimMode::Synthetic,
            trajectory: None,
            mesh: None,
            seed: 1,
            n_waypoints: 12,
            max_samples: None,
            rate_hz: 40.0,
            noise_sigma_mm: 0.0,
            dropout_prob: 0.0,
            time_scale: 1.0,
            tracker_to_ct: None,
            device_name: DEVICE_NAME.to_string(),
        }
    }
}

impl SimScenario {
    /// Reads a TOML scenario; relative file paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self, SimError> {
        let mut s: SimScenario = toml::from_str(&std::fs::read_to_string(path)?)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut s.trajectory, &mut s.mesh].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::Scenario(m));
        if !(self.rate_hz > 0.0 && self.rate_hz <= 1000.0) {
            return bad(format!("rate_hz {} outside (0, 1000]", self.rate_hz));
        }
        if !(0.0..1.0).contains(&self.dropout_prob) {
            return bad(format!("dropout_prob {} outside [0, 1)", self.dropout_prob));
        }
        if !(self.noise_sigma_mm >= 0.0 && self.noise_sigma_mm.is_finite()) {
            return bad(format!("noise_sigma_mm {} must be >= 0", self.noise_sigma_mm));
        }
        if !(self.time_scale > 0.0 && self.time_scale.is_finite()) {
            return bad(format!("time_scale {} must be positive", self.time_scale));
        }
        if self.mode == SimMode::Replay && self.trajectory.is_none() {
            return bad("replay mode needs a trajectory file".into());
        }
        if self.mode == SimMode::Synthetic && self.n_waypoints < 2 {
            return bad("synthetic mode needs n_waypoints >= 2".into());
        }
        self.tracker_to_ct()?;
        Ok(())
    }

    pub fn tracker_to_ct(&self) -> Result<Option<RigidTransform>, SimError> {
        let Some(rows) = self.tracker_to_ct else {
            return Ok(None);
        };
        let m = Matrix4::from_fn(|r, c| rows[r][c]);
        let t = RigidTransform::from_homogeneous(&m);
        let bottom_ok = m.row(3).iter().zip([0.0, 0.0, 0.0, 1.0]).all(|(a, b)| *a == b);
        if !bottom_ok || !t.is_proper(1e-6) {
            return Err(SimError::Scenario("tracker_to_ct is not a rigid transform".into()));
        }
        Ok(Some(t))
    }

    /// The tracker-frame samples this scenario streams.
    pub fn build_trajectory(&self) -> Result<Trajectory, SimError> {
        self.validate()?;
        let traj = match self.mode {
            SimMode::Replay => {
                let path = self.trajectory.as_ref().expect("validated");
                read_trajectory(std::fs::File::open(path)?, Frame::Tracker)?
            }
            SimMode::Synthetic => {
                let mesh = match &self.mesh {
                    Some(p) => load_obj(p)?,
                    None => phantom_mesh(),
                };
                let ct = synthesize_path(&mesh, self.n_waypoints, self.seed)?;
                let to_tracker = self.tracker_to_ct()?.map(|t| t.invert()).unwrap_or_else(RigidTransform::identity);
                let samples = ct
                    .samples()
                    .iter()
                    .map(|s| TrackedSample {
                        t: s.t,
                        position: to_tracker.apply(&s.position),
                        orientation: s.orientation.map(|q| {
                            let r = UnitQuaternion::from_matrix(&to_tracker.rotation);
                            (r * UnitQuaternion::new_unchecked(q)).into_inner()
                        }),
                    })
                    .collect();
                Trajectory::from_samples(Frame::Tracker, samples)?
            }
        };
        Ok(match self.max_samples {
            Some(n) if n < traj.len() => traj.select(|i| i < n),
            _ => traj,
        })
    }

    pub fn stream_options(&self) -> StreamOptions {
        StreamOptions {
            rate_hz: self.rate_hz,
            noise_sigma_mm: self.noise_sigma_mm,
            dropout_prob: self.dropout_prob,
            time_scale: self.time_scale,
            seed: self.seed,
            device_name: self.device_name.clone(),
        }
    }
}

/// A lumpy closed surface of roughly kidney-pelvis size (≈ 25 mm radius).
pub fn phantom_mesh() -> Mesh {
    Mesh::radial_surface(Point3::origin(), 40, 80, |theta, phi| {
        22.0 + 6.0 * (2.0 * theta).sin().powi(2) * (3.0 * phi).cos() + 4.0 * theta.cos()
    })
}

fn catmull_rom(p: [Point3<f64>; 4], t: f64) -> Point3<f64> {
    let [p0, p1, p2, p3] = p.map(|q| q.coords);
    let (t2, t3) = (t * t, t * t * t);
    Point3::from(
        (p1 * 2.0
            + (p2 - p0) * t
            + (p0 * 2.0 - p1 * 5.0 + p2 * 4.0 - p3) * t2
            + (p1 * 3.0 - p0 - p2 * 3.0 + p3) * t3)
            * 0.5,
    )
}

/// Points along `curve(t)` for t in (0, 1], spaced about `CHECK_STEP_MM`.
fn densify(curve: impl Fn(f64) -> Point3<f64>) -> Vec<Point3<f64>> {
    let coarse: Vec<_> = (0..=16).map(|i| curve(i as f64 / 16.0)).collect();
    let approx_len: f64 = coarse.windows(2).map(|w| (w[1] - w[0]).norm()).sum();
    let m = ((approx_len / CHECK_STEP_MM).ceil() as usize).max(16);
    (1..=m).map(|i| curve(i as f64 / m as f64)).collect()
}

/// Emits points every `STEP_MM` of arc length along `start → dense…`;
/// `carry` is the distance still to go before the next point.
fn arc_samples(start: Point3<f64>, dense: &[Point3<f64>], mut carry: f64) -> (Vec<Point3<f64>>, f64) {
    let mut out = Vec::new();
    let mut a = start;
    for &b in dense {
        let len = (b - a).norm();
        if len > 0.0 {
            while carry <= len {
                out.push(a + (b - a) * (carry / len));
                carry += STEP_MM;
            }
            carry -= len;
        }
        a = b;
    }
    (out, carry)
}

/// Uniform interior waypoints ordered greedily from the one nearest the
/// mesh's lowest vertex, joined by a Catmull-Rom spline and resampled every
/// 1 mm of arc length. A segment that leaves the mesh falls back to a straight
/// line, then to a fresh waypoint.
pub fn synthesize_path(mesh: &Mesh, n_waypoints: usize, seed: u64) -> Result<Trajectory, SimError> {
    if n_waypoints < 2 {
        return Err(SimError::Scenario("need at least 2 waypoints".into()));
    }
    let (lo, hi) = mesh.bounds().ok_or(GeometryError::EmptyMesh)?;
    let tester = InsideTester::new(mesh);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut attempts = 0usize;
    let mut draw = |rng: &mut ChaCha8Rng| -> Result<Point3<f64>, SimError> {
        loop {
            if attempts >= MAX_ATTEMPTS {
                return Err(SimError::SamplingFailed(MAX_ATTEMPTS));
            }
            attempts += 1;
            let p = Point3::new(
                rng.random_range(lo.x..=hi.x),
                rng.random_range(lo.y..=hi.y),
                rng.random_range(lo.z..=hi.z),
            );
            if tester.contains(&p) {
                return Ok(p);
            }
        }
    };

    let mut pool = (0..n_waypoints).map(|_| draw(&mut rng)).collect::<Result<Vec<_>, _>>()?;
    let inlet = mesh
        .vertices
        .iter()
        .copied()
        .min_by(|a, b| a.z.total_cmp(&b.z))
        .expect("bounds implies vertices");
    let nearest = |pool: &[Point3<f64>], to: &Point3<f64>| {
        (0..pool.len())
            .min_by(|&a, &b| (pool[a] - to).norm_squared().total_cmp(&(pool[b] - to).norm_squared()))
            .expect("non-empty pool")
    };
    let mut way = Vec::with_capacity(n_waypoints);
    let mut cur = inlet;
    while !pool.is_empty() {
        let i = nearest(&pool, &cur);
        cur = pool.swap_remove(i);
        way.push(cur);
    }

    let mut points = vec![way[0]];
    let mut carry = STEP_MM;
    for i in 0..way.len() - 1 {
        loop {
            let ctrl = [way[i.saturating_sub(1)], way[i], way[i + 1], *way.get(i + 2).unwrap_or(&way[i + 1])];
            let (a, b) = (way[i], way[i + 1]);
            let spline = densify(|t| catmull_rom(ctrl, t));
            let straight = densify(|t| a + (b - a) * t);
            let accepted = [spline, straight].into_iter().find_map(|dense| {
                let (samples, next) = arc_samples(a, &dense, carry);
                let inside = dense.iter().chain(&samples).all(|p| tester.contains(p));
                inside.then_some((samples, next))
            });
            if let Some((samples, next)) = accepted {
                points.extend(samples);
                carry = next;
                break;
            }
            way[i + 1] = draw(&mut rng)?;
        }
    }

    let n = points.len();
    let samples = (0..n)
        .map(|i| {
            let tangent = points[(i + 1).min(n - 1)] - points[i.saturating_sub(1)];
            TrackedSample {
                t: i as f64 * SYNTH_PERIOD,
                position: points[i],
                orientation: Some(heading(&tangent).into_inner()),
            }
        })
        .collect();
    Ok(Trajectory::from_samples(Frame::Ct, samples)?)
}

/// Rotation taking +z onto `dir`.
fn heading(dir: &Vector3<f64>) -> UnitQuaternion<f64> {
    if dir.norm() == 0.0 {
        return UnitQuaternion::identity();
    }
    UnitQuaternion::rotation_between(&Vector3::z(), dir)
        .unwrap_or_else(|| UnitQuaternion::from_axis_angle(&Vector3::x_axis(), std::f64::consts::PI))
}

#[derive(Debug, Clone, PartialEq)]
pub struct StreamOptions {
    pub rate_hz: f64,
    pub noise_sigma_mm: f64,
    pub dropout_prob: f64,
    /// Playback speed factor: 2.0 streams twice as fast as real time.
    pub time_scale: f64,
    pub seed: u64,
    pub device_name: String,
}

impl Default for StreamOptions {
    fn default() -> Self {
        SimScenario::default().stream_options()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct StreamSummary {
    pub sent: usize,
    pub dropped: usize,
}

/// Where the simulator (or recorder) meets its peer: dial out, or wait for
/// one incoming connection.
#[derive(Debug)]
pub enum Endpoint {
    Connect(String),
    Listen(TcpListener),
}

impl Endpoint {
    pub fn listen(addr: &str) -> Result<Self, SimError> {
        TcpListener::bind(addr).map(Endpoint::Listen).map_err(|source| SimError::Connect {
            addr: addr.to_string(),
            source,
        })
    }

    pub fn open(self) -> Result<TcpStream, SimError> {
        match self {
            Endpoint::Connect(addr) => {
                TcpStream::connect(&addr).map_err(|source| SimError::Connect { addr, source })
            }
            Endpoint::Listen(l) => Ok(l.accept()?.0),
        }
    }
}

pub fn stream(trajectory: &Trajectory, opts: &StreamOptions, endpoint: Endpoint) -> Result<StreamSummary, SimError> {
    let sock = endpoint.open()?;
    sock.set_nodelay(true)?;
    let summary = stream_to(trajectory, opts, &sock)?;
    // Best effort: the peer may already have gone away after the STATUS.
    let _ = sock.shutdown(Shutdown::Write);
    Ok(summary)
}

/// The timing loop: one TRANSFORM per sample at the scaled rate, then a
/// STATUS carrying the counts.
pub fn stream_to<W: Write>(trajectory: &Trajectory, opts: &StreamOptions, mut out: W) -> Result<StreamSummary, SimError> {
    let period = Duration::from_secs_f64(1.0 / (opts.rate_hz * opts.time_scale));
    let noise = (opts.noise_sigma_mm > 0.0).then(|| Normal::new(0.0, opts.noise_sigma_mm).expect("sigma > 0"));
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5714_ea11);
    let unix0 = SystemTime::now().duration_since(UNIX_EPOCH).unwrap_or_default().as_secs_f64();
    let start = Instant::now();
    let mut summary = StreamSummary { sent: 0, dropped: 0 };

    for (i, s) in trajectory.samples().iter().enumerate() {
        let due = start + period.mul_f64(i as f64);
        let now = Instant::now();
        if due > now {
            std::thread::sleep(due - now);
        }
        if opts.dropout_prob > 0.0 && rng.random_bool(opts.dropout_prob) {
            summary.dropped += 1;
            continue;
        }
        let mut p = s.position.coords;
        if let Some(n) = &noise {
            p += Vector3::from_fn(|_, _| n.sample(&mut rng));
        }
        let rotation = s
            .orientation
            .map(|q| UnitQuaternion::new_normalize(q).to_rotation_matrix().into_inner())
            .unwrap_or_else(nalgebra::Matrix3::identity);
        let body = Body::Transform(TransformBody::new(rotation.cast::<f32>(), p.cast::<f32>()));
        let ts = Timestamp::from_secs_f64(unix0 + start.elapsed().as_secs_f64() * opts.time_scale);
        let bytes = scopenav_core::igtl::encode_message(&opts.device_name, ts, &body)?;
        out.write_all(&bytes).map_err(|source| SimError::Disconnected {
            sent: summary.sent,
            source,
        })?;
        summary.sent += 1;
    }
    let status = StatusBody::ok(format!("sent={} dropped={}", summary.sent, summary.dropped));
    let ts = Timestamp::from_secs_f64(unix0 + start.elapsed().as_secs_f64() * opts.time_scale);
    let bytes = scopenav_core::igtl::encode_message(&opts.device_name, ts, &Body::Status(status))?;
    out.write_all(&bytes)
        .and_then(|_| out.flush())
        .map_err(|source| SimError::Disconnected {
            sent: summary.sent,
            source,
        })?;
    Ok(summary)
}

/// Receives one stream and appends every pose to `output` in the trajectory
/// format, stamped with receive time since the connection opened. Ends at a
/// STATUS message or end of stream.
pub fn record(endpoint: Endpoint, output: &Path) -> Result<Trajectory, SimError> {
    let sock = endpoint.open()?;
    record_from(sock, output)
}

pub fn record_from<R: Read>(src: R, output: &Path) -> Result<Trajectory, SimError> {
    let mut file = BufWriter::new(std::fs::File::create(output)?);
    writeln!(file, "{TRAJECTORY_HEADER}")?;
    let start = Instant::now();
    let mut traj = Trajectory::new(Frame::Tracker);
    let mut result = Ok(());
    for msg in frame_stream(src) {
        let msg = match msg {
            Ok(m) => m,
            Err(e) => {
                result = Err(e.into());
                break;
            }
        };
        match &msg.body {
            Body::Transform(t) => {
                let Some(sample) = tracked_sample(start.elapsed().as_secs_f64(), t) else {
                    tracing::warn!(device = %msg.header.device_name, "skipping non-rigid transform");
                    continue;
                };
                write_sample_row(&mut file, &sample)?;
                traj.push(sample)?;
                if traj.len().is_multiple_of(100) {
                    file.flush()?;
                }
            }
            Body::Status(_) => break,
            _ => {}
        }
    }
    file.flush()?;
    result.map(|_| traj)
}
