//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any failed. A command-line argument filters criteria by
//! name substring.

use std::collections::HashMap;
use std::io::{BufRead, BufReader};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::sync::mpsc;
use std::time::{Duration, Instant};

use nalgebra::{Matrix3, Point3, Quaternion, Rotation3, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use scopenav_core::geometry::{convex_hull, hull_volume, mahalanobis_filter, polyline_length, write_trajectory};
use scopenav_core::igtl::{
    crc64, decode_message, encode_message, Body, Message, PointBody, PointElement, StatusBody, Timestamp,
    TransformBody, HEADER_SIZE,
};
use scopenav_core::registration::solve_rigid;
use scopenav_core::{FiducialPair, Frame, Mesh, RigidTransform, TrackedSample, Trajectory, TrajectoryMetrics};
use scopenav_live::client::ViewerClient;
use scopenav_live::protocol::Command as ViewerCommand;
use scopenav_live::session::{read_log, read_manifest, TRAJECTORY_FILE};
use scopenav_live::sim::{stream, Endpoint, SimScenario, StreamOptions};

const NAVCLI: &str = env!("CARGO_BIN_EXE_navcli");
const WAIT: Duration = Duration::from_secs(30);

type Check = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($fmt)+));
        }
    };
}

struct Criterion {
    name: &'static str,
    limit: Duration,
    run: fn() -> Check,
}

fn main() {
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let criteria = [
        Criterion { name: "percent_change_arithmetic", limit: Duration::from_secs(1), run: percent_change_arithmetic },
        Criterion { name: "mahalanobis_threshold", limit: Duration::from_secs(5), run: mahalanobis_threshold },
        Criterion { name: "registration_recovery", limit: Duration::from_secs(1), run: registration_recovery },
        Criterion { name: "hull_volume", limit: Duration::from_secs(60), run: hull_volume_accuracy },
        Criterion { name: "protocol_conformance", limit: Duration::from_secs(10), run: protocol_conformance },
        Criterion { name: "end_to_end_loopback", limit: Duration::from_secs(90), run: end_to_end_loopback },
        Criterion { name: "crash_safety", limit: Duration::from_secs(120), run: crash_safety },
    ];
    let std_hook = std::panic::take_hook();
    std::panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    let mut ran = 0;
    for c in criteria.iter().filter(|c| filter.is_empty() || filter.iter().any(|f| c.name.contains(f.as_str()))) {
        ran += 1;
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(c.run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let elapsed = start.elapsed();
        let outcome = match outcome {
            Ok(detail) if elapsed > c.limit => Err(format!("{detail}; over the {:?} limit", c.limit)),
            other => other,
        };
        let (tag, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("{tag} {} [{:.2} s]: {detail}", c.name, elapsed.as_secs_f64());
    }
    std::panic::set_hook(std_hook);
    println!("acceptance: {} passed, {failed} failed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

fn write_csv(path: &Path, pts: &[Point3<f64>]) {
    let t = Trajectory::from_positions(Frame::Tracker, pts.iter().copied(), 0.025);
    write_trajectory(std::fs::File::create(path).unwrap(), &t).unwrap();
}

/// Corners of an axis-aligned cube of the given volume, in edge-walk order.
fn cube_of_volume(volume: f64) -> Vec<Point3<f64>> {
    let s = volume.cbrt();
    [0, 1, 3, 2, 6, 7, 5, 4]
        .iter()
        .map(|i| Point3::new(s * (i & 1) as f64, s * ((i >> 1) & 1) as f64, s * ((i >> 2) & 1) as f64))
        .collect()
}

/// Eleven collinear points spaced to give the requested total length.
fn straight_path(length: f64) -> Vec<Point3<f64>> {
    let dir = Vector3::new(2.0, -1.0, 0.5).normalize();
    (0..=10).map(|i| Point3::origin() + dir * (length * i as f64 / 10.0)).collect()
}

fn percent_change_arithmetic() -> Check {
    let dir = tempfile::tempdir().unwrap();
    let inputs = [
        ("vol_a.csv", cube_of_volume(10603.42)),
        ("vol_b.csv", cube_of_volume(13119.28)),
        ("dist_a.csv", straight_path(757.25)),
        ("dist_b.csv", straight_path(747.50)),
    ];
    for (name, pts) in &inputs {
        write_csv(&dir.path().join(name), pts);
    }
    let mut args = vec!["analyze"];
    args.extend(inputs.iter().map(|(n, _)| *n));
    args.extend(["--pair", "vol_a.csv:vol_b.csv", "--pair", "dist_a.csv:dist_b.csv"]);
    let table = Command::new(NAVCLI).args(&args).current_dir(dir.path()).output().unwrap();
    ensure!(table.status.success(), "analyze failed: {}", String::from_utf8_lossy(&table.stderr));
    args.extend(["--format", "machine"]);
    let out = Command::new(NAVCLI).args(&args).current_dir(dir.path()).output().unwrap();
    ensure!(out.status.success(), "analyze failed: {}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let vol = v["pairs"][0]["rows"][0]["pct_change"].as_f64().ok_or("no volume change")?;
    let dist = v["pairs"][1]["rows"][1]["pct_change"].as_f64().ok_or("no distance change")?;
    ensure!((vol - 23.73).abs() <= 0.005, "volume change {vol}");
    ensure!((dist - -1.29).abs() <= 0.02, "distance change {dist}");
    let text = String::from_utf8_lossy(&table.stdout);
    ensure!(text.contains("+23.73") && text.contains("-1.29"), "table lacks the rounded changes:\n{text}");
    Ok(format!("volume {vol:+.4}%, distance {dist:+.4}%"))
}

fn random_rotation(rng: &mut impl Rng) -> Rotation3<f64> {
    let q = Quaternion::new(
        rng.sample(StandardNormal),
        rng.sample(StandardNormal),
        rng.sample(StandardNormal),
        rng.sample(StandardNormal),
    );
    UnitQuaternion::from_quaternion(q).to_rotation_matrix()
}

fn random_motion(rng: &mut impl Rng, reach: f64) -> RigidTransform {
    let t = Vector3::new(rng.random_range(-reach..reach), rng.random_range(-reach..reach), rng.random_range(-reach..reach));
    RigidTransform::new(*random_rotation(rng).matrix(), t)
}

fn mahalanobis_threshold() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(0x3d);
    let pts: Vec<Point3<f64>> = (0..10_000)
        .map(|_| Point3::new(rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal)))
        .collect();
    let base = Trajectory::from_positions(Frame::Ct, pts.iter().copied(), 0.025);
    let report = mahalanobis_filter(&base, 3.0).map_err(|e| e.to_string())?;
    // P(chi2(3) > 9)
    let expected = 0.029_290_886_5;
    let frac = report.outlier_fraction;
    ensure!((frac - expected).abs() <= 0.005, "outlier fraction {frac}");
    for _ in 0..20 {
        let m = random_motion(&mut rng, 500.0);
        let moved = base.transformed(&m);
        let r = mahalanobis_filter(&moved, 3.0).map_err(|e| e.to_string())?;
        ensure!(r.outlier_indices == report.outlier_indices, "outlier set changed under a rigid motion");
    }
    Ok(format!("outlier fraction {:.2}% (chi2 tail 2.93%), same {} outliers under 20 motions", 100.0 * frac, report.outlier_indices.len()))
}

fn rotation_angle(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
    // stable for tiny angles: |R - I|_F = 2 sqrt(2) sin(theta / 2)
    let d = (a * b.transpose() - Matrix3::identity()).norm();
    2.0 * (d / (2.0 * 2f64.sqrt())).min(1.0).asin()
}

fn registration_recovery() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(0xf1d);
    let (mut worst_rot, mut worst_trans, mut worst_fre) = (0.0f64, 0.0f64, 0.0f64);
    for trial in 0..100 {
        let truth = random_motion(&mut rng, 300.0);
        let pairs: Vec<_> = (0..6)
            .map(|i| {
                let p = Point3::new(rng.random_range(-80.0..80.0), rng.random_range(-80.0..80.0), rng.random_range(-80.0..80.0));
                FiducialPair::new(format!("F{i}"), p, truth.apply(&p))
            })
            .collect();
        let r = solve_rigid(&pairs).map_err(|e| format!("trial {trial}: {e}"))?;
        let det = r.transform.rotation.determinant();
        ensure!(det > 0.0 && (det - 1.0).abs() < 1e-9, "trial {trial}: det {det}");
        worst_rot = worst_rot.max(rotation_angle(&r.transform.rotation, &truth.rotation));
        worst_trans = worst_trans.max((r.transform.translation - truth.translation).norm());
        worst_fre = worst_fre.max(r.fre);
    }
    ensure!(worst_rot < 1e-6, "rotation error {worst_rot:e} rad");
    ensure!(worst_trans < 1e-6, "translation error {worst_trans:e} mm");
    ensure!(worst_fre < 1e-9, "FRE {worst_fre:e} mm");
    Ok(format!("worst rotation {worst_rot:.1e} rad, translation {worst_trans:.1e} mm, FRE {worst_fre:.1e} mm"))
}

/// Box sampling against the hull's face planes. Only trusted after checking
/// that the hull encloses every input point and uses only input vertices.
fn monte_carlo_volume(hull: &Mesh, rng: &mut impl Rng, samples: usize) -> f64 {
    let (lo, hi) = hull.bounds().unwrap();
    let planes: Vec<(Vector3<f64>, f64)> = (0..hull.faces.len())
        .map(|f| {
            let [a, b, c] = hull.triangle(f);
            let n = (b - a).cross(&(c - a));
            (n, n.dot(&a.coords))
        })
        .collect();
    let mut hits = 0usize;
    for _ in 0..samples {
        let p = Vector3::new(rng.random_range(lo.x..hi.x), rng.random_range(lo.y..hi.y), rng.random_range(lo.z..hi.z));
        if planes.iter().all(|(n, d)| n.dot(&p) <= *d) {
            hits += 1;
        }
    }
    (hi - lo).product() * hits as f64 / samples as f64
}

fn hull_volume_accuracy() -> Check {
    let cube: Vec<_> = (0..8).map(|i| Point3::new((i & 1) as f64, ((i >> 1) & 1) as f64, ((i >> 2) & 1) as f64)).collect();
    let v_cube = hull_volume(&convex_hull(&cube).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    ensure!((v_cube - 1.0).abs() <= 1e-9, "unit cube {v_cube}");
    let s = 1.0 / (2.0 * 2f64.sqrt());
    let tetra = [Point3::new(s, s, s), Point3::new(s, -s, -s), Point3::new(-s, s, -s), Point3::new(-s, -s, s)];
    let v_tet = hull_volume(&convex_hull(&tetra).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    ensure!((v_tet - 0.117851).abs() <= 1e-6, "tetrahedron {v_tet}");

    let mut rng = ChaCha8Rng::seed_from_u64(0x4011);
    let mut worst = 0.0f64;
    for k in 0..20 {
        let n = rng.random_range(6..80);
        let scale = Vector3::new(rng.random_range(1.0..30.0), rng.random_range(1.0..30.0), rng.random_range(1.0..30.0));
        let motion = random_motion(&mut rng, 100.0);
        let pts: Vec<_> = (0..n)
            .map(|_| {
                let u = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
                motion.apply(&Point3::from(u.component_mul(&scale)))
            })
            .collect();
        let hull = convex_hull(&pts).map_err(|e| format!("polytope {k}: {e}"))?;
        ensure!(hull.vertices.iter().all(|v| pts.contains(v)), "polytope {k}: hull vertex not an input point");
        for p in &pts {
            let excess = (0..hull.faces.len())
                .map(|f| {
                    let [a, b, c] = hull.triangle(f);
                    (b - a).cross(&(c - a)).normalize().dot(&(p - a))
                })
                .fold(f64::NEG_INFINITY, f64::max);
            ensure!(excess <= 1e-7, "polytope {k}: input point outside by {excess}");
        }
        let v = hull_volume(&hull).map_err(|e| e.to_string())?;
        let mc = monte_carlo_volume(&hull, &mut rng, 1_000_000);
        let rel = (v - mc).abs() / v;
        ensure!(rel < 0.01, "polytope {k}: hull {v} vs Monte Carlo {mc}");
        worst = worst.max(rel);
    }
    Ok(format!("cube {v_cube}, tetrahedron {v_tet:.7}, worst Monte Carlo deviation {:.3}%", 100.0 * worst))
}

const CRC_CHECK: u64 = 0x6C40_DF5F_0B49_7347;
const TRANSFORM_VECTOR: &str = "00015452414e53464f524d00000053636f70655469700000000000000000000000006553f10080000000000000000000003069ddfcfc50390740000000003f80000000000000bf800000000000000000000000000000000000003f80000041280000c1a2000040400000";
const POINT_VECTOR: &str = "0001504f494e540000000000000053746f6e657300000000000000000000000000006553f101000000000000000000000088ea5d46a4bcd1351546310000000000000000000000000000000000000000000000000000000000000000000000000000000000000000000000000000000000000000000000000000466964756369616c730000000000000000000000000000000000000000000000ff0000ff3f800000400000004040000040a000004354000000000000000000000000000000000000";
const STATUS_VECTOR: &str = "000153544154555300000000000053636f706554697000000000000000000000000000000000000000000000000000000023360a98c209a840ab000100000000000000000000000000000000000000000000000000000000646f6e6500";

fn hex(s: &str) -> Vec<u8> {
    (0..s.len()).step_by(2).map(|i| u8::from_str_radix(&s[i..i + 2], 16).unwrap()).collect()
}

fn ascii(rng: &mut impl Rng, max: usize) -> String {
    let n = rng.random_range(0..=max);
    (0..n).map(|_| rng.random_range(0x20u8..0x7f) as char).collect()
}

fn random_body(rng: &mut impl Rng) -> Body {
    let coord = |rng: &mut dyn rand::RngCore| rng.random_range(-1.0e4f32..1.0e4);
    match rng.random_range(0..3) {
        0 => loop {
            let r = random_rotation(rng).matrix().map(|v| v as f32);
            if (r.determinant() - 1.0).abs() < 1e-5 {
                let t = Vector3::new(coord(rng), coord(rng), coord(rng));
                break Body::Transform(TransformBody::new(r, t));
            }
        },
        1 => {
            let n = rng.random_range(0..5);
            let elements = (0..n)
                .map(|_| PointElement {
                    name: ascii(rng, 64),
                    group: ascii(rng, 32),
                    rgba: rng.random(),
                    position: Vector3::new(coord(rng), coord(rng), coord(rng)),
                    diameter: rng.random_range(0.0..50.0),
                    owner: ascii(rng, 20),
                })
                .collect();
            Body::Point(PointBody { elements })
        }
        _ => Body::Status(StatusBody {
            code: rng.random(),
            subcode: rng.random(),
            error_name: ascii(rng, 20),
            message: ascii(rng, 200),
        }),
    }
}

fn protocol_conformance() -> Check {
    ensure!(crc64(b"123456789") == CRC_CHECK, "CRC-64 check value");
    let ts = Timestamp::from_parts(1_700_000_000, 0x8000_0000);
    let transform = TransformBody::new(Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0), Vector3::new(10.5, -20.25, 3.0));
    let bytes = encode_message("ScopeTip", ts, &Body::Transform(transform)).map_err(|e| e.to_string())?;
    ensure!(bytes == hex(TRANSFORM_VECTOR), "TRANSFORM bytes differ from the reference");
    let point = Body::Point(PointBody {
        elements: vec![PointElement {
            name: "F1".into(),
            group: "Fiducials".into(),
            rgba: [255, 0, 0, 255],
            position: Vector3::new(1.0, 2.0, 3.0),
            diameter: 5.0,
            owner: "CT".into(),
        }],
    });
    let bytes = encode_message("Stones", Timestamp::from_parts(1_700_000_001, 0), &point).map_err(|e| e.to_string())?;
    ensure!(bytes == hex(POINT_VECTOR), "POINT bytes differ from the reference");
    let bytes = encode_message("ScopeTip", Timestamp(0), &Body::Status(StatusBody::ok("done"))).map_err(|e| e.to_string())?;
    ensure!(bytes == hex(STATUS_VECTOR), "STATUS bytes differ from the reference");
    for (v, body) in [(TRANSFORM_VECTOR, Body::Transform(transform)), (POINT_VECTOR, point)] {
        let d = decode_message(&hex(v)).map_err(|e| e.to_string())?;
        ensure!(d.body == body, "reference bytes decode to a different body");
    }

    let mut rng = ChaCha8Rng::seed_from_u64(0x16_71);
    let cases = 20_000;
    for i in 0..cases {
        let m = Message::new(ascii(&mut rng, 20), Timestamp(rng.random()), random_body(&mut rng));
        let bytes = m.encode().map_err(|e| format!("case {i}: {e}"))?;
        let d = decode_message(&bytes).map_err(|e| format!("case {i}: {e}"))?;
        ensure!(d.header.body_crc == crc64(&bytes[HEADER_SIZE..]), "case {i}: CRC field");
        ensure!(d.into_message() == m, "case {i}: round trip changed the message");
    }
    Ok(format!("4 pinned vectors, {cases} randomized round trips"))
}

/// A `navcli serve` child with its stdout lines forwarded over a channel.
struct Served {
    child: Child,
    lines: mpsc::Receiver<String>,
    info: HashMap<String, String>,
}

impl Served {
    fn spawn(dir: &Path, extra: &[&str]) -> Result<Served, String> {
        let mut child = Command::new(NAVCLI)
            .args(["serve", "--port", "0", "--viewer-port", "0", "--session-root", "sessions"])
            .args(extra)
            .current_dir(dir)
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .map_err(|e| e.to_string())?;
        let out = child.stdout.take().unwrap();
        let (tx, lines) = mpsc::channel();
        std::thread::spawn(move || {
            for line in BufReader::new(out).lines().map_while(Result::ok) {
                if tx.send(line).is_err() {
                    break;
                }
            }
        });
        let mut info = HashMap::new();
        while info.len() < 4 {
            let line = lines.recv_timeout(WAIT).map_err(|_| "serve printed no startup lines".to_string())?;
            if let Some((k, v)) = line.split_once('=') {
                info.insert(k.to_string(), v.to_string());
            }
        }
        Ok(Served { child, lines, info })
    }

    fn session_dir(&self, root: &Path) -> PathBuf {
        root.join(&self.info["session_dir"])
    }

    /// SIGTERM, then the export summary line.
    fn terminate(mut self) -> Result<String, String> {
        let ok = Command::new("kill").args(["-TERM", &self.child.id().to_string()]).status().map_err(|e| e.to_string())?;
        ensure!(ok.success(), "kill -TERM failed");
        let status = self.child.wait().map_err(|e| e.to_string())?;
        ensure!(status.success(), "serve exited with {status}");
        self.lines
            .try_iter()
            .find(|l| l.starts_with("exported "))
            .ok_or_else(|| "no export summary".to_string())
    }
}

fn connect(rt: &tokio::runtime::Runtime, served: &Served) -> Result<ViewerClient, String> {
    let addr = served.info["viewer"].parse().map_err(|e| format!("viewer address: {e}"))?;
    rt.block_on(ViewerClient::connect(addr)).map_err(|e| e.to_string())
}

fn tracker_to_ct() -> RigidTransform {
    RigidTransform::new(*Rotation3::from_euler_angles(0.35, -0.2, 1.4).matrix(), Vector3::new(31.0, -54.0, 12.5))
}

const FIDUCIALS: [(&str, [f64; 3]); 4] = [
    ("F1", [18.0, 0.0, 2.0]),
    ("F2", [0.0, 19.0, -1.0]),
    ("F3", [-2.0, 1.0, 20.0]),
    ("F4", [-14.0, -13.0, 4.0]),
];

fn end_to_end_loopback() -> Check {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let fid_rows: String = FIDUCIALS.iter().map(|(l, p)| format!("{l},{},{},{}\n", p[0], p[1], p[2])).collect();
    std::fs::write(root.join("ct_fiducials.csv"), fid_rows).unwrap();
    let st = Command::new(NAVCLI).args(["phantom", "-o", "phantom.obj"]).current_dir(root).status().unwrap();
    ensure!(st.success(), "navcli phantom failed");

    let rows = tracker_to_ct().to_homogeneous();
    let matrix: Vec<String> = (0..4)
        .map(|r| format!("[{}]", (0..4).map(|c| format!("{:?}", rows[(r, c)])).collect::<Vec<_>>().join(", ")))
        .collect();
    let scenario = format!(
        "mode = \"synthetic\"\nmesh = \"phantom.obj\"\nseed = 11\nn_waypoints = 560\nmax_samples = 2000\n\
         rate_hz = 40.0\nnoise_sigma_mm = 0.0\ndropout_prob = 0.0\ntime_scale = 1.0\ntracker_to_ct = [{}]\n",
        matrix.join(", ")
    );
    std::fs::write(root.join("scenario.toml"), scenario).unwrap();

    // ground truth: the tracker-frame samples as they travel on the wire
    let sc = SimScenario::load(&root.join("scenario.toml")).map_err(|e| e.to_string())?;
    let truth = sc.build_trajectory().map_err(|e| e.to_string())?;
    ensure!(truth.len() == 2000, "scenario yields {} samples", truth.len());
    let wire: Vec<Point3<f64>> = truth.positions().iter().map(|p| p.map(|c| c as f32 as f64)).collect();
    let length = polyline_length(&wire);
    let n_seg = (wire.len() - 1) as f64;

    let rt = tokio::runtime::Runtime::new().unwrap();
    let served = Served::spawn(
        root,
        &["--anatomy-mesh", "phantom.obj", "--ct-fiducials", "ct_fiducials.csv", "--metrics-interval-ms", "200"],
    )?;
    let mut client = connect(&rt, &served)?;

    // fiducial capture: hold the scope still at each landmark
    let igtl = served.info["igtl"].clone();
    let to_tracker = tracker_to_ct().invert();
    for (label, ct) in FIDUCIALS {
        let p = to_tracker.apply(&Point3::from(ct));
        let still = Trajectory::from_positions(Frame::Tracker, std::iter::repeat_n(p, 30), 0.0025);
        let before = client.state.logged;
        let opts = StreamOptions { rate_hz: 400.0, ..StreamOptions::default() };
        stream(&still, &opts, Endpoint::Connect(igtl.clone())).map_err(|e| e.to_string())?;
        rt.block_on(client.wait_until(WAIT, |s| s.logged >= before + 30)).map_err(|e| e.to_string())?;
        let cmd = ViewerCommand::CaptureFiducial { req_id: 0, label: label.into(), window_ms: Some(60) };
        rt.block_on(client.command(cmd)).map_err(|e| format!("capture {label}: {e}"))?;
    }
    rt.block_on(client.command(ViewerCommand::Register { req_id: 0, ct_points: None })).map_err(|e| format!("register: {e}"))?;
    rt.block_on(client.wait_until(WAIT, |s| s.registration.is_some())).map_err(|e| e.to_string())?;
    let fre = client.state.registration.as_ref().map(|r| r.fre_mm).unwrap();

    let sim = Command::new(NAVCLI)
        .args(["simulate", "scenario.toml", "--port"])
        .arg(igtl.rsplit(':').next().unwrap())
        .current_dir(root)
        .output()
        .unwrap();
    ensure!(sim.status.success(), "simulate: {}", String::from_utf8_lossy(&sim.stderr));
    ensure!(String::from_utf8_lossy(&sim.stdout).trim() == "sent=2000 dropped=0", "simulate summary");

    let total = 4 * 30 + 2000;
    rt.block_on(client.wait_until(WAIT, |s| {
        s.logged >= total && s.metrics.as_ref().is_some_and(|m| m.metrics.n_samples == 2000)
    }))
    .map_err(|e| format!("live metrics never covered the path: {e}"))?;
    let live = client.state.metrics.clone().unwrap().metrics;
    rt.block_on(client.close());

    let session_dir = served.session_dir(root);
    let summary = served.terminate()?;
    let exported: Option<TrajectoryMetrics> =
        serde_json::from_str(summary.split_once("metrics=").ok_or("summary format")?.1).map_err(|e| e.to_string())?;
    ensure!(exported.as_ref() == Some(&live), "export metrics {exported:?} differ from live {live:?}");

    let out = Command::new(NAVCLI)
        .args(["analyze", session_dir.to_str().unwrap(), "--format", "machine"])
        .current_dir(root)
        .output()
        .unwrap();
    ensure!(out.status.success(), "analyze: {}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let offline: TrajectoryMetrics = serde_json::from_value(v["files"][0].clone()).map_err(|e| e.to_string())?;
    ensure!(offline == live, "offline {offline:?} differs from live {live:?}");

    let measured = offline.path_length_mm.ok_or("no path length")?;
    // rigid maps preserve length up to rounding; allow 1e-9 relative above L
    ensure!(
        measured >= length - 0.5 * n_seg && measured <= length * (1.0 + 1e-9),
        "path length {measured} outside [{} , {length}]",
        length - 0.5 * n_seg
    );
    Ok(format!(
        "FRE {fre:.1e} mm, path length {measured:.3} mm vs L {length:.3} mm ({} of 2000 inliers), live == offline",
        offline.n_inliers
    ))
}

fn crash_safety() -> Check {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let rt = tokio::runtime::Runtime::new().unwrap();
    let mut served = Served::spawn(root, &[])?;
    let session_dir = served.session_dir(root);
    let mut client = connect(&rt, &served)?;

    let mut rng = ChaCha8Rng::seed_from_u64(0xc7a5);
    let mut p = Point3::new(0.0, 0.0, 0.0);
    let samples: Vec<TrackedSample> = (0..6000)
        .map(|i| {
            p += Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            TrackedSample::at(i as f64 * 0.0025, p)
        })
        .collect();
    let sent: Vec<Point3<f64>> = samples.iter().map(|s| s.position.map(|c| c as f32 as f64)).collect();
    let traj = Trajectory::from_samples(Frame::Tracker, samples).map_err(|e| e.to_string())?;
    let igtl = served.info["igtl"].clone();
    let sender = std::thread::spawn(move || {
        let opts = StreamOptions { rate_hz: 400.0, ..StreamOptions::default() };
        let _ = stream(&traj, &opts, Endpoint::Connect(igtl));
    });

    rt.block_on(client.wait_until(WAIT, |s| s.logged >= 1500)).map_err(|e| e.to_string())?;
    served.child.kill().map_err(|e| e.to_string())?;
    served.child.wait().map_err(|e| e.to_string())?;
    // drain whatever acks were already in flight
    let _ = rt.block_on(client.wait_until(Duration::from_millis(500), |_| false));
    let acked = client.max_acked;
    sender.join().unwrap();

    let log_path = session_dir.join(TRAJECTORY_FILE);
    let log = read_log(&log_path).map_err(|e| e.to_string())?;
    ensure!(log.len() as u64 >= acked, "log has {} rows but {acked} were acknowledged", log.len());
    ensure!(log.len() < sent.len(), "kill came after the whole stream");
    for (i, (got, want)) in log.positions().iter().zip(&sent).enumerate() {
        ensure!(got == want, "row {i}: {got:?} != sent {want:?}");
    }
    let killed = read_manifest(&session_dir).map_err(|e| e.to_string())?;
    ensure!(killed.exported_at.is_none(), "killed session claims an export");
    let out = Command::new(NAVCLI)
        .args(["analyze", session_dir.to_str().unwrap(), "--format", "machine"])
        .output()
        .unwrap();
    ensure!(out.status.success(), "analyze of the killed session: {}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    ensure!(v["files"][0]["n_samples"].as_u64() == Some(log.len() as u64), "offline sample count");
    let log_bytes = std::fs::read(&log_path).unwrap();

    // restart into a fresh session beside the killed one
    let restarted = Served::spawn(root, &[])?;
    let fresh_dir = restarted.session_dir(root);
    ensure!(fresh_dir != session_dir && restarted.info["session_id"] != served.info["session_id"], "session reused");
    let mut client = connect(&rt, &restarted)?;
    ensure!(client.state.logged == 0 && client.state.sample_count == 0, "fresh session starts non-empty");
    let few = Trajectory::from_positions(Frame::Tracker, sent[..25].iter().copied(), 0.0025);
    let opts = StreamOptions { rate_hz: 400.0, ..StreamOptions::default() };
    stream(&few, &opts, Endpoint::Connect(restarted.info["igtl"].clone())).map_err(|e| e.to_string())?;
    rt.block_on(client.wait_until(WAIT, |s| s.logged >= 25)).map_err(|e| e.to_string())?;
    rt.block_on(client.close());
    let summary = restarted.terminate()?;
    ensure!(summary.starts_with("exported samples=25 "), "restart summary: {summary}");
    ensure!(std::fs::read(&log_path).unwrap() == log_bytes, "killed session log changed after restart");
    ensure!(read_log(&fresh_dir.join(TRAJECTORY_FILE)).map_err(|e| e.to_string())?.len() == 25, "fresh log rows");
    Ok(format!("{} rows logged, {acked} acknowledged, restart exported 25 samples cleanly", log.len()))
}
