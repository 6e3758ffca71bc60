use std::collections::VecDeque;

use nalgebra::UnitQuaternion;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use scopenav_core::geometry::{
    analyze_points, convex_hull, hull_volume, mahalanobis_filter, parse_obj, path_length, pct_change, point_in_mesh,
    polyline_length, read_trajectory, write_trajectory, GeometryError, InsideTester, HULL_EPSILON,
};
use scopenav_core::{Frame, Mesh, Point3, RigidTransform, TrackedSample, Trajectory, Vector3};

/// P(χ²₃ > 9), by numerical integration of the χ²(3) density (scipy quad).
const CHI2_3_TAIL_AT_9: f64 = 0.029_290_886_5;

fn normal_points(rng: &mut impl Rng, n: usize) -> Vec<Point3<f64>> {
    (0..n)
        .map(|_| Point3::new(rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal)))
        .collect()
}

fn random_motion(rng: &mut impl Rng) -> RigidTransform {
    let q = nalgebra::Quaternion::new(
        rng.sample(StandardNormal),
        rng.sample(StandardNormal),
        rng.sample(StandardNormal),
        rng.sample(StandardNormal),
    );
    let r = UnitQuaternion::from_quaternion(q).to_rotation_matrix().into_inner();
    RigidTransform::new(r, Vector3::from_fn(|_, _| rng.random_range(-500.0..500.0)))
}

fn ball_points(rng: &mut impl Rng, n: usize, radius: f64) -> Vec<Point3<f64>> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let v = Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0));
        if v.norm_squared() <= 1.0 {
            out.push(Point3::from(v * radius));
        }
    }
    out
}

/// Largest signed distance of `p` above any face plane of `hull`.
fn max_plane_excess(hull: &Mesh, p: &Point3<f64>) -> f64 {
    (0..hull.faces.len())
        .map(|f| {
            let [a, b, c] = hull.triangle(f);
            let n = (b - a).cross(&(c - a)).normalize();
            n.dot(&(p - a))
        })
        .fold(f64::NEG_INFINITY, f64::max)
}

#[test]
fn obj_cube_and_quads() {
    let tri = "v 0 0 0\nv 1 0 0\nv 0 1 0\nv 1 1 0\nv 0 0 1\nv 1 0 1\nv 0 1 1\nv 1 1 1\n\
               f 1 3 2\nf 2 3 4\nf 5 6 7\nf 6 8 7\nf 1 2 5\nf 2 6 5\nf 3 7 4\nf 4 7 8\nf 1 5 3\nf 3 5 7\nf 2 4 6\nf 4 8 6\n";
    let m = parse_obj(tri.as_bytes()).unwrap();
    assert_eq!((m.vertices.len(), m.faces.len()), (8, 12));

    let quads = "v 0 0 0\nv 1 0 0\nv 0 1 0\nv 1 1 0\nv 0 0 1\nv 1 0 1\nv 0 1 1\nv 1 1 1\n\
                 vn 0 0 1\nvt 0 0\nusemtl stone\ng box\n\
                 f 1//1 3//1 4//1 2//1\nf 5/1 6/1 8/1 7/1\nf 1 2 6 5\nf 3 7 8 4\nf 1 5 7 3\nf 2 4 8 6\n";
    let m = parse_obj(quads.as_bytes()).unwrap();
    assert_eq!(m.faces.len(), 12);
    assert!((hull_volume(&m).unwrap() - 1.0).abs() < 1e-12);

    let bad = "v 0 0 0\nv 1 0 0\nv 0 1 0\nv 1 1 0\nv 0 0 1\nv 1 0 1\nv 0 1 1\nv 1 1 1\nf 9 1 2\n";
    assert!(matches!(parse_obj(bad.as_bytes()), Err(GeometryError::IndexOutOfRange { index: 9, .. })));
}

#[test]
fn unit_cube_containment() {
    let cube = Mesh::cuboid(Point3::origin(), Point3::new(1.0, 1.0, 1.0));
    assert!(point_in_mesh(&cube, &Point3::new(0.5, 0.5, 0.5)));
    assert!(!point_in_mesh(&cube, &Point3::new(2.0, 0.0, 0.0)));
}

/// Voxel oracle: every voxel whose box touches a triangle's bounding box is
/// "shell"; the rest is split into outside and inside by a 6-connected flood
/// fill from a corner. Points in shell voxels are not judged.
#[test]
fn point_in_mesh_agrees_with_voxel_flood_fill() {
    let radius = 10.0;
    let sphere = Mesh::uv_sphere(Point3::new(0.3, -0.2, 0.1), radius, 24, 48);
    let h = 0.25;
    let lo = Point3::new(-12.0, -12.0, -12.0);
    let n = (24.0 / h) as usize;
    let idx = |i: usize, j: usize, k: usize| i + n * (j + n * k);
    let cell = |v: f64, o: f64| ((v - o) / h).floor() as isize;

    let mut shell = vec![false; n * n * n];
    for f in 0..sphere.faces.len() {
        let [a, b, c] = sphere.triangle(f);
        let tlo = a.inf(&b).inf(&c);
        let thi = a.sup(&b).sup(&c);
        let range = |axis: usize| {
            let s = cell(tlo[axis], lo[axis]).max(0) as usize;
            let e = (cell(thi[axis], lo[axis]).max(0) as usize).min(n - 1);
            s..=e
        };
        for k in range(2) {
            for j in range(1) {
                for i in range(0) {
                    shell[idx(i, j, k)] = true;
                }
            }
        }
    }
    let mut outside = vec![false; n * n * n];
    let mut queue = VecDeque::from([(0usize, 0usize, 0usize)]);
    outside[0] = true;
    while let Some((i, j, k)) = queue.pop_front() {
        let mut visit = |i: usize, j: usize, k: usize| {
            let id = idx(i, j, k);
            if !outside[id] && !shell[id] {
                outside[id] = true;
                queue.push_back((i, j, k));
            }
        };
        if i > 0 { visit(i - 1, j, k) }
        if j > 0 { visit(i, j - 1, k) }
        if k > 0 { visit(i, j, k - 1) }
        if i + 1 < n { visit(i + 1, j, k) }
        if j + 1 < n { visit(i, j + 1, k) }
        if k + 1 < n { visit(i, j, k + 1) }
    }

    let tester = InsideTester::new(&sphere);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (mut judged, mut agree, mut inside) = (0, 0, 0);
    while judged < 20_000 {
        let p = Point3::from(Vector3::from_fn(|_, _| rng.random_range(-11.99..11.99)));
        let (i, j, k) = (cell(p.x, lo.x) as usize, cell(p.y, lo.y) as usize, cell(p.z, lo.z) as usize);
        let id = idx(i, j, k);
        if shell[id] {
            continue;
        }
        judged += 1;
        let truth = !outside[id];
        inside += usize::from(truth);
        agree += usize::from(tester.contains(&p) == truth);
    }
    assert!(inside > 5_000, "oracle found only {inside} interior points");
    let rate = agree as f64 / judged as f64;
    assert!(rate >= 0.999, "agreement {rate}");
}

#[test]
fn mahalanobis_matches_chi_square_tail() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let pts = normal_points(&mut rng, 10_000);
    let t = Trajectory::from_positions(Frame::Tracker, pts, 0.025);
    let r = mahalanobis_filter(&t, 3.0).unwrap();
    assert!((r.outlier_fraction - CHI2_3_TAIL_AT_9).abs() < 0.005, "{}", r.outlier_fraction);
    assert_eq!(r.inliers.len() + r.outlier_indices.len(), 10_000);
    assert_eq!(r.outlier_fraction, r.outlier_indices.len() as f64 / 10_000.0);
}

#[test]
fn mahalanobis_rigid_invariance() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let pts = normal_points(&mut rng, 10_000)
        .into_iter()
        .map(|p| Point3::new(p.x * 20.0, p.y * 5.0 + p.x, p.z * 2.0))
        .collect::<Vec<_>>();
    let t = Trajectory::from_positions(Frame::Tracker, pts, 0.025);
    let base = mahalanobis_filter(&t, 3.0).unwrap();
    for _ in 0..20 {
        let moved = t.transformed(&random_motion(&mut rng));
        assert_eq!(mahalanobis_filter(&moved, 3.0).unwrap().outlier_indices, base.outlier_indices);
    }
}

#[test]
fn infinite_threshold_keeps_everything() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let t = Trajectory::from_positions(Frame::Ct, normal_points(&mut rng, 100), 0.1);
    let r = mahalanobis_filter(&t, f64::INFINITY).unwrap();
    assert!(r.outlier_indices.is_empty());
    assert_eq!(r.inliers, t);
}

#[test]
fn analytic_hulls() {
    let mut cube: Vec<Point3<f64>> = (0..8)
        .map(|i| Point3::new((i & 1) as f64, ((i >> 1) & 1) as f64, ((i >> 2) & 1) as f64))
        .collect();
    cube.push(Point3::new(0.5, 0.5, 0.5));
    let hull = convex_hull(&cube).unwrap();
    assert_eq!(hull.vertices.len(), 8);
    assert!((hull_volume(&hull).unwrap() - 1.0).abs() < 1e-9);

    let s = 1.0 / (2.0 * 2f64.sqrt());
    let tetra = [
        Point3::new(s, s, s),
        Point3::new(s, -s, -s),
        Point3::new(-s, s, -s),
        Point3::new(-s, -s, s),
    ];
    let hull = convex_hull(&tetra).unwrap();
    assert_eq!(hull.faces.len(), 4);
    assert!((hull_volume(&hull).unwrap() - 1.0 / (6.0 * 2f64.sqrt())).abs() < 1e-9);
}

#[test]
fn ball_hull_contains_every_point() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let pts = ball_points(&mut rng, 1000, 25.0);
    let hull = convex_hull(&pts).unwrap();
    assert_eq!(hull.euler_characteristic(), 2);
    assert_eq!(hull.boundary_edge_count(), 0);
    for p in &pts {
        assert!(max_plane_excess(&hull, p) <= HULL_EPSILON);
    }
}

/// Fraction of uniform box samples lying inside every face plane.
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
        let p = Vector3::new(
            rng.random_range(lo.x..hi.x),
            rng.random_range(lo.y..hi.y),
            rng.random_range(lo.z..hi.z),
        );
        if planes.iter().all(|(n, d)| n.dot(&p) <= *d) {
            hits += 1;
        }
    }
    (hi - lo).product() * hits as f64 / samples as f64
}

#[test]
fn random_polytopes_match_monte_carlo() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    for _ in 0..3 {
        let n = rng.random_range(8..40);
        let pts: Vec<_> = (0..n)
            .map(|_| Point3::new(rng.random_range(-5.0..5.0), rng.random_range(-2.0..9.0), rng.random_range(0.0..3.0)))
            .collect();
        let hull = convex_hull(&pts).unwrap();
        let v = hull_volume(&hull).unwrap();
        let mc = monte_carlo_volume(&hull, &mut rng, 400_000);
        assert!((v - mc).abs() / v < 0.01, "hull {v} vs monte carlo {mc}");
    }
}

#[test]
fn degenerate_hull_inputs() {
    let flat: Vec<_> = (0..10).map(|i| Point3::new(i as f64, (i * i) as f64, 2.0)).collect();
    assert!(matches!(convex_hull(&flat), Err(GeometryError::Degenerate(_))));
    assert!(matches!(convex_hull(&flat[..3]), Err(GeometryError::TooFewSamples { .. })));
}

#[test]
fn open_mesh_has_no_volume() {
    let mut m = Mesh::cuboid(Point3::origin(), Point3::new(1.0, 1.0, 1.0));
    m.faces.pop();
    assert!(matches!(hull_volume(&m), Err(GeometryError::OpenMesh { .. })));
}

#[test]
fn path_lengths() {
    let t = Trajectory::from_positions(Frame::Ct, [Point3::origin(), Point3::new(3.0, 4.0, 0.0)], 1.0);
    assert_eq!(path_length(&t).unwrap(), 5.0);
    let square = [(0.0, 0.0), (10.0, 0.0), (10.0, 10.0), (0.0, 10.0), (0.0, 0.0)].map(|(x, y)| Point3::new(x, y, 0.0));
    assert_eq!(polyline_length(&square), 40.0);
    let a = Point3::new(1.0, -2.0, 0.5);
    let b = Point3::new(-7.0, 13.0, 22.0);
    for n in [2, 3, 17, 1000] {
        let pts: Vec<_> = (0..n).map(|i| a + (b - a) * (i as f64 / (n - 1) as f64)).collect();
        assert!((polyline_length(&pts) - (b - a).norm()).abs() < 1e-9);
    }
    let one = Trajectory::from_positions(Frame::Ct, [a], 1.0);
    assert!(matches!(path_length(&one), Err(GeometryError::TooFewSamples { .. })));
}

#[test]
fn reported_percent_changes() {
    assert!((pct_change(10603.42, 13119.28).unwrap() - 23.73).abs() < 0.005);
    assert!((pct_change(757.25, 747.50).unwrap() - -1.29).abs() < 0.02);
    assert_eq!(pct_change(5.0, 5.0).unwrap(), 0.0);
    assert!(matches!(pct_change(0.0, 1.0), Err(GeometryError::ZeroBaseline)));
}

#[test]
fn ten_mm_cube_corner_trail() {
    let corners: Vec<_> = [0, 1, 3, 2, 6, 7, 5, 4]
        .iter()
        .map(|i| Point3::new(10.0 * (i & 1) as f64, 10.0 * ((i >> 1) & 1) as f64, 10.0 * ((i >> 2) & 1) as f64))
        .collect();
    let m = analyze_points(&corners, 3.0);
    assert!((m.hull_volume_mm3.unwrap() - 1000.0).abs() < 1e-6);
    assert_eq!(m.outlier_fraction, Some(0.0));
    let empty = analyze_points(&[], 3.0);
    assert_eq!((empty.hull_volume_mm3, empty.path_length_mm), (None, None));
}

#[test]
fn trajectory_csv_round_trip() {
    let mut t = Trajectory::new(Frame::Tracker);
    t.push(TrackedSample::at(0.0, Point3::new(1.5, -2.25, 3.0))).unwrap();
    let mut s = TrackedSample::at(0.025, Point3::new(0.1, 0.2, 0.3));
    s.orientation = Some(nalgebra::Quaternion::new(0.5, 0.5, 0.5, 0.5));
    t.push(s).unwrap();
    let mut buf = Vec::new();
    write_trajectory(&mut buf, &t).unwrap();
    assert!(buf.starts_with(b"t_seconds,x_mm,y_mm,z_mm,qw,qx,qy,qz\n"));
    assert_eq!(read_trajectory(&buf[..], Frame::Tracker).unwrap(), t);
    assert!(t.clone().push(TrackedSample::at(0.01, Point3::origin())).is_err());
}

fn hull_volume_of(pts: &[Point3<f64>]) -> f64 {
    hull_volume(&convex_hull(pts).unwrap()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn hull_volume_invariances(seed in any::<u64>(), scale in 0.1f64..10.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts = ball_points(&mut rng, 200, 30.0);
        let v = hull_volume_of(&pts);
        let motion = random_motion(&mut rng);
        let moved: Vec<_> = pts.iter().map(|p| motion.apply(p)).collect();
        prop_assert!((hull_volume_of(&moved) - v).abs() <= 1e-6 * v);
        let scaled: Vec<_> = pts.iter().map(|p| p * scale).collect();
        let expect = v * scale.powi(3);
        prop_assert!((hull_volume_of(&scaled) - expect).abs() <= 1e-6 * expect);
    }

    #[test]
    fn hull_contains_inputs(seed in any::<u64>(), n in 4usize..300) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Integer lattice points: many exact duplicates and coplanar faces.
        let pts: Vec<_> = (0..n)
            .map(|_| Point3::new(rng.random_range(0..6) as f64, rng.random_range(0..6) as f64, rng.random_range(0..6) as f64))
            .collect();
        let hull = match convex_hull(&pts) {
            Ok(h) => h,
            Err(GeometryError::Degenerate(_)) => return Ok(()),
            Err(e) => return Err(TestCaseError::fail(e.to_string())),
        };
        prop_assert_eq!(hull.euler_characteristic(), 2);
        prop_assert_eq!(hull.boundary_edge_count(), 0);
        for p in &pts {
            prop_assert!(max_plane_excess(&hull, p) <= HULL_EPSILON);
        }
        for v in &hull.vertices {
            prop_assert!(pts.contains(v));
        }
    }

    #[test]
    fn filtering_never_lengthens_the_path(seed in any::<u64>(), n in 10usize..400) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pts = normal_points(&mut rng, n);
        for _ in 0..n / 20 {
            let i = rng.random_range(0..n);
            pts[i] *= 8.0;
        }
        let t = Trajectory::from_positions(Frame::Ct, pts, 0.025);
        let r = mahalanobis_filter(&t, 2.0).unwrap();
        if r.inliers.len() >= 2 {
            prop_assert!(path_length(&r.inliers).unwrap() <= path_length(&t).unwrap());
        }
    }

    #[test]
    fn trail_hull_volume_grows(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts = normal_points(&mut rng, 120);
        let mut last = 0.0;
        for end in (10..=pts.len()).step_by(10) {
            if let Ok(h) = convex_hull(&pts[..end]) {
                let v = hull_volume(&h).unwrap();
                prop_assert!(v >= last - 1e-9 * v);
                last = v;
            }
        }
    }
}
