use nalgebra::{Rotation3, UnitQuaternion};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use scopenav_core::registration::{
    read_fiducial_pairs, solve_rigid, write_fiducial_pairs, RegistrationError,
};
use scopenav_core::{FiducialPair, Matrix3, Point3, RigidTransform, Vector3};

fn random_rotation(rng: &mut impl Rng) -> Matrix3<f64> {
    // Normalized 4-D Gaussian is uniform on SO(3).
    let q = nalgebra::Quaternion::new(
        rng.sample::<f64, _>(StandardNormal),
        rng.sample(StandardNormal),
        rng.sample(StandardNormal),
        rng.sample(StandardNormal),
    );
    UnitQuaternion::from_quaternion(q).to_rotation_matrix().into_inner()
}

fn random_motion(rng: &mut impl Rng) -> RigidTransform {
    let t = Vector3::from_fn(|_, _| rng.random_range(-200.0..200.0));
    RigidTransform::new(random_rotation(rng), t)
}

fn random_points(rng: &mut impl Rng, n: usize) -> Vec<Point3<f64>> {
    (0..n).map(|_| Point3::from(Vector3::from_fn(|_, _| rng.random_range(-60.0..60.0)))).collect()
}

fn pairs_for(points: &[Point3<f64>], truth: &RigidTransform) -> Vec<FiducialPair> {
    points
        .iter()
        .enumerate()
        .map(|(i, p)| FiducialPair::new(format!("F{i}"), *p, truth.apply(p)))
        .collect()
}

/// Angle of `aᵀb`, from `‖a − b‖_F = 2√2·sin(θ/2)`, which stays accurate
/// near zero where the trace formula loses precision.
fn rotation_error(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
    2.0 * ((a - b).norm() / (2.0 * std::f64::consts::SQRT_2)).min(1.0).asin()
}

#[test]
fn identity_and_translation() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let pts = random_points(&mut rng, 6);
    let r = solve_rigid(&pairs_for(&pts, &RigidTransform::identity())).unwrap();
    assert!((r.transform.rotation - Matrix3::identity()).abs().max() < 1e-9);
    assert!(r.transform.translation.norm() < 1e-9);
    assert!(r.fre < 1e-9);

    let shift = Vector3::new(10.0, -5.0, 2.0);
    let r = solve_rigid(&pairs_for(&pts, &RigidTransform::from_translation(shift))).unwrap();
    assert!((r.transform.rotation - Matrix3::identity()).abs().max() < 1e-9);
    assert!((r.transform.translation - shift).norm() < 1e-9);
    assert!(r.fre < 1e-9);
}

#[test]
fn quarter_turn_about_z() {
    let t = RigidTransform::new(Rotation3::from_axis_angle(&Vector3::z_axis(), std::f64::consts::FRAC_PI_2).into_inner(), Vector3::zeros());
    let p = t.apply(&Point3::new(1.0, 0.0, 0.0));
    assert!((p - Point3::new(0.0, 1.0, 0.0)).norm() < 1e-15);
}

#[test]
fn inverse_and_composition() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    assert_eq!(RigidTransform::identity().invert(), RigidTransform::identity());
    let t = RigidTransform::from_translation(Vector3::new(1.0, 2.0, 3.0)).invert();
    assert_eq!(t.translation, Vector3::new(-1.0, -2.0, -3.0));
    for _ in 0..100 {
        let t = random_motion(&mut rng);
        let id = t.compose(&t.invert());
        assert!((id.rotation - Matrix3::identity()).abs().max() < 1e-9);
        assert!(id.translation.norm() < 1e-9);
        let p = random_points(&mut rng, 1)[0];
        assert!((t.invert().apply(&t.apply(&p)) - p).norm() < 1e-9);
    }
}

#[test]
fn mirrored_targets_still_give_a_rotation() {
    // CT points mirrored through a plane: the best orthogonal fit is a
    // reflection, which must not be returned.
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let pts = random_points(&mut rng, 6);
        let pairs: Vec<_> = pts
            .iter()
            .enumerate()
            .map(|(i, p)| FiducialPair::new(format!("F{i}"), *p, Point3::new(-p.x, p.y, p.z)))
            .collect();
        let r = solve_rigid(&pairs).unwrap();
        assert!((r.transform.rotation.determinant() - 1.0).abs() < 1e-9);
        assert!(r.transform.is_proper(1e-9));
    }
}

#[test]
fn errors() {
    let p = Point3::origin();
    assert_eq!(
        solve_rigid(&[FiducialPair::new("a", p, p), FiducialPair::new("b", p, p)]),
        Err(RegistrationError::TooFewPairs(2))
    );
    let line: Vec<_> = (0..5)
        .map(|i| FiducialPair::new(format!("L{i}"), Point3::new(i as f64, 2.0 * i as f64, 0.5), p))
        .collect();
    assert_eq!(solve_rigid(&line), Err(RegistrationError::Degenerate));
    let mut pts = pairs_for(&random_points(&mut ChaCha8Rng::seed_from_u64(4), 4), &RigidTransform::identity());
    pts[2].ct_point.y = f64::NAN;
    assert!(matches!(solve_rigid(&pts), Err(RegistrationError::NonFinite(_))));
}

/// Noise added to CT points: the RMS residual of a 6-point fit has expected
/// value near σ·sqrt((3n − 6)/(3n)) ≈ 0.82σ, so the average over trials must
/// land in the sanity band.
#[test]
fn noise_band() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for sigma in [0.1, 0.5, 2.0] {
        let noise = Normal::new(0.0, sigma).unwrap();
        let mut fres = Vec::new();
        for _ in 0..100 {
            let truth = random_motion(&mut rng);
            let pts = random_points(&mut rng, 6);
            let mut pairs = pairs_for(&pts, &truth);
            for p in &mut pairs {
                p.ct_point += Vector3::from_fn(|_, _| noise.sample(&mut rng));
            }
            fres.push(solve_rigid(&pairs).unwrap().fre);
        }
        let mean = fres.iter().sum::<f64>() / fres.len() as f64;
        assert!(mean >= 0.5 * sigma && mean <= 2.0 * sigma, "sigma {sigma}: mean FRE {mean}");
        let inside = fres.iter().filter(|&&f| f >= 0.5 * sigma && f <= 2.0 * sigma).count();
        assert!(inside >= 90, "sigma {sigma}: only {inside}/100 trials in band");
    }
}

#[test]
fn fiducial_file_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let pairs = pairs_for(&random_points(&mut rng, 6), &random_motion(&mut rng));
    let mut buf = Vec::new();
    write_fiducial_pairs(&mut buf, &pairs).unwrap();
    assert_eq!(read_fiducial_pairs(&buf[..]).unwrap(), pairs);
}

#[test]
fn matrix_text_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let t = random_motion(&mut rng);
    let text = t.to_matrix_text();
    assert_eq!(text.lines().count(), 4);
    assert!(text.lines().all(|l| l.split(' ').count() == 4));
    assert_eq!(RigidTransform::parse_matrix_text(&text).unwrap(), t);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(400))]

    #[test]
    fn noiseless_recovery(seed in any::<u64>(), n in 3usize..=10) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let truth = random_motion(&mut rng);
        let pts = random_points(&mut rng, n);
        let r = solve_rigid(&pairs_for(&pts, &truth)).unwrap();
        prop_assert!(rotation_error(&r.transform.rotation, &truth.rotation) < 1e-6);
        prop_assert!((r.transform.translation - truth.translation).norm() < 1e-6);
        prop_assert!((r.transform.rotation.determinant() - 1.0).abs() < 1e-9);
        prop_assert!(r.fre < 1e-9);
        let mean_sq = r.per_point_residuals.iter().map(|x| x * x).sum::<f64>() / n as f64;
        prop_assert!((r.fre * r.fre - mean_sq).abs() <= 1e-12 * mean_sq.max(1e-300));
    }

    #[test]
    fn permutation_invariance(seed in any::<u64>(), shuffle_seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let truth = random_motion(&mut rng);
        let mut pairs = pairs_for(&random_points(&mut rng, 7), &truth);
        for p in &mut pairs {
            p.ct_point += Vector3::from_fn(|_, _| rng.random_range(-0.5..0.5));
        }
        let a = solve_rigid(&pairs).unwrap();
        let mut shuffled = pairs.clone();
        let mut srng = ChaCha8Rng::seed_from_u64(shuffle_seed);
        for i in (1..shuffled.len()).rev() {
            shuffled.swap(i, srng.random_range(0..=i));
        }
        let b = solve_rigid(&shuffled).unwrap();
        prop_assert!((a.transform.rotation - b.transform.rotation).abs().max() < 1e-9);
        prop_assert!((a.transform.translation - b.transform.translation).norm() < 1e-9);
        prop_assert!((a.fre - b.fre).abs() < 1e-9);
    }
}

