//! Ray-parity containment for closed meshes.
//!
//! A ray in a random direction is cast from the query point and crossings are
//! counted. Rays that graze a face (|dir·n| < 1e-9) or pass within 1e-9 mm of
//! a triangle edge are discarded and a new direction is drawn. Results on
//! meshes that are not watertight are meaningless.

use nalgebra::{Point3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Mesh;

const GRAZE_EPS: f64 = 1e-9;
const EDGE_EPS: f64 = 1e-9;
const MAX_ATTEMPTS: usize = 32;
const DEFAULT_SEED: u64 = 0x0005_eed0_fa11;

struct FaceData {
    a: Point3<f64>,
    e1: Vector3<f64>,
    e2: Vector3<f64>,
    normal: Vector3<f64>,
    /// Heights over the edge opposite each vertex (a, b, c).
    heights: [f64; 3],
    lo: Point3<f64>,
    hi: Point3<f64>,
}

/// Precomputed face data for repeated containment queries against one mesh.
pub struct InsideTester {
    faces: Vec<FaceData>,
}

enum Cast {
    Crossings(usize),
    Degenerate,
}

impl InsideTester {
    pub fn new(mesh: &Mesh) -> Self {
        let faces = mesh
            .faces
            .iter()
            .map(|f| {
                let [a, b, c] = f.map(|i| mesh.vertices[i as usize]);
                let (e1, e2) = (b - a, c - a);
                let cross = e1.cross(&e2);
                let twice_area = cross.norm();
                let h = |edge: Vector3<f64>| twice_area / edge.norm();
                FaceData {
                    a,
                    e1,
                    e2,
                    normal: cross / twice_area,
                    heights: [h(c - b), h(c - a), h(b - a)],
                    lo: a.inf(&b).inf(&c),
                    hi: a.sup(&b).sup(&c),
                }
            })
            .collect();
        InsideTester { faces }
    }

    /// Deterministic query: the ray directions come from a fixed seed.
    pub fn contains(&self, p: &Point3<f64>) -> bool {
        let mut rng = ChaCha8Rng::seed_from_u64(DEFAULT_SEED);
        self.contains_with(p, &mut rng)
    }

    pub fn contains_with<R: Rng + ?Sized>(&self, p: &Point3<f64>, rng: &mut R) -> bool {
        let mut last = 0;
        for _ in 0..MAX_ATTEMPTS {
            let dir = random_direction(rng);
            match self.cast(p, &dir) {
                Cast::Crossings(n) => return n % 2 == 1,
                Cast::Degenerate => last += 1,
            }
        }
        // Every direction was degenerate: the point sits on the surface.
        debug_assert_eq!(last, MAX_ATTEMPTS);
        true
    }

    fn cast(&self, p: &Point3<f64>, dir: &Vector3<f64>) -> Cast {
        let mut crossings = 0;
        for f in &self.faces {
            // cheap reject: the ray cannot reach a box entirely behind it
            if (0..3).any(|k| (dir[k] > 0.0 && f.hi[k] < p[k]) || (dir[k] < 0.0 && f.lo[k] > p[k])) {
                continue;
            }
            let pvec = dir.cross(&f.e2);
            let det = f.e1.dot(&pvec);
            let tvec = p - f.a;
            let grazing = dir.dot(&f.normal).abs() < GRAZE_EPS;
            if det == 0.0 {
                if f.normal.dot(&tvec).abs() < EDGE_EPS {
                    return Cast::Degenerate;
                }
                continue;
            }
            let inv = 1.0 / det;
            let u = tvec.dot(&pvec) * inv;
            let qvec = tvec.cross(&f.e1);
            let v = dir.dot(&qvec) * inv;
            let t = f.e2.dot(&qvec) * inv;
            if t <= 0.0 {
                continue;
            }
            let bary = [1.0 - u - v, u, v];
            let dists = [0, 1, 2].map(|k| bary[k] * f.heights[k]);
            let min = dists.iter().copied().fold(f64::INFINITY, f64::min);
            if min < -EDGE_EPS {
                continue;
            }
            if grazing || min <= EDGE_EPS {
                return Cast::Degenerate;
            }
            crossings += 1;
        }
        Cast::Crossings(crossings)
    }
}

fn random_direction<R: Rng + ?Sized>(rng: &mut R) -> Vector3<f64> {
    loop {
        let v = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let n = v.norm();
        if n > 1e-3 && n <= 1.0 {
            return v / n;
        }
    }
}

/// Single-shot containment test. Build an [`InsideTester`] for many queries.
pub fn point_in_mesh(mesh: &Mesh, point: &Point3<f64>) -> bool {
    InsideTester::new(mesh).contains(point)
}
