//! 3-D convex hull (quickhull) and closed-mesh volume.

use std::collections::HashMap;

use nalgebra::{Point3, Vector3};

use super::{GeometryError, Mesh};

/// Plane-distance tolerance, mm. Points within this of a face count as on it.
pub const HULL_EPSILON: f64 = 1e-9;

struct Face {
    v: [usize; 3],
    normal: Vector3<f64>,
    offset: f64,
    outside: Vec<usize>,
    alive: bool,
}

impl Face {
    fn new(points: &[Point3<f64>], v: [usize; 3]) -> Self {
        let [a, b, c] = v.map(|i| points[i]);
        let n = (b - a).cross(&(c - a));
        let len = n.norm();
        let normal = if len > 0.0 { n / len } else { n };
        Face {
            v,
            normal,
            offset: normal.dot(&a.coords),
            outside: Vec::new(),
            alive: true,
        }
    }

    fn distance(&self, p: &Point3<f64>) -> f64 {
        self.normal.dot(&p.coords) - self.offset
    }

    fn edges(&self) -> [(usize, usize); 3] {
        let [a, b, c] = self.v;
        [(a, b), (b, c), (c, a)]
    }
}

struct Builder<'a> {
    points: &'a [Point3<f64>],
    faces: Vec<Face>,
    /// directed edge -> face that owns it
    edges: HashMap<(usize, usize), usize>,
}

impl<'a> Builder<'a> {
    fn add_face(&mut self, v: [usize; 3]) -> Result<usize, GeometryError> {
        let id = self.faces.len();
        let face = Face::new(self.points, v);
        for e in face.edges() {
            if self.edges.insert(e, id).is_some() {
                return Err(GeometryError::HullFailure(format!("edge {e:?} claimed twice")));
            }
        }
        self.faces.push(face);
        Ok(id)
    }

    fn remove_face(&mut self, id: usize) {
        let face = &mut self.faces[id];
        face.alive = false;
        for e in face.edges() {
            if self.edges.get(&e) == Some(&id) {
                self.edges.remove(&e);
            }
        }
    }

    fn assign(&mut self, candidates: &[usize], pts: impl IntoIterator<Item = usize>) {
        for p in pts {
            let point = &self.points[p];
            let best = candidates
                .iter()
                .map(|&f| (f, self.faces[f].distance(point)))
                .filter(|&(_, d)| d > HULL_EPSILON)
                .max_by(|a, b| a.1.total_cmp(&b.1));
            if let Some((f, _)) = best {
                self.faces[f].outside.push(p);
            }
        }
    }

    /// Adds the farthest outside point of `face_id`; returns the new faces.
    fn expand(&mut self, face_id: usize) -> Result<Vec<usize>, GeometryError> {
        let points = self.points;
        let apex = {
            let f = &self.faces[face_id];
            *f.outside
                .iter()
                .max_by(|&&a, &&b| f.distance(&points[a]).total_cmp(&f.distance(&points[b])))
                .expect("expand called with empty outside set")
        };
        let eye = points[apex];

        // Faces visible from the apex, grown outward from the seed face.
        let mut visible = vec![face_id];
        let mut is_visible: HashMap<usize, bool> = HashMap::from([(face_id, true)]);
        let mut queued = std::collections::HashSet::from([face_id]);
        let mut horizon = Vec::new();
        let mut i = 0;
        while i < visible.len() {
            let f = visible[i];
            i += 1;
            for (a, b) in self.faces[f].edges() {
                let Some(&nb) = self.edges.get(&(b, a)) else {
                    return Err(GeometryError::HullFailure("missing twin edge".into()));
                };
                let vis = *is_visible
                    .entry(nb)
                    .or_insert_with(|| self.faces[nb].distance(&eye) > HULL_EPSILON);
                if vis {
                    if queued.insert(nb) {
                        visible.push(nb);
                    }
                } else {
                    horizon.push((a, b));
                }
            }
        }

        let mut orphans = Vec::new();
        for &f in &visible {
            orphans.extend(self.faces[f].outside.drain(..).filter(|&p| p != apex));
            self.remove_face(f);
        }
        let mut created = Vec::with_capacity(horizon.len());
        for (a, b) in horizon {
            created.push(self.add_face([a, b, apex])?);
        }
        self.assign(&created, orphans);
        Ok(created)
    }
}

fn initial_simplex(points: &[Point3<f64>]) -> Result<[usize; 4], GeometryError> {
    // extreme points along each axis
    let mut extremes = [0usize; 6];
    for (i, p) in points.iter().enumerate() {
        for k in 0..3 {
            if p[k] < points[extremes[2 * k]][k] {
                extremes[2 * k] = i;
            }
            if p[k] > points[extremes[2 * k + 1]][k] {
                extremes[2 * k + 1] = i;
            }
        }
    }
    let (mut i0, mut i1, mut best) = (0, 0, -1.0);
    for &a in &extremes {
        for &b in &extremes {
            let d = (points[a] - points[b]).norm_squared();
            if d > best {
                (i0, i1, best) = (a, b, d);
            }
        }
    }
    if best.sqrt() <= HULL_EPSILON {
        return Err(GeometryError::Degenerate("coincident"));
    }

    let axis = (points[i1] - points[i0]).normalize();
    let line_dist = |p: &Point3<f64>| {
        let d = p - points[i0];
        (d - axis * d.dot(&axis)).norm()
    };
    let i2 = argmax(points, line_dist);
    if line_dist(&points[i2]) <= HULL_EPSILON {
        return Err(GeometryError::Degenerate("collinear"));
    }

    let normal = (points[i1] - points[i0]).cross(&(points[i2] - points[i0])).normalize();
    let plane_dist = |p: &Point3<f64>| normal.dot(&(p - points[i0])).abs();
    let i3 = argmax(points, plane_dist);
    if plane_dist(&points[i3]) <= HULL_EPSILON {
        return Err(GeometryError::Degenerate("coplanar"));
    }
    Ok([i0, i1, i2, i3])
}

fn argmax(points: &[Point3<f64>], f: impl Fn(&Point3<f64>) -> f64) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, p) in points.iter().enumerate() {
        let d = f(p);
        if d > best.1 {
            best = (i, d);
        }
    }
    best.0
}

/// Convex hull as a closed, outward-oriented triangle mesh. Interior and
/// duplicate points are not hull vertices.
pub fn convex_hull(points: &[Point3<f64>]) -> Result<Mesh, GeometryError> {
    if points.len() < 4 {
        return Err(GeometryError::TooFewSamples {
            needed: 4,
            got: points.len(),
        });
    }
    if points.iter().any(|p| p.iter().any(|v| !v.is_finite())) {
        return Err(GeometryError::HullFailure("non-finite point".into()));
    }
    let simplex = initial_simplex(points)?;
    let centroid = Point3::from(simplex.iter().fold(Vector3::zeros(), |acc, &i| acc + points[i].coords) / 4.0);

    let mut b = Builder {
        points,
        faces: Vec::new(),
        edges: HashMap::new(),
    };
    let [p0, p1, p2, p3] = simplex;
    for tri in [[p0, p1, p2], [p0, p3, p1], [p1, p3, p2], [p0, p2, p3]] {
        let face = Face::new(points, tri);
        let tri = if face.distance(&centroid) > 0.0 {
            [tri[0], tri[2], tri[1]]
        } else {
            tri
        };
        b.add_face(tri)?;
    }
    let rest = (0..points.len()).filter(|i| !simplex.contains(i));
    b.assign(&[0, 1, 2, 3], rest);

    let mut pending: Vec<usize> = (0..4).collect();
    while let Some(f) = pending.pop() {
        if b.faces[f].alive && !b.faces[f].outside.is_empty() {
            pending.extend(b.expand(f)?);
        }
    }

    let mut remap = HashMap::new();
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    for f in b.faces.iter().filter(|f| f.alive) {
        let tri = f.v.map(|i| {
            *remap.entry(i).or_insert_with(|| {
                vertices.push(points[i]);
                (vertices.len() - 1) as u32
            })
        });
        faces.push(tri);
    }
    Ok(Mesh::new(vertices, faces))
}

/// Enclosed volume of a closed, consistently oriented mesh (mm³).
pub fn hull_volume(mesh: &Mesh) -> Result<f64, GeometryError> {
    mesh.check_closed()?;
    let origin = mesh.vertices[mesh.faces[0][0] as usize];
    let six_vol: f64 = mesh
        .faces
        .iter()
        .map(|f| {
            let [a, b, c] = f.map(|i| mesh.vertices[i as usize] - origin);
            a.dot(&b.cross(&c))
        })
        .sum();
    Ok(six_vol.abs() / 6.0)
}
