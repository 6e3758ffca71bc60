use std::collections::HashMap;

use nalgebra::Point3;

use super::GeometryError;

/// Triangle surface in CT coordinates (mm).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Mesh {
    pub vertices: Vec<Point3<f64>>,
    pub faces: Vec<[u32; 3]>,
}

impl Mesh {
    pub fn new(vertices: Vec<Point3<f64>>, faces: Vec<[u32; 3]>) -> Self {
        Mesh { vertices, faces }
    }

    pub fn triangle(&self, face: usize) -> [Point3<f64>; 3] {
        self.faces[face].map(|i| self.vertices[i as usize])
    }

    /// Drops faces that repeat a vertex or have (numerically) zero area.
    pub fn remove_degenerate_faces(&mut self) -> usize {
        let before = self.faces.len();
        let verts = &self.vertices;
        self.faces.retain(|f| {
            if f[0] == f[1] || f[1] == f[2] || f[0] == f[2] {
                return false;
            }
            let [a, b, c] = f.map(|i| verts[i as usize]);
            let (e1, e2) = (b - a, c - a);
            let longest = e1.norm_squared().max(e2.norm_squared()).max((c - b).norm_squared());
            e1.cross(&e2).norm() > 1e-12 * longest
        });
        before - self.faces.len()
    }

    /// Number of undirected edges not shared by exactly two faces.
    pub fn boundary_edge_count(&self) -> usize {
        let mut counts: HashMap<(u32, u32), u32> = HashMap::new();
        for f in &self.faces {
            for k in 0..3 {
                let (a, b) = (f[k], f[(k + 1) % 3]);
                *counts.entry((a.min(b), a.max(b))).or_default() += 1;
            }
        }
        counts.values().filter(|&&c| c != 2).count()
    }

    pub fn edge_count(&self) -> usize {
        let mut edges = std::collections::HashSet::new();
        for f in &self.faces {
            for k in 0..3 {
                let (a, b) = (f[k], f[(k + 1) % 3]);
                edges.insert((a.min(b), a.max(b)));
            }
        }
        edges.len()
    }

    /// V − E + F over the vertices actually referenced by faces.
    pub fn euler_characteristic(&self) -> i64 {
        let used: std::collections::HashSet<u32> = self.faces.iter().flatten().copied().collect();
        used.len() as i64 - self.edge_count() as i64 + self.faces.len() as i64
    }

    pub fn bounds(&self) -> Option<(Point3<f64>, Point3<f64>)> {
        let first = *self.vertices.first()?;
        Some(self.vertices.iter().fold((first, first), |(lo, hi), v| {
            (lo.inf(v), hi.sup(v))
        }))
    }

    pub(crate) fn check_closed(&self) -> Result<(), GeometryError> {
        if self.faces.is_empty() {
            return Err(GeometryError::EmptyMesh);
        }
        match self.boundary_edge_count() {
            0 => Ok(()),
            n => Err(GeometryError::OpenMesh { boundary_edges: n }),
        }
    }

    /// Axis-aligned box `[lo, hi]` as 8 vertices and 12 outward triangles.
    pub fn cuboid(lo: Point3<f64>, hi: Point3<f64>) -> Self {
        let vertices = (0..8)
            .map(|i| {
                Point3::new(
                    if i & 1 == 0 { lo.x } else { hi.x },
                    if i & 2 == 0 { lo.y } else { hi.y },
                    if i & 4 == 0 { lo.z } else { hi.z },
                )
            })
            .collect();
        let faces = vec![
            [0, 2, 1], [1, 2, 3], // z = lo
            [4, 5, 6], [5, 7, 6], // z = hi
            [0, 1, 4], [1, 5, 4], // y = lo
            [2, 6, 3], [3, 6, 7], // y = hi
            [0, 4, 2], [2, 4, 6], // x = lo
            [1, 3, 5], [3, 7, 5], // x = hi
        ];
        Mesh { vertices, faces }
    }

    /// Closed star-shaped surface `r(θ, φ)` sampled on a latitude/longitude
    /// grid. `radius` must stay positive.
    pub fn radial_surface(
        center: Point3<f64>,
        rings: usize,
        segments: usize,
        radius: impl Fn(f64, f64) -> f64,
    ) -> Self {
        assert!(rings >= 2 && segments >= 3);
        let dir = |theta: f64, phi: f64| {
            nalgebra::Vector3::new(theta.sin() * phi.cos(), theta.sin() * phi.sin(), theta.cos())
        };
        let mut vertices = Vec::with_capacity(2 + (rings - 1) * segments);
        vertices.push(center + dir(0.0, 0.0) * radius(0.0, 0.0));
        for r in 1..rings {
            let theta = std::f64::consts::PI * r as f64 / rings as f64;
            for s in 0..segments {
                let phi = std::f64::consts::TAU * s as f64 / segments as f64;
                vertices.push(center + dir(theta, phi) * radius(theta, phi));
            }
        }
        let pi = std::f64::consts::PI;
        vertices.push(center + dir(pi, 0.0) * radius(pi, 0.0));
        let bottom = (vertices.len() - 1) as u32;
        let ring = |r: usize, s: usize| (1 + (r - 1) * segments + s % segments) as u32;

        let mut faces = Vec::new();
        for s in 0..segments {
            faces.push([0, ring(1, s), ring(1, s + 1)]);
        }
        for r in 1..rings - 1 {
            for s in 0..segments {
                let (a, b) = (ring(r, s), ring(r, s + 1));
                let (c, d) = (ring(r + 1, s), ring(r + 1, s + 1));
                faces.push([a, c, d]);
                faces.push([a, d, b]);
            }
        }
        for s in 0..segments {
            faces.push([bottom, ring(rings - 1, s + 1), ring(rings - 1, s)]);
        }
        Mesh { vertices, faces }
    }

    pub fn uv_sphere(center: Point3<f64>, radius: f64, rings: usize, segments: usize) -> Self {
        Self::radial_surface(center, rings, segments, |_, _| radius)
    }
}
