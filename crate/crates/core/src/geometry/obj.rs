//! Wavefront OBJ subset: `v` and `f` records. Polygons are fanned into
//! triangles; normals, texture coordinates, materials and groups are ignored.

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use nalgebra::Point3;

use super::{GeometryError, Mesh};

pub fn load_obj(path: impl AsRef<Path>) -> Result<Mesh, GeometryError> {
    parse_obj(BufReader::new(File::open(path)?))
}

pub fn parse_obj(reader: impl BufRead) -> Result<Mesh, GeometryError> {
    let mut vertices = Vec::new();
    // (line, raw index) so out-of-range positive indices can be reported
    // after all vertices are known.
    let mut faces: Vec<[(usize, i64); 3]> = Vec::new();

    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line?;
        let line = line.split('#').next().unwrap_or("").trim();
        let mut parts = line.split_whitespace();
        match parts.next() {
            Some("v") => {
                let coords: Vec<f64> = parts
                    .take(3)
                    .map(|s| s.parse::<f64>())
                    .collect::<Result<_, _>>()
                    .map_err(|e| malformed(lineno, format!("vertex coordinate: {e}")))?;
                if coords.len() != 3 || coords.iter().any(|c| !c.is_finite()) {
                    return Err(malformed(lineno, "vertex needs 3 finite coordinates".into()));
                }
                vertices.push(Point3::new(coords[0], coords[1], coords[2]));
            }
            Some("f") => {
                let idx: Vec<i64> = parts
                    .map(|tok| {
                        let first = tok.split('/').next().unwrap_or("");
                        first
                            .parse::<i64>()
                            .map_err(|_| malformed(lineno, format!("face index {tok:?}")))
                    })
                    .collect::<Result<_, _>>()?;
                if idx.len() < 3 {
                    return Err(malformed(lineno, format!("face has {} vertices", idx.len())));
                }
                let resolved: Vec<i64> = idx
                    .iter()
                    .map(|&k| match k {
                        0 => Err(malformed(lineno, "face index 0".into())),
                        k if k < 0 => {
                            let abs = vertices.len() as i64 + k;
                            if abs < 0 {
                                Err(GeometryError::IndexOutOfRange {
                                    line: lineno,
                                    index: k,
                                    vertex_count: vertices.len(),
                                })
                            } else {
                                Ok(abs + 1)
                            }
                        }
                        k => Ok(k),
                    })
                    .collect::<Result<_, _>>()?;
                for k in 1..resolved.len() - 1 {
                    faces.push([
                        (lineno, resolved[0]),
                        (lineno, resolved[k]),
                        (lineno, resolved[k + 1]),
                    ]);
                }
            }
            _ => {}
        }
    }

    let n = vertices.len();
    let faces = faces
        .into_iter()
        .map(|f| {
            let mut out = [0u32; 3];
            for (slot, (line, k)) in out.iter_mut().zip(f) {
                if k < 1 || k as usize > n {
                    return Err(GeometryError::IndexOutOfRange {
                        line,
                        index: k,
                        vertex_count: n,
                    });
                }
                *slot = (k - 1) as u32;
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>, _>>()?;

    let mut mesh = Mesh::new(vertices, faces);
    mesh.remove_degenerate_faces();
    if mesh.faces.is_empty() {
        return Err(GeometryError::EmptyMesh);
    }
    Ok(mesh)
}

pub fn write_obj(mut w: impl Write, mesh: &Mesh) -> std::io::Result<()> {
    for v in &mesh.vertices {
        writeln!(w, "v {} {} {}", v.x, v.y, v.z)?;
    }
    for f in &mesh.faces {
        writeln!(w, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1)?;
    }
    Ok(())
}

fn malformed(line: usize, message: String) -> GeometryError {
    GeometryError::Malformed { line, message }
}
