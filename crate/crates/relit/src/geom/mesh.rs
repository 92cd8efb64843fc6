//! Triangle meshes: a minimal OBJ loader and nearest-hit queries.
//!
//! The loader accepts the plain-geometry subset of OBJ — `v` and `f` lines,
//! 1-based indices, `f` entries of the `i`, `i/..`, `i//..` forms — and fans
//! polygons with more than three vertices into triangles. Everything else
//! (normals, texcoords, materials, groups) is ignored.

use super::{ray_triangle, Ray, Vec3};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Clone, Default)]
pub struct TriangleMesh {
    pub vertices: Vec<Vec3>,
    pub faces: Vec<[u32; 3]>,
}

#[derive(Debug, Error)]
pub enum ObjError {
    #[error("obj read failed: {0}")]
    Io(#[from] std::io::Error),
    #[error("obj line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

impl TriangleMesh {
    pub fn is_empty(&self) -> bool {
        self.faces.is_empty()
    }

    /// Unit cube `[0,1]³` as 12 triangles, outward winding.
    pub fn unit_cube() -> TriangleMesh {
        let v = |x: f64, y: f64, z: f64| Vec3 { x, y, z };
        let vertices = vec![
            v(0., 0., 0.),
            v(1., 0., 0.),
            v(1., 1., 0.),
            v(0., 1., 0.),
            v(0., 0., 1.),
            v(1., 0., 1.),
            v(1., 1., 1.),
            v(0., 1., 1.),
        ];
        let quads = [
            [0u32, 3, 2, 1], // z = 0, normal -z
            [4, 5, 6, 7],    // z = 1, normal +z
            [0, 1, 5, 4],    // y = 0
            [2, 3, 7, 6],    // y = 1
            [0, 4, 7, 3],    // x = 0
            [1, 2, 6, 5],    // x = 1
        ];
        let mut faces = Vec::new();
        for q in quads {
            faces.push([q[0], q[1], q[2]]);
            faces.push([q[0], q[2], q[3]]);
        }
        TriangleMesh { vertices, faces }
    }

    /// Scale about the origin, yaw about +z, then translate — the insertion
    /// placement transform.
    pub fn transformed(&self, scale: f64, yaw_rad: f64, translate: Vec3) -> TriangleMesh {
        let (s, c) = yaw_rad.sin_cos();
        let vertices = self
            .vertices
            .iter()
            .map(|p| {
                let q = *p * scale;
                Vec3 {
                    x: c * q.x - s * q.y,
                    y: s * q.x + c * q.y,
                    z: q.z,
                } + translate
            })
            .collect();
        TriangleMesh { vertices, faces: self.faces.clone() }
    }

    pub fn triangle(&self, f: usize) -> (Vec3, Vec3, Vec3) {
        let [i, j, k] = self.faces[f];
        (self.vertices[i as usize], self.vertices[j as usize], self.vertices[k as usize])
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeshHit {
    pub t: f64,
    pub face: usize,
    /// Unit geometric normal, flipped to face against the ray.
    pub normal: Vec3,
}

/// Nearest triangle hit over the whole mesh (exhaustive scan).
pub fn ray_mesh(ray: &Ray, mesh: &TriangleMesh) -> Option<MeshHit> {
    let mut best: Option<MeshHit> = None;
    for f in 0..mesh.faces.len() {
        let (a, b, c) = mesh.triangle(f);
        if let Some(hit) = ray_triangle(ray, a, b, c) {
            if best.map_or(true, |h| hit.t < h.t) {
                let mut n = (b - a).cross(c - a).normalized().unwrap_or(Vec3 {
                    x: 0.0,
                    y: 0.0,
                    z: 1.0,
                });
                if n.dot(ray.dir) > 0.0 {
                    n = -n;
                }
                best = Some(MeshHit { t: hit.t, face: f, normal: n });
            }
        }
    }
    best
}

pub fn load_obj(path: &Path) -> Result<TriangleMesh, ObjError> {
    parse_obj(&std::fs::read_to_string(path)?)
}

pub fn parse_obj(text: &str) -> Result<TriangleMesh, ObjError> {
    let mut mesh = TriangleMesh::default();
    for (ln, raw) in text.lines().enumerate() {
        let line = ln + 1;
        let l = raw.trim();
        if l.is_empty() || l.starts_with('#') {
            continue;
        }
        let mut tok = l.split_whitespace();
        match tok.next() {
            Some("v") => {
                let mut read = || -> Result<f64, ObjError> {
                    tok.next()
                        .ok_or_else(|| ObjError::Parse { line, msg: "vertex needs 3 coordinates".into() })?
                        .parse()
                        .map_err(|e| ObjError::Parse { line, msg: format!("bad coordinate: {e}") })
                };
                let (x, y, z) = (read()?, read()?, read()?);
                mesh.vertices.push(Vec3 { x, y, z });
            }
            Some("f") => {
                let mut idx = Vec::new();
                for part in tok {
                    let first = part.split('/').next().unwrap_or("");
                    let i: i64 = first
                        .parse()
                        .map_err(|e| ObjError::Parse { line, msg: format!("bad face index '{part}': {e}") })?;
                    if i < 1 {
                        return Err(ObjError::Parse {
                            line,
                            msg: format!("face index {i} out of range (1-based indices only)"),
                        });
                    }
                    let i = (i - 1) as usize;
                    if i >= mesh.vertices.len() {
                        return Err(ObjError::Parse {
                            line,
                            msg: format!("face index {} exceeds vertex count {}", i + 1, mesh.vertices.len()),
                        });
                    }
                    idx.push(i as u32);
                }
                if idx.len() < 3 {
                    return Err(ObjError::Parse { line, msg: "face needs at least 3 vertices".into() });
                }
                for k in 1..idx.len() - 1 {
                    mesh.faces.push([idx[0], idx[k], idx[k + 1]]);
                }
            }
            _ => {} // vn, vt, usemtl, o, g, s, mtllib, ...
        }
    }
    Ok(mesh)
}
