//! Triangle meshes with optional per-vertex UVs, plus a minimal OBJ reader/writer.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::Vector3;
use thiserror::Error;

use crate::geometry::{Point3, RigidTransform};

#[derive(Debug, Error)]
pub enum MeshError {
    #[error("triangle {tri} references vertex {index} but mesh has {count} vertices")]
    IndexOutOfRange {
        tri: usize,
        index: usize,
        count: usize,
    },
    #[error("uv count {uvs} does not match vertex count {vertices}")]
    UvCount { uvs: usize, vertices: usize },
    #[error("{path}:{line}: {reason}")]
    Obj {
        path: String,
        line: usize,
        reason: String,
    },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TriMesh {
    pub vertices: Vec<Point3>,
    pub triangles: Vec<[usize; 3]>,
    pub uvs: Option<Vec<[f64; 2]>>,
}

impl TriMesh {
    pub fn new(
        vertices: Vec<Point3>,
        triangles: Vec<[usize; 3]>,
        uvs: Option<Vec<[f64; 2]>>,
    ) -> Result<Self, MeshError> {
        let mesh = Self {
            vertices,
            triangles,
            uvs,
        };
        mesh.validate()?;
        Ok(mesh)
    }

    pub fn validate(&self) -> Result<(), MeshError> {
        let count = self.vertices.len();
        for (tri, t) in self.triangles.iter().enumerate() {
            if let Some(&index) = t.iter().find(|&&i| i >= count) {
                return Err(MeshError::IndexOutOfRange { tri, index, count });
            }
        }
        if let Some(uvs) = &self.uvs {
            if uvs.len() != count {
                return Err(MeshError::UvCount {
                    uvs: uvs.len(),
                    vertices: count,
                });
            }
        }
        Ok(())
    }

    pub fn triangle_points(&self, t: usize) -> [Point3; 3] {
        let [a, b, c] = self.triangles[t];
        [self.vertices[a], self.vertices[b], self.vertices[c]]
    }

    pub fn triangle_area(&self, t: usize) -> f64 {
        let [a, b, c] = self.triangle_points(t);
        0.5 * (b - a).cross(&(c - a)).norm()
    }

    pub fn total_area(&self) -> f64 {
        (0..self.triangles.len())
            .map(|t| self.triangle_area(t))
            .sum()
    }

    pub fn centroid(&self) -> Point3 {
        let n = self.vertices.len().max(1) as f64;
        Point3::from(
            self.vertices
                .iter()
                .fold(Vector3::zeros(), |acc, p| acc + p.coords)
                / n,
        )
    }

    pub fn transformed(&self, t: &RigidTransform) -> TriMesh {
        TriMesh {
            vertices: self.vertices.iter().map(|p| t.apply(p)).collect(),
            triangles: self.triangles.clone(),
            uvs: self.uvs.clone(),
        }
    }

    /// Submesh over `keep` (sorted, unique vertex ids). Returns the submesh and
    /// the old→new index map. A triangle survives only if all three of its
    /// vertices are kept.
    pub fn submesh(&self, keep: &[usize]) -> (TriMesh, Vec<Option<usize>>) {
        let mut remap = vec![None; self.vertices.len()];
        for (new, &old) in keep.iter().enumerate() {
            remap[old] = Some(new);
        }
        let vertices = keep.iter().map(|&i| self.vertices[i]).collect();
        let uvs = self
            .uvs
            .as_ref()
            .map(|uvs| keep.iter().map(|&i| uvs[i]).collect());
        let triangles = self
            .triangles
            .iter()
            .filter_map(|t| Some([remap[t[0]]?, remap[t[1]]?, remap[t[2]]?]))
            .collect();
        (
            TriMesh {
                vertices,
                triangles,
                uvs,
            },
            remap,
        )
    }

    pub fn to_obj(&self) -> String {
        let mut out = String::new();
        for v in &self.vertices {
            writeln!(out, "v {} {} {}", v.x, v.y, v.z).unwrap();
        }
        if let Some(uvs) = &self.uvs {
            for uv in uvs {
                writeln!(out, "vt {} {}", uv[0], uv[1]).unwrap();
            }
        }
        for t in &self.triangles {
            if self.uvs.is_some() {
                writeln!(
                    out,
                    "f {0}/{0} {1}/{1} {2}/{2}",
                    t[0] + 1,
                    t[1] + 1,
                    t[2] + 1
                )
                .unwrap();
            } else {
                writeln!(out, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1).unwrap();
            }
        }
        out
    }

    /// Parses the subset of OBJ written by [`TriMesh::to_obj`]: `v`, `vt` and
    /// triangular `f` records whose texture index equals the vertex index.
    pub fn from_obj(text: &str, path: &str) -> Result<TriMesh, MeshError> {
        let err = |line: usize, reason: String| MeshError::Obj {
            path: path.to_string(),
            line,
            reason,
        };
        let mut vertices = Vec::new();
        let mut uvs = Vec::new();
        let mut triangles = Vec::new();
        for (ln, raw) in text.lines().enumerate() {
            let line = ln + 1;
            let mut parts = raw.split_whitespace();
            let Some(tag) = parts.next() else { continue };
            let nums = |parts: std::str::SplitWhitespace<'_>| -> Result<Vec<f64>, MeshError> {
                parts
                    .map(|s| {
                        s.parse::<f64>()
                            .map_err(|e| err(line, format!("{s:?}: {e}")))
                    })
                    .collect()
            };
            match tag {
                "v" => {
                    let v = nums(parts)?;
                    if v.len() < 3 {
                        return Err(err(line, "vertex needs 3 coordinates".into()));
                    }
                    vertices.push(Point3::new(v[0], v[1], v[2]));
                }
                "vt" => {
                    let v = nums(parts)?;
                    if v.len() < 2 {
                        return Err(err(line, "uv needs 2 coordinates".into()));
                    }
                    uvs.push([v[0], v[1]]);
                }
                "f" => {
                    let mut idx = [0usize; 3];
                    let refs: Vec<&str> = parts.collect();
                    if refs.len() != 3 {
                        return Err(err(line, "only triangles are supported".into()));
                    }
                    for (slot, r) in idx.iter_mut().zip(&refs) {
                        let mut it = r.split('/');
                        let vi: usize = it
                            .next()
                            .unwrap_or("")
                            .parse()
                            .map_err(|e| err(line, format!("{r:?}: {e}")))?;
                        if let Some(ti) = it.next().filter(|s| !s.is_empty()) {
                            if ti.parse::<usize>().ok() != Some(vi) {
                                return Err(err(
                                    line,
                                    "texture index must equal vertex index".into(),
                                ));
                            }
                        }
                        if vi == 0 {
                            return Err(err(line, "OBJ indices are 1-based".into()));
                        }
                        *slot = vi - 1;
                    }
                    triangles.push(idx);
                }
                _ => {}
            }
        }
        let uvs = if uvs.is_empty() { None } else { Some(uvs) };
        TriMesh::new(vertices, triangles, uvs)
    }

    pub fn load_obj(path: &Path) -> Result<TriMesh, MeshError> {
        let text = fs::read_to_string(path).map_err(|source| MeshError::Io {
            path: path.display().to_string(),
            source,
        })?;
        TriMesh::from_obj(&text, &path.display().to_string())
    }

    pub fn save_obj(&self, path: &Path) -> Result<(), MeshError> {
        fs::write(path, self.to_obj()).map_err(|source| MeshError::Io {
            path: path.display().to_string(),
            source,
        })
    }
}
