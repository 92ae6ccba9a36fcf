//! Triangle mesh container with a minimal OBJ reader/writer and landmark
//! index sidecars.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::error::ImfaceError;
use crate::fields::se3::{cross3, norm3};

/// Faces are counter-clockwise when viewed from +z once a mesh has been
/// through the preprocessing pipeline. Vertex units are millimetres.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TriangleMesh {
    pub vertices: Vec<[f64; 3]>,
    pub faces: Vec<[usize; 3]>,
    pub landmark_indices: Option<Vec<usize>>,
}

impl TriangleMesh {
    pub fn new(vertices: Vec<[f64; 3]>, faces: Vec<[usize; 3]>) -> Self {
        let m = TriangleMesh {
            vertices,
            faces,
            landmark_indices: None,
        };
        m.validate().expect("mesh indices out of range");
        m
    }

    pub fn validate(&self) -> Result<(), ImfaceError> {
        let n = self.vertices.len();
        for f in &self.faces {
            if f.iter().any(|&i| i >= n) {
                return Err(ImfaceError::Data(format!(
                    "face index out of range: {f:?} with {n} vertices"
                )));
            }
        }
        if let Some(lms) = &self.landmark_indices {
            if let Some(&bad) = lms.iter().find(|&&i| i >= n) {
                return Err(ImfaceError::Data(format!(
                    "landmark index {bad} out of range ({n} vertices)"
                )));
            }
        }
        if self.vertices.iter().flatten().any(|v| !v.is_finite()) {
            return Err(ImfaceError::Data("non-finite vertex".into()));
        }
        Ok(())
    }

    pub fn triangle(&self, f: usize) -> [[f64; 3]; 3] {
        let [a, b, c] = self.faces[f];
        [self.vertices[a], self.vertices[b], self.vertices[c]]
    }

    pub fn face_normal_area(&self, f: usize) -> ([f64; 3], f64) {
        let [a, b, c] = self.triangle(f);
        let e1 = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
        let e2 = [c[0] - a[0], c[1] - a[1], c[2] - a[2]];
        let n = cross3(e1, e2);
        let len = norm3(n);
        if len == 0.0 {
            ([0.0, 0.0, 0.0], 0.0)
        } else {
            ([n[0] / len, n[1] / len, n[2] / len], 0.5 * len)
        }
    }

    pub fn centroid(&self, f: usize) -> [f64; 3] {
        let [a, b, c] = self.triangle(f);
        [
            (a[0] + b[0] + c[0]) / 3.0,
            (a[1] + b[1] + c[1]) / 3.0,
            (a[2] + b[2] + c[2]) / 3.0,
        ]
    }

    /// Area-weighted vertex normals, flipped where needed so each has a
    /// non-negative +z component.
    pub fn vertex_normals(&self) -> Vec<[f64; 3]> {
        let mut acc = vec![[0.0; 3]; self.vertices.len()];
        for f in 0..self.faces.len() {
            let (n, area) = self.face_normal_area(f);
            for &vi in &self.faces[f] {
                for c in 0..3 {
                    acc[vi][c] += n[c] * area;
                }
            }
        }
        for n in &mut acc {
            let len = norm3(*n);
            if len > 0.0 {
                let flip = if n[2] < 0.0 { -1.0 } else { 1.0 };
                for c in n.iter_mut() {
                    *c *= flip / len;
                }
            }
        }
        acc
    }

    /// Drop vertices not referenced by any face and remap face and landmark
    /// indices. Errors if a landmark vertex would be dropped.
    pub fn compact(&self) -> Result<TriangleMesh, ImfaceError> {
        let mut keep = vec![false; self.vertices.len()];
        for f in &self.faces {
            for &vi in f {
                keep[vi] = true;
            }
        }
        let mut remap = vec![usize::MAX; self.vertices.len()];
        let mut vertices = Vec::new();
        for (i, &k) in keep.iter().enumerate() {
            if k {
                remap[i] = vertices.len();
                vertices.push(self.vertices[i]);
            }
        }
        let faces = self
            .faces
            .iter()
            .map(|f| [remap[f[0]], remap[f[1]], remap[f[2]]])
            .collect();
        let landmark_indices = match &self.landmark_indices {
            None => None,
            Some(lms) => {
                let mut out = Vec::with_capacity(lms.len());
                for &i in lms {
                    if remap[i] == usize::MAX {
                        return Err(ImfaceError::Data(format!(
                            "landmark vertex {i} was removed during preprocessing"
                        )));
                    }
                    out.push(remap[i]);
                }
                Some(out)
            }
        };
        Ok(TriangleMesh {
            vertices,
            faces,
            landmark_indices,
        })
    }

    pub fn landmark_positions(&self) -> Result<Vec<[f64; 3]>, ImfaceError> {
        let lms = self
            .landmark_indices
            .as_ref()
            .ok_or_else(|| ImfaceError::Data("mesh has no landmarks".into()))?;
        Ok(lms.iter().map(|&i| self.vertices[i]).collect())
    }
}

///// Minimal OBJ subset: `v x y z` and (fan-triangulated) `f` records, where
/// each face corner may be `i`, `i/t`, or `i/t/n` with 1-based indices.
pub fn read_obj(path: &Path) -> Result<TriangleMesh, ImfaceError> {
    let file = std::fs::File::open(path).map_err(|e| ImfaceError::io(path, e))?;
    let mut vertices = Vec::new();
    let mut faces: Vec<[usize; 3]> = Vec::new();
    for (ln, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| ImfaceError::io(path, e))?;
        let mut it = line.split_whitespace();
        match it.next() {
            Some("v") => {
                let mut v = [0.0; 3];
                for c in &mut v {
                    *c = it
                        .next()
                        .and_then(|t| t.parse().ok())
                        .ok_or_else(|| bad_obj(path, ln, "malformed vertex"))?;
                }
                vertices.push(v);
            }
            Some("f") => {
                let idx: Result<Vec<usize>, _> = it
                    .map(|t| {
                        t.split('/')
                            .next()
                            .and_then(|s| s.parse::<usize>().ok())
                            .filter(|&i| i >= 1)
                            .ok_or_else(|| bad_obj(path, ln, "malformed face index"))
                    })
                    .collect();
                let idx = idx?;
                if idx.len() < 3 {
                    return Err(bad_obj(path, ln, "face needs at least 3 corners"));
                }
                for i in 1..idx.len() - 1 {
                    faces.push([idx[0] - 1, idx[i] - 1, idx[i + 1] - 1]);
                }
            }
            _ => {} // comments, empty lines, unsupported records
        }
    }
    let mesh = TriangleMesh {
        vertices,
        faces,
        landmark_indices: None,
    };
    mesh.validate()?;
    Ok(mesh)
}

fn bad_obj(path: &Path, line: usize, what: &str) -> ImfaceError {
    ImfaceError::Data(format!("{}:{}: {what}", path.display(), line + 1))
}

pub fn write_obj(path: &Path, mesh: &TriangleMesh) -> Result<(), ImfaceError> {
    let mut out = std::io::BufWriter::new(
        std::fs::File::create(path).map_err(|e| ImfaceError::io(path, e))?,
    );
    let mut write = || -> std::io::Result<()> {
        for v in &mesh.vertices {
            writeln!(out, "v {} {} {}", v[0], v[1], v[2])?;
        }
        for f in &mesh.faces {
            writeln!(out, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1)?;
        }
        Ok(())
    };
    write().map_err(|e| ImfaceError::io(path, e))
}

/// Landmark sidecar: one 0-based vertex index per line; `#` comments allowed.
pub fn read_landmark_indices(path: &Path) -> Result<Vec<usize>, ImfaceError> {
    let text = std::fs::read_to_string(path).map_err(|e| ImfaceError::io(path, e))?;
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap().trim();
        if line.is_empty() {
            continue;
        }
        out.push(line.parse::<usize>().map_err(|_| {
            ImfaceError::Data(format!("{}:{}: bad landmark index", path.display(), ln + 1))
        })?);
    }
    Ok(out)
}

pub fn write_landmark_indices(path: &Path, indices: &[usize]) -> Result<(), ImfaceError> {
    let body: String = indices.iter().map(|i| format!("{i}\n")).collect();
    std::fs::write(path, body).map_err(|e| ImfaceError::io(path, e))
}
