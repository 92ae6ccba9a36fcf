//! Isosurface extraction on a regular grid with the classic 256-case
//! marching-cubes lookup.
//!
//! The per-configuration triangulations are derived once at startup instead
//! of being pasted in as literals. For each of the 256 inside/outside corner
//! patterns the zero crossing traces closed loops over the cube faces; on an
//! ambiguous face (two diagonally opposite inside corners) the inside corners
//! are always cut off separately. Because that choice depends only on the
//! face's own corner signs, the two cells sharing a face always agree on the
//! crossing segments, so the extracted surface is watertight wherever the
//! isosurface does not leave the grid. Triangles are wound so their normals
//! point toward increasing field values.

use std::collections::HashMap;
use std::sync::OnceLock;

use rayon::prelude::*;

use crate::error::ImfaceError;
use crate::geom::TriangleMesh;

/// Cube corner `c` sits at offset `(c & 1, c >> 1 & 1, c >> 2 & 1)`.
/// Edges are listed axis-major: four x-edges, four y-edges, four z-edges.
const EDGES: [(usize, usize); 12] = [
    (0, 1),
    (2, 3),
    (4, 5),
    (6, 7),
    (0, 2),
    (1, 3),
    (4, 6),
    (5, 7),
    (0, 4),
    (1, 5),
    (2, 6),
    (3, 7),
];

fn edge_between(a: usize, b: usize) -> usize {
    EDGES
        .iter()
        .position(|&(p, q)| (p, q) == (a, b) || (p, q) == (b, a))
        .expect("corners do not share a cube edge")
}

/// Triangles (as triples of cube-edge indices) for one corner configuration.
fn build_case(config: u8) -> Vec<[u8; 3]> {
    let inside = |c: usize| config >> c & 1 == 1;
    // successor[e] = next crossing edge along the surface boundary loop
    let mut succ = [usize::MAX; 12];
    for axis in 0..3 {
        for side in 0..2 {
            // corner cycle is counterclockwise seen from outside the cube
            let (u, v) = if side == 1 {
                ((axis + 1) % 3, (axis + 2) % 3)
            } else {
                ((axis + 2) % 3, (axis + 1) % 3)
            };
            let base = side << axis;
            let cycle = [base, base | 1 << u, base | 1 << u | 1 << v, base | 1 << v];
            let b = [
                inside(cycle[0]),
                inside(cycle[1]),
                inside(cycle[2]),
                inside(cycle[3]),
            ];
            if b.iter().all(|&x| x) || !b.iter().any(|&x| x) {
                continue;
            }
            // one boundary segment per maximal run of inside corners, directed
            // with the inside region on its left
            for s in 0..4 {
                if !(b[s] && !b[(s + 3) % 4]) {
                    continue;
                }
                let mut e = s;
                while b[(e + 1) % 4] {
                    e = (e + 1) % 4;
                }
                let from = edge_between(cycle[e], cycle[(e + 1) % 4]);
                let to = edge_between(cycle[(s + 3) % 4], cycle[s]);
                debug_assert_eq!(succ[from], usize::MAX);
                succ[from] = to;
            }
        }
    }

    // stitch the directed segments into loops, then fan-triangulate; loops
    // are reversed so the right-hand winding faces the positive field side
    let mut triangles = Vec::new();
    let mut visited = [false; 12];
    for start in 0..12 {
        if succ[start] == usize::MAX || visited[start] {
            continue;
        }
        let mut ring = vec![start];
        visited[start] = true;
        let mut e = succ[start];
        while e != start {
            visited[e] = true;
            ring.push(e);
            e = succ[e];
        }
        assert!(ring.len() >= 3, "degenerate crossing loop");
        ring.reverse();
        for i in 1..ring.len() - 1 {
            triangles.push([ring[0] as u8, ring[i] as u8, ring[i + 1] as u8]);
        }
    }
    triangles
}

fn case_table() -> &'static Vec<Vec<[u8; 3]>> {
    static TABLE: OnceLock<Vec<Vec<[u8; 3]>>> = OnceLock::new();
    TABLE.get_or_init(|| (0..256).map(|c| build_case(c as u8)).collect())
}

/// Regular sampling lattice for isosurface extraction.
///
/// `res` counts sample points per axis (so `res - 1` cells). The default
/// face volume is the centered 200 mm cube.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct VoxelGrid {
    pub res: [usize; 3],
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl VoxelGrid {
    /// Cubic grid spanning `[-half_mm, half_mm]` on every axis.
    pub fn cube(res: usize, half_mm: f64) -> Result<VoxelGrid, ImfaceError> {
        let grid = VoxelGrid {
            res: [res; 3],
            min: [-half_mm; 3],
            max: [half_mm; 3],
        };
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<(), ImfaceError> {
        for a in 0..3 {
            if self.res[a] < 8 {
                return Err(ImfaceError::Config(format!(
                    "grid resolution must be at least 8 per axis, got {}",
                    self.res[a]
                )));
            }
            if !(self.min[a].is_finite() && self.max[a].is_finite() && self.min[a] < self.max[a]) {
                return Err(ImfaceError::Config(format!(
                    "grid bounds on axis {a} must be finite with min < max, got {} .. {}",
                    self.min[a], self.max[a]
                )));
            }
        }
        Ok(())
    }

    pub fn step(&self, axis: usize) -> f64 {
        (self.max[axis] - self.min[axis]) / (self.res[axis] - 1) as f64
    }

    pub fn point(&self, i: usize, j: usize, k: usize) -> [f64; 3] {
        [
            self.min[0] + self.step(0) * i as f64,
            self.min[1] + self.step(1) * j as f64,
            self.min[2] + self.step(2) * k as f64,
        ]
    }

    /// Diagonal of one cell; the extraction error bound.
    pub fn cell_diagonal(&self) -> f64 {
        let d = [self.step(0), self.step(1), self.step(2)];
        (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
    }
}

impl Default for VoxelGrid {
    fn default() -> Self {
        VoxelGrid {
            res: [64; 3],
            min: [-100.0; 3],
            max: [100.0; 3],
        }
    }
}

/// Extract the zero level set of `field` over `grid`.
///
/// `field` is called once per z-slab with the slab's sample points (in x-major
/// order) and must return one value per point; slabs are evaluated in
/// parallel. Vertices land on cell edges by linear interpolation and are
/// shared between neighboring cells. A field with no sign change yields an
/// empty mesh (with a warning) rather than an error; a non-finite sample is
/// an error.
pub fn marching_cubes<F>(grid: &VoxelGrid, field: F) -> Result<TriangleMesh, ImfaceError>
where
    F: Fn(&[[f64; 3]]) -> Result<Vec<f64>, ImfaceError> + Sync,
{
    grid.validate()?;
    let [rx, ry, rz] = grid.res;
    let slabs: Vec<Vec<f64>> = (0..rz)
        .into_par_iter()
        .map(|k| {
            let mut pts = Vec::with_capacity(rx * ry);
            for j in 0..ry {
                for i in 0..rx {
                    pts.push(grid.point(i, j, k));
                }
            }
            let vals = field(&pts)?;
            assert_eq!(vals.len(), pts.len(), "field returned a short slab");
            Ok(vals)
        })
        .collect::<Result<_, ImfaceError>>()?;
    let values: Vec<f64> = slabs.into_iter().flatten().collect();
    if let Some(bad) = values.iter().position(|v| !v.is_finite()) {
        let (k, r) = (bad / (rx * ry), bad % (rx * ry));
        return Err(ImfaceError::Numeric(format!(
            "field value at grid point ({}, {}, {}) is not finite",
            r % rx,
            r / rx,
            k
        )));
    }
    let at = |i: usize, j: usize, k: usize| values[(k * ry + j) * rx + i];

    let table = case_table();
    let mut vertices: Vec<[f64; 3]> = Vec::new();
    let mut faces: Vec<[usize; 3]> = Vec::new();
    let mut weld: HashMap<(usize, usize, usize, u8), usize> = HashMap::new();
    let mut corner = [0.0f64; 8];
    for k in 0..rz - 1 {
        for j in 0..ry - 1 {
            for i in 0..rx - 1 {
                let mut config = 0u8;
                for (c, slot) in corner.iter_mut().enumerate() {
                    *slot = at(i + (c & 1), j + (c >> 1 & 1), k + (c >> 2 & 1));
                    if *slot < 0.0 {
                        config |= 1 << c;
                    }
                }
                if config == 0 || config == 0xff {
                    continue;
                }
                let mut cell_verts = [usize::MAX; 12];
                for tri in &table[config as usize] {
                    let mut ids = [0usize; 3];
                    for (slot, &e) in ids.iter_mut().zip(tri) {
                        let e = e as usize;
                        if cell_verts[e] == usize::MAX {
                            let base = EDGES[e].0;
                            let axis = e / 4;
                            let (gi, gj, gk) = (i + (base & 1), j + (base >> 1 & 1), k + (base >> 2 & 1));
                            cell_verts[e] =
                                *weld.entry((gi, gj, gk, axis as u8)).or_insert_with(|| {
                                    let mut hi = [gi, gj, gk];
                                    hi[axis] += 1;
                                    let v0 = at(gi, gj, gk);
                                    let v1 = at(hi[0], hi[1], hi[2]);
                                    let t = v0 / (v0 - v1);
                                    let p0 = grid.point(gi, gj, gk);
                                    let p1 = grid.point(hi[0], hi[1], hi[2]);
                                    let pos = [
                                        p0[0] + t * (p1[0] - p0[0]),
                                        p0[1] + t * (p1[1] - p0[1]),
                                        p0[2] + t * (p1[2] - p0[2]),
                                    ];
                                    vertices.push(pos);
                                    vertices.len() - 1
                                });
                        }
                        *slot = cell_verts[e];
                    }
                    if ids[0] != ids[1] && ids[1] != ids[2] && ids[0] != ids[2] {
                        faces.push(ids);
                    }
                }
            }
        }
    }
    if faces.is_empty() {
        log::warn!("the field has no zero crossing inside the sampling grid");
    }
    Ok(TriangleMesh::new(vertices, faces))
}
