//! Planar Delaunay triangulation of the vertex x-y projections, lifted back
//! to 3D. Incremental Bowyer-Watson with exact predicates and a symbolic
//! far vertex, so hull handling needs no giant super-triangle coordinates.
//! Insertion follows vertex index order and all traversals are index-
//! deterministic, so the output is identical across platforms.

use std::collections::HashMap;

use robust::{incircle, orient2d, Coord};

use super::mesh::TriangleMesh;
use crate::error::ImfaceError;

/// Symbolic vertex "beyond the hull" in every direction.
const FAR: usize = usize::MAX;

#[derive(Debug, Clone)]
struct Tri {
    /// CCW in the projection; may contain FAR.
    v: [usize; 3],
    /// nbr[i] is across the edge opposite v[i], i.e. edge (v[i+1], v[i+2]).
    nbr: [usize; 3],
    alive: bool,
}

struct Builder<'a> {
    pts: &'a [[f64; 2]],
    tris: Vec<Tri>,
    /// Per-insertion stamps instead of clearing flags.
    stamp: Vec<u64>,
    in_region: Vec<u64>,
    epoch: u64,
    hint: usize,
}

fn coord(p: [f64; 2]) -> Coord<f64> {
    Coord { x: p[0], y: p[1] }
}

impl<'a> Builder<'a> {
    fn orient(&self, a: usize, b: usize, p: [f64; 2]) -> f64 {
        orient2d(coord(self.pts[a]), coord(self.pts[b]), coord(p))
    }

    /// Strict circumdisk membership; a FAR triangle's disk is the open
    /// halfplane beyond its hull edge, plus the open edge segment itself.
    fn in_conflict(&self, t: usize, p: [f64; 2]) -> bool {
        let tri = &self.tris[t];
        if let Some(k) = tri.v.iter().position(|&v| v == FAR) {
            let (a, b) = (tri.v[(k + 1) % 3], tri.v[(k + 2) % 3]);
            let o = self.orient(a, b, p);
            o > 0.0 || (o == 0.0 && within_open_segment(self.pts[a], self.pts[b], p))
        } else {
            let [a, b, c] = tri.v;
            incircle(
                coord(self.pts[a]),
                coord(self.pts[b]),
                coord(self.pts[c]),
                coord(p),
            ) > 0.0
        }
    }

    /// Find some triangle in conflict with p by walking from the hint.
    fn locate(&self, p: [f64; 2]) -> usize {
        let mut cur = self.hint;
        let cap = 4 * self.tris.len() + 16;
        'walk: for _ in 0..cap {
            let tri = &self.tris[cur];
            if tri.v.contains(&FAR) {
                return cur; // crossed the hull; this region is in conflict
            }
            for j in 0..3 {
                let (u, v) = (tri.v[(j + 1) % 3], tri.v[(j + 2) % 3]);
                if self.orient(u, v, p) < 0.0 {
                    cur = tri.nbr[j];
                    continue 'walk;
                }
            }
            return cur; // p inside or on this triangle
        }
        // degenerate walk; deterministic fallback
        (0..self.tris.len())
            .find(|&t| self.tris[t].alive && self.in_conflict(t, p))
            .expect("no conflicting triangle found")
    }

    fn insert(&mut self, pi: usize) {
        let p = self.pts[pi];
        self.epoch += 1;
        let start = self.locate(p);
        debug_assert!(self.in_conflict(start, p));

        // flood the conflict region
        let mut region = vec![start];
        self.in_region[start] = self.epoch;
        self.stamp[start] = self.epoch;
        let mut stack = vec![start];
        while let Some(t) = stack.pop() {
            for j in 0..3 {
                let nb = self.tris[t].nbr[j];
                if self.stamp[nb] != self.epoch {
                    self.stamp[nb] = self.epoch;
                    if self.in_conflict(nb, p) {
                        self.in_region[nb] = self.epoch;
                        region.push(nb);
                        stack.push(nb);
                    }
                }
            }
        }

        // boundary edges, directed as they appear in the dying triangles
        let mut boundary = Vec::new();
        for &t in &region {
            for j in 0..3 {
                let nb = self.tris[t].nbr[j];
                if self.in_region[nb] != self.epoch {
                    let (u, v) = (self.tris[t].v[(j + 1) % 3], self.tris[t].v[(j + 2) % 3]);
                    let back = (0..3)
                        .find(|&k| {
                            let (x, y) = (self.tris[nb].v[(k + 1) % 3], self.tris[nb].v[(k + 2) % 3]);
                            (x, y) == (v, u)
                        })
                        .expect("neighbor edge mismatch");
                    boundary.push((u, v, nb, back));
                }
            }
        }
        for &t in &region {
            self.tris[t].alive = false;
        }

        // star the cavity from p
        let mut by_edge: HashMap<(usize, usize), (usize, usize)> = HashMap::new();
        let mut first_finite = usize::MAX;
        for &(u, v, outer, back) in &boundary {
            let idx = self.tris.len();
            self.tris.push(Tri {
                v: [u, v, pi],
                nbr: [usize::MAX; 3],
                alive: true,
            });
            self.stamp.push(0);
            self.in_region.push(0);
            self.tris[idx].nbr[2] = outer; // across (u, v)
            self.tris[outer].nbr[back] = idx;
            if u != FAR && v != FAR && first_finite == usize::MAX {
                first_finite = idx;
            }
            // pair the two p-edges with sibling new triangles
            for (slot, a, b) in [(0usize, v, pi), (1usize, pi, u)] {
                let key = (a.min(b), a.max(b));
                match by_edge.remove(&key) {
                    None => {
                        by_edge.insert(key, (idx, slot));
                    }
                    Some((other, oslot)) => {
                        self.tris[idx].nbr[slot] = other;
                        self.tris[other].nbr[oslot] = idx;
                    }
                }
            }
        }
        debug_assert!(by_edge.is_empty(), "cavity boundary was not a cycle");
        debug_assert_ne!(first_finite, usize::MAX, "no finite triangle created");
        self.hint = first_finite;
    }
}

fn within_open_segment(a: [f64; 2], b: [f64; 2], p: [f64; 2]) -> bool {
    // caller guarantees collinearity; compare along the dominant axis
    let axis = if (b[0] - a[0]).abs() >= (b[1] - a[1]).abs() {
        0
    } else {
        1
    };
    let (lo, hi) = if a[axis] <= b[axis] {
        (a[axis], b[axis])
    } else {
        (b[axis], a[axis])
    };
    lo < p[axis] && p[axis] < hi
}

/// Retriangulate the mesh as a heightfield: Delaunay on the vertex (x, y)
/// projections, faces CCW seen from +z, vertices and landmarks unchanged.
pub fn delaunay_xy(mesh: &TriangleMesh) -> Result<TriangleMesh, ImfaceError> {
    let faces = triangulate_xy(
        &mesh
            .vertices
            .iter()
            .map(|v| [v[0], v[1]])
            .collect::<Vec<_>>(),
    )?;
    let mut out = mesh.clone();
    out.faces = faces;
    Ok(out)
}

/// Delaunay triangulation of 2D points; returns CCW index triples.
pub fn triangulate_xy(pts: &[[f64; 2]]) -> Result<Vec<[usize; 3]>, ImfaceError> {
    if pts.len() < 3 {
        return Err(ImfaceError::Data(format!(
            "triangulation needs at least 3 points, got {}",
            pts.len()
        )));
    }
    if pts.iter().flatten().any(|c| !c.is_finite()) {
        return Err(ImfaceError::Data("non-finite point coordinates".into()));
    }
    // exact duplicate projections are not representable
    let mut order: Vec<usize> = (0..pts.len()).collect();
    order.sort_by(|&i, &j| {
        pts[i]
            .partial_cmp(&pts[j])
            .unwrap()
            .then(i.cmp(&j))
    });
    for w in order.windows(2) {
        if pts[w[0]] == pts[w[1]] {
            return Err(ImfaceError::Data(format!(
                "vertices {} and {} share an x-y projection",
                w[0].min(w[1]),
                w[0].max(w[1])
            )));
        }
    }

    // first non-collinear companion for points 0 and 1
    let seed = (2..pts.len()).find(|&k| {
        orient2d(coord(pts[0]), coord(pts[1]), coord(pts[k])) != 0.0
    });
    let Some(seed) = seed else {
        return Err(ImfaceError::Data(
            "all points are collinear in the x-y projection".into(),
        ));
    };

    let (a, b, c) = if orient2d(coord(pts[0]), coord(pts[1]), coord(pts[seed])) > 0.0 {
        (0, 1, seed)
    } else {
        (1, 0, seed)
    };
    // finite seed triangle plus three FAR triangles over its edges:
    //   t0=(a,b,c), t1 over (b,c), t2 over (c,a), t3 over (a,b)
    let tris = vec![
        Tri {
            v: [a, b, c],
            nbr: [1, 2, 3],
            alive: true,
        },
        Tri {
            v: [c, b, FAR],
            nbr: [3, 2, 0],
            alive: true,
        },
        Tri {
            v: [a, c, FAR],
            nbr: [1, 3, 0],
            alive: true,
        },
        Tri {
            v: [b, a, FAR],
            nbr: [2, 1, 0],
            alive: true,
        },
    ];
    let mut builder = Builder {
        pts,
        stamp: vec![0; tris.len()],
        in_region: vec![0; tris.len()],
        tris,
        epoch: 0,
        hint: 0,
    };
    for pi in 0..pts.len() {
        if pi == a || pi == b || pi == c {
            continue;
        }
        builder.insert(pi);
    }

    let mut faces = Vec::new();
    for t in &builder.tris {
        if t.alive && !t.v.contains(&FAR) {
            debug_assert!(
                orient2d(coord(pts[t.v[0]]), coord(pts[t.v[1]]), coord(pts[t.v[2]])) > 0.0
            );
            faces.push(t.v);
        }
    }
    Ok(faces)
}
