//! Bounding-volume hierarchy over mesh triangles for nearest-point and
//! ray-occlusion queries. Median split on the longest centroid axis, small
//! leaves, and index tie-breaking chosen so accelerated queries return
//! bitwise-identical results to brute force.

use super::mesh::TriangleMesh;
use super::ray::ray_triangle_intersect;
use crate::fields::se3::dot3;

const LEAF_SIZE: usize = 4;

#[derive(Debug, Clone)]
struct Node {
    bb_min: [f64; 3],
    bb_max: [f64; 3],
    /// Leaf: (start, count) into `order`. Inner: children are
    /// (self_index + 1, right).
    right: usize,
    start: usize,
    count: usize,
}

#[derive(Debug, Clone)]
pub struct Bvh {
    nodes: Vec<Node>,
    order: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Closest {
    pub point: [f64; 3],
    pub dist: f64,
    pub face: usize,
}

impl Bvh {
    pub fn build(mesh: &TriangleMesh) -> Bvh {
        assert!(!mesh.faces.is_empty(), "cannot build over an empty mesh");
        let centroids: Vec<[f64; 3]> = (0..mesh.faces.len()).map(|f| mesh.centroid(f)).collect();
        let mut order: Vec<usize> = (0..mesh.faces.len()).collect();
        let mut nodes = Vec::new();
        build_node(mesh, &centroids, &mut order, 0, mesh.faces.len(), &mut nodes);
        Bvh { nodes, order }
    }

    /// Exact nearest point over all triangles; equals the brute-force scan,
    /// including its smaller-face-index tie rule.
    pub fn closest_point(&self, mesh: &TriangleMesh, p: [f64; 3]) -> Closest {
        let mut best = Closest {
            point: [f64::INFINITY; 3],
            dist: f64::INFINITY,
            face: usize::MAX,
        };
        let mut best_d2 = f64::INFINITY;
        self.closest_rec(mesh, p, 0, &mut best, &mut best_d2);
        best.dist = best_d2.sqrt();
        best
    }

    fn closest_rec(
        &self,
        mesh: &TriangleMesh,
        p: [f64; 3],
        node: usize,
        best: &mut Closest,
        best_d2: &mut f64,
    ) {
        let n = &self.nodes[node];
        if n.count > 0 {
            for &f in &self.order[n.start..n.start + n.count] {
                let [a, b, c] = mesh.triangle(f);
                let q = closest_point_on_triangle(p, a, b, c);
                let d2 = dist2(p, q);
                if d2 < *best_d2 || (d2 == *best_d2 && f < best.face) {
                    *best_d2 = d2;
                    *best = Closest {
                        point: q,
                        dist: 0.0,
                        face: f,
                    };
                }
            }
            return;
        }
        let (l, r) = (node + 1, n.right);
        let dl = box_dist2(&self.nodes[l], p);
        let dr = box_dist2(&self.nodes[r], p);
        let (first, second, d1, d2) = if dl <= dr { (l, r, dl, dr) } else { (r, l, dr, dl) };
        if d1 <= *best_d2 {
            self.closest_rec(mesh, p, first, best, best_d2);
        }
        if d2 <= *best_d2 {
            self.closest_rec(mesh, p, second, best, best_d2);
        }
    }

    /// True if the ray hits any triangle other than `skip_face`.
    pub fn ray_hits_any(
        &self,
        mesh: &TriangleMesh,
        origin: [f64; 3],
        dir: [f64; 3],
        skip_face: Option<usize>,
    ) -> bool {
        let mut stack = vec![0usize];
        while let Some(node) = stack.pop() {
            let n = &self.nodes[node];
            if !ray_box_intersects(origin, dir, n.bb_min, n.bb_max) {
                continue;
            }
            if n.count > 0 {
                for &f in &self.order[n.start..n.start + n.count] {
                    if Some(f) == skip_face {
                        continue;
                    }
                    let [a, b, c] = mesh.triangle(f);
                    if ray_triangle_intersect(origin, dir, a, b, c).is_some() {
                        return true;
                    }
                }
            } else {
                stack.push(node + 1);
                stack.push(n.right);
            }
        }
        false
    }
}

fn build_node(
    mesh: &TriangleMesh,
    centroids: &[[f64; 3]],
    order: &mut [usize],
    start: usize,
    count: usize,
    nodes: &mut Vec<Node>,
) -> usize {
    let slice = &order[start..start + count];
    let mut bb_min = [f64::INFINITY; 3];
    let mut bb_max = [f64::NEG_INFINITY; 3];
    for &f in slice.iter() {
        for v in mesh.triangle(f) {
            for c in 0..3 {
                bb_min[c] = bb_min[c].min(v[c]);
                bb_max[c] = bb_max[c].max(v[c]);
            }
        }
    }
    let me = nodes.len();
    nodes.push(Node {
        bb_min,
        bb_max,
        right: 0,
        start,
        count,
    });
    if count <= LEAF_SIZE {
        return me;
    }
    // split on the widest centroid axis, ties to smaller face index
    let mut c_min = [f64::INFINITY; 3];
    let mut c_max = [f64::NEG_INFINITY; 3];
    for &f in slice.iter() {
        for c in 0..3 {
            c_min[c] = c_min[c].min(centroids[f][c]);
            c_max[c] = c_max[c].max(centroids[f][c]);
        }
    }
    let axis = (0..3)
        .max_by(|&a, &b| {
            (c_max[a] - c_min[a])
                .partial_cmp(&(c_max[b] - c_min[b]))
                .unwrap()
        })
        .unwrap();
    order[start..start + count].sort_by(|&a, &b| {
        centroids[a][axis]
            .partial_cmp(&centroids[b][axis])
            .unwrap()
            .then(a.cmp(&b))
    });
    let half = count / 2;
    nodes[me].count = 0;
    build_node(mesh, centroids, order, start, half, nodes);
    let right = build_node(mesh, centroids, order, start + half, count - half, nodes);
    nodes[me].right = right;
    me
}

fn dist2(a: [f64; 3], b: [f64; 3]) -> f64 {
    let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    dot3(d, d)
}

fn box_dist2(n: &Node, p: [f64; 3]) -> f64 {
    let mut d2 = 0.0;
    for c in 0..3 {
        let d = (n.bb_min[c] - p[c]).max(0.0).max(p[c] - n.bb_max[c]);
        d2 += d * d;
    }
    d2
}

fn ray_box_intersects(origin: [f64; 3], dir: [f64; 3], lo: [f64; 3], hi: [f64; 3]) -> bool {
    let mut tmin = 0.0f64;
    let mut tmax = f64::INFINITY;
    for c in 0..3 {
        if dir[c] == 0.0 {
            if origin[c] < lo[c] || origin[c] > hi[c] {
                return false;
            }
        } else {
            let inv = 1.0 / dir[c];
            let (t0, t1) = ((lo[c] - origin[c]) * inv, (hi[c] - origin[c]) * inv);
            let (t0, t1) = if t0 <= t1 { (t0, t1) } else { (t1, t0) };
            tmin = tmin.max(t0);
            tmax = tmax.min(t1);
            if tmin > tmax {
                return false;
            }
        }
    }
    true
}

/// Exact closest point on a triangle (vertex/edge/interior regions).
pub fn closest_point_on_triangle(
    p: [f64; 3],
    a: [f64; 3],
    b: [f64; 3],
    c: [f64; 3],
) -> [f64; 3] {
    let ab = sub(b, a);
    let ac = sub(c, a);
    let ap = sub(p, a);
    let d1 = dot3(ab, ap);
    let d2 = dot3(ac, ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return a;
    }
    let bp = sub(p, b);
    let d3 = dot3(ab, bp);
    let d4 = dot3(ac, bp);
    if d3 >= 0.0 && d4 <= d3 {
        return b;
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let v = d1 / (d1 - d3);
        return add(a, scale(ab, v));
    }
    let cp = sub(p, c);
    let d5 = dot3(ab, cp);
    let d6 = dot3(ac, cp);
    if d6 >= 0.0 && d5 <= d6 {
        return c;
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let w = d2 / (d2 - d6);
        return add(a, scale(ac, w));
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return add(b, scale(sub(c, b), w));
    }
    let denom = 1.0 / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    add(a, add(scale(ab, v), scale(ac, w)))
}

/// Reference O(faces) scan used as the oracle for the accelerated query.
pub fn closest_point_brute(mesh: &TriangleMesh, p: [f64; 3]) -> Closest {
    let mut best = Closest {
        point: [f64::INFINITY; 3],
        dist: f64::INFINITY,
        face: usize::MAX,
    };
    let mut best_d2 = f64::INFINITY;
    for f in 0..mesh.faces.len() {
        let [a, b, c] = mesh.triangle(f);
        let q = closest_point_on_triangle(p, a, b, c);
        let d2 = dist2(p, q);
        if d2 < best_d2 || (d2 == best_d2 && f < best.face) {
            best_d2 = d2;
            best = Closest {
                point: q,
                dist: 0.0,
                face: f,
            };
        }
    }
    best.dist = best_d2.sqrt();
    best
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}
fn add(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}
fn scale(a: [f64; 3], s: f64) -> [f64; 3] {
    [a[0] * s, a[1] * s, a[2] * s]
}

/// Validation helper: every face in exactly one leaf, child boxes inside
/// parents.
#[cfg(test)]
fn check_invariants(bvh: &Bvh, mesh: &TriangleMesh) {
    let mut seen = vec![0usize; mesh.faces.len()];
    for n in &bvh.nodes {
        if n.count > 0 {
            for &f in &bvh.order[n.start..n.start + n.count] {
                seen[f] += 1;
            }
        }
    }
    assert!(seen.iter().all(|&s| s == 1), "leaf coverage broken");
    fn contained(inner: &Node, outer: &Node) -> bool {
        (0..3).all(|c| inner.bb_min[c] >= outer.bb_min[c] && inner.bb_max[c] <= outer.bb_max[c])
    }
    fn walk(bvh: &Bvh, i: usize) {
        let n = &bvh.nodes[i];
        if n.count == 0 {
            for ch in [i + 1, n.right] {
                assert!(contained(&bvh.nodes[ch], n));
                walk(bvh, ch);
            }
        }
    }
    walk(bvh, 0);
}
