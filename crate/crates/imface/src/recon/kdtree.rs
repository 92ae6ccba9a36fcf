//! Minimal 3-D KD-tree for nearest-neighbor queries over point clouds.
//!
//! Built once, queried many times (and in parallel). Construction uses
//! median splits with a total order on coordinates plus index tiebreaks, so
//! the tree — and every query answer — is deterministic.

#[derive(Debug, Clone, Copy)]
struct Node {
    point: u32,
    axis: u8,
    left: i32,
    right: i32,
}

#[derive(Debug, Clone)]
pub struct KdTree {
    pts: Vec<[f64; 3]>,
    nodes: Vec<Node>,
    root: i32,
}

fn dist_sq(a: [f64; 3], b: [f64; 3]) -> f64 {
    let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    d[0] * d[0] + d[1] * d[1] + d[2] * d[2]
}

impl KdTree {
    /// Build over a non-empty point set.
    pub fn build(pts: &[[f64; 3]]) -> KdTree {
        assert!(!pts.is_empty(), "kd-tree over an empty point set");
        let mut ids: Vec<u32> = (0..pts.len() as u32).collect();
        let mut tree = KdTree {
            pts: pts.to_vec(),
            nodes: Vec::with_capacity(pts.len()),
            root: -1,
        };
        let n = ids.len();
        tree.root = tree.split(&mut ids, 0, n);
        tree
    }

    fn split(&mut self, ids: &mut [u32], depth: usize, _n: usize) -> i32 {
        if ids.is_empty() {
            return -1;
        }
        // cycle the axis; spread-based choice saves little on these clouds
        let axis = (depth % 3) as u8;
        let mid = ids.len() / 2;
        let pts = &self.pts;
        ids.select_nth_unstable_by(mid, |&a, &b| {
            pts[a as usize][axis as usize]
                .total_cmp(&pts[b as usize][axis as usize])
                .then(a.cmp(&b))
        });
        let point = ids[mid];
        let slot = self.nodes.len() as i32;
        self.nodes.push(Node {
            point,
            axis,
            left: -1,
            right: -1,
        });
        let (lo, rest) = ids.split_at_mut(mid);
        let hi = &mut rest[1..];
        let left = self.split(lo, depth + 1, lo.len());
        let right = self.split(hi, depth + 1, hi.len());
        let node = &mut self.nodes[slot as usize];
        node.left = left;
        node.right = right;
        slot
    }

    /// Index of the nearest stored point and the Euclidean distance to it.
    pub fn nearest(&self, q: [f64; 3]) -> (usize, f64) {
        let mut best = (usize::MAX, f64::INFINITY);
        self.descend(self.root, q, &mut best);
        (best.0, best.1.sqrt())
    }

    fn descend(&self, slot: i32, q: [f64; 3], best: &mut (usize, f64)) {
        if slot < 0 {
            return;
        }
        let node = self.nodes[slot as usize];
        let p = self.pts[node.point as usize];
        let d = dist_sq(q, p);
        if d < best.1 {
            *best = (node.point as usize, d);
        }
        let delta = q[node.axis as usize] - p[node.axis as usize];
        let (near, far) = if delta < 0.0 {
            (node.left, node.right)
        } else {
            (node.right, node.left)
        };
        self.descend(near, q, best);
        if delta * delta < best.1 {
            self.descend(far, q, best);
        }
    }

    pub fn len(&self) -> usize {
        self.pts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pts.is_empty()
    }
}
