//! Reverse-mode computation tape over 2-D tensors.
//!
//! Nodes are appended to an arena and evaluated eagerly, so parents always
//! precede children and a single reverse sweep visits every node once. The
//! backward pass *emits ordinary nodes* for each vector-Jacobian product:
//! the gradient of an output with respect to an input is itself a node, so a
//! loss built on top of it (Eikonal / normal-alignment terms) can be
//! differentiated again by running another sweep over the grown tape.

use std::sync::Arc;

use super::coef::{rot_coef, CoefKind};
use super::tensor::Tensor;

/// Index of a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(u32);

impl NodeId {
    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// Operation tag plus parent references.
#[derive(Debug, Clone)]
pub enum Op {
    /// Constant / data leaf; no gradient is tracked into it.
    Input,
    /// Trainable leaf, keyed by the caller's parameter registry.
    Param(usize),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Neg(NodeId),
    Sin(NodeId),
    Cos(NodeId),
    Relu(NodeId),
    /// Heaviside step of the input (1 where > 0); gradient-free.
    Step(NodeId),
    Exp(NodeId),
    Sqrt(NodeId),
    Abs(NodeId),
    /// Sign with sign(0) = 0; gradient-free (subgradient choice for |x|).
    Sign(NodeId),
    Recip(NodeId),
    MulScalar(NodeId, f64),
    AddScalar(NodeId, f64),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    /// Sum of all entries -> 1x1.
    SumAll(NodeId),
    /// n x d -> n x 1.
    RowSum(NodeId),
    /// n x d -> 1 x d.
    ColSum(NodeId),
    /// 1x1 -> rows x cols.
    BroadcastAs(NodeId, usize, usize),
    /// n x 1 -> n x d.
    BroadcastCol(NodeId, usize),
    /// 1 x d -> n x d.
    BroadcastRow(NodeId, usize),
    /// a: n x d plus row b: 1 x d broadcast over rows.
    AddRow(NodeId, NodeId),
    SubRow(NodeId, NodeId),
    /// a: n x d times per-row scalar s: n x 1.
    MulCol(NodeId, NodeId),
    /// a: n x d minus per-row scalar s: n x 1.
    SubCol(NodeId, NodeId),
    /// Row-wise 3-D cross product; both n x 3.
    Cross(NodeId, NodeId),
    ConcatCols(Vec<NodeId>),
    SliceCols(NodeId, usize, usize),
    SliceRows(NodeId, usize, usize),
    /// Zero-pad columns: (src, at, total).
    PadCols(NodeId, usize, usize),
    /// Zero-pad rows: (src, at, total).
    PadRows(NodeId, usize, usize),
    Reshape(NodeId, Vec<usize>),
    /// Row-wise softmax with max subtraction.
    Softmax(NodeId),
    /// Rotation coefficient (see `coef`) applied entrywise to u = theta^2.
    RotCoef(NodeId, CoefKind, u8),
}

struct Node {
    op: Op,
    val: Arc<Tensor>,
}

/// Append-only computation graph.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(usize, NodeId)>,
}

/// Adjoint nodes produced by a backward sweep, indexed by node.
pub struct Adjoints {
    adj: Vec<Option<NodeId>>,
}

impl Adjoints {
    pub fn get(&self, n: NodeId) -> Option<NodeId> {
        self.adj.get(n.index()).copied().flatten()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, n: NodeId) -> &Tensor {
        &self.nodes[n.index()].val
    }

    pub fn value_arc(&self, n: NodeId) -> Arc<Tensor> {
        Arc::clone(&self.nodes[n.index()].val)
    }

    /// Registered parameter leaves in creation order.
    pub fn param_leaves(&self) -> &[(usize, NodeId)] {
        &self.params
    }

    fn push(&mut self, op: Op) -> NodeId {
        let val = Arc::new(self.eval(&op));
        self.nodes.push(Node { op, val });
        NodeId((self.nodes.len() - 1) as u32)
    }

    // ---- leaf constructors -------------------------------------------------

    pub fn input(&mut self, t: Tensor) -> NodeId {
        let val = Arc::new(t);
        self.nodes.push(Node {
            op: Op::Input,
            val,
        });
        NodeId((self.nodes.len() - 1) as u32)
    }

    pub fn input_arc(&mut self, t: Arc<Tensor>) -> NodeId {
        self.nodes.push(Node {
            op: Op::Input,
            val: t,
        });
        NodeId((self.nodes.len() - 1) as u32)
    }

    pub fn scalar(&mut self, v: f64) -> NodeId {
        self.input(Tensor::scalar(v))
    }

    /// Trainable leaf. `key` identifies the parameter in the caller's store.
    pub fn param(&mut self, key: usize, t: Arc<Tensor>) -> NodeId {
        self.nodes.push(Node {
            op: Op::Param(key),
            val: t,
        });
        let id = NodeId((self.nodes.len() - 1) as u32);
        self.params.push((key, id));
        id
    }

    // ---- op constructors ---------------------------------------------------

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add(a, b))
    }
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Sub(a, b))
    }
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Mul(a, b))
    }
    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Neg(a))
    }
    pub fn sin(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sin(a))
    }
    pub fn cos(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Cos(a))
    }
    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Relu(a))
    }
    pub fn step(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Step(a))
    }
    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Exp(a))
    }
    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sqrt(a))
    }
    pub fn abs(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Abs(a))
    }
    pub fn sign(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sign(a))
    }
    pub fn recip(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Recip(a))
    }
    pub fn mul_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        self.push(Op::MulScalar(a, c))
    }
    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        self.push(Op::AddScalar(a, c))
    }
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMul(a, b))
    }
    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Transpose(a))
    }
    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        self.push(Op::SumAll(a))
    }
    pub fn row_sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::RowSum(a))
    }
    pub fn col_sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::ColSum(a))
    }
    pub fn broadcast_as(&mut self, a: NodeId, rows: usize, cols: usize) -> NodeId {
        self.push(Op::BroadcastAs(a, rows, cols))
    }
    pub fn broadcast_col(&mut self, a: NodeId, cols: usize) -> NodeId {
        self.push(Op::BroadcastCol(a, cols))
    }
    pub fn broadcast_row(&mut self, a: NodeId, rows: usize) -> NodeId {
        self.push(Op::BroadcastRow(a, rows))
    }
    pub fn add_row(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::AddRow(a, b))
    }
    pub fn sub_row(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::SubRow(a, b))
    }
    pub fn mul_col(&mut self, a: NodeId, s: NodeId) -> NodeId {
        self.push(Op::MulCol(a, s))
    }
    pub fn sub_col(&mut self, a: NodeId, s: NodeId) -> NodeId {
        self.push(Op::SubCol(a, s))
    }
    pub fn cross(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Cross(a, b))
    }
    pub fn concat_cols(&mut self, parts: Vec<NodeId>) -> NodeId {
        self.push(Op::ConcatCols(parts))
    }
    pub fn slice_cols(&mut self, a: NodeId, from: usize, to: usize) -> NodeId {
        self.push(Op::SliceCols(a, from, to))
    }
    pub fn slice_rows(&mut self, a: NodeId, from: usize, to: usize) -> NodeId {
        self.push(Op::SliceRows(a, from, to))
    }
    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> NodeId {
        self.push(Op::Reshape(a, shape))
    }
    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Softmax(a))
    }
    pub fn rot_coef(&mut self, u: NodeId, kind: CoefKind, deriv: u8) -> NodeId {
        self.push(Op::RotCoef(u, kind, deriv))
    }

    /// Row-wise squared norm: n x d -> n x 1.
    pub fn row_sq_norm(&mut self, a: NodeId) -> NodeId {
        let sq = self.mul(a, a);
        self.row_sum(sq)
    }

    /// Row-wise Euclidean norm: n x d -> n x 1.
    pub fn row_norm(&mut self, a: NodeId) -> NodeId {
        let sq = self.row_sq_norm(a);
        self.sqrt(sq)
    }

    // ---- forward evaluation ------------------------------------------------

    fn eval(&self, op: &Op) -> Tensor {
        use Op::*;
        let v = |n: &NodeId| -> &Tensor { &self.nodes[n.index()].val };
        match op {
            Input | Param(_) => unreachable!("leaves carry their own value"),
            Add(a, b) => zip(v(a), v(b), |x, y| x + y),
            Sub(a, b) => zip(v(a), v(b), |x, y| x - y),
            Mul(a, b) => zip(v(a), v(b), |x, y| x * y),
            Neg(a) => map(v(a), |x| -x),
            Sin(a) => map(v(a), f64::sin),
            Cos(a) => map(v(a), f64::cos),
            Relu(a) => map(v(a), |x| x.max(0.0)),
            Step(a) => map(v(a), |x| if x > 0.0 { 1.0 } else { 0.0 }),
            Exp(a) => map(v(a), f64::exp),
            Sqrt(a) => map(v(a), f64::sqrt),
            Abs(a) => map(v(a), f64::abs),
            Sign(a) => map(v(a), |x| {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }),
            Recip(a) => map(v(a), |x| 1.0 / x),
            MulScalar(a, c) => map(v(a), |x| x * c),
            AddScalar(a, c) => map(v(a), |x| x + c),
            MatMul(a, b) => matmul(v(a), v(b)),
            Transpose(a) => {
                let t = v(a);
                let (r, c) = (t.rows(), t.cols());
                let mut out = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        out[j * r + i] = t.data[i * c + j];
                    }
                }
                Tensor::new(vec![c, r], out)
            }
            SumAll(a) => Tensor::scalar(v(a).data.iter().sum()),
            RowSum(a) => {
                let t = v(a);
                let (r, c) = (t.rows(), t.cols());
                let mut out = Vec::with_capacity(r);
                for i in 0..r {
                    out.push(t.data[i * c..(i + 1) * c].iter().sum());
                }
                Tensor::new(vec![r, 1], out)
            }
            ColSum(a) => {
                let t = v(a);
                let (r, c) = (t.rows(), t.cols());
                let mut out = vec![0.0; c];
                for i in 0..r {
                    for j in 0..c {
                        out[j] += t.data[i * c + j];
                    }
                }
                Tensor::new(vec![1, c], out)
            }
            BroadcastAs(a, rows, cols) => {
                let s = v(a).item();
                Tensor::new(vec![*rows, *cols], vec![s; rows * cols])
            }
            BroadcastCol(a, cols) => {
                let t = v(a);
                assert_eq!(t.cols(), 1, "broadcast_col wants an n x 1 tensor");
                let r = t.rows();
                let mut out = Vec::with_capacity(r * cols);
                for i in 0..r {
                    out.extend(std::iter::repeat(t.data[i]).take(*cols));
                }
                Tensor::new(vec![r, *cols], out)
            }
            BroadcastRow(a, rows) => {
                let t = v(a);
                assert_eq!(t.rows(), 1, "broadcast_row wants a 1 x d tensor");
                let mut out = Vec::with_capacity(rows * t.cols());
                for _ in 0..*rows {
                    out.extend_from_slice(&t.data);
                }
                Tensor::new(vec![*rows, t.cols()], out)
            }
            AddRow(a, b) => row_broadcast(v(a), v(b), |x, y| x + y),
            SubRow(a, b) => row_broadcast(v(a), v(b), |x, y| x - y),
            MulCol(a, s) => col_broadcast(v(a), v(s), |x, y| x * y),
            SubCol(a, s) => col_broadcast(v(a), v(s), |x, y| x - y),
            Cross(a, b) => {
                let (ta, tb) = (v(a), v(b));
                assert!(
                    ta.cols() == 3 && tb.cols() == 3 && ta.rows() == tb.rows(),
                    "cross wants matching n x 3 tensors"
                );
                let n = ta.rows();
                let mut out = Vec::with_capacity(n * 3);
                for i in 0..n {
                    let (p, q) = (ta.row(i), tb.row(i));
                    out.push(p[1] * q[2] - p[2] * q[1]);
                    out.push(p[2] * q[0] - p[0] * q[2]);
                    out.push(p[0] * q[1] - p[1] * q[0]);
                }
                Tensor::new(vec![n, 3], out)
            }
            ConcatCols(parts) => {
                let rows = v(&parts[0]).rows();
                let total: usize = parts.iter().map(|p| v(p).cols()).sum();
                let mut out = Vec::with_capacity(rows * total);
                for i in 0..rows {
                    for p in parts {
                        let t = v(p);
                        assert_eq!(t.rows(), rows, "concat_cols row mismatch");
                        out.extend_from_slice(t.row(i));
                    }
                }
                Tensor::new(vec![rows, total], out)
            }
            SliceCols(a, from, to) => {
                let t = v(a);
                let (r, c) = (t.rows(), t.cols());
                assert!(*from < *to && *to <= c, "slice_cols out of range");
                let mut out = Vec::with_capacity(r * (to - from));
                for i in 0..r {
                    out.extend_from_slice(&t.data[i * c + from..i * c + to]);
                }
                Tensor::new(vec![r, to - from], out)
            }
            SliceRows(a, from, to) => {
                let t = v(a);
                let c = t.cols();
                assert!(*from < *to && *to <= t.rows(), "slice_rows out of range");
                Tensor::new(
                    vec![to - from, c],
                    t.data[from * c..to * c].to_vec(),
                )
            }
            PadCols(a, at, total) => {
                let t = v(a);
                let (r, c) = (t.rows(), t.cols());
                let mut out = vec![0.0; r * total];
                for i in 0..r {
                    out[i * total + at..i * total + at + c]
                        .copy_from_slice(t.row(i));
                }
                Tensor::new(vec![r, *total], out)
            }
            PadRows(a, at, total) => {
                let t = v(a);
                let c = t.cols();
                let mut out = vec![0.0; total * c];
                out[at * c..(at + t.rows()) * c].copy_from_slice(&t.data);
                Tensor::new(vec![*total, c], out)
            }
            Reshape(a, shape) => Tensor::new(shape.clone(), v(a).data.clone()),
            Softmax(a) => softmax_rows(v(a)),
            RotCoef(u, kind, deriv) => map(v(u), |x| rot_coef(*kind, *deriv, x)),
        }
    }

    // ---- backward ----------------------------------------------------------

    /// Reverse sweep from `out`, seeding with `seed` (defaults to ones of
    /// `out`'s shape). Every vector-Jacobian product is appended to the tape
    /// as ordinary nodes, so the returned adjoints stay differentiable.
    pub fn backward(&mut self, out: NodeId, seed: Option<NodeId>) -> Adjoints {
        let seed = seed.unwrap_or_else(|| {
            let t = self.value(out);
            let ones = Tensor::ones(t.rows(), t.cols());
            self.input(ones)
        });
        let snapshot = out.index() + 1;
        let mut adj: Vec<Option<NodeId>> = vec![None; snapshot];
        adj[out.index()] = Some(seed);

        for i in (0..snapshot).rev() {
            let Some(g) = adj[i] else { continue };
            let op = self.nodes[i].op.clone();
            let this = NodeId(i as u32);
            self.emit_vjps(&op, this, g, &mut adj);
        }
        Adjoints { adj }
    }

    /// Gradient of a (batched per-row or scalar) output w.r.t. one input node.
    /// The result is a node, so losses built on it remain differentiable.
    pub fn input_gradient(&mut self, out: NodeId, input: NodeId) -> NodeId {
        let adj = self.backward(out, None);
        adj.get(input)
            .expect("output does not depend on the requested input")
    }

    /// Read accumulated parameter gradients after a backward sweep.
    pub fn param_gradients(&self, adj: &Adjoints) -> Vec<(usize, Arc<Tensor>)> {
        let mut out = Vec::new();
        for &(key, node) in &self.params {
            if let Some(g) = adj.get(node) {
                out.push((key, self.value_arc(g)));
            }
        }
        out
    }

    fn accumulate(&mut self, adj: &mut [Option<NodeId>], target: NodeId, contrib: NodeId) {
        let slot = &mut adj[target.index()];
        *slot = Some(match *slot {
            None => contrib,
            Some(prev) => self.add(prev, contrib),
        });
    }

    fn emit_vjps(&mut self, op: &Op, this: NodeId, g: NodeId, adj: &mut [Option<NodeId>]) {
        use Op::*;
        match op {
            Input | Param(_) => {}
            Add(a, b) => {
                self.accumulate(adj, *a, g);
                self.accumulate(adj, *b, g);
            }
            Sub(a, b) => {
                self.accumulate(adj, *a, g);
                let n = self.neg(g);
                self.accumulate(adj, *b, n);
            }
            Mul(a, b) => {
                let da = self.mul(g, *b);
                self.accumulate(adj, *a, da);
                let db = self.mul(g, *a);
                self.accumulate(adj, *b, db);
            }
            Neg(a) => {
                let n = self.neg(g);
                self.accumulate(adj, *a, n);
            }
            Sin(a) => {
                let c = self.cos(*a);
                let d = self.mul(g, c);
                self.accumulate(adj, *a, d);
            }
            Cos(a) => {
                let s = self.sin(*a);
                let m = self.mul(g, s);
                let d = self.neg(m);
                self.accumulate(adj, *a, d);
            }
            Relu(a) => {
                let m = self.step(*a);
                let d = self.mul(g, m);
                self.accumulate(adj, *a, d);
            }
            Step(_) | Sign(_) => {}
            Exp(a) => {
                let d = self.mul(g, this);
                self.accumulate(adj, *a, d);
            }
            Sqrt(a) => {
                let r = self.recip(this);
                let h = self.mul_scalar(r, 0.5);
                let d = self.mul(g, h);
                self.accumulate(adj, *a, d);
            }
            Abs(a) => {
                let s = self.sign(*a);
                let d = self.mul(g, s);
                self.accumulate(adj, *a, d);
            }
            Recip(a) => {
                let sq = self.mul(this, this);
                let m = self.mul(g, sq);
                let d = self.neg(m);
                self.accumulate(adj, *a, d);
            }
            MulScalar(a, c) => {
                let d = self.mul_scalar(g, *c);
                self.accumulate(adj, *a, d);
            }
            AddScalar(a, _) => {
                self.accumulate(adj, *a, g);
            }
            MatMul(a, b) => {
                let bt = self.transpose(*b);
                let da = self.matmul(g, bt);
                self.accumulate(adj, *a, da);
                let at = self.transpose(*a);
                let db = self.matmul(at, g);
                self.accumulate(adj, *b, db);
            }
            Transpose(a) => {
                let d = self.transpose(g);
                self.accumulate(adj, *a, d);
            }
            SumAll(a) => {
                let t = self.value(*a);
                let (r, c) = (t.rows(), t.cols());
                let d = self.broadcast_as(g, r, c);
                self.accumulate(adj, *a, d);
            }
            RowSum(a) => {
                let c = self.value(*a).cols();
                let d = self.broadcast_col(g, c);
                self.accumulate(adj, *a, d);
            }
            ColSum(a) => {
                let r = self.value(*a).rows();
                let d = self.broadcast_row(g, r);
                self.accumulate(adj, *a, d);
            }
            BroadcastAs(a, _, _) => {
                let d = self.sum_all(g);
                self.accumulate(adj, *a, d);
            }
            BroadcastCol(a, _) => {
                let d = self.row_sum(g);
                self.accumulate(adj, *a, d);
            }
            BroadcastRow(a, _) => {
                let d = self.col_sum(g);
                self.accumulate(adj, *a, d);
            }
            AddRow(a, b) => {
                self.accumulate(adj, *a, g);
                let db = self.col_sum(g);
                self.accumulate(adj, *b, db);
            }
            SubRow(a, b) => {
                self.accumulate(adj, *a, g);
                let s = self.col_sum(g);
                let db = self.neg(s);
                self.accumulate(adj, *b, db);
            }
            MulCol(a, s) => {
                let da = self.mul_col(g, *s);
                self.accumulate(adj, *a, da);
                let m = self.mul(g, *a);
                let ds = self.row_sum(m);
                self.accumulate(adj, *s, ds);
            }
            SubCol(a, s) => {
                self.accumulate(adj, *a, g);
                let r = self.row_sum(g);
                let ds = self.neg(r);
                self.accumulate(adj, *s, ds);
            }
            Cross(a, b) => {
                let da = self.cross(*b, g);
                self.accumulate(adj, *a, da);
                let db = self.cross(g, *a);
                self.accumulate(adj, *b, db);
            }
            ConcatCols(parts) => {
                let mut off = 0;
                for p in parts {
                    let w = self.value(*p).cols();
                    let d = self.slice_cols(g, off, off + w);
                    self.accumulate(adj, *p, d);
                    off += w;
                }
            }
            SliceCols(a, from, to) => {
                let total = self.value(*a).cols();
                let d = self.push(Op::PadCols(g, *from, total));
                let _ = to;
                self.accumulate(adj, *a, d);
            }
            SliceRows(a, from, _) => {
                let total = self.value(*a).rows();
                let d = self.push(Op::PadRows(g, *from, total));
                self.accumulate(adj, *a, d);
            }
            PadCols(a, at, _) => {
                let w = self.value(*a).cols();
                let d = self.slice_cols(g, *at, at + w);
                self.accumulate(adj, *a, d);
            }
            PadRows(a, at, _) => {
                let r = self.value(*a).rows();
                let d = self.slice_rows(g, *at, at + r);
                self.accumulate(adj, *a, d);
            }
            Reshape(a, _) => {
                let shape = self.value(*a).shape.clone();
                let d = self.reshape(g, shape);
                self.accumulate(adj, *a, d);
            }
            Softmax(a) => {
                // dv = (g - rowsum(g*y)) * y, with y this node's output
                let gy = self.mul(g, this);
                let s = self.row_sum(gy);
                let centered = self.sub_col(g, s);
                let d = self.mul(centered, this);
                self.accumulate(adj, *a, d);
            }
            RotCoef(u, kind, deriv) => {
                let dc = self.rot_coef(*u, *kind, deriv + 1);
                let d = self.mul(g, dc);
                self.accumulate(adj, *u, d);
            }
        }
    }
}

// ---- plain tensor kernels ----------------------------------------------

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor {
        shape: t.shape.clone(),
        data: t.data.iter().map(|&x| f(x)).collect(),
    }
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    assert_eq!(
        a.shape, b.shape,
        "elementwise op on mismatched shapes {:?} vs {:?}",
        a.shape, b.shape
    );
    Tensor {
        shape: a.shape.clone(),
        data: a
            .data
            .iter()
            .zip(&b.data)
            .map(|(&x, &y)| f(x, y))
            .collect(),
    }
}

fn row_broadcast(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let (r, c) = (a.rows(), a.cols());
    assert!(
        b.rows() == 1 && b.cols() == c,
        "row broadcast wants 1 x {c}, got {:?}",
        b.shape
    );
    let mut out = Vec::with_capacity(r * c);
    for i in 0..r {
        for j in 0..c {
            out.push(f(a.data[i * c + j], b.data[j]));
        }
    }
    Tensor::new(vec![r, c], out)
}

fn col_broadcast(a: &Tensor, s: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let (r, c) = (a.rows(), a.cols());
    assert!(
        s.rows() == r && s.cols() == 1,
        "col broadcast wants {r} x 1, got {:?}",
        s.shape
    );
    let mut out = Vec::with_capacity(r * c);
    for i in 0..r {
        let sv = s.data[i];
        for j in 0..c {
            out.push(f(a.data[i * c + j], sv));
        }
    }
    Tensor::new(vec![r, c], out)
}

/// Plain dense matmul (a: m x k, b: k x n).
pub fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.rows(), a.cols());
    let (k2, n) = (b.rows(), b.cols());
    assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
    let mut out = vec![0.0; m * n];
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            k as isize,
            1,
            b.data.as_ptr(),
            n as isize,
            1,
            0.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    Tensor::new(vec![m, n], out)
}

/// Row-wise softmax with max subtraction for stability.
pub fn softmax_rows(t: &Tensor) -> Tensor {
    let (r, c) = (t.rows(), t.cols());
    let mut out = Vec::with_capacity(r * c);
    for i in 0..r {
        let row = t.row(i);
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|&x| (x - mx).exp()).collect();
        let sum: f64 = exps.iter().sum();
        out.extend(exps.into_iter().map(|e| e / sum));
    }
    Tensor::new(vec![r, c], out)
}
