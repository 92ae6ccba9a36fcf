//! Locality-aware field evaluation: per-landmark region nets whose outputs
//! are fused by a softmax gating net, yielding either a blended rigid-motion
//! parameter (optionally with a scalar residual) or a blended scalar.

use crate::diffcore::{
    encoded_width, mlp_forward, positional_encoding_node, Activation, MlpParams, MlpSpec, NodeId,
    Tape,
};

use super::se3::se3_apply_graph;

/// What a blended block produces per query point.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockOutput {
    /// 6 columns: rotation vector and screw translation.
    Deformation,
    /// 7 columns: rigid motion plus one scalar residual.
    DeformationWithResidual,
    /// 1 column.
    Scalar,
}

impl BlockOutput {
    pub fn width(self) -> usize {
        match self {
            BlockOutput::Deformation => 6,
            BlockOutput::DeformationWithResidual => 7,
            BlockOutput::Scalar => 1,
        }
    }
}

/// Architecture of one blended block: k sine region nets on encoded
/// landmark-relative coordinates, gated by a small ReLU net with a softmax
/// head that sees the absolute query position.
#[derive(Debug, Clone)]
pub struct BlockSpec {
    pub k: usize,
    pub n_freq: usize,
    /// Region-net hidden width.
    pub hidden: usize,
    /// Number of region-net hidden layers.
    pub depth: usize,
    pub w0: f64,
    pub output: BlockOutput,
    /// Gating-net hidden width.
    pub fusion_hidden: usize,
}

impl BlockSpec {
    pub fn new(k: usize, n_freq: usize, hidden: usize, w0: f64, output: BlockOutput) -> Self {
        assert!(k >= 1, "need at least one region");
        BlockSpec {
            k,
            n_freq,
            hidden,
            depth: 3,
            w0,
            output,
            fusion_hidden: 32,
        }
    }

    pub fn region_mlp(&self) -> MlpSpec {
        let mut widths = vec![encoded_width(3, self.n_freq)];
        widths.extend(std::iter::repeat(self.hidden).take(self.depth));
        widths.push(self.output.width());
        MlpSpec::new(widths, Activation::Sine, self.w0)
    }

    pub fn fusion_mlp(&self) -> MlpSpec {
        MlpSpec::new(
            vec![3, self.fusion_hidden, self.fusion_hidden, self.k],
            Activation::Relu,
            0.0,
        )
    }
}

/// Per-evaluation parameter nodes for one block: k region nets plus the
/// gating net. Region params typically come from a hypernet; the gating
/// params are static.
pub struct BlockParams {
    pub regions: Vec<MlpParams>,
    pub fusion: MlpParams,
}

/// Softmax gate weights for the block at `x` (n x 3) -> n x k.
pub fn blend_weights(tape: &mut Tape, spec: &BlockSpec, params: &BlockParams, x: NodeId) -> NodeId {
    let logits = mlp_forward(tape, &spec.fusion_mlp(), &params.fusion, x);
    tape.softmax(logits)
}

/// Blended field value at `x` (n x 3) with per-region `landmarks` (k x 3):
/// sum_n w_n(x) * psi_n(gamma(x - l_n)), an n x output-width node.
pub fn blend_field(
    tape: &mut Tape,
    spec: &BlockSpec,
    params: &BlockParams,
    x: NodeId,
    landmarks: NodeId,
) -> NodeId {
    assert_eq!(
        tape.value(landmarks).rows(),
        spec.k,
        "landmark count must match the block's region count"
    );
    assert_eq!(tape.value(landmarks).cols(), 3);
    assert_eq!(params.regions.len(), spec.k);
    let w = blend_weights(tape, spec, params, x);
    let region_spec = spec.region_mlp();
    let mut acc: Option<NodeId> = None;
    for n in 0..spec.k {
        let ln = tape.slice_rows(landmarks, n, n + 1);
        let rel = tape.sub_row(x, ln);
        let enc = positional_encoding_node(tape, rel, spec.n_freq);
        let psi = mlp_forward(tape, &region_spec, &params.regions[n], enc);
        let wn = tape.slice_cols(w, n, n + 1);
        let term = tape.mul_col(psi, wn);
        acc = Some(match acc {
            None => term,
            Some(a) => tape.add(a, term),
        });
    }
    acc.unwrap()
}

/// For deformation blocks: blend the rigid-motion parameters, exponentiate
/// once, and move the points. Returns the deformed points and, when the
/// block carries a residual column, the n x 1 residual.
pub fn blend_deform(
    tape: &mut Tape,
    spec: &BlockSpec,
    params: &BlockParams,
    x: NodeId,
    landmarks: NodeId,
) -> (NodeId, Option<NodeId>) {
    let field = blend_field(tape, spec, params, x, landmarks);
    match spec.output {
        BlockOutput::Scalar => panic!("blend_deform needs a deformation block"),
        BlockOutput::Deformation => (se3_apply_graph(tape, x, field), None),
        BlockOutput::DeformationWithResidual => {
            let se3 = tape.slice_cols(field, 0, 6);
            let delta = tape.slice_cols(field, 6, 7);
            (se3_apply_graph(tape, x, se3), Some(delta))
        }
    }
}
