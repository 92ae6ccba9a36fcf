//! Training loss terms and stage totals.
//!
//! Every term is a tape node, so one backward sweep from a stage total
//! reaches the network tensors and the latent codes alike. Terms carry
//! their weight already multiplied in; reading a term node gives exactly
//! the contribution it adds to the total.
//!
//! The first training stage fits the base field and everything that shapes
//! it (seven terms); the second stage refits the displacement-corrected
//! field with only the data terms, blended against the stage-one total by a
//! cosine schedule.

use serde::{Deserialize, Serialize};

use crate::diffcore::{NodeId, Tape, Tensor};
use crate::model::{CodeNodes, ModelGraph};

/// Per-term weights. The defaults are tuned for millimetre-scale inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    /// Absolute field error at sampled points.
    pub sdf_abs: f64,
    /// Misalignment between the field gradient and the sampled normal.
    pub sdf_normal: f64,
    /// Unit-gradient pressure, in both the expression and identity spaces.
    pub eikonal: f64,
    /// Gaussian prior on the expression and identity codes.
    pub embedding: f64,
    /// Gaussian prior on the detail code.
    pub detail_embedding: f64,
    /// Landmark-head fit to the annotated anchors.
    pub landmark_fit: f64,
    /// Dense correspondence consistency through both warps.
    pub landmark_consistency: f64,
    /// Magnitude of the identity warp's scalar residual.
    pub residual: f64,
    /// Expression-warp suppression on neutral scans.
    pub neutral: f64,
}

impl Default for LossWeights {
    fn default() -> LossWeights {
        LossWeights {
            sdf_abs: 3e3,
            sdf_normal: 1e2,
            eikonal: 5e1,
            embedding: 1e5,
            detail_embedding: 1e3,
            landmark_fit: 1e3,
            landmark_consistency: 1e2,
            residual: 1e2,
            neutral: 1e4,
        }
    }
}

impl LossWeights {
    /// Name/value pairs in declaration order, for validation and reporting.
    pub fn fields(&self) -> [(&'static str, f64); 9] {
        [
            ("sdf_abs", self.sdf_abs),
            ("sdf_normal", self.sdf_normal),
            ("eikonal", self.eikonal),
            ("embedding", self.embedding),
            ("detail_embedding", self.detail_embedding),
            ("landmark_fit", self.landmark_fit),
            ("landmark_consistency", self.landmark_consistency),
            ("residual", self.residual),
            ("neutral", self.neutral),
        ]
    }
}

/// Cosine blend between the two stage totals: 1 at `t = t_m`, 0 at `t = 1`,
/// monotone non-increasing in between. Callers must not ask before the
/// second stage starts.
pub fn stage_blend_kappa(t: f64, t_m: f64) -> f64 {
    assert!((0.0..1.0).contains(&t_m), "t_m must lie in [0, 1)");
    assert!(
        (t_m..=1.0).contains(&t),
        "progress {t} is outside the blend window [{t_m}, 1]"
    );
    0.5 * (1.0 + (std::f64::consts::PI * (t - t_m) / (1.0 - t_m)).cos())
}

fn abs_sum(tape: &mut Tape, a: NodeId) -> NodeId {
    let abs = tape.abs(a);
    tape.sum_all(abs)
}

fn abs_diff_sum(tape: &mut Tape, a: NodeId, b: NodeId) -> NodeId {
    let d = tape.sub(a, b);
    abs_sum(tape, d)
}

fn sq_sum(tape: &mut Tape, a: NodeId) -> NodeId {
    let sq = tape.mul(a, a);
    tape.sum_all(sq)
}

/// Field fit at sampled points: `l_abs`·Σ|s − s̄| plus
/// `l_normal`·Σ(1 − ⟨∇s, n̄⟩) with unit sample normals `n̄`.
pub fn sdf_loss(
    tape: &mut Tape,
    s_pred: NodeId,
    grad_pred: NodeId,
    s_true: NodeId,
    normals: NodeId,
    l_abs: f64,
    l_normal: f64,
) -> NodeId {
    let value = abs_diff_sum(tape, s_pred, s_true);
    let value = tape.mul_scalar(value, l_abs);

    let prod = tape.mul(grad_pred, normals);
    let dots = tape.row_sum(prod);
    let neg = tape.neg(dots);
    let gaps = tape.add_scalar(neg, 1.0);
    let misalign = tape.sum_all(gaps);
    let misalign = tape.mul_scalar(misalign, l_normal);

    tape.add(value, misalign)
}

/// Unit-gradient pressure for one space: `l3`·Σ|‖g‖ − 1| over rows of `grad`.
pub fn eikonal_term(tape: &mut Tape, grad: NodeId, l3: f64) -> NodeId {
    let norms = tape.row_norm(grad);
    let off = tape.add_scalar(norms, -1.0);
    let s = abs_sum(tape, off);
    tape.mul_scalar(s, l3)
}

/// Unit-gradient pressure in the expression space and the identity space.
pub fn eikonal_loss(
    tape: &mut Tape,
    grad_exp_space: NodeId,
    grad_id_space: NodeId,
    l3: f64,
) -> NodeId {
    let a = eikonal_term(tape, grad_exp_space, l3);
    let b = eikonal_term(tape, grad_id_space, l3);
    tape.add(a, b)
}

/// Gaussian prior: `l4`·(‖z_exp‖² + ‖z_id‖²) + `l5`·‖z_detail‖².
pub fn embedding_loss(
    tape: &mut Tape,
    z_exp: NodeId,
    z_id: NodeId,
    z_detail: NodeId,
    l4: f64,
    l5: f64,
) -> NodeId {
    let e = sq_sum(tape, z_exp);
    let i = sq_sum(tape, z_id);
    let ei = tape.add(e, i);
    let ei = tape.mul_scalar(ei, l4);
    let d = sq_sum(tape, z_detail);
    let d = tape.mul_scalar(d, l5);
    tape.add(ei, d)
}

/// Landmark-head fit: `l6`·Σ(|l − l̄| + |l′ − l̄′|), ℓ1 per coordinate.
pub fn landmark_fit_loss(
    tape: &mut Tape,
    pred_exp: NodeId,
    pred_id: NodeId,
    gt_exp: NodeId,
    gt_id: NodeId,
    l6: f64,
) -> NodeId {
    assert_eq!(
        tape.value(pred_exp).rows(),
        tape.value(gt_exp).rows(),
        "landmark count mismatch"
    );
    assert_eq!(
        tape.value(pred_id).rows(),
        tape.value(gt_id).rows(),
        "landmark count mismatch"
    );
    let a = abs_diff_sum(tape, pred_exp, gt_exp);
    let b = abs_diff_sum(tape, pred_id, gt_id);
    let s = tape.add(a, b);
    tape.mul_scalar(s, l6)
}

/// Dense correspondence consistency: scan-surface points must land on their
/// known neutral-space positions after the expression warp and on their
/// known template-space positions after both warps.
pub fn landmark_consistency_loss(
    tape: &mut Tape,
    graph: &ModelGraph,
    scan_points: NodeId,
    neutral_gt: NodeId,
    template_gt: NodeId,
    l7: f64,
) -> NodeId {
    let warped = graph.exp_deform(tape, scan_points);
    let first = abs_diff_sum(tape, warped, neutral_gt);
    let (template_points, _) = graph.id_deform(tape, warped);
    let second = abs_diff_sum(tape, template_points, template_gt);
    let s = tape.add(first, second);
    tape.mul_scalar(s, l7)
}

/// Residual magnitude: `l8`·Σ|δ|.
pub fn residual_loss(tape: &mut Tape, delta: NodeId, l8: f64) -> NodeId {
    let s = abs_sum(tape, delta);
    tape.mul_scalar(s, l8)
}

/// Expression-warp suppression: `l9`·Σ‖𝓔(p) − p‖² on neutral scans, a
/// gradient-free zero otherwise.
pub fn neutral_suppression_loss(
    tape: &mut Tape,
    warped: NodeId,
    original: NodeId,
    is_neutral: bool,
    l9: f64,
) -> NodeId {
    if !is_neutral {
        return tape.scalar(0.0);
    }
    let d = tape.sub(warped, original);
    let sq = tape.row_sq_norm(d);
    let s = tape.sum_all(sq);
    tape.mul_scalar(s, l9)
}

/// Host-side ground truth for one scan's contribution to a batch.
#[derive(Debug, Clone, Copy)]
pub struct ScanSample<'a> {
    /// Sampled field points (expression space, mm).
    pub points: &'a [[f64; 3]],
    /// Signed distances at `points`.
    pub sdf: &'a [f64],
    /// Unit field gradients at `points`.
    pub normals: &'a [[f64; 3]],
    /// Dense correspondence points on this scan.
    pub dense_scan: &'a [[f64; 3]],
    /// The same points on the identity's neutral scan.
    pub dense_neutral: &'a [[f64; 3]],
    /// The same points on the shared template.
    pub dense_template: &'a [[f64; 3]],
    /// Annotated landmarks on this scan.
    pub landmarks_scan: &'a [[f64; 3]],
    /// Annotated landmarks on the identity's neutral scan.
    pub landmarks_neutral: &'a [[f64; 3]],
    pub is_neutral: bool,
}

impl ScanSample<'_> {
    fn check(&self) {
        assert_eq!(self.points.len(), self.sdf.len());
        assert_eq!(self.points.len(), self.normals.len());
        assert_eq!(self.dense_scan.len(), self.dense_neutral.len());
        assert_eq!(self.dense_scan.len(), self.dense_template.len());
        assert_eq!(self.landmarks_scan.len(), self.landmarks_neutral.len());
    }
}

/// The weighted stage-one terms for one scan, plus their sum.
#[derive(Debug, Clone, Copy)]
pub struct StageOneTerms {
    pub sdf: NodeId,
    pub eikonal: NodeId,
    pub embedding: NodeId,
    pub landmark_fit: NodeId,
    pub landmark_consistency: NodeId,
    pub residual: NodeId,
    pub neutral: NodeId,
    pub total: NodeId,
}

impl StageOneTerms {
    pub fn parts(&self) -> [(&'static str, NodeId); 7] {
        [
            ("sdf", self.sdf),
            ("eikonal", self.eikonal),
            ("embedding", self.embedding),
            ("landmark_fit", self.landmark_fit),
            ("landmark_consistency", self.landmark_consistency),
            ("residual", self.residual),
            ("neutral", self.neutral),
        ]
    }
}

/// The weighted stage-two terms for one scan, plus their sum.
#[derive(Debug, Clone, Copy)]
pub struct StageTwoTerms {
    pub sdf: NodeId,
    pub eikonal: NodeId,
    pub embedding: NodeId,
    pub total: NodeId,
}

impl StageTwoTerms {
    pub fn parts(&self) -> [(&'static str, NodeId); 3] {
        [
            ("sdf", self.sdf),
            ("eikonal", self.eikonal),
            ("embedding", self.embedding),
        ]
    }
}

fn sum_nodes(tape: &mut Tape, nodes: &[NodeId]) -> NodeId {
    let mut acc = nodes[0];
    for &n in &nodes[1..] {
        acc = tape.add(acc, n);
    }
    acc
}

/// All seven stage-one terms for one scan, evaluated on the base field.
pub fn stage1_scan_loss(
    tape: &mut Tape,
    graph: &ModelGraph,
    codes: CodeNodes,
    sample: &ScanSample,
    w: &LossWeights,
) -> StageOneTerms {
    sample.check();
    let x = tape.input(Tensor::from_points(sample.points));
    let s_true = tape.input(Tensor::new(vec![sample.sdf.len(), 1], sample.sdf.to_vec()));
    let normals = tape.input(Tensor::from_points(sample.normals));

    let chain = graph.base_chain(tape, x);
    let grad_exp_space = tape.input_gradient(chain.value, x);
    let sdf = sdf_loss(
        tape,
        chain.value,
        grad_exp_space,
        s_true,
        normals,
        w.sdf_abs,
        w.sdf_normal,
    );

    // identity-space pressure differentiates the residual-free field with
    // respect to the warped points themselves
    let grad_id_space = tape.input_gradient(chain.template_value, chain.identity_points);
    let eikonal = eikonal_loss(tape, grad_exp_space, grad_id_space, w.eikonal);

    let embedding = embedding_loss(
        tape,
        codes.z_exp,
        codes.z_id,
        codes.z_detail,
        w.embedding,
        w.detail_embedding,
    );

    let pred_exp = graph.exp_landmarks_mm(tape);
    let pred_id = graph.id_landmarks_mm(tape);
    let gt_exp = tape.input(Tensor::from_points(sample.landmarks_scan));
    let gt_id = tape.input(Tensor::from_points(sample.landmarks_neutral));
    let landmark_fit = landmark_fit_loss(tape, pred_exp, pred_id, gt_exp, gt_id, w.landmark_fit);

    let dense_scan = tape.input(Tensor::from_points(sample.dense_scan));
    let dense_neutral = tape.input(Tensor::from_points(sample.dense_neutral));
    let dense_template = tape.input(Tensor::from_points(sample.dense_template));
    let landmark_consistency = landmark_consistency_loss(
        tape,
        graph,
        dense_scan,
        dense_neutral,
        dense_template,
        w.landmark_consistency,
    );

    let residual = residual_loss(tape, chain.residual, w.residual);
    let neutral = neutral_suppression_loss(
        tape,
        chain.identity_points,
        x,
        sample.is_neutral,
        w.neutral,
    );

    let total = sum_nodes(
        tape,
        &[
            sdf,
            eikonal,
            embedding,
            landmark_fit,
            landmark_consistency,
            residual,
            neutral,
        ],
    );
    StageOneTerms {
        sdf,
        eikonal,
        embedding,
        landmark_fit,
        landmark_consistency,
        residual,
        neutral,
        total,
    }
}

/// The stage-two data terms for one scan, evaluated on the corrected field.
pub fn stage2_scan_loss(
    tape: &mut Tape,
    graph: &ModelGraph,
    codes: CodeNodes,
    sample: &ScanSample,
    w: &LossWeights,
) -> StageTwoTerms {
    sample.check();
    let x = tape.input(Tensor::from_points(sample.points));
    let s_true = tape.input(Tensor::new(vec![sample.sdf.len(), 1], sample.sdf.to_vec()));
    let normals = tape.input(Tensor::from_points(sample.normals));

    let correction = graph.corrected_point(tape, x);
    let full = graph.base_chain(tape, correction.point);
    let grad_exp_space = tape.input_gradient(full.value, x);
    let sdf = sdf_loss(
        tape,
        full.value,
        grad_exp_space,
        s_true,
        normals,
        w.sdf_abs,
        w.sdf_normal,
    );

    let grad_id_space = tape.input_gradient(
        correction.base.template_value,
        correction.base.identity_points,
    );
    let eikonal = eikonal_loss(tape, grad_exp_space, grad_id_space, w.eikonal);

    let embedding = embedding_loss(
        tape,
        codes.z_exp,
        codes.z_id,
        codes.z_detail,
        w.embedding,
        w.detail_embedding,
    );

    let total = sum_nodes(tape, &[sdf, eikonal, embedding]);
    StageTwoTerms {
        sdf,
        eikonal,
        embedding,
        total,
    }
}
