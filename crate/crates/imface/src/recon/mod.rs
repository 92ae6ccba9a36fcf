//! Surface reconstruction and quantitative evaluation.
//!
//! Meshes come out of [`marching_cubes`]; the rest of the module measures
//! them (Chamfer distance, F-score, normal consistency), relates two scans
//! through the learned template space, lerps latent codes, and fits PCA bases
//! over trained embeddings for simple semantic edits. Everything is
//! deterministic for a fixed seed: point samples are drawn from counter-based
//! streams and nearest-neighbor queries run on an exact KD-tree.

pub mod kdtree;
pub mod marching;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::ImfaceError;
use crate::geom::{Bvh, DenseSite, TriangleMesh};
use crate::linalg::symmetric_eigen;
use crate::model::{ImFaceModel, LatentCodes};
use crate::seeds;

pub use kdtree::KdTree;
pub use marching::{marching_cubes, VoxelGrid};

/// Default number of surface samples for mesh-vs-mesh metrics.
pub const DEFAULT_SURFACE_SAMPLES: usize = 50_000;

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn norm(a: [f64; 3]) -> f64 {
    dot(a, a).sqrt()
}

/// Area-weighted vertex normals that follow the face winding. This is
/// deliberately not [`TriangleMesh::vertex_normals`], which reorients toward
/// +z for raw face scans; metrics must see flipped meshes as flipped.
fn winding_normals(mesh: &TriangleMesh) -> Vec<[f64; 3]> {
    let mut acc = vec![[0.0; 3]; mesh.vertices.len()];
    for f in 0..mesh.faces.len() {
        let (n, area) = mesh.face_normal_area(f);
        for &vi in &mesh.faces[f] {
            for c in 0..3 {
                acc[vi][c] += n[c] * area;
            }
        }
    }
    for n in &mut acc {
        let len = norm(*n);
        if len > 0.0 {
            for c in n.iter_mut() {
                *c /= len;
            }
        }
    }
    acc
}

/// A point drawn from a mesh surface with its interpolated unit normal.
/// `normal` is all zeros when the local geometry was too degenerate to
/// orient.
#[derive(Debug, Clone, Copy)]
pub struct SurfaceSample {
    pub point: [f64; 3],
    pub normal: [f64; 3],
}

/// Draw `n` area-weighted samples from the mesh surface. Normals are
/// barycentrically interpolated vertex normals and follow the winding of the
/// mesh; no reorientation is applied.
pub fn sample_surface(
    mesh: &TriangleMesh,
    n: usize,
    seed: u64,
) -> Result<Vec<SurfaceSample>, ImfaceError> {
    if mesh.faces.is_empty() {
        return Err(ImfaceError::Data(
            "cannot sample the surface of a mesh without faces".into(),
        ));
    }
    let mut cdf = Vec::with_capacity(mesh.faces.len());
    let mut total = 0.0;
    for f in 0..mesh.faces.len() {
        total += mesh.face_normal_area(f).1;
        cdf.push(total);
    }
    if total <= 0.0 {
        return Err(ImfaceError::Data(
            "cannot sample a mesh whose total surface area is zero".into(),
        ));
    }
    let normals = winding_normals(mesh);
    let samples = (0..n)
        .into_par_iter()
        .map(|i| {
            use rand::Rng;
            let mut rng = seeds::stream(seed, "surface-samples", &[i as u64]);
            let pick = rng.gen_range(0.0..total);
            let f = cdf.partition_point(|&c| c <= pick).min(mesh.faces.len() - 1);
            let [a, b, c] = mesh.faces[f];
            // square-root trick for uniform barycentric coordinates
            let (r1, r2): (f64, f64) = (rng.gen(), rng.gen());
            let s = r1.sqrt();
            let w = [1.0 - s, s * (1.0 - r2), s * r2];
            let (va, vb, vc) = (mesh.vertices[a], mesh.vertices[b], mesh.vertices[c]);
            let point = [
                w[0] * va[0] + w[1] * vb[0] + w[2] * vc[0],
                w[0] * va[1] + w[1] * vb[1] + w[2] * vc[1],
                w[0] * va[2] + w[1] * vb[2] + w[2] * vc[2],
            ];
            let mut normal = [0.0; 3];
            for (wi, vi) in w.iter().zip([a, b, c]) {
                for d in 0..3 {
                    normal[d] += wi * normals[vi][d];
                }
            }
            let len = norm(normal);
            if len > 1e-12 {
                for d in &mut normal {
                    *d /= len;
                }
            } else {
                let (fnorm, area) = mesh.face_normal_area(f);
                normal = if area > 1e-12 { fnorm } else { [0.0; 3] };
            }
            SurfaceSample { point, normal }
        })
        .collect();
    Ok(samples)
}

fn mean_nearest(from: &[[f64; 3]], to: &KdTree) -> f64 {
    let dists: Vec<f64> = from.par_iter().map(|&p| to.nearest(p).1).collect();
    dists.iter().sum::<f64>() / dists.len() as f64
}

/// Symmetric Chamfer distance `(mean_a min‖a−b‖ + mean_b min‖b−a‖) / 2` in
/// the unit of the inputs (millimetres throughout this crate).
pub fn chamfer(a: &[[f64; 3]], b: &[[f64; 3]]) -> Result<f64, ImfaceError> {
    if a.is_empty() || b.is_empty() {
        return Err(ImfaceError::Data(
            "chamfer distance needs two non-empty point sets".into(),
        ));
    }
    let (ta, tb) = (KdTree::build(a), KdTree::build(b));
    Ok(0.5 * (mean_nearest(a, &tb) + mean_nearest(b, &ta)))
}

/// F-score at threshold `tau_mm`, in percent. Precision is the fraction of
/// predicted points within `tau_mm` of the ground truth, recall the converse.
pub fn fscore(pred: &[[f64; 3]], gt: &[[f64; 3]], tau_mm: f64) -> Result<f64, ImfaceError> {
    if !(tau_mm.is_finite() && tau_mm > 0.0) {
        return Err(ImfaceError::Config(format!(
            "the F-score threshold must be positive, got {tau_mm}"
        )));
    }
    if pred.is_empty() || gt.is_empty() {
        return Err(ImfaceError::Data(
            "the F-score needs two non-empty point sets".into(),
        ));
    }
    let within = |from: &[[f64; 3]], to: &KdTree| {
        let hits = from
            .par_iter()
            .filter(|&&p| to.nearest(p).1 <= tau_mm)
            .count();
        hits as f64 / from.len() as f64
    };
    let (tp, tg) = (KdTree::build(pred), KdTree::build(gt));
    let precision = within(pred, &tg);
    let recall = within(gt, &tp);
    if precision + recall == 0.0 {
        return Ok(0.0);
    }
    Ok(100.0 * 2.0 * precision * recall / (precision + recall))
}

fn barycentric_normal(mesh: &TriangleMesh, normals: &[[f64; 3]], face: usize, p: [f64; 3]) -> [f64; 3] {
    let [ia, ib, ic] = mesh.faces[face];
    let (a, b, c) = (mesh.vertices[ia], mesh.vertices[ib], mesh.vertices[ic]);
    let (v0, v1, v2) = (sub(b, a), sub(c, a), sub(p, a));
    let (d00, d01, d11) = (dot(v0, v0), dot(v0, v1), dot(v1, v1));
    let (d20, d21) = (dot(v2, v0), dot(v2, v1));
    let denom = d00 * d11 - d01 * d01;
    if denom.abs() < 1e-18 {
        return mesh.face_normal_area(face).0;
    }
    let v = (d11 * d20 - d01 * d21) / denom;
    let w = (d00 * d21 - d01 * d20) / denom;
    let u = 1.0 - v - w;
    let mut n = [0.0; 3];
    for (wi, vi) in [u, v, w].iter().zip([ia, ib, ic]) {
        for d in 0..3 {
            n[d] += wi * normals[vi][d];
        }
    }
    let len = norm(n);
    if len > 1e-12 {
        for d in &mut n {
            *d /= len;
        }
        n
    } else {
        mesh.face_normal_area(face).0
    }
}

fn directed_consistency(
    from: &[SurfaceSample],
    to_mesh: &TriangleMesh,
    to_bvh: &Bvh,
    to_normals: &[[f64; 3]],
    absolute: bool,
) -> (f64, usize, usize) {
    let dots: Vec<Option<f64>> = from
        .par_iter()
        .map(|s| {
            if norm(s.normal) < 0.5 {
                return None;
            }
            let hit = to_bvh.closest_point(to_mesh, s.point);
            let n = barycentric_normal(to_mesh, to_normals, hit.face, hit.point);
            if norm(n) < 0.5 {
                return None;
            }
            let d = dot(s.normal, n);
            Some(if absolute { d.abs() } else { d })
        })
        .collect();
    let kept: Vec<f64> = dots.iter().flatten().copied().collect();
    let skipped = dots.len() - kept.len();
    (kept.iter().sum(), kept.len(), skipped)
}

/// Mean cosine between sample normals on one mesh and the surface normal at
/// the nearest point of the other, symmetrized over both directions. Signed
/// by default so flipped orientations are penalized; `absolute` ignores
/// orientation. Samples whose local normals are degenerate are skipped.
pub fn normal_consistency(
    pred: &TriangleMesh,
    gt: &TriangleMesh,
    n_samples: usize,
    absolute: bool,
    seed: u64,
) -> Result<f64, ImfaceError> {
    let sp = sample_surface(pred, n_samples, seed)?;
    let sg = sample_surface(gt, n_samples, seed.wrapping_add(1))?;
    let (bp, bg) = (Bvh::build(pred), Bvh::build(gt));
    let (np, ng) = (winding_normals(pred), winding_normals(gt));
    let (sum_a, cnt_a, skip_a) = directed_consistency(&sp, gt, &bg, &ng, absolute);
    let (sum_b, cnt_b, skip_b) = directed_consistency(&sg, pred, &bp, &np, absolute);
    if skip_a + skip_b > 0 {
        log::debug!(
            "normal consistency skipped {} degenerate samples",
            skip_a + skip_b
        );
    }
    if cnt_a == 0 || cnt_b == 0 {
        return Err(ImfaceError::Data(
            "every sampled normal was degenerate; the meshes cannot be compared".into(),
        ));
    }
    Ok(0.5 * (sum_a / cnt_a as f64 + sum_b / cnt_b as f64))
}

/// Distance from every vertex of `mesh` to the surface of `reference`;
/// useful for exporting per-vertex error maps.
pub fn vertex_distances(mesh: &TriangleMesh, reference: &TriangleMesh) -> Vec<f64> {
    let bvh = Bvh::build(reference);
    mesh.vertices
        .par_iter()
        .map(|&v| bvh.closest_point(reference, v).dist)
        .collect()
}

/// Scalar summary of a reconstruction against ground truth. Deformation
/// errors stay `None` unless dense correspondence ground truth was supplied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub chamfer_mm: f64,
    pub fscore_pct: f64,
    pub tau_mm: f64,
    pub normal_consistency: f64,
    pub ede_mm: Option<f64>,
    pub tde_mm: Option<f64>,
}

/// Knobs for [`evaluate_meshes`]; defaults match the evaluation protocol
/// (50 000 samples, 1 mm F-score threshold, signed normals).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MetricOptions {
    pub n_samples: usize,
    pub tau_mm: f64,
    pub abs_normals: bool,
    pub seed: u64,
}

impl Default for MetricOptions {
    fn default() -> Self {
        MetricOptions {
            n_samples: DEFAULT_SURFACE_SAMPLES,
            tau_mm: 1.0,
            abs_normals: false,
            seed: 0,
        }
    }
}

/// Sample both meshes and compute Chamfer, F-score and normal consistency.
pub fn evaluate_meshes(
    pred: &TriangleMesh,
    gt: &TriangleMesh,
    opts: &MetricOptions,
) -> Result<MetricReport, ImfaceError> {
    let sp = sample_surface(pred, opts.n_samples, opts.seed)?;
    let sg = sample_surface(gt, opts.n_samples, opts.seed.wrapping_add(1))?;
    let pp: Vec<[f64; 3]> = sp.iter().map(|s| s.point).collect();
    let pg: Vec<[f64; 3]> = sg.iter().map(|s| s.point).collect();
    Ok(MetricReport {
        chamfer_mm: chamfer(&pp, &pg)?,
        fscore_pct: fscore(&pp, &pg, opts.tau_mm)?,
        tau_mm: opts.tau_mm,
        normal_consistency: normal_consistency(pred, gt, opts.n_samples, opts.abs_normals, opts.seed)?,
        ede_mm: None,
        tde_mm: None,
    })
}

/// One matched point pair between two scans, anchored in the shared template
/// space where the match was made.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrespondencePair {
    /// Point on the first scan (its own scan space, mm).
    pub source: [f64; 3],
    /// Matched point on the second scan (its own scan space, mm).
    pub target: [f64; 3],
    /// Where the source landed in the template space (mm).
    pub anchor: [f64; 3],
    /// Template-space distance between the matched pair (mm).
    pub distance: f64,
}

/// Match points across two scans by deforming both into the template space
/// and pairing each source point with its nearest template-space neighbor.
pub fn correspondence_map(
    model: &ImFaceModel,
    codes_a: &LatentCodes,
    points_a: &[[f64; 3]],
    codes_b: &LatentCodes,
    points_b: &[[f64; 3]],
) -> Result<Vec<CorrespondencePair>, ImfaceError> {
    if points_a.is_empty() || points_b.is_empty() {
        return Err(ImfaceError::Data(
            "correspondence needs points on both scans".into(),
        ));
    }
    let anchors_a = model.eval_correspondence(codes_a, points_a)?;
    let anchors_b = model.eval_correspondence(codes_b, points_b)?;
    let tree = KdTree::build(&anchors_b);
    Ok(anchors_a
        .par_iter()
        .zip(points_a)
        .map(|(&anchor, &source)| {
            let (j, distance) = tree.nearest(anchor);
            CorrespondencePair {
                source,
                target: points_b[j],
                anchor,
                distance,
            }
        })
        .collect())
}

/// Mean expression-deformation error and template-deformation error against
/// dense correspondence ground truth, both in millimetres.
pub fn ede_tde(
    model: &ImFaceModel,
    codes: &LatentCodes,
    dense: &[DenseSite],
) -> Result<(f64, f64), ImfaceError> {
    if dense.is_empty() {
        return Err(ImfaceError::Data(
            "deformation errors need dense correspondence ground truth".into(),
        ));
    }
    let pts: Vec<[f64; 3]> = dense.iter().map(|d| d.scan).collect();
    let warped = model.eval_exp_deform(codes, &pts)?;
    let mapped = model.eval_correspondence(codes, &pts)?;
    let n = dense.len() as f64;
    let ede = warped
        .iter()
        .zip(dense)
        .map(|(w, d)| norm(sub(*w, d.neutral)))
        .sum::<f64>()
        / n;
    let tde = mapped
        .iter()
        .zip(dense)
        .map(|(m, d)| norm(sub(*m, d.template)))
        .sum::<f64>()
        / n;
    Ok((ede, tde))
}

/// Which latent blocks an interpolation or edit touches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CodeSubset {
    All,
    Expression,
    Identity,
    Detail,
}

impl CodeSubset {
    fn touches(self, block: CodeSubset) -> bool {
        self == CodeSubset::All || self == block
    }
}

fn lerp(a: &[f64], b: &[f64], t: f64) -> Vec<f64> {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (1.0 - t) * x + t * y)
        .collect()
}

/// Linear interpolation between two code sets at `t ∈ [0, 1]`. Blocks
/// outside `subset` stay at `a`'s values; endpoints reproduce the inputs
/// exactly.
pub fn interpolate_codes(
    a: &LatentCodes,
    b: &LatentCodes,
    t: f64,
    subset: CodeSubset,
) -> Result<LatentCodes, ImfaceError> {
    if a.z_exp.len() != b.z_exp.len()
        || a.z_id.len() != b.z_id.len()
        || a.z_detail.len() != b.z_detail.len()
    {
        return Err(ImfaceError::Config(
            "cannot interpolate codes with different latent dimensions".into(),
        ));
    }
    if !(t.is_finite() && (0.0..=1.0).contains(&t)) {
        return Err(ImfaceError::Config(format!(
            "the interpolation parameter must lie in [0, 1], got {t}"
        )));
    }
    let pick = |on: bool, x: &Vec<f64>, y: &Vec<f64>| {
        if on {
            lerp(x, y, t)
        } else {
            x.clone()
        }
    };
    Ok(LatentCodes {
        z_exp: pick(subset.touches(CodeSubset::Expression), &a.z_exp, &b.z_exp),
        z_id: pick(subset.touches(CodeSubset::Identity), &a.z_id, &b.z_id),
        z_detail: pick(subset.touches(CodeSubset::Detail), &a.z_detail, &b.z_detail),
    })
}

/// An orthonormal linear basis over embedding vectors, ordered by explained
/// variance. Walking along a component from the mean is the crate's
/// mechanism for semantic edits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// Unit-length principal directions, strongest first.
    pub components: Vec<Vec<f64>>,
    /// Singular values of the centered data matrix, one per component.
    pub singular_values: Vec<f64>,
    /// How many embeddings the basis was fitted to.
    pub n_samples: usize,
}

impl Pca {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Sample standard deviation along component `i`; the natural step size
    /// for edits.
    pub fn sigma(&self, i: usize) -> f64 {
        self.singular_values[i] / ((self.n_samples.max(2) - 1) as f64).sqrt()
    }

    /// Coefficients of `x` in the component basis.
    pub fn project(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.dim());
        self.components
            .iter()
            .map(|c| c.iter().zip(x).zip(&self.mean).map(|((ci, xi), mi)| ci * (xi - mi)).sum())
            .collect()
    }

    /// Rebuild a vector from component coefficients.
    pub fn synthesize(&self, coeffs: &[f64]) -> Vec<f64> {
        assert_eq!(coeffs.len(), self.components.len());
        let mut out = self.mean.clone();
        for (w, comp) in coeffs.iter().zip(&self.components) {
            for (o, c) in out.iter_mut().zip(comp) {
                *o += w * c;
            }
        }
        out
    }
}

/// Fit a PCA basis with `n_components` directions over embedding rows.
pub fn pca_embeddings(rows: &[Vec<f64>], n_components: usize) -> Result<Pca, ImfaceError> {
    let n = rows.len();
    if n == 0 {
        return Err(ImfaceError::Data("cannot fit a basis to zero embeddings".into()));
    }
    let d = rows[0].len();
    if d == 0 || rows.iter().any(|r| r.len() != d) {
        return Err(ImfaceError::Data(
            "embedding rows must share one non-zero dimension".into(),
        ));
    }
    if n_components == 0 || n_components > d || n_components > n {
        return Err(ImfaceError::Config(format!(
            "cannot extract {n_components} components from {n} embeddings of dimension {d}"
        )));
    }
    let mut mean = vec![0.0; d];
    for r in rows {
        for (m, x) in mean.iter_mut().zip(r) {
            *m += x / n as f64;
        }
    }
    // Gram matrix of the centered data; built upper-triangular and mirrored
    // so the eigen solver sees exact symmetry.
    let mut cov = vec![0.0; d * d];
    for i in 0..d {
        for j in i..d {
            let mut s = 0.0;
            for r in rows {
                s += (r[i] - mean[i]) * (r[j] - mean[j]);
            }
            cov[i * d + j] = s;
            cov[j * d + i] = s;
        }
    }
    let (eigvals, eigvecs) = symmetric_eigen(&cov, d);
    let components = (0..n_components)
        .map(|c| (0..d).map(|i| eigvecs[i * d + c]).collect())
        .collect();
    let singular_values = eigvals
        .iter()
        .take(n_components)
        .map(|&l| l.max(0.0).sqrt())
        .collect();
    Ok(Pca {
        mean,
        components,
        singular_values,
        n_samples: n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::Tensor;
    use crate::geom::procrustes::canonical_landmarks;
    use crate::model::ModelConfig;
    use crate::seeds;
    use rand::Rng;
    use std::sync::Arc;

    fn cloud(n: usize, seed: u64, span: f64) -> Vec<[f64; 3]> {
        let mut rng = seeds::stream(seed, "recon-cloud", &[]);
        (0..n)
            .map(|_| {
                [
                    rng.gen_range(-span..span),
                    rng.gen_range(-span..span),
                    rng.gen_range(-span..span),
                ]
            })
            .collect()
    }

    fn sphere_mesh(res: usize) -> TriangleMesh {
        let grid = VoxelGrid::cube(res, 80.0).unwrap();
        marching_cubes(&grid, |pts| {
            Ok(pts
                .iter()
                .map(|p| (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt() - 50.0)
                .collect())
        })
        .unwrap()
    }

    fn square(flipped: bool) -> TriangleMesh {
        let vertices = vec![
            [0.0, 0.0, 0.0],
            [10.0, 0.0, 0.0],
            [10.0, 10.0, 0.0],
            [0.0, 10.0, 0.0],
        ];
        let faces = if flipped {
            vec![[2, 1, 0], [3, 2, 0]]
        } else {
            vec![[0, 1, 2], [0, 2, 3]]
        };
        TriangleMesh::new(vertices, faces)
    }

    fn tiny_model(seed: u64) -> ImFaceModel {
        let config = ModelConfig {
            k: 5,
            z_dim: 4,
            region_hidden: 10,
            detail_hidden: 10,
            fusion_hidden: 6,
            landmark_hidden: 8,
            n_freq: 2,
            w0_deform: 30.0,
            w0_detail: 60.0,
            sigma_att_mm: 5.0,
            scale_mm: 100.0,
        };
        let mut m = ImFaceModel::init(&config, seed).unwrap();
        m.set_template_landmarks(&canonical_landmarks()).unwrap();
        m
    }

    fn zeroed_model(seed: u64) -> ImFaceModel {
        let mut m = tiny_model(seed);
        for t in m.tensors.values_mut() {
            *t = Arc::new(Tensor {
                shape: t.shape.clone(),
                data: vec![0.0; t.len()],
            });
        }
        m
    }

    #[test]
    fn chamfer_hand_values_and_brute_force() {
        let a = cloud(200, 1, 50.0);
        assert_eq!(chamfer(&a, &a).unwrap(), 0.0);

        let p = vec![[0.0, 0.0, 0.0]];
        let q = vec![[0.0, 3.0, 0.0]];
        assert!((chamfer(&p, &q).unwrap() - 3.0).abs() < 1e-15);

        // brute-force reference on small random clouds
        let b = cloud(170, 2, 50.0);
        let min_d = |from: &[[f64; 3]], to: &[[f64; 3]]| {
            from.iter()
                .map(|&x| {
                    to.iter()
                        .map(|&y| norm(sub(x, y)))
                        .fold(f64::INFINITY, f64::min)
                })
                .sum::<f64>()
                / from.len() as f64
        };
        let expect = 0.5 * (min_d(&a, &b) + min_d(&b, &a));
        assert!((chamfer(&a, &b).unwrap() - expect).abs() < 1e-9);
    }

    #[test]
    fn chamfer_and_fscore_are_symmetric_and_reject_empty_sets() {
        let a = cloud(120, 3, 40.0);
        let b = cloud(90, 4, 40.0);
        assert_eq!(chamfer(&a, &b).unwrap(), chamfer(&b, &a).unwrap());
        assert_eq!(fscore(&a, &b, 5.0).unwrap(), fscore(&b, &a, 5.0).unwrap());
        assert_eq!(chamfer(&a, &[]).unwrap_err().category(), "data");
        assert_eq!(fscore(&[], &b, 1.0).unwrap_err().category(), "data");
        assert_eq!(fscore(&a, &b, 0.0).unwrap_err().category(), "config");
    }

    #[test]
    fn fscore_hand_cases() {
        let gt = vec![[0.0, 0.0, 0.0]];
        assert_eq!(fscore(&gt, &gt, 1.0).unwrap(), 100.0);

        // half the predictions hit, all ground truth covered: F = 2/3
        let pred = vec![[0.0, 0.0, 0.0], [10.0, 0.0, 0.0]];
        let f = fscore(&pred, &gt, 1.0).unwrap();
        assert!((f - 200.0 / 3.0).abs() < 1e-9, "got {f}");

        let far = vec![[100.0, 100.0, 100.0]];
        assert_eq!(fscore(&far, &gt, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn normal_consistency_sign_and_self_agreement() {
        let plane = square(false);
        let nc = normal_consistency(&plane, &plane, 400, false, 5).unwrap();
        assert!(nc > 1.0 - 1e-6, "self consistency {nc}");

        let flipped = square(true);
        let nc = normal_consistency(&plane, &flipped, 400, false, 5).unwrap();
        assert!((nc + 1.0).abs() < 1e-6, "flipped consistency {nc}");
        let abs_nc = normal_consistency(&plane, &flipped, 400, true, 5).unwrap();
        assert!(abs_nc > 1.0 - 1e-6, "unsigned consistency {abs_nc}");
    }

    #[test]
    fn normal_consistency_between_sphere_resolutions() {
        let fine = sphere_mesh(48);
        let coarse = sphere_mesh(24);
        let nc = normal_consistency(&fine, &coarse, 4000, false, 6).unwrap();
        assert!(nc > 0.99, "sphere consistency {nc}");
    }

    #[test]
    fn mesh_report_stays_in_range_and_serializes() {
        let fine = sphere_mesh(48);
        let coarse = sphere_mesh(24);
        let opts = MetricOptions {
            n_samples: 3000,
            ..MetricOptions::default()
        };
        let report = evaluate_meshes(&fine, &coarse, &opts).unwrap();
        assert!(report.chamfer_mm > 0.0 && report.chamfer_mm < 5.0);
        assert!((0.0..=100.0).contains(&report.fscore_pct));
        assert!((-1.0..=1.0).contains(&report.normal_consistency));
        assert!(report.ede_mm.is_none());
        let json = serde_json::to_string(&report).unwrap();
        let back: MetricReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, report);
    }

    #[test]
    fn correspondence_matches_identical_scans_to_themselves() {
        let model = tiny_model(9);
        let codes = LatentCodes::zeros(4);
        let pts = cloud(60, 7, 60.0);
        let pairs = correspondence_map(&model, &codes, &pts, &codes, &pts).unwrap();
        assert_eq!(pairs.len(), pts.len());
        for (pair, &p) in pairs.iter().zip(&pts) {
            assert_eq!(pair.source, p);
            assert_eq!(pair.target, p);
            assert_eq!(pair.distance, 0.0);
            assert!(pair.anchor.iter().all(|v| v.is_finite()));
        }
        let again = correspondence_map(&model, &codes, &pts, &codes, &pts).unwrap();
        assert_eq!(pairs, again);
    }

    #[test]
    fn deformation_errors_match_hand_built_ground_truth() {
        // with an all-zero model both warps are the identity map
        let model = zeroed_model(3);
        let codes = LatentCodes::zeros(4);
        let dense: Vec<DenseSite> = cloud(40, 8, 60.0)
            .into_iter()
            .map(|p| DenseSite {
                scan: p,
                neutral: [p[0] + 3.0, p[1], p[2]],
                template: p,
            })
            .collect();
        let (ede, tde) = ede_tde(&model, &codes, &dense).unwrap();
        assert!((ede - 3.0).abs() < 1e-9, "ede {ede}");
        assert!(tde < 1e-9, "tde {tde}");
        assert_eq!(ede_tde(&model, &codes, &[]).unwrap_err().category(), "data");
    }

    #[test]
    fn code_interpolation_endpoints_subsets_and_errors() {
        let a = LatentCodes {
            z_exp: vec![1.0, -2.0],
            z_id: vec![0.5, 0.25],
            z_detail: vec![3.0, -3.0],
        };
        let b = LatentCodes {
            z_exp: vec![-1.0, 4.0],
            z_id: vec![1.5, -0.75],
            z_detail: vec![-3.0, 3.0],
        };
        let at0 = interpolate_codes(&a, &b, 0.0, CodeSubset::All).unwrap();
        assert_eq!((at0.z_exp, at0.z_id, at0.z_detail), (a.z_exp.clone(), a.z_id.clone(), a.z_detail.clone()));
        let at1 = interpolate_codes(&a, &b, 1.0, CodeSubset::All).unwrap();
        assert_eq!((at1.z_exp, at1.z_id, at1.z_detail), (b.z_exp.clone(), b.z_id.clone(), b.z_detail.clone()));

        // opposite detail codes cancel at the midpoint
        let mid = interpolate_codes(&a, &b, 0.5, CodeSubset::All).unwrap();
        assert_eq!(mid.z_detail, vec![0.0, 0.0]);

        let exp_only = interpolate_codes(&a, &b, 0.5, CodeSubset::Expression).unwrap();
        assert_eq!(exp_only.z_exp, vec![0.0, 1.0]);
        assert_eq!(exp_only.z_id, a.z_id);
        assert_eq!(exp_only.z_detail, a.z_detail);

        let short = LatentCodes::zeros(1);
        assert_eq!(
            interpolate_codes(&a, &short, 0.5, CodeSubset::All)
                .unwrap_err()
                .category(),
            "config"
        );
        assert_eq!(
            interpolate_codes(&a, &b, 1.5, CodeSubset::All).unwrap_err().category(),
            "config"
        );
    }

    #[test]
    fn pca_recovers_a_line_and_reconstructs_exactly() {
        let dir = {
            let n = norm([2.0, -1.0, 2.0]);
            [2.0 / n, -1.0 / n, 2.0 / n]
        };
        let base = [5.0, 1.0, -2.0];
        let rows: Vec<Vec<f64>> = (0..6)
            .map(|i| {
                let t = i as f64 - 2.5;
                (0..3).map(|d| base[d] + t * dir[d]).collect()
            })
            .collect();
        let pca = pca_embeddings(&rows, 3).unwrap();

        // the first component spans the line, the rest carry no variance
        let align: f64 = pca.components[0].iter().zip(dir).map(|(c, d)| c * d).sum();
        assert!(align.abs() > 1.0 - 1e-9);
        assert!(pca.singular_values[1] < 1e-9 && pca.singular_values[2] < 1e-9);
        assert!(pca.singular_values[0] >= pca.singular_values[1]);

        // orthonormal basis
        for i in 0..3 {
            for j in 0..3 {
                let d: f64 = pca.components[i]
                    .iter()
                    .zip(&pca.components[j])
                    .map(|(a, b)| a * b)
                    .sum();
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((d - want).abs() < 1e-10);
            }
        }

        // projecting and synthesizing with the full basis is lossless
        for r in &rows {
            let back = pca.synthesize(&pca.project(r));
            for (x, y) in back.iter().zip(r) {
                assert!((x - y).abs() < 1e-9);
            }
        }

        assert_eq!(pca_embeddings(&rows[..2], 3).unwrap_err().category(), "config");
        assert_eq!(pca_embeddings(&[], 1).unwrap_err().category(), "data");
    }

    #[test]
    fn surface_sampling_is_deterministic_and_area_weighted() {
        let mesh = square(false);
        let s1 = sample_surface(&mesh, 500, 4).unwrap();
        let s2 = sample_surface(&mesh, 500, 4).unwrap();
        assert_eq!(s1.len(), 500);
        for (a, b) in s1.iter().zip(&s2) {
            assert_eq!(a.point, b.point);
            assert_eq!(a.normal, b.normal);
        }
        for s in &s1 {
            assert!(s.point.iter().take(2).all(|&v| (0.0..=10.0).contains(&v)));
            assert_eq!(s.point[2], 0.0);
            assert!((norm(s.normal) - 1.0).abs() < 1e-12);
        }
        let empty = TriangleMesh::new(vec![[0.0; 3]], vec![]);
        assert_eq!(sample_surface(&empty, 10, 0).unwrap_err().category(), "data");
    }
}
