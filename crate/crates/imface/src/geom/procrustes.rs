//! Rigid/similarity alignment of scans into a canonical frontal frame, plus
//! the sphere crop that bounds the working region.

use super::mesh::TriangleMesh;
use crate::error::ImfaceError;
use crate::fields::se3::{dot3, matvec3, norm3};
use crate::linalg::symmetric_eigen;

/// Radius of the sampling sphere around the face, in mm.
pub const SPHERE_RADIUS_MM: f64 = 100.0;
/// The nose tip sits this far in front of the origin after alignment.
pub const NOSE_Z_MM: f64 = 40.0;

/// Canonical frontal positions of the five anchor landmarks (mm), ordered
/// left outer eye, right outer eye, left mouth corner, right mouth corner,
/// nose tip. They sit on a 40 mm-high cosine cap over a 90 mm disk, nose at
/// (0, 0, 40); left/right is the -x/+x of the aligned frame.
pub fn canonical_landmarks() -> [[f64; 3]; 5] {
    let cap = |x: f64, y: f64| {
        let r = (x * x + y * y).sqrt();
        NOSE_Z_MM * (std::f64::consts::PI * r / 180.0).cos()
    };
    [
        [-35.0, 25.0, cap(-35.0, 25.0)],
        [35.0, 25.0, cap(35.0, 25.0)],
        [-22.0, -30.0, cap(-22.0, -30.0)],
        [22.0, -30.0, cap(22.0, -30.0)],
        [0.0, 0.0, NOSE_Z_MM],
    ]
}

/// p -> s * R * p + t.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Similarity {
    pub scale: f64,
    pub rot: [[f64; 3]; 3],
    pub trans: [f64; 3],
}

impl Similarity {
    pub fn identity() -> Self {
        Similarity {
            scale: 1.0,
            rot: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            trans: [0.0; 3],
        }
    }

    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let rp = matvec3(&self.rot, p);
        [
            self.scale * rp[0] + self.trans[0],
            self.scale * rp[1] + self.trans[1],
            self.scale * rp[2] + self.trans[2],
        ]
    }
}

/// Least-squares similarity aligning `src` landmarks onto `dst`: rotation by
/// the quaternion eigen-method, scale by the matched-projection ratio. The
/// translation is then pinned so the last landmark (the nose tip) maps
/// exactly to its canonical position.
pub fn align_landmarks(
    src: &[[f64; 3]],
    dst: &[[f64; 3]],
) -> Result<Similarity, ImfaceError> {
    if src.len() != dst.len() || src.len() < 3 {
        return Err(ImfaceError::Data(format!(
            "alignment needs matching landmark sets of at least 3 points, got {} and {}",
            src.len(),
            dst.len()
        )));
    }
    let n = src.len() as f64;
    let mut cs = [0.0; 3];
    let mut cd = [0.0; 3];
    for (s, d) in src.iter().zip(dst) {
        for c in 0..3 {
            cs[c] += s[c] / n;
            cd[c] += d[c] / n;
        }
    }
    // cross-covariance of the centered sets
    let mut m = [[0.0; 3]; 3];
    let mut src_sq = 0.0;
    for (s, d) in src.iter().zip(dst) {
        let sc = [s[0] - cs[0], s[1] - cs[1], s[2] - cs[2]];
        let dc = [d[0] - cd[0], d[1] - cd[1], d[2] - cd[2]];
        src_sq += dot3(sc, sc);
        for i in 0..3 {
            for j in 0..3 {
                m[i][j] += sc[i] * dc[j];
            }
        }
    }
    // collinearity guard: the centered source scatter needs rank >= 2
    let mut scatter = [0.0; 9];
    for s in src {
        let sc = [s[0] - cs[0], s[1] - cs[1], s[2] - cs[2]];
        for i in 0..3 {
            for j in 0..3 {
                scatter[i * 3 + j] += sc[i] * sc[j];
            }
        }
    }
    let (evals, _) = symmetric_eigen(&scatter, 3);
    if evals[1] <= 1e-9 * evals[0].max(1e-12) {
        return Err(ImfaceError::Data(
            "landmarks are collinear; cannot align".into(),
        ));
    }

    // Largest-eigenvalue quaternion of the 4x4 coupling matrix rotates
    // src onto dst.
    let (sxx, sxy, sxz) = (m[0][0], m[0][1], m[0][2]);
    let (syx, syy, syz) = (m[1][0], m[1][1], m[1][2]);
    let (szx, szy, szz) = (m[2][0], m[2][1], m[2][2]);
    #[rustfmt::skip]
    let nmat = [
        sxx + syy + szz, syz - szy,       szx - sxz,       sxy - syx,
        syz - szy,       sxx - syy - szz, sxy + syx,       szx + sxz,
        szx - sxz,       sxy + syx,       syy - sxx - szz, syz + szy,
        sxy - syx,       szx + sxz,       syz + szy,       szz - sxx - syy,
    ];
    let (_, vecs) = symmetric_eigen(&nmat, 4);
    let q = [vecs[0], vecs[4], vecs[8], vecs[12]]; // first column (w, x, y, z)
    let rot = quat_to_matrix(q);

    let mut proj = 0.0;
    for (s, d) in src.iter().zip(dst) {
        let sc = [s[0] - cs[0], s[1] - cs[1], s[2] - cs[2]];
        let dc = [d[0] - cd[0], d[1] - cd[1], d[2] - cd[2]];
        proj += dot3(dc, matvec3(&rot, sc));
    }
    if src_sq <= 0.0 {
        return Err(ImfaceError::Data("degenerate landmark set".into()));
    }
    let scale = proj / src_sq;
    if !(scale.is_finite() && scale > 0.0) {
        return Err(ImfaceError::Data(format!(
            "alignment produced a non-positive scale {scale}"
        )));
    }

    // pin the nose: last landmark lands exactly on its target
    let nose_src = src[src.len() - 1];
    let nose_dst = dst[dst.len() - 1];
    let rn = matvec3(&rot, nose_src);
    let trans = [
        nose_dst[0] - scale * rn[0],
        nose_dst[1] - scale * rn[1],
        nose_dst[2] - scale * rn[2],
    ];
    Ok(Similarity { scale, rot, trans })
}

fn quat_to_matrix(q: [f64; 4]) -> [[f64; 3]; 3] {
    let len = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    let (w, x, y, z) = (q[0] / len, q[1] / len, q[2] / len, q[3] / len);
    [
        [
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
        ],
        [
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
        ],
        [
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        ],
    ]
}

/// Align the mesh by its landmarks onto the canonical layout, then drop
/// every triangle with a vertex outside the sampling sphere (and any vertex
/// that loses all its faces). Returns the processed mesh and the transform
/// that was applied, so ground-truth data can be carried into the same
/// frame.
pub fn normalize_and_crop(
    mesh: &TriangleMesh,
    landmarks: &[[f64; 3]],
    radius_mm: f64,
) -> Result<(TriangleMesh, Similarity), ImfaceError> {
    let canon = canonical_landmarks();
    if landmarks.len() != canon.len() {
        return Err(ImfaceError::Data(format!(
            "expected {} landmarks, got {}",
            canon.len(),
            landmarks.len()
        )));
    }
    let xf = align_landmarks(landmarks, &canon)?;
    let mut aligned = mesh.clone();
    for v in &mut aligned.vertices {
        *v = xf.apply(*v);
    }
    let keep: Vec<[usize; 3]> = aligned
        .faces
        .iter()
        .filter(|f| {
            f.iter().all(|&vi| norm3(aligned.vertices[vi]) <= radius_mm) && {
                let [a, b, c] = [
                    aligned.vertices[f[0]],
                    aligned.vertices[f[1]],
                    aligned.vertices[f[2]],
                ];
                triangle_area(a, b, c) > 0.0
            }
        })
        .copied()
        .collect();
    aligned.faces = keep;
    if aligned.faces.is_empty() {
        return Err(ImfaceError::Data(
            "no triangles survive the sphere crop".into(),
        ));
    }
    let compacted = aligned.compact()?;
    Ok((compacted, xf))
}

fn triangle_area(a: [f64; 3], b: [f64; 3], c: [f64; 3]) -> f64 {
    let e1 = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
    let e2 = [c[0] - a[0], c[1] - a[1], c[2] - a[2]];
    let n = crate::fields::se3::cross3(e1, e2);
    0.5 * norm3(n)
}
