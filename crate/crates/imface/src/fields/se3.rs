//! Rigid-motion parameterization: axis-angle rotation vector plus screw
//! translation, the exponential map, and a batched graph version used by the
//! deformation blocks.

use crate::diffcore::coef::{rot_coef, CoefKind};
use crate::diffcore::{NodeId, Tape};

/// One local rigid motion: rotation vector `omega` (radians) and screw
/// translation parameter `v` (same length unit as the points it acts on).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SE3Param {
    pub omega: [f64; 3],
    pub v: [f64; 3],
}

impl SE3Param {
    /// Builds a parameter, reducing the rotation vector to its canonical
    /// representative with angle in [0, pi). The screw parameter is kept
    /// verbatim; it is interpreted relative to the stored rotation vector.
    pub fn new(omega: [f64; 3], v: [f64; 3]) -> Self {
        assert!(
            omega.iter().chain(v.iter()).all(|c| c.is_finite()),
            "SE3Param needs finite components"
        );
        let theta = norm3(omega);
        let omega = if theta >= std::f64::consts::PI {
            // same rotation, shortest angle: theta mod 2pi folded into
            // (-pi, pi], with negative angles absorbed into the axis
            let two_pi = 2.0 * std::f64::consts::PI;
            let mut t = theta % two_pi;
            if t > std::f64::consts::PI {
                t -= two_pi;
            }
            let s = t / theta;
            [omega[0] * s, omega[1] * s, omega[2] * s]
        } else {
            omega
        };
        SE3Param { omega, v }
    }

    pub fn identity() -> Self {
        SE3Param {
            omega: [0.0; 3],
            v: [0.0; 3],
        }
    }
}

pub fn cross3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn dot3(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn norm3(a: [f64; 3]) -> f64 {
    dot3(a, a).sqrt()
}

/// Matrix with `skew(w) * x == cross3(w, x)`.
pub fn skew(w: [f64; 3]) -> [[f64; 3]; 3] {
    [
        [0.0, -w[2], w[1]],
        [w[2], 0.0, -w[0]],
        [-w[1], w[0], 0.0],
    ]
}

pub fn matvec3(m: &[[f64; 3]; 3], x: [f64; 3]) -> [f64; 3] {
    [dot3(m[0], x), dot3(m[1], x), dot3(m[2], x)]
}

/// Exponential map to a rotation matrix and translation:
/// R = I + A*[w]x + B*[w]x^2 with A = sin(t)/t, B = (1-cos(t))/t^2, and
/// t = (I + B*[w]x + C*[w]x^2) v with C = (t - sin(t))/t^3. The coefficients
/// are series-evaluated near zero so the map is smooth through omega = 0.
pub fn se3_exp(param: &SE3Param) -> ([[f64; 3]; 3], [f64; 3]) {
    let w = param.omega;
    let u = dot3(w, w);
    let a = rot_coef(CoefKind::A, 0, u);
    let b = rot_coef(CoefKind::B, 0, u);
    let c = rot_coef(CoefKind::C, 0, u);
    let k = skew(w);
    let mut r = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let k2 = (0..3).map(|m| k[i][m] * k[m][j]).sum::<f64>();
            r[i][j] = (i == j) as u8 as f64 + a * k[i][j] + b * k2;
        }
    }
    let wv = cross3(w, param.v);
    let wwv = cross3(w, wv);
    let t = [
        param.v[0] + b * wv[0] + c * wwv[0],
        param.v[1] + b * wv[1] + c * wwv[1],
        param.v[2] + b * wv[2] + c * wwv[2],
    ];
    (r, t)
}

/// p' = R p + t.
pub fn apply_deformation(p: [f64; 3], param: &SE3Param) -> [f64; 3] {
    let (r, t) = se3_exp(param);
    let rp = matvec3(&r, p);
    [rp[0] + t[0], rp[1] + t[1], rp[2] + t[2]]
}

/// Batched, differentiable deformation on the tape. `pts` is n x 3 and
/// `params6` is n x 6 laid out as (omega | v); returns the n x 3 deformed
/// points. Uses R p = p + A (w x p) + B (w x (w x p)) so no matrices are
/// materialized per row.
pub fn se3_apply_graph(tape: &mut Tape, pts: NodeId, params6: NodeId) -> NodeId {
    assert_eq!(tape.value(pts).cols(), 3, "points must be n x 3");
    assert_eq!(tape.value(params6).cols(), 6, "params must be n x 6");
    assert_eq!(tape.value(pts).rows(), tape.value(params6).rows());
    let w = tape.slice_cols(params6, 0, 3);
    let v = tape.slice_cols(params6, 3, 6);
    let u = tape.row_sq_norm(w);
    let a = tape.rot_coef(u, CoefKind::A, 0);
    let b = tape.rot_coef(u, CoefKind::B, 0);
    let c = tape.rot_coef(u, CoefKind::C, 0);

    let wp = tape.cross(w, pts);
    let wwp = tape.cross(w, wp);
    let awp = tape.mul_col(wp, a);
    let bwwp = tape.mul_col(wwp, b);
    let rp = {
        let s = tape.add(pts, awp);
        tape.add(s, bwwp)
    };

    let wv = tape.cross(w, v);
    let wwv = tape.cross(w, wv);
    let bwv = tape.mul_col(wv, b);
    let cwwv = tape.mul_col(wwv, c);
    let t = {
        let s = tape.add(v, bwv);
        tape.add(s, cwwv)
    };

    tape.add(rp, t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec3(rng: &mut impl Rng, scale: f64) -> [f64; 3] {
        [
            rng.gen_range(-scale..scale),
            rng.gen_range(-scale..scale),
            rng.gen_range(-scale..scale),
        ]
    }

    /// Rotate p by the quaternion for (axis, angle): an independent oracle
    /// for the Rodrigues route.
    fn quat_rotate(omega: [f64; 3], p: [f64; 3]) -> [f64; 3] {
        let theta = norm3(omega);
        if theta == 0.0 {
            return p;
        }
        let (s, c) = ((theta / 2.0).sin(), (theta / 2.0).cos());
        let q = [
            c,
            s * omega[0] / theta,
            s * omega[1] / theta,
            s * omega[2] / theta,
        ];
        // q * (0, p) * conj(q)
        let qv = [q[1], q[2], q[3]];
        let uv = cross3(qv, p);
        let uuv = cross3(qv, uv);
        [
            p[0] + 2.0 * (q[0] * uv[0] + uuv[0]),
            p[1] + 2.0 * (q[0] * uv[1] + uuv[1]),
            p[2] + 2.0 * (q[0] * uv[2] + uuv[2]),
        ]
    }

    #[test]
    fn skew_of_zero_is_zero() {
        assert_eq!(skew([0.0; 3]), [[0.0; 3]; 3]);
    }

    #[test]
    fn skew_matches_cross_product() {
        assert_eq!(matvec3(&skew([0.0, 0.0, 1.0]), [1.0, 0.0, 0.0]), [
            0.0, 1.0, 0.0
        ]);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let w = rand_vec3(&mut rng, 2.0);
            let x = rand_vec3(&mut rng, 2.0);
            let got = matvec3(&skew(w), x);
            let want = cross3(w, x);
            for i in 0..3 {
                assert!((got[i] - want[i]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn skew_transpose_is_negation() {
        let m = skew([0.3, -0.7, 1.1]);
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(m[i][j], -m[j][i]);
            }
        }
    }

    #[test]
    fn zero_rotation_is_identity_plus_v() {
        let (r, t) = se3_exp(&SE3Param::new([0.0; 3], [1.0, -2.0, 3.0]));
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(r[i][j], (i == j) as u8 as f64);
            }
        }
        assert_eq!(t, [1.0, -2.0, 3.0]);
    }

    #[test]
    fn quarter_turn_about_x() {
        let p = SE3Param::new([std::f64::consts::FRAC_PI_2, 0.0, 0.0], [0.0; 3]);
        let got = apply_deformation([0.0, 1.0, 0.0], &p);
        let want = quat_rotate(p.omega, [0.0, 1.0, 0.0]);
        for i in 0..3 {
            assert!((got[i] - want[i]).abs() < 1e-14, "{got:?} vs {want:?}");
        }
        assert!(got[0].abs() < 1e-15);
        assert!(got[1].abs() < 1e-15);
        assert!((got[2] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn rotation_matches_quaternion_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..1000 {
            let w = rand_vec3(&mut rng, 1.5);
            let x = rand_vec3(&mut rng, 10.0);
            let got = apply_deformation(x, &SE3Param::new(w, [0.0; 3]));
            let want = quat_rotate(w, x);
            for i in 0..3 {
                assert!(
                    (got[i] - want[i]).abs() < 1e-12 * (1.0 + want[i].abs()),
                    "w {w:?} x {x:?}: {got:?} vs {want:?}"
                );
            }
        }
    }

    #[test]
    fn random_rotations_are_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10_000 {
            let w = rand_vec3(&mut rng, 3.0);
            let (r, _) = se3_exp(&SE3Param::new(w, [0.0; 3]));
            // R^T R == I
            for i in 0..3 {
                for j in 0..3 {
                    let dot = (0..3).map(|m| r[m][i] * r[m][j]).sum::<f64>();
                    let want = (i == j) as u8 as f64;
                    assert!((dot - want).abs() < 1e-9, "RtR[{i}][{j}] = {dot}");
                }
            }
            let det = r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1])
                - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
                + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0]);
            assert!((det - 1.0).abs() < 1e-9, "det {det}");
        }
    }

    /// The map must be seamless around the tiny-angle regime: compare against
    /// the truncated small-angle coefficients just below 1e-4 and against
    /// direct trigonometry just above it.
    #[test]
    fn smooth_through_the_small_angle_boundary() {
        let v = [0.4, -0.2, 0.9];
        let axis = [1.0 / 3f64.sqrt(); 3];
        for &theta in &[1e-4 * (1.0 - 1e-6), 1e-4, 1e-4 * (1.0 + 1e-6)] {
            let w = [axis[0] * theta, axis[1] * theta, axis[2] * theta];
            let (r, t) = se3_exp(&SE3Param::new(w, v));

            let t2 = theta * theta;
            let (a_lo, b_lo, c_lo) = (
                1.0 - t2 / 6.0,
                0.5 - t2 / 24.0,
                1.0 / 6.0 - t2 / 120.0,
            );
            let (a_hi, b_hi, c_hi) = (
                theta.sin() / theta,
                (1.0 - theta.cos()) / t2,
                (theta - theta.sin()) / (t2 * theta),
            );
            for (a, b, c) in [(a_lo, b_lo, c_lo), (a_hi, b_hi, c_hi)] {
                let k = skew(w);
                let wv = cross3(w, v);
                let wwv = cross3(w, wv);
                for i in 0..3 {
                    for j in 0..3 {
                        let k2 = (0..3).map(|m| k[i][m] * k[m][j]).sum::<f64>();
                        let want = (i == j) as u8 as f64 + a * k[i][j] + b * k2;
                        assert!((r[i][j] - want).abs() < 1e-10);
                    }
                    let want_t = v[i] + b * wv[i] + c * wwv[i];
                    assert!((t[i] - want_t).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn identity_param_fixes_points() {
        let p = [3.0, -1.0, 7.5];
        assert_eq!(apply_deformation(p, &SE3Param::identity()), p);
    }

    #[test]
    fn pure_rotation_preserves_distances() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..200 {
            let param = SE3Param::new(rand_vec3(&mut rng, 2.0), [0.0; 3]);
            let p = rand_vec3(&mut rng, 50.0);
            let q = rand_vec3(&mut rng, 50.0);
            let (p2, q2) = (apply_deformation(p, &param), apply_deformation(q, &param));
            let d = norm3([p[0] - q[0], p[1] - q[1], p[2] - q[2]]);
            let d2 = norm3([p2[0] - q2[0], p2[1] - q2[1], p2[2] - q2[2]]);
            assert!((d - d2).abs() < 1e-10 * (1.0 + d));
        }
    }

    #[test]
    fn large_angles_wrap_to_the_same_rotation() {
        let axis = [0.0, 1.0, 0.0];
        let theta = 2.0 * std::f64::consts::PI + 0.3;
        let wrapped = SE3Param::new([axis[0] * theta, axis[1] * theta, axis[2] * theta], [0.0; 3]);
        assert!(norm3(wrapped.omega) < std::f64::consts::PI);
        let plain = SE3Param::new([0.0, 0.3, 0.0], [0.0; 3]);
        let p = [1.0, 2.0, 3.0];
        let (a, b) = (apply_deformation(p, &wrapped), apply_deformation(p, &plain));
        for i in 0..3 {
            assert!((a[i] - b[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn graph_batch_matches_plain_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let n = 16;
        let mut pts = Vec::new();
        let mut raw = Vec::new();
        for _ in 0..n {
            pts.push(rand_vec3(&mut rng, 20.0));
            let w = rand_vec3(&mut rng, 1.0);
            let v = rand_vec3(&mut rng, 5.0);
            raw.extend_from_slice(&w);
            raw.extend_from_slice(&v);
        }
        let mut tape = Tape::new();
        let p_node = tape.input(Tensor::from_points(&pts));
        let s_node = tape.input(Tensor::new(vec![n, 6], raw.clone()));
        let out = se3_apply_graph(&mut tape, p_node, s_node);
        let got = tape.value(out).clone();
        for r in 0..n {
            let w = [raw[r * 6], raw[r * 6 + 1], raw[r * 6 + 2]];
            let v = [raw[r * 6 + 3], raw[r * 6 + 4], raw[r * 6 + 5]];
            let want = apply_deformation(pts[r], &SE3Param::new(w, v));
            for c in 0..3 {
                assert!(
                    (got.at(r, c) - want[c]).abs() < 1e-12,
                    "row {r}: {:?} vs {want:?}",
                    got.row(r)
                );
            }
        }
    }

    /// d(deformed point)/d(param) against central differences, including
    /// through the rotation-coefficient chain.
    #[test]
    fn graph_gradient_wrt_params_matches_fd() {
        let p = [2.0, -1.0, 0.5];
        let base = [0.4, 0.2, -0.3, 1.0, 0.0, -2.0];
        let eval = |params: [f64; 6]| -> f64 {
            let mut tape = Tape::new();
            let pn = tape.input(Tensor::from_points(&[p]));
            let sn = tape.input(Tensor::new(vec![1, 6], params.to_vec()));
            let out = se3_apply_graph(&mut tape, pn, sn);
            // scalar probe: weighted sum of the output coords
            let probe = tape.input(Tensor::new(vec![3, 1], vec![1.0, 2.0, -0.5]));
            let s = tape.matmul(out, probe);
            tape.value(s).item()
        };
        let mut tape = Tape::new();
        let pn = tape.input(Tensor::from_points(&[p]));
        let sn = tape.input(Tensor::new(vec![1, 6], base.to_vec()));
        let out = se3_apply_graph(&mut tape, pn, sn);
        let probe = tape.input(Tensor::new(vec![3, 1], vec![1.0, 2.0, -0.5]));
        let s = tape.matmul(out, probe);
        let g = tape.input_gradient(s, sn);
        let analytic = tape.value(g).clone();
        let h = 1e-6;
        for i in 0..6 {
            let mut up = base;
            up[i] += h;
            let mut dn = base;
            dn[i] -= h;
            let fd = (eval(up) - eval(dn)) / (2.0 * h);
            let rel = (fd - analytic.data[i]).abs() / analytic.data[i].abs().max(1e-8);
            assert!(rel < 1e-4, "param {i}: fd {fd} vs {}", analytic.data[i]);
        }
    }

    /// Same check for the query point itself.
    #[test]
    fn graph_gradient_wrt_point_matches_fd() {
        let base_p = [2.0, -1.0, 0.5];
        let se3 = [0.4, 0.2, -0.3, 1.0, 0.0, -2.0];
        let eval = |p: [f64; 3]| -> f64 {
            let mut tape = Tape::new();
            let pn = tape.input(Tensor::from_points(&[p]));
            let sn = tape.input(Tensor::new(vec![1, 6], se3.to_vec()));
            let out = se3_apply_graph(&mut tape, pn, sn);
            let sq = tape.row_sq_norm(out);
            tape.value(sq).item()
        };
        let mut tape = Tape::new();
        let pn = tape.input(Tensor::from_points(&[base_p]));
        let sn = tape.input(Tensor::new(vec![1, 6], se3.to_vec()));
        let out = se3_apply_graph(&mut tape, pn, sn);
        let sq = tape.row_sq_norm(out);
        let g = tape.input_gradient(sq, pn);
        let analytic = tape.value(g).clone();
        let h = 1e-6;
        for i in 0..3 {
            let mut up = base_p;
            up[i] += h;
            let mut dn = base_p;
            dn[i] -= h;
            let fd = (eval(up) - eval(dn)) / (2.0 * h);
            let rel = (fd - analytic.data[i]).abs() / analytic.data[i].abs().max(1e-8);
            assert!(rel < 1e-4, "coord {i}: fd {fd} vs {}", analytic.data[i]);
        }
    }
}
