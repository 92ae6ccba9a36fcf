//! Ray-triangle intersection (Moller-Trumbore).

use crate::fields::se3::{cross3, dot3};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    /// Distance along the ray in units of `dir`'s length.
    pub t: f64,
    pub u: f64,
    pub v: f64,
}

const DET_EPS: f64 = 1e-12;
const T_EPS: f64 = 1e-9;

/// Intersect a ray with a triangle; `None` when parallel, behind the origin,
/// or outside the triangle. Barycentrics satisfy
/// hit point = (1-u-v) v0 + u v1 + v v2.
pub fn ray_triangle_intersect(
    origin: [f64; 3],
    dir: [f64; 3],
    v0: [f64; 3],
    v1: [f64; 3],
    v2: [f64; 3],
) -> Option<Hit> {
    debug_assert!(dot3(dir, dir) > 0.0, "direction must be nonzero");
    let e1 = [v1[0] - v0[0], v1[1] - v0[1], v1[2] - v0[2]];
    let e2 = [v2[0] - v0[0], v2[1] - v0[1], v2[2] - v0[2]];
    let pvec = cross3(dir, e2);
    let det = dot3(e1, pvec);
    if det.abs() < DET_EPS {
        return None;
    }
    let inv_det = 1.0 / det;
    let tvec = [origin[0] - v0[0], origin[1] - v0[1], origin[2] - v0[2]];
    let u = dot3(tvec, pvec) * inv_det;
    if !(0.0..=1.0).contains(&u) {
        return None;
    }
    let qvec = cross3(tvec, e1);
    let v = dot3(dir, qvec) * inv_det;
    if v < 0.0 || u + v > 1.0 {
        return None;
    }
    let t = dot3(e2, qvec) * inv_det;
    if t <= T_EPS {
        return None;
    }
    Some(Hit { t, u, v })
}
