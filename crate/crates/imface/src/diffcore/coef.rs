//! Rotation-coefficient functions for the SE(3) exponential map, parameterized
//! by u = theta^2.
//!
//! The exponential map needs three even analytic functions of the rotation
//! angle theta:
//!
//! ```text
//!   A = sin(theta)/theta          B = (1 - cos(theta))/theta^2
//!   C = (theta - sin(theta))/theta^3
//! ```
//!
//! Writing them in u = theta^2 removes the sqrt at the origin, so gradients of
//! a blended rotation field stay finite as the rotation vanishes. For
//! theta <= 1e-4 the truncated expansions `1 - u/6`, `1/2 - u/24` and
//! `1/6 - u/120` are used; below that angle any further series term is smaller
//! than one ulp of the leading term, so the evaluation here is bitwise equal
//! to those truncations while remaining exact (convergent series) for every
//! larger angle up to the closed-form crossover.
//!
//! Derivatives in u up to order 3 are supported; that is exactly what
//! double-backward through an Eikonal term on the detail-corrected field
//! needs. Higher orders are out of scope and panic.

/// Which coefficient of the exponential map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CoefKind {
    /// sin(theta)/theta — rotation term on the skew matrix.
    A,
    /// (1-cos(theta))/theta^2 — rotation term on the squared skew matrix.
    B,
    /// (theta-sin(theta))/theta^3 — translation term on the squared skew matrix.
    C,
}

/// Crossover between the series evaluation and the closed trig forms.
/// Below this the closed forms lose digits to cancellation; above it the
/// series needs enough terms that trig is both faster and exact.
const SERIES_LIMIT: f64 = 9.0;

/// d-th derivative in u of the coefficient `kind` at u = theta^2 >= 0.
pub fn rot_coef(kind: CoefKind, deriv: u8, u: f64) -> f64 {
    assert!(u >= 0.0, "rot_coef wants u = theta^2 >= 0, got {u}");
    assert!(
        deriv <= 3,
        "rot_coef derivatives beyond order 3 are out of scope"
    );
    if u < SERIES_LIMIT {
        series(kind, deriv, u)
    } else {
        closed(kind, deriv, u)
    }
}

/// Series in u: the coefficients are sum_k (-1)^k u^k / (2k+m)! with
/// m = 1, 2, 3 for A, B, C. Differentiation in u shifts the falling
/// factorial in. Terms decay factorially, so the sum is exact to f64
/// for the whole range it is used on.
fn series(kind: CoefKind, deriv: u8, u: f64) -> f64 {
    let m = match kind {
        CoefKind::A => 1usize,
        CoefKind::B => 2,
        CoefKind::C => 3,
    };
    let d = deriv as usize;
    // First live term has k = d: (-1)^d * d! / (2d+m)!.
    let mut term = if d % 2 == 0 { 1.0 } else { -1.0 };
    for j in 1..=d {
        term *= j as f64;
    }
    for j in 1..=(2 * d + m) {
        term /= j as f64;
    }
    let mut sum = term;
    let mut k = d;
    for _ in 0..48 {
        // t_{k+1}/t_k = -u * (k+1)/(k+1-d) / ((2k+m+1)(2k+m+2))
        let kk = k as f64;
        let denom = ((2 * k + m + 1) as f64) * ((2 * k + m + 2) as f64);
        term *= -u * (kk + 1.0) / ((kk + 1.0 - d as f64) * denom);
        sum += term;
        k += 1;
        if term.abs() <= f64::EPSILON * sum.abs() * 1e-2 {
            break;
        }
    }
    sum
}

/// Closed trig forms, valid where theta is large enough that no
/// subtraction cancels. 1-cos(theta) is always taken as 2 sin^2(theta/2).
fn closed(kind: CoefKind, deriv: u8, u: f64) -> f64 {
    let th = u.sqrt();
    let (s, c) = th.sin_cos();
    let vers = 2.0 * (0.5 * th).sin().powi(2); // 1 - cos(theta)
    let t2 = th * th;
    let t3 = t2 * th;
    match (kind, deriv) {
        (CoefKind::A, 0) => s / th,
        (CoefKind::A, 1) => (th * c - s) / (2.0 * t3),
        (CoefKind::A, 2) => (3.0 * s - 3.0 * th * c - t2 * s) / (4.0 * t2 * t3),
        (CoefKind::A, 3) => {
            (6.0 * t2 * s - t3 * c + 15.0 * th * c - 15.0 * s) / (8.0 * t2 * t2 * t3)
        }
        (CoefKind::B, 0) => vers / t2,
        (CoefKind::B, 1) => (th * s - 2.0 * vers) / (2.0 * t2 * t2),
        (CoefKind::B, 2) => (t2 * c - 5.0 * th * s + 8.0 * vers) / (4.0 * t3 * t3),
        (CoefKind::B, 3) => {
            (-t3 * s - 9.0 * t2 * c + 33.0 * th * s - 48.0 * vers) / (8.0 * t2 * t3 * t3)
        }
        (CoefKind::C, 0) => (th - s) / t3,
        (CoefKind::C, 1) => (3.0 * s - 2.0 * th - th * c) / (2.0 * t2 * t3),
        (CoefKind::C, 2) => (t2 * s + 7.0 * th * c + 8.0 * th - 15.0 * s) / (4.0 * t3 * t3 * th),
        (CoefKind::C, 3) => {
            (t3 * c - 12.0 * t2 * s - 57.0 * th * c - 48.0 * th + 105.0 * s)
                / (8.0 * t3 * t3 * t3)
        }
        _ => unreachable!(),
    }
}
