//! Small dense symmetric eigensolver (cyclic Jacobi). Used for rigid
//! alignment (4x4 quaternion matrices) and principal-component analysis of
//! latent codes. Deterministic: fixed sweep order, canonical eigenvector
//! signs.

/// Eigendecomposition of a symmetric n x n matrix (row-major). Returns
/// eigenvalues in descending order and the matching eigenvectors as columns
/// of a row-major n x n matrix. Each eigenvector is sign-normalized so its
/// largest-magnitude component is positive.
pub fn symmetric_eigen(a: &[f64], n: usize) -> (Vec<f64>, Vec<f64>) {
    assert_eq!(a.len(), n * n, "matrix must be n x n");
    for i in 0..n {
        for j in 0..i {
            assert!(
                (a[i * n + j] - a[j * n + i]).abs() <= 1e-9 * (1.0 + a[i * n + j].abs()),
                "matrix must be symmetric"
            );
        }
    }
    let mut m = a.to_vec();
    // symmetrize exactly so sweeps see a consistent matrix
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (m[i * n + j] + m[j * n + i]);
            m[i * n + j] = v;
            m[j * n + i] = v;
        }
    }
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }

    let off = |m: &[f64]| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    s += m[i * n + j] * m[i * n + j];
                }
            }
        }
        s
    };
    let scale: f64 = m.iter().map(|x| x * x).sum::<f64>().max(f64::MIN_POSITIVE);
    for _sweep in 0..100 {
        if off(&m) <= 1e-30 * scale {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (m[q * n + q] - m[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                // A <- J^T A J on rows/cols p and q
                for i in 0..n {
                    let (aip, aiq) = (m[i * n + p], m[i * n + q]);
                    m[i * n + p] = c * aip - s * aiq;
                    m[i * n + q] = s * aip + c * aiq;
                }
                for j in 0..n {
                    let (apj, aqj) = (m[p * n + j], m[q * n + j]);
                    m[p * n + j] = c * apj - s * aqj;
                    m[q * n + j] = s * apj + c * aqj;
                }
                for i in 0..n {
                    let (vip, viq) = (v[i * n + p], v[i * n + q]);
                    v[i * n + p] = c * vip - s * viq;
                    v[i * n + q] = s * vip + c * viq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        m[j * n + j]
            .partial_cmp(&m[i * n + i])
            .unwrap()
            .then(i.cmp(&j))
    });
    let mut vals = Vec::with_capacity(n);
    let mut vecs = vec![0.0; n * n];
    for (dst, &src) in order.iter().enumerate() {
        vals.push(m[src * n + src]);
        // canonical sign: biggest-|component| entry positive
        let mut big = 0;
        for i in 1..n {
            if v[i * n + src].abs() > v[big * n + src].abs() {
                big = i;
            }
        }
        let flip = if v[big * n + src] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..n {
            vecs[i * n + dst] = flip * v[i * n + src];
        }
    }
    (vals, vecs)
}
