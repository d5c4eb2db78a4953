//! Cyclic Jacobi eigensolver for small symmetric matrices (d <= 64 here).
//!
//! Deterministic: fixed sweep order, fixed rotation formulas, no pivot
//! randomization — the same input always produces the same spectrum bits.

use super::MetricsError;

/// Eigendecomposition of a symmetric matrix, `a` row-major d x d.
/// Returns (eigenvalues, eigenvectors row-major d x d; column j belongs to
/// eigenvalue j). Pairs are sorted by descending eigenvalue.
pub fn jacobi_eigh(a: &[f64], d: usize) -> Result<(Vec<f64>, Vec<f64>), MetricsError> {
    if a.len() != d * d {
        return Err(MetricsError::BadInput(format!(
            "eigh expects a d*d matrix, got {} values for d={d}",
            a.len()
        )));
    }
    if d == 0 {
        return Err(MetricsError::BadInput("eigh of an empty matrix".into()));
    }
    let sym_tol = 1e-12 * frobenius(a).max(1.0);
    for p in 0..d {
        for q in (p + 1)..d {
            if (a[p * d + q] - a[q * d + p]).abs() > sym_tol {
                return Err(MetricsError::BadInput(format!(
                    "matrix is not symmetric: a[{p},{q}] = {} vs a[{q},{p}] = {}",
                    a[p * d + q],
                    a[q * d + p]
                )));
            }
        }
    }

    let mut m = a.to_vec();
    let mut v = vec![0.0; d * d];
    for i in 0..d {
        v[i * d + i] = 1.0;
    }

    const MAX_SWEEPS: usize = 100;
    let scale = frobenius(a).max(f64::MIN_POSITIVE);
    let mut converged = false;
    for _sweep in 0..MAX_SWEEPS {
        let off = off_diagonal_norm(&m, d);
        if off <= 1e-14 * scale {
            converged = true;
            break;
        }
        for p in 0..d - 1 {
            for q in (p + 1)..d {
                let apq = m[p * d + q];
                if apq == 0.0 {
                    continue;
                }
                let app = m[p * d + p];
                let aqq = m[q * d + q];
                // Stable symmetric Schur rotation.
                let tau = (aqq - app) / (2.0 * apq);
                let t = if tau >= 0.0 {
                    1.0 / (tau + (1.0 + tau * tau).sqrt())
                } else {
                    -1.0 / (-tau + (1.0 + tau * tau).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                rotate(&mut m, d, p, q, c, s);
                // Accumulate V = V * J(p, q, theta).
                for i in 0..d {
                    let vip = v[i * d + p];
                    let viq = v[i * d + q];
                    v[i * d + p] = c * vip - s * viq;
                    v[i * d + q] = s * vip + c * viq;
                }
            }
        }
    }
    if !converged && off_diagonal_norm(&m, d) > 1e-14 * scale {
        return Err(MetricsError::NotConverged { sweeps: MAX_SWEEPS });
    }

    let mut order: Vec<usize> = (0..d).collect();
    let eigvals: Vec<f64> = (0..d).map(|i| m[i * d + i]).collect();
    order.sort_by(|&i, &j| eigvals[j].partial_cmp(&eigvals[i]).expect("finite eigenvalues"));
    let sorted_vals: Vec<f64> = order.iter().map(|&i| eigvals[i]).collect();
    let mut sorted_vecs = vec![0.0; d * d];
    for (new_col, &old_col) in order.iter().enumerate() {
        for row in 0..d {
            sorted_vecs[row * d + new_col] = v[row * d + old_col];
        }
    }
    Ok((sorted_vals, sorted_vecs))
}

/// Apply the Jacobi rotation J(p,q)^T M J(p,q) in place.
fn rotate(m: &mut [f64], d: usize, p: usize, q: usize, c: f64, s: f64) {
    for i in 0..d {
        if i != p && i != q {
            let mip = m[i * d + p];
            let miq = m[i * d + q];
            let new_p = c * mip - s * miq;
            let new_q = s * mip + c * miq;
            m[i * d + p] = new_p;
            m[p * d + i] = new_p;
            m[i * d + q] = new_q;
            m[q * d + i] = new_q;
        }
    }
    let app = m[p * d + p];
    let aqq = m[q * d + q];
    let apq = m[p * d + q];
    m[p * d + p] = c * c * app - 2.0 * s * c * apq + s * s * aqq;
    m[q * d + q] = s * s * app + 2.0 * s * c * apq + c * c * aqq;
    m[p * d + q] = 0.0;
    m[q * d + p] = 0.0;
}

fn frobenius(a: &[f64]) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn off_diagonal_norm(m: &[f64], d: usize) -> f64 {
    let mut acc = 0.0;
    for p in 0..d {
        for q in 0..d {
            if p != q {
                acc += m[p * d + q] * m[p * d + q];
            }
        }
    }
    acc.sqrt()
}

/// Reconstruct f(A) = V f(Lambda) V^T for a symmetric A already decomposed.
pub fn reassemble(eigvals: &[f64], eigvecs: &[f64], d: usize, f: impl Fn(f64) -> f64) -> Vec<f64> {
    // (V diag(f(lambda))) V^T
    let mut scaled = vec![0.0; d * d];
    for row in 0..d {
        for col in 0..d {
            scaled[row * d + col] = eigvecs[row * d + col] * f(eigvals[col]);
        }
    }
    let mut out = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            let mut acc = 0.0;
            for k in 0..d {
                acc += scaled[i * d + k] * eigvecs[j * d + k];
            }
            out[i * d + j] = acc;
        }
    }
    out
}
