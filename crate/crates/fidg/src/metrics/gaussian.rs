//! Gaussian summaries and the Fréchet distance between them.

use crate::numerics::Tensor;

use super::eigen::{jacobi_eigh, reassemble};
use super::MetricsError;

/// First two moments of a point set, as used by the Fréchet distance.
#[derive(Debug, Clone)]
pub struct GaussianSummary {
    pub mean: Vec<f64>,
    /// Row-major d x d, symmetric (symmetrized at construction).
    pub cov: Vec<f64>,
    pub n: usize,
}

impl GaussianSummary {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Sample mean and unbiased covariance of `points` ([n, d]), symmetrized.
pub fn fit_gaussian(points: &Tensor) -> Result<GaussianSummary, MetricsError> {
    if points.shape().len() != 2 {
        return Err(MetricsError::BadInput(format!(
            "fit_gaussian expects [n, d], got {:?}",
            points.shape()
        )));
    }
    let n = points.shape()[0];
    let d = points.shape()[1];
    if n < 2 {
        return Err(MetricsError::TooFewSamples { needed: 2, got: n });
    }
    let data = points.data();
    let mut mean = vec![0.0; d];
    for row in data.chunks_exact(d) {
        for (m, &v) in mean.iter_mut().zip(row.iter()) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut cov = vec![0.0; d * d];
    // Accumulate X_c^T X_c row by row (fixed order).
    let mut centered = vec![0.0; d];
    for row in data.chunks_exact(d) {
        for ((c, &v), &m) in centered.iter_mut().zip(row.iter()).zip(mean.iter()) {
            *c = v - m;
        }
        for i in 0..d {
            let ci = centered[i];
            let cov_row = &mut cov[i * d..(i + 1) * d];
            for (cv, &cj) in cov_row.iter_mut().zip(centered.iter()) {
                *cv += ci * cj;
            }
        }
    }
    let denom = (n - 1) as f64;
    for v in &mut cov {
        *v /= denom;
    }
    // Symmetrize exactly.
    for i in 0..d {
        for j in (i + 1)..d {
            let s = 0.5 * (cov[i * d + j] + cov[j * d + i]);
            cov[i * d + j] = s;
            cov[j * d + i] = s;
        }
    }
    Ok(GaussianSummary { mean, cov, n })
}

/// Squared Fréchet distance between two Gaussians:
/// ‖mu1 - mu2‖² + tr(S1 + S2 - 2 (S1 S2)^{1/2}).
///
/// The matrix square root is taken over the symmetric product
/// S1^{1/2} S2 S1^{1/2}, whose trace-sqrt equals tr((S1 S2)^{1/2}); negative
/// eigenvalues from floating-point noise are clamped to zero, and a result
/// within -1e-8 of zero is clamped to zero.
pub fn frechet_distance_sq(
    g1: &GaussianSummary,
    g2: &GaussianSummary,
) -> Result<f64, MetricsError> {
    let d = g1.dim();
    if d != g2.dim() {
        return Err(MetricsError::DimensionMismatch {
            left: d,
            right: g2.dim(),
        });
    }
    let mean_term: f64 = g1
        .mean
        .iter()
        .zip(g2.mean.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();

    let (vals1, vecs1) = jacobi_eigh(&g1.cov, d)?;
    let s1_half = reassemble(&vals1, &vecs1, d, |x| x.max(0.0).sqrt());

    // M = S1^{1/2} S2 S1^{1/2}
    let tmp = mat_mul(&s1_half, &g2.cov, d);
    let mut m = mat_mul(&tmp, &s1_half, d);
    for i in 0..d {
        for j in (i + 1)..d {
            let s = 0.5 * (m[i * d + j] + m[j * d + i]);
            m[i * d + j] = s;
            m[j * d + i] = s;
        }
    }
    let (vals_m, _) = jacobi_eigh(&m, d)?;
    let tr_sqrt: f64 = vals_m.iter().map(|&l| l.max(0.0).sqrt()).sum();

    let tr1: f64 = (0..d).map(|i| g1.cov[i * d + i]).sum();
    let tr2: f64 = (0..d).map(|i| g2.cov[i * d + i]).sum();
    let fd = mean_term + tr1 + tr2 - 2.0 * tr_sqrt;
    if fd < 0.0 {
        if fd >= -1e-8 {
            return Ok(0.0);
        }
        return Err(MetricsError::NegativeDistance(fd));
    }
    Ok(fd)
}

fn mat_mul(a: &[f64], b: &[f64], d: usize) -> Vec<f64> {
    let mut c = vec![0.0; d * d];
    for i in 0..d {
        for k in 0..d {
            let aik = a[i * d + k];
            for j in 0..d {
                c[i * d + j] += aik * b[k * d + j];
            }
        }
    }
    c
}
