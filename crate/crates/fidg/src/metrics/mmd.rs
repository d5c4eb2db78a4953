//! Maximum mean discrepancy with an RBF kernel: unbiased squared estimator
//! plus the median-heuristic bandwidth rule.

use crate::numerics::Tensor;

use super::MetricsError;

/// Median-heuristic kernel bandwidth: the lower median of the Euclidean
/// distances over all unordered pairs in the *pooled* set X union Y.
/// Falls back to 1.0 when the median distance is zero (all points equal).
pub fn median_heuristic_bandwidth(x: &Tensor, y: &Tensor) -> Result<f64, MetricsError> {
    let (m, d) = point_matrix_dims(x, "x")?;
    let (n, dy) = point_matrix_dims(y, "y")?;
    if d != dy {
        return Err(MetricsError::DimensionMismatch { left: d, right: dy });
    }
    let total = m + n;
    if total < 2 {
        return Err(MetricsError::TooFewSamples { needed: 2, got: total });
    }
    let xd = x.data();
    let yd = y.data();
    let row = |i: usize| -> &[f64] {
        if i < m {
            &xd[i * d..(i + 1) * d]
        } else {
            &yd[(i - m) * d..(i - m + 1) * d]
        }
    };
    let mut dists = Vec::with_capacity(total * (total - 1) / 2);
    for i in 0..total {
        let ri = row(i);
        for j in (i + 1)..total {
            dists.push(sq_dist(ri, row(j)).sqrt());
        }
    }
    dists.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
    // Lower median: for an even count, the smaller of the two middle values.
    let median = dists[(dists.len() - 1) / 2];
    Ok(if median > 0.0 { median } else { 1.0 })
}

/// Unbiased squared MMD between X ([m, d]) and Y ([n, d]) under the RBF
/// kernel k(a, b) = exp(-|a-b|^2 / (2 sigma^2)).
///
/// m and n must each be at least 2 (the unbiased estimator drops the
/// diagonal terms). The estimate can be slightly negative when the two
/// distributions coincide; callers that need nonnegativity should clamp.
pub fn mmd_sq_unbiased(x: &Tensor, y: &Tensor, sigma: f64) -> Result<f64, MetricsError> {
    let (m, d) = point_matrix_dims(x, "x")?;
    let (n, dy) = point_matrix_dims(y, "y")?;
    if d != dy {
        return Err(MetricsError::DimensionMismatch { left: d, right: dy });
    }
    if m < 2 {
        return Err(MetricsError::TooFewSamples { needed: 2, got: m });
    }
    if n < 2 {
        return Err(MetricsError::TooFewSamples { needed: 2, got: n });
    }
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(MetricsError::BadInput(format!("kernel bandwidth {sigma} must be positive")));
    }
    let gamma = 1.0 / (2.0 * sigma * sigma);
    let xd = x.data();
    let yd = y.data();

    let mut kxx = 0.0;
    for i in 0..m {
        let ri = &xd[i * d..(i + 1) * d];
        for j in 0..m {
            if i != j {
                kxx += (-gamma * sq_dist(ri, &xd[j * d..(j + 1) * d])).exp();
            }
        }
    }
    let mut kyy = 0.0;
    for i in 0..n {
        let ri = &yd[i * d..(i + 1) * d];
        for j in 0..n {
            if i != j {
                kyy += (-gamma * sq_dist(ri, &yd[j * d..(j + 1) * d])).exp();
            }
        }
    }
    let mut kxy = 0.0;
    for i in 0..m {
        let ri = &xd[i * d..(i + 1) * d];
        for j in 0..n {
            kxy += (-gamma * sq_dist(ri, &yd[j * d..(j + 1) * d])).exp();
        }
    }
    Ok(kxx / (m * (m - 1)) as f64 + kyy / (n * (n - 1)) as f64
        - 2.0 * kxy / (m * n) as f64)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b.iter()) {
        let diff = x - y;
        acc += diff * diff;
    }
    acc
}

fn point_matrix_dims(t: &Tensor, label: &str) -> Result<(usize, usize), MetricsError> {
    if t.shape().len() != 2 {
        return Err(MetricsError::BadInput(format!(
            "{label} must be [n, d], got {:?}",
            t.shape()
        )));
    }
    Ok((t.shape()[0], t.shape()[1]))
}
