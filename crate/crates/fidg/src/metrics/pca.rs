//! 2-D PCA projection of latent-code sets, with a deterministic sign
//! convention, a scale-based outlier filter, and an overlap statistic.

use crate::numerics::Tensor;

use super::eigen::jacobi_eigh;
use super::gaussian::fit_gaussian;
use super::MetricsError;

/// Threshold multiplier for the outlier filter: a projected query point is
/// dropped when either coordinate magnitude strictly exceeds this multiple
/// of `reference_scale`.
pub const OUTLIER_SCALE_FACTOR: f64 = 10.0;

/// A joint projection of a reference set and a query set onto the top-2
/// principal axes of the *reference* covariance. Both sets are centered by
/// the reference mean, so the reference cloud is centered at the origin.
#[derive(Debug, Clone)]
pub struct Projection2D {
    /// Two principal axes, each of length d. The entry of largest magnitude
    /// in each axis is made positive (first occurrence wins on ties) so the
    /// projection is reproducible across eigensolver sign choices.
    pub basis: [Vec<f64>; 2],
    /// Reference mean used to center both sets.
    pub mean: Vec<f64>,
    pub reference: Vec<[f64; 2]>,
    pub query: Vec<[f64; 2]>,
    /// Largest coordinate magnitude over the projected reference set.
    pub reference_scale: f64,
}

/// Project `reference` and `query` ([n, d] each) onto the top two principal
/// axes of the reference covariance.
///
/// Fails with `RankDeficient` when the reference covariance has fewer than
/// two numerically nonzero eigenvalues (threshold: largest eigenvalue times
/// 1e-12).
pub fn pca_project(reference: &Tensor, query: &Tensor) -> Result<Projection2D, MetricsError> {
    let d = check_point_matrix(reference, "reference")?;
    let dq = check_point_matrix(query, "query")?;
    if d != dq {
        return Err(MetricsError::DimensionMismatch { left: d, right: dq });
    }
    if d < 2 {
        return Err(MetricsError::BadInput(format!(
            "pca_project needs points of dimension >= 2, got {d}"
        )));
    }
    let summary = fit_gaussian(reference)?;
    let (vals, vecs) = jacobi_eigh(&summary.cov, d)?;
    // vals are sorted descending; rank gate against the leading eigenvalue.
    if vals[0] <= 0.0 {
        return Err(MetricsError::RankDeficient { rank: 0 });
    }
    if vals[1] <= vals[0] * 1e-12 {
        return Err(MetricsError::RankDeficient { rank: 1 });
    }
    let mut basis0: Vec<f64> = (0..d).map(|r| vecs[r * d]).collect();
    let mut basis1: Vec<f64> = (0..d).map(|r| vecs[r * d + 1]).collect();
    fix_sign(&mut basis0);
    fix_sign(&mut basis1);

    let project = |points: &Tensor| -> Vec<[f64; 2]> {
        points
            .data()
            .chunks_exact(d)
            .map(|row| {
                let mut x = 0.0;
                let mut y = 0.0;
                for ((&p, &m), (&b0, &b1)) in row
                    .iter()
                    .zip(summary.mean.iter())
                    .zip(basis0.iter().zip(basis1.iter()))
                {
                    let c = p - m;
                    x += c * b0;
                    y += c * b1;
                }
                [x, y]
            })
            .collect()
    };
    let reference_pts = project(reference);
    let query_pts = project(query);
    let reference_scale = reference_pts
        .iter()
        .flat_map(|p| p.iter())
        .fold(0.0_f64, |acc, &v| acc.max(v.abs()));
    Ok(Projection2D {
        basis: [basis0, basis1],
        mean: summary.mean,
        reference: reference_pts,
        query: query_pts,
        reference_scale,
    })
}

/// Split the projected query points into kept and dropped sets: a point is
/// dropped when |x| or |y| strictly exceeds 10x the reference scale. A point
/// at exactly the threshold is kept.
pub fn outlier_filter(proj: &Projection2D) -> (Vec<[f64; 2]>, usize) {
    let limit = OUTLIER_SCALE_FACTOR * proj.reference_scale;
    let mut kept = Vec::with_capacity(proj.query.len());
    let mut dropped = 0usize;
    for &p in &proj.query {
        if p[0].abs() > limit || p[1].abs() > limit {
            dropped += 1;
        } else {
            kept.push(p);
        }
    }
    (kept, dropped)
}

/// Share of query points whose projected radius lies within the 99th
/// percentile (nearest-rank) of the reference radii. Radii are measured
/// from the projection origin, which is the reference mean.
pub fn overlap_fraction(proj: &Projection2D) -> Result<f64, MetricsError> {
    if proj.reference.is_empty() {
        return Err(MetricsError::TooFewSamples { needed: 1, got: 0 });
    }
    if proj.query.is_empty() {
        return Err(MetricsError::TooFewSamples { needed: 1, got: 0 });
    }
    let mut radii: Vec<f64> = proj
        .reference
        .iter()
        .map(|p| (p[0] * p[0] + p[1] * p[1]).sqrt())
        .collect();
    radii.sort_by(|a, b| a.partial_cmp(b).expect("finite radii"));
    // Nearest-rank 99th percentile: smallest radius covering >= 99% of the
    // reference points.
    let rank = ((0.99 * radii.len() as f64).ceil() as usize).max(1);
    let r99 = radii[rank - 1];
    let inside = proj
        .query
        .iter()
        .filter(|p| (p[0] * p[0] + p[1] * p[1]).sqrt() <= r99)
        .count();
    Ok(inside as f64 / proj.query.len() as f64)
}

fn check_point_matrix(t: &Tensor, label: &str) -> Result<usize, MetricsError> {
    if t.shape().len() != 2 {
        return Err(MetricsError::BadInput(format!(
            "{label} must be [n, d], got {:?}",
            t.shape()
        )));
    }
    Ok(t.shape()[1])
}

fn fix_sign(v: &mut [f64]) {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    if v[best] < 0.0 {
        for x in v.iter_mut() {
            *x = -*x;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    /// Grid of points spread along x with a small spread along y, embedded
    /// in 4-D. Covariance is exactly diagonal, so the principal axes are
    /// the coordinate axes.
    fn axis_aligned_cloud() -> Tensor {
        let mut data = Vec::new();
        for &x in &[-3.0, -1.0, 1.0, 3.0] {
            for &y in &[-0.5, 0.5] {
                data.extend_from_slice(&[x, y, 0.0, 0.0]);
            }
        }
        Tensor::from_vec(&[8, 4], data).unwrap()
    }

    #[test]
    fn dominant_axis_maps_to_positive_e1() {
        let cloud = axis_aligned_cloud();
        let proj = pca_project(&cloud, &cloud).unwrap();
        let e1 = [1.0, 0.0, 0.0, 0.0];
        let e2 = [0.0, 1.0, 0.0, 0.0];
        for i in 0..4 {
            assert!((proj.basis[0][i] - e1[i]).abs() < 1e-10, "basis0 {:?}", proj.basis[0]);
            assert!((proj.basis[1][i] - e2[i]).abs() < 1e-10, "basis1 {:?}", proj.basis[1]);
        }
        // Reference scale is the widest coordinate: |x| = 3.
        assert!((proj.reference_scale - 3.0).abs() < 1e-10);
    }

    #[test]
    fn sign_rule_makes_largest_component_positive() {
        // Points along direction (-0.8, 0.6) plus a small orthogonal spread.
        let mut data = Vec::new();
        for &t in &[-2.0, -1.0, 1.0, 2.0] {
            for &u in &[-0.1, 0.1] {
                data.extend_from_slice(&[-0.8 * t + 0.6 * u, 0.6 * t + 0.8 * u]);
            }
        }
        let cloud = Tensor::from_vec(&[8, 2], data).unwrap();
        let proj = pca_project(&cloud, &cloud).unwrap();
        // The raw eigenvector is +-(-0.8, 0.6); the sign rule flips it so the
        // largest-magnitude entry (index 0) is positive.
        assert!(proj.basis[0][0] > 0.0);
        assert!((proj.basis[0][0] - 0.8).abs() < 1e-10);
        assert!((proj.basis[0][1] + 0.6).abs() < 1e-10);
    }

    #[test]
    fn exact_line_is_rank_deficient() {
        let mut data = Vec::new();
        for &t in &[-1.0, 0.0, 1.0, 2.0] {
            data.extend_from_slice(&[2.0 * t, -t, 0.5 * t]);
        }
        let cloud = Tensor::from_vec(&[4, 3], data).unwrap();
        match pca_project(&cloud, &cloud).unwrap_err() {
            MetricsError::RankDeficient { rank: 1 } => {}
            other => panic!("expected RankDeficient rank 1, got {other:?}"),
        }
    }

    #[test]
    fn identical_points_are_rank_zero() {
        let cloud = Tensor::from_vec(&[3, 2], vec![1.0, 2.0, 1.0, 2.0, 1.0, 2.0]).unwrap();
        match pca_project(&cloud, &cloud).unwrap_err() {
            MetricsError::RankDeficient { rank: 0 } => {}
            other => panic!("expected RankDeficient rank 0, got {other:?}"),
        }
    }

    #[test]
    fn outlier_filter_uses_strict_threshold() {
        let proj = Projection2D {
            basis: [vec![1.0, 0.0], vec![0.0, 1.0]],
            mean: vec![0.0, 0.0],
            reference: vec![[1.0, 0.0], [-1.0, 0.5]],
            query: vec![
                [10.0, 0.0],  // exactly 10x scale: kept
                [11.0, 0.0],  // beyond: dropped
                [0.0, -10.0], // exactly at threshold on y: kept
                [2.0, 3.0],
            ],
            reference_scale: 1.0,
        };
        let (kept, dropped) = outlier_filter(&proj);
        assert_eq!(dropped, 1);
        assert_eq!(kept.len(), 3);
        assert!(kept.contains(&[10.0, 0.0]));
        assert!(!kept.contains(&[11.0, 0.0]));
    }

    #[test]
    fn overlap_of_matching_distributions_is_high() {
        let mut rng = Rng::from_seed(41);
        let reference = Tensor::from_vec(&[2000, 4], rng.gaussian_vec(8000)).unwrap();
        let query = Tensor::from_vec(&[2000, 4], rng.gaussian_vec(8000)).unwrap();
        let proj = pca_project(&reference, &query).unwrap();
        let overlap = overlap_fraction(&proj).unwrap();
        assert!(overlap > 0.97, "overlap {overlap}");
        assert!(overlap <= 1.0);
    }

    #[test]
    fn overlap_of_shifted_distribution_is_low() {
        let mut rng = Rng::from_seed(42);
        let reference = Tensor::from_vec(&[1000, 4], rng.gaussian_vec(4000)).unwrap();
        let shifted: Vec<f64> = rng.gaussian_vec(4000).iter().map(|v| v + 8.0).collect();
        let query = Tensor::from_vec(&[1000, 4], shifted).unwrap();
        let proj = pca_project(&reference, &query).unwrap();
        let overlap = overlap_fraction(&proj).unwrap();
        assert!(overlap < 0.05, "overlap {overlap}");
    }

    // ---- independent oracle: power iteration with deflation -------------

    fn power_top_eigvec(cov: &[f64], d: usize, iters: usize) -> (f64, Vec<f64>) {
        let mut v = vec![0.0; d];
        v[0] = 1.0;
        // Fixed nonzero start; anisotropic test data keeps the leading
        // eigenvalue well separated, so convergence is geometric.
        for _ in 0..iters {
            let mut next = vec![0.0; d];
            for i in 0..d {
                let mut acc = 0.0;
                for j in 0..d {
                    acc += cov[i * d + j] * v[j];
                }
                next[i] = acc;
            }
            let norm: f64 = next.iter().map(|x| x * x).sum::<f64>().sqrt();
            for x in &mut next {
                *x /= norm;
            }
            v = next;
        }
        let mut av = vec![0.0; d];
        for i in 0..d {
            for j in 0..d {
                av[i] += cov[i * d + j] * v[j];
            }
        }
        let lambda: f64 = av.iter().zip(v.iter()).map(|(a, b)| a * b).sum();
        (lambda, v)
    }

    #[test]
    fn basis_matches_power_iteration_oracle() {
        let mut rng = Rng::from_seed(77);
        let d = 6;
        let n = 400;
        // Anisotropic scales keep eigenvalues separated so power iteration
        // converges decisively.
        let scales = [5.0, 2.0, 1.0, 0.5, 0.25, 0.1];
        let mut data = Vec::with_capacity(n * d);
        for _ in 0..n {
            for s in scales {
                data.push(rng.next_gaussian() * s);
            }
        }
        let cloud = Tensor::from_vec(&[n, d], data).unwrap();
        let proj = pca_project(&cloud, &cloud).unwrap();

        let summary = fit_gaussian(&cloud).unwrap();
        let (l0, v0) = power_top_eigvec(&summary.cov, d, 20_000);
        // Deflate and repeat for the second axis.
        let mut deflated = summary.cov.clone();
        for i in 0..d {
            for j in 0..d {
                deflated[i * d + j] -= l0 * v0[i] * v0[j];
            }
        }
        let (_, v1) = power_top_eigvec(&deflated, d, 20_000);

        let mut o0 = v0;
        let mut o1 = v1;
        fix_sign(&mut o0);
        fix_sign(&mut o1);
        for i in 0..d {
            assert!(
                (proj.basis[0][i] - o0[i]).abs() < 1e-8,
                "axis0[{i}]: {} vs {}",
                proj.basis[0][i],
                o0[i]
            );
            assert!(
                (proj.basis[1][i] - o1[i]).abs() < 1e-8,
                "axis1[{i}]: {} vs {}",
                proj.basis[1][i],
                o1[i]
            );
        }
    }
}
