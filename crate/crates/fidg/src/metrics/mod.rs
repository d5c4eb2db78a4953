//! Evaluation metrics: reconstruction error, Fréchet distance between
//! Gaussian summaries, 2-D PCA projections with outlier filtering, MMD,
//! rank correlation, and the aggregate alignment report.

use std::error::Error;
use std::fmt;

pub mod eigen;
pub mod gaussian;
pub mod mmd;
pub mod pca;
pub mod report;

pub use gaussian::{fit_gaussian, frechet_distance_sq, GaussianSummary};
pub use mmd::{median_heuristic_bandwidth, mmd_sq_unbiased};
pub use pca::{outlier_filter, pca_project, Projection2D};
pub use report::{alignment_report, projection_csv, projection_svg, AlignmentReport, ReportOptions};

use crate::numerics::Tensor;

#[derive(Debug)]
pub enum MetricsError {
    /// Malformed input (wrong tensor rank, asymmetric matrix, ...).
    BadInput(String),
    /// Eigensolver did not reach tolerance within the sweep cap.
    NotConverged { sweeps: usize },
    /// Two summaries or point sets that must share a dimension do not.
    DimensionMismatch { left: usize, right: usize },
    /// An estimator needs more samples than were supplied.
    TooFewSamples { needed: usize, got: usize },
    /// Covariance rank too small for the requested projection.
    RankDeficient { rank: usize },
    /// Points have a different dimension than the projection basis.
    BasisMismatch { basis: usize, points: usize },
    /// A distance came out negative beyond numerical tolerance.
    NegativeDistance(f64),
}

impl fmt::Display for MetricsError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MetricsError::BadInput(why) => write!(f, "bad metrics input: {why}"),
            MetricsError::NotConverged { sweeps } => {
                write!(f, "eigensolver failed to converge within {sweeps} sweeps")
            }
            MetricsError::DimensionMismatch { left, right } => {
                write!(f, "dimension mismatch: {left} vs {right}")
            }
            MetricsError::TooFewSamples { needed, got } => {
                write!(f, "need at least {needed} samples, got {got}")
            }
            MetricsError::RankDeficient { rank } => {
                write!(f, "covariance rank {rank} is too small for a 2-D projection")
            }
            MetricsError::BasisMismatch { basis, points } => {
                write!(f, "projection basis has dim {basis} but points have dim {points}")
            }
            MetricsError::NegativeDistance(v) => {
                write!(f, "distance computation produced {v} < 0 beyond tolerance")
            }
        }
    }
}

impl Error for MetricsError {}

impl From<crate::numerics::NumericsError> for MetricsError {
    fn from(e: crate::numerics::NumericsError) -> Self {
        MetricsError::BadInput(e.to_string())
    }
}

/// Mean squared error across every element of two same-shape tensors.
pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64, MetricsError> {
    if a.shape() != b.shape() {
        return Err(MetricsError::BadInput(format!(
            "mse shapes differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    if a.numel() == 0 {
        return Err(MetricsError::BadInput("mse over empty tensors".to_string()));
    }
    let mut acc = 0.0;
    for (x, y) in a.data().iter().zip(b.data().iter()) {
        let d = x - y;
        acc += d * d;
    }
    Ok(acc / a.numel() as f64)
}

/// Spearman rank correlation between two equal-length slices.
///
/// Ties receive the average of the ranks they straddle (fractional ranks),
/// and the correlation is the Pearson correlation of the rank vectors.
pub fn spearman_rho(a: &[f64], b: &[f64]) -> Result<f64, MetricsError> {
    if a.len() != b.len() {
        return Err(MetricsError::DimensionMismatch { left: a.len(), right: b.len() });
    }
    if a.len() < 2 {
        return Err(MetricsError::TooFewSamples { needed: 2, got: a.len() });
    }
    if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
        return Err(MetricsError::BadInput("spearman over non-finite values".to_string()));
    }
    let ra = fractional_ranks(a);
    let rb = fractional_ranks(b);
    let n = a.len() as f64;
    let mean = (n + 1.0) / 2.0;
    let mut cov = 0.0;
    let mut var_a = 0.0;
    let mut var_b = 0.0;
    for (x, y) in ra.iter().zip(rb.iter()) {
        let dx = x - mean;
        let dy = y - mean;
        cov += dx * dy;
        var_a += dx * dx;
        var_b += dy * dy;
    }
    if var_a == 0.0 || var_b == 0.0 {
        return Err(MetricsError::BadInput(
            "spearman undefined: one input is constant".to_string(),
        ));
    }
    Ok(cov / (var_a.sqrt() * var_b.sqrt()))
}

fn fractional_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&i, &j| xs[i].partial_cmp(&xs[j]).expect("finite values"));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        // Average 1-based rank over the tie block [i, j].
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}
