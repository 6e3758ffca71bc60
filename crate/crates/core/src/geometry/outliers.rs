//! Single-pass Mahalanobis outlier removal over trajectory positions.

use nalgebra::{Matrix3, Point3, Vector3};

use super::{GeometryError, Trajectory};

/// Condition number above which the covariance is regularized.
const MAX_CONDITION: f64 = 1e12;

#[derive(Debug, Clone, PartialEq)]
pub struct OutlierReport {
    pub inliers: Trajectory,
    pub outlier_indices: Vec<usize>,
    pub outlier_fraction: f64,
    pub threshold: f64,
}

/// Mahalanobis distance of every point from the sample mean, using the
/// unbiased sample covariance. A near-singular covariance gets `εI` added with
/// `ε = 1e-9 · trace(Σ) / 3`.
pub fn mahalanobis_distances(points: &[Point3<f64>]) -> Result<Vec<f64>, GeometryError> {
    if points.len() < 4 {
        return Err(GeometryError::TooFewSamples {
            needed: 4,
            got: points.len(),
        });
    }
    let n = points.len() as f64;
    let mean = points.iter().fold(Vector3::zeros(), |acc, p| acc + p.coords) / n;
    let mut cov = Matrix3::zeros();
    for p in points {
        let d = p.coords - mean;
        cov += d * d.transpose();
    }
    cov /= n - 1.0;

    let trace = cov.trace();
    if trace.is_nan() || trace <= 0.0 {
        return Err(GeometryError::ZeroVariance);
    }
    let eig = cov.symmetric_eigen();
    let (lo, hi) = eig
        .eigenvalues
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let mut eigenvalues = eig.eigenvalues;
    if lo <= 0.0 || hi / lo > MAX_CONDITION {
        let eps = 1e-9 * trace / 3.0;
        eigenvalues = eigenvalues.map(|v| v.max(0.0) + eps);
    }
    let basis = eig.eigenvectors;

    Ok(points
        .iter()
        .map(|p| {
            let proj = basis.tr_mul(&(p.coords - mean));
            proj.iter()
                .zip(eigenvalues.iter())
                .map(|(c, l)| c * c / l)
                .sum::<f64>()
                .sqrt()
        })
        .collect())
}

/// Removes samples whose distance exceeds `threshold`, in one global pass.
pub fn mahalanobis_filter(
    trajectory: &Trajectory,
    threshold: f64,
) -> Result<OutlierReport, GeometryError> {
    let positions = trajectory.positions();
    let dist = mahalanobis_distances(&positions)?;
    let outlier_indices: Vec<usize> = dist
        .iter()
        .enumerate()
        .filter(|&(_, &d)| d > threshold)
        .map(|(i, _)| i)
        .collect();
    let inliers = trajectory.select(|i| dist[i] <= threshold);
    Ok(OutlierReport {
        outlier_fraction: outlier_indices.len() as f64 / positions.len() as f64,
        outlier_indices,
        inliers,
        threshold,
    })
}
