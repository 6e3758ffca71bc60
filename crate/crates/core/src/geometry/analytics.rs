//! Exploration metrics over one trajectory: outlier removal, then hull volume
//! and path length over the surviving samples.

use nalgebra::Point3;
use serde::{Deserialize, Serialize};

use super::{convex_hull, hull_volume, mahalanobis_distances, polyline_length, GeometryError};

pub const DEFAULT_THRESHOLD: f64 = 3.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryMetrics {
    pub n_samples: usize,
    pub n_inliers: usize,
    /// Absent when the filter could not run (fewer than 4 samples or no spread).
    pub outlier_fraction: Option<f64>,
    pub hull_volume_mm3: Option<f64>,
    pub path_length_mm: Option<f64>,
}

/// Filters with the Mahalanobis threshold, then measures the inliers. Both
/// the live session and the offline analyzer go through here so they agree
/// exactly. Degenerate inputs yield absent values, not errors.
pub fn analyze_points(points: &[Point3<f64>], threshold: f64) -> TrajectoryMetrics {
    let (inliers, outlier_fraction) = match mahalanobis_distances(points) {
        Ok(d) => {
            let kept: Vec<Point3<f64>> = points
                .iter()
                .zip(&d)
                .filter(|(_, &d)| d <= threshold)
                .map(|(p, _)| *p)
                .collect();
            let frac = (points.len() - kept.len()) as f64 / points.len() as f64;
            (kept, Some(frac))
        }
        Err(_) => (points.to_vec(), None),
    };
    let hull_volume_mm3 = convex_hull(&inliers).and_then(|h| hull_volume(&h)).ok();
    let path_length_mm = (inliers.len() >= 2).then(|| polyline_length(&inliers));
    TrajectoryMetrics {
        n_samples: points.len(),
        n_inliers: inliers.len(),
        outlier_fraction,
        hull_volume_mm3,
        path_length_mm,
    }
}

/// `100 · (treatment − baseline) / baseline`
pub fn pct_change(baseline: f64, treatment: f64) -> Result<f64, GeometryError> {
    if baseline == 0.0 {
        return Err(GeometryError::ZeroBaseline);
    }
    Ok(100.0 * (treatment - baseline) / baseline)
}
