//! Meshes, trajectories and the exploration analytics run over them.

mod analytics;
mod hull;
mod inside;
mod mesh;
mod obj;
mod outliers;
mod trajectory;

pub use analytics::{analyze_points, pct_change, TrajectoryMetrics, DEFAULT_THRESHOLD};
pub use hull::{convex_hull, hull_volume, HULL_EPSILON};
pub use inside::{point_in_mesh, InsideTester};
pub use mesh::Mesh;
pub use obj::{load_obj, parse_obj, write_obj};
pub use outliers::{mahalanobis_distances, mahalanobis_filter, OutlierReport};
pub use trajectory::{
    path_length, polyline_length, read_trajectory, write_sample_row, write_trajectory, Frame,
    TrackedSample, Trajectory, TRAJECTORY_HEADER,
};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("line {line}: malformed record: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: face index {index} out of range for {vertex_count} vertices")]
    IndexOutOfRange {
        line: usize,
        index: i64,
        vertex_count: usize,
    },
    #[error("mesh has no faces")]
    EmptyMesh,
    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("all positions are identical; covariance is zero")]
    ZeroVariance,
    #[error("points are {0}; no 3-D hull exists")]
    Degenerate(&'static str),
    #[error("mesh is open: {boundary_edges} boundary or non-manifold edges")]
    OpenMesh { boundary_edges: usize },
    #[error("hull construction failed numerically: {0}")]
    HullFailure(String),
    #[error("baseline is zero; percent change undefined")]
    ZeroBaseline,
    #[error("invalid trajectory: {0}")]
    InvalidTrajectory(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}
