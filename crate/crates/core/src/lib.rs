//! Core algorithms for tracked scope navigation: the OpenIGTLink codec,
//! fiducial registration, trajectory analytics and CT volume slicing.

pub mod geometry;
pub mod igtl;
pub mod registration;
pub mod volume;

pub use geometry::{Frame, Mesh, TrackedSample, Trajectory, TrajectoryMetrics};
pub use registration::{FiducialPair, RegistrationResult, RigidTransform};
pub use volume::{SliceImage, Volume};

pub use nalgebra::{Matrix3, Point3, Quaternion, Vector3};
