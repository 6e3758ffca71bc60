//! The networked half: a tracker simulator that speaks OpenIGTLink, the
//! navigation server that owns the live session, and a headless client for
//! its viewer channel.

pub mod client;
pub mod protocol;
pub mod server;
pub mod session;
pub mod sim;

use nalgebra::{Point3, UnitQuaternion};
use scopenav_core::igtl::TransformBody;
use scopenav_core::TrackedSample;

pub use server::{start_session, ServerError, ServerHandle, SessionConfig};

/// A pose from a received TRANSFORM. None when the rotation is not proper
/// orthonormal or a value is not finite.
pub fn tracked_sample(t: f64, body: &TransformBody) -> Option<TrackedSample> {
    if !body.is_rigid() {
        return None;
    }
    let p = body.translation.cast::<f64>();
    let q = UnitQuaternion::from_matrix(&body.rotation.cast::<f64>());
    Some(TrackedSample {
        t,
        position: Point3::from(p),
        orientation: Some(q.into_inner()),
    })
}
