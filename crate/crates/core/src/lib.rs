//! Circle-based camera/LiDAR extrinsic calibration.
//!
//! The crate covers the whole chain from raw geometry to a pose:
//!
//! * [`cga`]: conformal embedding and the closed-form 3D circle fit,
//! * [`robust`]: RANSAC around that fit plus the plane-then-circle baseline,
//! * [`ellipse`]: conic fitting and ellipse utilities,
//! * [`center`]: perspective-correct projected centers from an image ellipse,
//! * [`pnp`]: pose from 3D–2D correspondences, including ambiguous ones,
//! * [`synth`]: synthetic scenarios and the Monte Carlo harness.

// `!(x > 0.0)` deliberately treats NaN as failing the check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod center;
pub mod cga;
pub mod ellipse;
pub mod error;
pub mod geom;
pub mod pnp;
pub mod robust;
pub mod synth;

pub use error::{Error, Result};
pub use geom::{
    backproject_ray, project, rotation_error, translation_error, Circle3D, Intrinsics, Pixel,
    RigidTransform, Vec3,
};
