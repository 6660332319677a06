//! One-shot skill generalization for a hybrid rigid/soft robot arm.
//!
//! A demonstrated skill is recorded as time-indexed pose and servo labels.
//! Given a set of registered keypoints at demonstration time (source) and at
//! execution time (target), the library fits a space-deformation map between
//! them and transports the demonstration: positions through the map itself,
//! orientations through the polar factor of its Jacobian. For soft
//! end-effectors the keypoints are first projected onto the demonstrated
//! trajectory and the targets shifted by the same offset, so the deformation
//! anchors to the recorded motion instead of an ambiguous tool point. The
//! transported skill is replayed by a reactive attractor policy driving a
//! kinematic follower, with a constant-curvature render model of the tapered
//! soft arm for trace export.
//!
//! Modules follow the pipeline order:
//!
//! * [`geometry`] — rotations, poses, polar decomposition, finite differences
//! * [`demonstration`] — label data model, JSON I/O, synthetic demonstrations
//! * [`transport`] — deformation map fitting and trajectory transport
//! * [`projection`] — keypoint projection onto the demonstrated trajectory
//! * [`policy`] — attractor selection and servo step quantization
//! * [`simulation`] — pose follower, soft-arm shape model, rollouts
//! * [`scenarios`] — built-in task scenarios, sweeps and CSV reports
//!
//! With the default `parallel` feature, per-sample transport, per-keypoint
//! projection and scenario sweeps run on rayon; the sequential fallback
//! produces bit-identical results.

pub mod demonstration;
pub mod geometry;
mod parallel;
pub mod policy;
pub mod projection;
pub mod scenarios;
pub mod simulation;
pub mod transport;

pub use demonstration::{Demonstration, TransportedDemonstration};
pub use geometry::{polar_rotation, Pose, Rotation};
pub use projection::ProjectionResult;
pub use transport::{DeformationMap, KeypointSet};
