//! Core building blocks of the IoHRT teleoperation gateway.
//!
//! * [`protocol`]: length-prefixed JSON envelopes and binary frame datagrams.
//! * [`control`]: motion-scaled teleoperation and shared-control laws, generic over [`Scalar`].
//! * [`registry`]: device liveness and exclusive robot control.
//! * [`store`]: durable telemetry and command logs, ephemeral frame rings.
//! * [`auth`]: accounts, bearer tokens and roles.

pub mod auth;
pub mod control;
pub mod protocol;
pub mod registry;
pub mod scalar;
pub mod store;
pub mod time;

pub use scalar::Scalar;

/// Double-precision pose, the representation used on the wire.
pub type Pose = control::PoseVector<f64>;
pub type Command = control::IncrementalCommand<f64>;
pub type Plan = control::AutonomyPlan<f64>;
pub type Params = control::ControlParams<f64>;
pub type Bounds = control::AxisBounds<f64>;

pub type Posef32 = control::PoseVector<f32>;
pub type Paramsf32 = control::ControlParams<f32>;
