//! Simulated physical layer for the gateway.
//!
//! Robots are kinematic setpoint followers, sensors are seeded random walks
//! with injectable excursions, and cameras render deterministic JPEG frames
//! that travel over the datagram path.

pub mod camera;
pub mod config;
pub mod fleet;
pub mod link;
pub mod robot;
pub mod sensor;

pub use config::{FleetConfig, Scenario, SimCameraConfig, SimRobotConfig, SimSensorConfig};
pub use fleet::{run_fleet, FleetHandle, GatewayEndpoints};
pub use link::{DeviceLink, LinkError};
pub use robot::SimRobot;
pub use sensor::SimSensor;
