//! Fleet description, loadable from JSON.

use std::path::Path;

use iohrt_core::control::{AxisBounds, ControlParams};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimConfigError {
    #[error("cannot read fleet file: {0}")]
    Read(#[from] std::io::Error),
    #[error("cannot parse fleet file: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid fleet: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    /// Panda-style arm in end-effector space: x, y, z, gripper, roll, pitch, yaw.
    PickPlace7dof,
    /// Micro-positioning stage: x, y, z, rotation, with fine motion scaling.
    Microsurgery4dof,
    #[default]
    Generic,
}

/// Index of the gripper axis in the pick-and-place scenario.
pub const GRIPPER_AXIS: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimRobotConfig {
    pub id: String,
    pub scenario: Scenario,
    /// Only consulted for the generic scenario.
    pub dof: usize,
    pub initial_pose: Option<Vec<f64>>,
    pub workspace: Option<Vec<AxisBounds<f64>>>,
    pub v_max: Option<Vec<f64>>,
    pub gamma: Option<f64>,
    pub m: Option<f64>,
    pub k_p: Option<f64>,
    /// Integration rate of the autonomous planner.
    pub tick_hz: f64,
    pub publish_hz: f64,
    /// ‖pose − goal‖∞ at which a mission counts as complete.
    pub goal_tolerance: f64,
}

impl Default for SimRobotConfig {
    fn default() -> Self {
        Self {
            id: "robot".into(),
            scenario: Scenario::Generic,
            dof: 3,
            initial_pose: None,
            workspace: None,
            v_max: None,
            gamma: None,
            m: None,
            k_p: None,
            tick_hz: 50.0,
            publish_hz: 10.0,
            goal_tolerance: 1e-3,
        }
    }
}

impl SimRobotConfig {
    pub fn scenario(id: &str, scenario: Scenario) -> Self {
        Self { id: id.into(), scenario, ..Self::default() }
    }

    pub fn dof(&self) -> usize {
        match self.scenario {
            Scenario::PickPlace7dof => 7,
            Scenario::Microsurgery4dof => 4,
            Scenario::Generic => self.dof,
        }
    }

    /// Control parameters: scenario defaults overlaid with explicit fields.
    pub fn params(&self) -> ControlParams<f64> {
        let pi = std::f64::consts::PI;
        let mut p = ControlParams::with_defaults(self.dof());
        match self.scenario {
            Scenario::PickPlace7dof => {
                p.v_max = vec![0.5, 0.5, 0.5, 1.0, 1.0, 1.0, 1.0];
                p.workspace = vec![
                    AxisBounds::new(-0.855, 0.855),
                    AxisBounds::new(-0.855, 0.855),
                    AxisBounds::new(0.0, 1.19),
                    AxisBounds::new(0.0, 1.0),
                    AxisBounds::new(-pi, pi),
                    AxisBounds::new(-pi, pi),
                    AxisBounds::new(-pi, pi),
                ];
                p.planner_gain = 2.0;
            }
            Scenario::Microsurgery4dof => {
                p.gamma = 0.2;
                p.v_max = vec![0.002, 0.002, 0.002, 0.1];
                p.workspace = vec![
                    AxisBounds::new(-0.01, 0.01),
                    AxisBounds::new(-0.01, 0.01),
                    AxisBounds::new(-0.005, 0.005),
                    AxisBounds::new(-pi / 4.0, pi / 4.0),
                ];
                p.planner_gain = 2.0;
            }
            Scenario::Generic => {}
        }
        if let Some(v) = &self.v_max {
            p.v_max = v.clone();
        }
        if let Some(w) = &self.workspace {
            p.workspace = w.clone();
        }
        if let Some(g) = self.gamma {
            p.gamma = g;
        }
        if let Some(m) = self.m {
            p.m = m;
        }
        if let Some(k) = self.k_p {
            p.planner_gain = k;
        }
        p
    }

    pub fn initial_pose(&self) -> Vec<f64> {
        self.initial_pose.clone().unwrap_or_else(|| match self.scenario {
            Scenario::PickPlace7dof => vec![0.3, 0.0, 0.5, 1.0, 0.0, 0.0, 0.0],
            _ => vec![0.0; self.dof()],
        })
    }

    pub fn validate(&self) -> Result<(), SimConfigError> {
        let bad = |s: String| Err(SimConfigError::Invalid(format!("robot {}: {s}", self.id)));
        if self.dof() == 0 {
            return bad("dof must be >= 1".into());
        }
        self.params().validate().map_err(|e| SimConfigError::Invalid(format!("robot {}: {e}", self.id)))?;
        if self.initial_pose().len() != self.dof() {
            return bad("initial_pose length must equal dof".into());
        }
        if !(self.tick_hz > 0.0 && self.publish_hz > 0.0) {
            return bad("rates must be > 0".into());
        }
        if self.params().planner_gain / self.tick_hz > 1.0 {
            return bad("k_p / tick_hz must be <= 1 for monotone convergence".into());
        }
        if !(self.goal_tolerance > 0.0) {
            return bad("goal_tolerance must be > 0".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnomalyInjection {
    /// Seconds after the sensor starts publishing.
    pub start_s: f64,
    pub magnitude: f64,
    /// Length of the excursion; forever when unset.
    #[serde(default)]
    pub duration_s: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimSensorConfig {
    pub id: String,
    pub channel: String,
    pub unit: String,
    pub base: f64,
    /// Standard deviation of each random-walk step.
    pub sigma: f64,
    pub publish_hz: f64,
    pub anomaly: Option<AnomalyInjection>,
}

impl Default for SimSensorConfig {
    fn default() -> Self {
        Self {
            id: "sensor".into(),
            channel: "temperature".into(),
            unit: "C".into(),
            base: 22.0,
            sigma: 0.05,
            publish_hz: 2.0,
            anomaly: None,
        }
    }
}

impl SimSensorConfig {
    pub fn validate(&self) -> Result<(), SimConfigError> {
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(SimConfigError::Invalid(format!("sensor {}: sigma must be >= 0", self.id)));
        }
        if !(self.publish_hz > 0.0) || self.channel.is_empty() || !self.base.is_finite() {
            return Err(SimConfigError::Invalid(format!("sensor {}: need a channel, finite base and rate > 0", self.id)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimCameraConfig {
    pub id: String,
    pub width: u32,
    pub height: u32,
    pub fps: f64,
    pub pattern_seed: u64,
    /// Largest chunk payload per datagram.
    pub max_chunk: usize,
    /// Probability of dropping each datagram before it is sent.
    pub drop_rate: f64,
    pub quality: u8,
}

impl Default for SimCameraConfig {
    fn default() -> Self {
        Self {
            id: "camera".into(),
            width: 320,
            height: 240,
            fps: 30.0,
            pattern_seed: 0,
            max_chunk: 60_000,
            drop_rate: 0.0,
            quality: 80,
        }
    }
}

impl SimCameraConfig {
    pub fn validate(&self) -> Result<(), SimConfigError> {
        let bad = |s: &str| Err(SimConfigError::Invalid(format!("camera {}: {s}", self.id)));
        if !(self.fps > 0.0) {
            return bad("fps must be > 0");
        }
        if self.width < 16 || self.height < 16 || self.width > 4096 || self.height > 4096 {
            return bad("width and height must lie in [16, 4096]");
        }
        if !(1..=60_000).contains(&self.max_chunk) {
            return bad("max_chunk must lie in [1, 60000]");
        }
        if !(0.0..=1.0).contains(&self.drop_rate) {
            return bad("drop_rate must lie in [0, 1]");
        }
        if !(1..=100).contains(&self.quality) {
            return bad("quality must lie in [1, 100]");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimActuatorConfig {
    pub id: String,
}

impl Default for SimActuatorConfig {
    fn default() -> Self {
        Self { id: "actuator".into() }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FleetConfig {
    /// Root seed; each device derives its own stream from it and its id.
    pub seed: u64,
    pub robots: Vec<SimRobotConfig>,
    pub sensors: Vec<SimSensorConfig>,
    pub cameras: Vec<SimCameraConfig>,
    pub actuators: Vec<SimActuatorConfig>,
}

impl FleetConfig {
    /// Arm, micro stage, temperature and humidity sensors, one camera and a
    /// light switch; the ids match the gateway's default anomaly rules.
    pub fn demo() -> Self {
        Self {
            seed: 7,
            robots: vec![
                SimRobotConfig::scenario("robot-7dof", Scenario::PickPlace7dof),
                SimRobotConfig::scenario("stage-4dof", Scenario::Microsurgery4dof),
            ],
            sensors: vec![
                SimSensorConfig { id: "temp-kitchen".into(), ..SimSensorConfig::default() },
                SimSensorConfig {
                    id: "hum-kitchen".into(),
                    channel: "humidity".into(),
                    unit: "%".into(),
                    base: 45.0,
                    sigma: 0.2,
                    ..SimSensorConfig::default()
                },
            ],
            cameras: vec![SimCameraConfig { id: "cam-1".into(), ..SimCameraConfig::default() }],
            actuators: vec![SimActuatorConfig { id: "light-kitchen".into() }],
        }
    }

    pub fn from_file(path: &Path) -> Result<Self, SimConfigError> {
        let fleet: Self = serde_json::from_slice(&std::fs::read(path)?)?;
        fleet.validate()?;
        Ok(fleet)
    }

    pub fn device_count(&self) -> usize {
        self.robots.len() + self.sensors.len() + self.cameras.len() + self.actuators.len()
    }

    pub fn validate(&self) -> Result<(), SimConfigError> {
        let mut ids = Vec::new();
        for r in &self.robots {
            r.validate()?;
            ids.push(r.id.as_str());
        }
        for s in &self.sensors {
            s.validate()?;
            ids.push(s.id.as_str());
        }
        for c in &self.cameras {
            c.validate()?;
            ids.push(c.id.as_str());
        }
        ids.extend(self.actuators.iter().map(|a| a.id.as_str()));
        for id in &ids {
            iohrt_core::protocol::DeviceId::new(*id).map_err(|e| SimConfigError::Invalid(e.to_string()))?;
        }
        let total = ids.len();
        ids.sort();
        ids.dedup();
        if ids.len() != total {
            return Err(SimConfigError::Invalid("device ids must be unique".into()));
        }
        Ok(())
    }
}
