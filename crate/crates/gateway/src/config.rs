//! Gateway configuration file (JSON). Every field has a default.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use iohrt_core::auth::{HashCost, Role, TOKEN_TTL_MS};
use iohrt_core::control::ControlParams;
use iohrt_core::protocol::DeviceId;
use iohrt_core::store::DEFAULT_FRAME_CAPACITY;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("cannot parse config {path}: {source}")]
    Parse { path: PathBuf, source: serde_json::Error },
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Out-of-range rule that raises an inspection mission.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnomalyRule {
    pub id: String,
    /// Exact device id or `"*"` for any device.
    #[serde(default = "wildcard")]
    pub device_id: String,
    pub channel: String,
    pub min: f64,
    pub max: f64,
    pub target_robot: DeviceId,
    pub goal: Vec<f64>,
}

fn wildcard() -> String {
    "*".into()
}

impl AnomalyRule {
    pub fn matches(&self, device: &DeviceId, channel: &str) -> bool {
        (self.device_id == "*" || self.device_id == device.as_str()) && self.channel == channel
    }

    /// Inclusive range: values equal to `min` or `max` are normal.
    pub fn in_range(&self, value: f64) -> bool {
        value >= self.min && value <= self.max
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.id.is_empty() || self.channel.is_empty() {
            return Err(ConfigError::Invalid("rule needs an id and a channel".into()));
        }
        if !(self.min.is_finite() && self.max.is_finite() && self.min < self.max) {
            return Err(ConfigError::Invalid(format!("rule {}: need finite min < max", self.id)));
        }
        if self.goal.is_empty() || self.goal.iter().any(|g| !g.is_finite()) {
            return Err(ConfigError::Invalid(format!("rule {}: goal must be a finite pose", self.id)));
        }
        Ok(())
    }
}

/// Temperature 10..35 C and humidity 20..80 %, both sending `robot-7dof` to
/// an inspection pose.
pub fn default_rules() -> Vec<AnomalyRule> {
    let robot = DeviceId::new("robot-7dof").expect("static id");
    let goal = vec![0.4, 0.0, 0.3, 0.0, 0.0, 0.0, 0.0];
    vec![
        AnomalyRule {
            id: "temperature-range".into(),
            device_id: wildcard(),
            channel: "temperature".into(),
            min: 10.0,
            max: 35.0,
            target_robot: robot.clone(),
            goal: goal.clone(),
        },
        AnomalyRule {
            id: "humidity-range".into(),
            device_id: wildcard(),
            channel: "humidity".into(),
            min: 20.0,
            max: 80.0,
            target_robot: robot,
            goal,
        },
    ]
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserSeed {
    pub username: String,
    pub password: String,
    pub role: Role,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GatewayConfig {
    pub device_addr: SocketAddr,
    pub frame_addr: SocketAddr,
    pub http_addr: SocketAddr,
    /// Store directory; in-memory when unset.
    pub data_dir: Option<PathBuf>,
    pub sync_writes: bool,
    pub rules: Vec<AnomalyRule>,
    /// Control parameters by robot id; these win over what the robot declares.
    pub robots: BTreeMap<String, ControlParams<f64>>,
    pub heartbeat_interval_ms: u64,
    pub staleness_timeout_ms: u64,
    pub hello_timeout_ms: u64,
    pub frame_ring_capacity: usize,
    pub frame_assembly_timeout_ms: u64,
    pub fanout_backlog: usize,
    pub max_stream_hz: f64,
    pub token_ttl_ms: u64,
    pub hash_cost: HashCost,
    /// Accounts created at startup when the user database is empty.
    pub bootstrap_users: Vec<UserSeed>,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        Self {
            device_addr: ([0, 0, 0, 0], 7400).into(),
            frame_addr: ([0, 0, 0, 0], 7401).into(),
            http_addr: ([0, 0, 0, 0], 8080).into(),
            data_dir: None,
            sync_writes: false,
            rules: default_rules(),
            robots: BTreeMap::new(),
            heartbeat_interval_ms: 1_000,
            staleness_timeout_ms: 5_000,
            hello_timeout_ms: 5_000,
            frame_ring_capacity: DEFAULT_FRAME_CAPACITY,
            frame_assembly_timeout_ms: 500,
            fanout_backlog: 256,
            max_stream_hz: 30.0,
            token_ttl_ms: TOKEN_TTL_MS,
            hash_cost: HashCost::default(),
            bootstrap_users: Vec::new(),
        }
    }
}

impl GatewayConfig {
    /// All three listeners on 127.0.0.1 with OS-assigned ports.
    pub fn loopback() -> Self {
        Self {
            device_addr: ([127, 0, 0, 1], 0).into(),
            frame_addr: ([127, 0, 0, 1], 0).into(),
            http_addr: ([127, 0, 0, 1], 0).into(),
            ..Self::default()
        }
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let raw = std::fs::read(path).map_err(|source| ConfigError::Read { path: path.into(), source })?;
        let config: Self =
            serde_json::from_slice(&raw).map_err(|source| ConfigError::Parse { path: path.into(), source })?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        for rule in &self.rules {
            rule.validate()?;
        }
        let mut ids: Vec<&str> = self.rules.iter().map(|r| r.id.as_str()).collect();
        ids.sort();
        ids.dedup();
        if ids.len() != self.rules.len() {
            return Err(ConfigError::Invalid("rule ids must be unique".into()));
        }
        for (id, params) in &self.robots {
            DeviceId::new(id.as_str()).map_err(|e| ConfigError::Invalid(e.to_string()))?;
            params.validate().map_err(|e| ConfigError::Invalid(format!("robot {id}: {e}")))?;
        }
        if self.heartbeat_interval_ms == 0 || self.staleness_timeout_ms == 0 || self.hello_timeout_ms == 0 {
            return Err(ConfigError::Invalid("timeouts must be > 0".into()));
        }
        if self.frame_ring_capacity == 0 || self.fanout_backlog == 0 {
            return Err(ConfigError::Invalid("capacities must be > 0".into()));
        }
        if !(self.max_stream_hz.is_finite() && self.max_stream_hz > 0.0) {
            return Err(ConfigError::Invalid("max_stream_hz must be > 0".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        GatewayConfig::default().validate().unwrap();
        let json = serde_json::to_string(&GatewayConfig::default()).unwrap();
        let back: GatewayConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, GatewayConfig::default());
    }

    #[test]
    fn partial_file_uses_defaults() {
        let cfg: GatewayConfig = serde_json::from_str(r#"{"http_addr":"127.0.0.1:9999"}"#).unwrap();
        assert_eq!(cfg.http_addr.port(), 9999);
        assert_eq!(cfg.staleness_timeout_ms, 5_000);
        assert!(serde_json::from_str::<GatewayConfig>(r#"{"htp_addr":"x"}"#).is_err());
    }

    #[test]
    fn rule_bounds() {
        let mut rule = default_rules().remove(0);
        assert!(rule.in_range(22.0));
        assert!(rule.in_range(35.0));
        assert!(rule.in_range(10.0));
        assert!(!rule.in_range(80.0));
        assert!(!rule.in_range(9.99));
        rule.min = 40.0;
        assert!(rule.validate().is_err());
    }

    #[test]
    fn rule_matching() {
        let rule = default_rules().remove(0);
        let dev = DeviceId::new("temp-kitchen").unwrap();
        assert!(rule.matches(&dev, "temperature"));
        assert!(!rule.matches(&dev, "humidity"));
        let pinned = AnomalyRule { device_id: "other".into(), ..rule };
        assert!(!pinned.matches(&dev, "temperature"));
    }
}
