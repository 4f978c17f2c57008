//! Connected-device table with liveness and exclusive robot control.
//!
//! Every operation takes the single registry lock, so any concurrent history
//! of calls is equivalent to the order in which they acquired it.

use std::collections::HashMap;
use std::fmt;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use uuid::Uuid;

use crate::control::ControlParams;
use crate::protocol::{DeviceId, DeviceKind};

/// Identifier of an authenticated client session (one per login).
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SessionId(String);

impl SessionId {
    pub fn new(value: impl Into<String>) -> Self {
        Self(value.into())
    }

    pub fn random() -> Self {
        Self(Uuid::new_v4().simple().to_string())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for SessionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LinkState {
    Connected,
    Disconnected,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceRecord {
    pub id: DeviceId,
    pub uuid: Uuid,
    pub kind: DeviceKind,
    pub dof: u32,
    pub state: LinkState,
    pub last_seen_ms: u64,
    pub controller: Option<SessionId>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub config: Option<ControlParams<f64>>,
    /// Link generation; bumped on every successful registration.
    pub epoch: u64,
}

impl DeviceRecord {
    pub fn is_connected(&self) -> bool {
        self.state == LinkState::Connected
    }

    pub fn is_robot(&self) -> bool {
        self.kind == DeviceKind::Robot
    }
}

/// What a device declares in its hello.
#[derive(Debug, Clone, PartialEq)]
pub struct Registration {
    pub id: DeviceId,
    pub kind: DeviceKind,
    pub dof: u32,
    pub params: Option<ControlParams<f64>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RegistryError {
    #[error("device {0} is already connected")]
    DuplicateLive(DeviceId),
    #[error("unknown device {0}")]
    Unknown(DeviceId),
    #[error("device {0} is not a robot")]
    NotARobot(DeviceId),
    #[error("device {0} is disconnected")]
    Disconnected(DeviceId),
    #[error("robot {device} is held by another session")]
    Busy { device: DeviceId, holder: SessionId },
    #[error("session does not hold robot {0}")]
    NotHolder(DeviceId),
    #[error("invalid registration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Grant {
    Granted,
    /// The caller already held the robot.
    AlreadyHeld,
}

#[derive(Default)]
struct Inner {
    devices: HashMap<DeviceId, DeviceRecord>,
    by_uuid: HashMap<Uuid, DeviceId>,
}

#[derive(Default)]
pub struct Registry {
    inner: Mutex<Inner>,
}

impl Registry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Creates or reactivates a record. A returning device keeps its uuid.
    pub fn register(&self, reg: Registration, now_ms: u64) -> Result<DeviceRecord, RegistryError> {
        if reg.kind == DeviceKind::Robot && reg.dof == 0 {
            return Err(RegistryError::Invalid("robot with zero dof".into()));
        }
        if let Some(params) = &reg.params {
            if params.dof() != reg.dof as usize {
                return Err(RegistryError::Invalid("params dof differs from declared dof".into()));
            }
            params.validate().map_err(|e| RegistryError::Invalid(e.to_string()))?;
        }
        let mut inner = self.inner.lock();
        let previous = inner.devices.get(&reg.id).cloned();
        if previous.as_ref().is_some_and(DeviceRecord::is_connected) {
            return Err(RegistryError::DuplicateLive(reg.id));
        }
        let uuid = match &previous {
            Some(prev) => prev.uuid,
            None => loop {
                let candidate = Uuid::new_v4();
                if !inner.by_uuid.contains_key(&candidate) {
                    break candidate;
                }
            },
        };
        let config = if reg.kind == DeviceKind::Robot {
            reg.params
                .or_else(|| {
                    previous
                        .as_ref()
                        .and_then(|p| p.config.clone())
                        .filter(|c| c.dof() == reg.dof as usize)
                })
                .or_else(|| Some(ControlParams::with_defaults(reg.dof as usize)))
        } else {
            None
        };
        let record = DeviceRecord {
            id: reg.id.clone(),
            uuid,
            kind: reg.kind,
            dof: match reg.kind {
                DeviceKind::Sensor | DeviceKind::Camera => 0,
                DeviceKind::Robot | DeviceKind::Actuator => reg.dof,
            },
            state: LinkState::Connected,
            last_seen_ms: now_ms,
            controller: None,
            config,
            epoch: previous.map_or(1, |p| p.epoch + 1),
        };
        inner.by_uuid.insert(uuid, reg.id.clone());
        inner.devices.insert(reg.id, record.clone());
        Ok(record)
    }

    pub fn lookup(&self, id: &DeviceId) -> Option<DeviceRecord> {
        self.inner.lock().devices.get(id).cloned()
    }

    pub fn lookup_uuid(&self, uuid: &Uuid) -> Option<DeviceRecord> {
        let inner = self.inner.lock();
        inner.by_uuid.get(uuid).and_then(|id| inner.devices.get(id)).cloned()
    }

    /// All records, sorted by id.
    pub fn snapshot(&self) -> Vec<DeviceRecord> {
        let mut all: Vec<_> = self.inner.lock().devices.values().cloned().collect();
        all.sort_by(|a, b| a.id.cmp(&b.id));
        all
    }

    /// Refreshes liveness for the link generation `epoch`. Returns false for stale links.
    pub fn touch(&self, id: &DeviceId, epoch: u64, now_ms: u64) -> bool {
        let mut inner = self.inner.lock();
        match inner.devices.get_mut(id) {
            Some(rec) if rec.epoch == epoch && rec.is_connected() => {
                rec.last_seen_ms = rec.last_seen_ms.max(now_ms);
                true
            }
            _ => false,
        }
    }

    /// Marks link generation `epoch` disconnected and drops its controller.
    /// Returns the updated record, or `None` if that generation is no longer current.
    pub fn disconnect(&self, id: &DeviceId, epoch: u64) -> Option<DeviceRecord> {
        let mut inner = self.inner.lock();
        let rec = inner.devices.get_mut(id)?;
        if rec.epoch != epoch || !rec.is_connected() {
            return None;
        }
        rec.state = LinkState::Disconnected;
        rec.controller = None;
        Some(rec.clone())
    }

    pub fn acquire_control(&self, session: &SessionId, id: &DeviceId) -> Result<Grant, RegistryError> {
        let mut inner = self.inner.lock();
        let rec = inner.devices.get_mut(id).ok_or_else(|| RegistryError::Unknown(id.clone()))?;
        if !rec.is_robot() {
            return Err(RegistryError::NotARobot(id.clone()));
        }
        if !rec.is_connected() {
            return Err(RegistryError::Disconnected(id.clone()));
        }
        match &rec.controller {
            Some(holder) if holder == session => Ok(Grant::AlreadyHeld),
            Some(holder) => Err(RegistryError::Busy { device: id.clone(), holder: holder.clone() }),
            None => {
                rec.controller = Some(session.clone());
                Ok(Grant::Granted)
            }
        }
    }

    pub fn release_control(&self, session: &SessionId, id: &DeviceId) -> Result<(), RegistryError> {
        let mut inner = self.inner.lock();
        let rec = inner.devices.get_mut(id).ok_or_else(|| RegistryError::Unknown(id.clone()))?;
        if rec.controller.as_ref() != Some(session) {
            return Err(RegistryError::NotHolder(id.clone()));
        }
        rec.controller = None;
        Ok(())
    }

    /// Clears the controller regardless of holder; returns the previous holder.
    pub fn force_release(&self, id: &DeviceId) -> Result<Option<SessionId>, RegistryError> {
        let mut inner = self.inner.lock();
        let rec = inner.devices.get_mut(id).ok_or_else(|| RegistryError::Unknown(id.clone()))?;
        Ok(rec.controller.take())
    }

    /// Releases everything held by `session`, e.g. on logout.
    pub fn release_session(&self, session: &SessionId) -> Vec<DeviceId> {
        let mut inner = self.inner.lock();
        let mut released: Vec<DeviceId> = inner
            .devices
            .values_mut()
            .filter(|rec| rec.controller.as_ref() == Some(session))
            .map(|rec| {
                rec.controller = None;
                rec.id.clone()
            })
            .collect();
        released.sort();
        released
    }

    pub fn is_holder(&self, session: &SessionId, id: &DeviceId) -> bool {
        self.inner
            .lock()
            .devices
            .get(id)
            .is_some_and(|rec| rec.controller.as_ref() == Some(session))
    }

    pub fn set_config(&self, id: &DeviceId, params: ControlParams<f64>) -> Result<DeviceRecord, RegistryError> {
        params.validate().map_err(|e| RegistryError::Invalid(e.to_string()))?;
        let mut inner = self.inner.lock();
        let rec = inner.devices.get_mut(id).ok_or_else(|| RegistryError::Unknown(id.clone()))?;
        if !rec.is_robot() {
            return Err(RegistryError::NotARobot(id.clone()));
        }
        if params.dof() != rec.dof as usize {
            return Err(RegistryError::Invalid(format!(
                "config has {} axes, robot has {}",
                params.dof(),
                rec.dof
            )));
        }
        rec.config = Some(params);
        Ok(rec.clone())
    }

    /// Disconnects every device not heard from for more than `timeout_ms`.
    pub fn sweep_stale(&self, now_ms: u64, timeout_ms: u64) -> Vec<DeviceRecord> {
        let mut inner = self.inner.lock();
        let mut expired: Vec<DeviceRecord> = inner
            .devices
            .values_mut()
            .filter(|rec| rec.is_connected() && now_ms.saturating_sub(rec.last_seen_ms) > timeout_ms)
            .map(|rec| {
                rec.state = LinkState::Disconnected;
                rec.controller = None;
                rec.clone()
            })
            .collect();
        expired.sort_by(|a, b| a.id.cmp(&b.id));
        expired
    }
}
