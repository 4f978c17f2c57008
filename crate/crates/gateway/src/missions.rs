//! Anomaly monitor state: inspection missions and the alerts that announce them.

use std::collections::BTreeMap;

use iohrt_core::protocol::DeviceId;
use iohrt_core::store::ReadingRecord;
use parking_lot::Mutex;
use serde::Serialize;
use thiserror::Error;

use crate::config::AnomalyRule;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum MissionStatus {
    Pending,
    Dispatched,
    Acknowledged,
    Done,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum MissionKind {
    Inspection,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Mission {
    pub id: String,
    pub kind: MissionKind,
    pub rule_id: String,
    pub target_robot: DeviceId,
    pub goal: Vec<f64>,
    pub cause: ReadingRecord,
    pub status: MissionStatus,
    /// Command sequence number the mission was dispatched under.
    pub cmd_seq: Option<u64>,
    pub created_ms: u64,
    pub updated_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Alert {
    pub id: String,
    pub rule_id: String,
    pub mission_id: String,
    pub reading: ReadingRecord,
    pub created_ms: u64,
    pub delivered: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MissionError {
    #[error("unknown mission {0}")]
    Unknown(String),
    #[error("mission {id} cannot move from {from:?} to {to:?}")]
    Transition { id: String, from: MissionStatus, to: MissionStatus },
}

#[derive(Default)]
struct Inner {
    missions: BTreeMap<u64, Mission>,
    alerts: Vec<Alert>,
    next: u64,
}

#[derive(Default)]
pub struct MissionBoard {
    inner: Mutex<Inner>,
}

fn mission_key(id: &str) -> Option<u64> {
    id.strip_prefix("m-")?.parse().ok()
}

impl MissionBoard {
    pub fn new() -> Self {
        Self::default()
    }

    /// Checks `reading` against `rules`. Every out-of-range match whose rule
    /// has no unfinished mission yields a new pending mission and its alert.
    pub fn evaluate(&self, rules: &[AnomalyRule], reading: &ReadingRecord, now_ms: u64) -> Vec<(Mission, Alert)> {
        let mut inner = self.inner.lock();
        let mut raised = Vec::new();
        for rule in rules {
            if !rule.matches(&reading.device_id, &reading.channel) || rule.in_range(reading.value) {
                continue;
            }
            let busy = inner
                .missions
                .values()
                .any(|m| m.rule_id == rule.id && m.status != MissionStatus::Done);
            if busy {
                continue;
            }
            inner.next += 1;
            let n = inner.next;
            let mission = Mission {
                id: format!("m-{n}"),
                kind: MissionKind::Inspection,
                rule_id: rule.id.clone(),
                target_robot: rule.target_robot.clone(),
                goal: rule.goal.clone(),
                cause: reading.clone(),
                status: MissionStatus::Pending,
                cmd_seq: None,
                created_ms: now_ms,
                updated_ms: now_ms,
            };
            let alert = Alert {
                id: format!("a-{n}"),
                rule_id: rule.id.clone(),
                mission_id: mission.id.clone(),
                reading: reading.clone(),
                created_ms: now_ms,
                delivered: false,
            };
            inner.missions.insert(n, mission.clone());
            inner.alerts.push(alert.clone());
            raised.push((mission, alert));
        }
        raised
    }

    fn advance(&self, id: &str, to: MissionStatus, now_ms: u64, cmd_seq: Option<u64>) -> Result<Mission, MissionError> {
        let mut inner = self.inner.lock();
        let m = mission_key(id)
            .and_then(|k| inner.missions.get_mut(&k))
            .ok_or_else(|| MissionError::Unknown(id.to_owned()))?;
        if to <= m.status {
            return Err(MissionError::Transition { id: id.to_owned(), from: m.status, to });
        }
        m.status = to;
        m.updated_ms = now_ms;
        if cmd_seq.is_some() {
            m.cmd_seq = cmd_seq;
        }
        Ok(m.clone())
    }

    pub fn mark_dispatched(&self, id: &str, cmd_seq: u64, now_ms: u64) -> Result<Mission, MissionError> {
        self.advance(id, MissionStatus::Dispatched, now_ms, Some(cmd_seq))
    }

    /// Operator acknowledgement; only a dispatched mission can be acknowledged.
    pub fn acknowledge(&self, id: &str, now_ms: u64) -> Result<Mission, MissionError> {
        let current = self.get(id).ok_or_else(|| MissionError::Unknown(id.to_owned()))?.status;
        if current != MissionStatus::Dispatched {
            return Err(MissionError::Transition { id: id.to_owned(), from: current, to: MissionStatus::Acknowledged });
        }
        self.advance(id, MissionStatus::Acknowledged, now_ms, None)
    }

    pub fn mark_done(&self, id: &str, now_ms: u64) -> Result<Mission, MissionError> {
        self.advance(id, MissionStatus::Done, now_ms, None)
    }

    pub fn get(&self, id: &str) -> Option<Mission> {
        let inner = self.inner.lock();
        mission_key(id).and_then(|k| inner.missions.get(&k).cloned())
    }

    /// Pending missions for `robot`, oldest first.
    pub fn pending_for(&self, robot: &DeviceId) -> Vec<Mission> {
        self.inner
            .lock()
            .missions
            .values()
            .filter(|m| &m.target_robot == robot && m.status == MissionStatus::Pending)
            .cloned()
            .collect()
    }

    pub fn missions(&self) -> Vec<Mission> {
        self.inner.lock().missions.values().cloned().collect()
    }

    pub fn alerts(&self) -> Vec<Alert> {
        self.inner.lock().alerts.clone()
    }

    pub fn mark_delivered(&self, alert_id: &str) {
        if let Some(a) = self.inner.lock().alerts.iter_mut().find(|a| a.id == alert_id) {
            a.delivered = true;
        }
    }
}
