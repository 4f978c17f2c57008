//! Shared gateway state and the operations the device links and the HTTP
//! layer both drive.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use iohrt_core::auth::{Action, Auth, Principal};
use iohrt_core::control::{
    autonomy_mode, clamp_workspace, AutonomyMode, AutonomyPlan, ControlParams, IncrementalCommand, PoseVector,
};
use iohrt_core::protocol::{
    Command, DeviceId, DeviceKind, Hello, Message, MissionAssign, RobotState, RobotStatus, SensorReading,
};
use iohrt_core::registry::{DeviceRecord, Registration, Registry, SessionId};
use iohrt_core::store::{ReadingRecord, SessionLogEntry, Store};
use iohrt_core::time::MonotoneMillis;
use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use tokio::sync::{mpsc, watch, Notify};

use crate::config::{AnomalyRule, GatewayConfig};
use crate::error::ApiError;
use crate::fanout::{Event, Fanout, Topic};
use crate::frames::FrameHub;
use crate::missions::{Mission, MissionBoard};

/// Outgoing queue depth per device link.
pub const LINK_QUEUE: usize = 1024;

pub struct LinkHandle {
    pub epoch: u64,
    pub tx: mpsc::Sender<Message>,
    pub kill: Arc<Notify>,
}

/// Gateway-side control state of one robot. Its mutex serializes every
/// command, goal and mission applied to that robot.
#[derive(Debug, Clone)]
pub struct RobotSlot {
    /// Last commanded pose.
    pub setpoint: PoseVector<f64>,
    pub cmd_seq: u64,
    pub mode: AutonomyMode,
    pub goal: Option<Vec<f64>>,
    pub last_state: Option<RobotState>,
}

#[derive(Debug, Default)]
pub struct Counters {
    pub commands_accepted: AtomicU64,
    pub readings_ingested: AtomicU64,
    pub link_errors: AtomicU64,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CommandRequest {
    pub v_h: Vec<f64>,
    pub dt: f64,
    #[serde(default)]
    pub gamma: Option<f64>,
    #[serde(default)]
    pub m: Option<f64>,
    /// Robot rate to blend instead of the gateway's goal planner.
    #[serde(default)]
    pub v_r: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommandOutcome {
    pub device_id: DeviceId,
    pub session_id: SessionId,
    pub cmd_seq: u64,
    pub mode: AutonomyMode,
    pub prev_pose: Vec<f64>,
    pub pose: Vec<f64>,
    pub v_h: Vec<f64>,
    pub v_r: Vec<f64>,
    pub dt: f64,
    pub gamma: f64,
    pub m: f64,
    pub timestamp_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoalOutcome {
    pub device_id: DeviceId,
    pub cmd_seq: u64,
    pub goal: Vec<f64>,
}

pub struct Shared {
    pub config: GatewayConfig,
    pub registry: Registry,
    pub auth: Auth,
    pub store: Store,
    pub fanout: Fanout,
    pub missions: MissionBoard,
    pub frames: FrameHub,
    pub rules: RwLock<Vec<AnomalyRule>>,
    pub counters: Counters,
    pub clock: MonotoneMillis,
    links: Mutex<HashMap<DeviceId, LinkHandle>>,
    robots: Mutex<HashMap<DeviceId, Arc<tokio::sync::Mutex<RobotSlot>>>>,
    shutdown: watch::Sender<bool>,
}

pub fn parse_device(id: &str) -> Result<DeviceId, ApiError> {
    DeviceId::new(id).map_err(|_| ApiError::NotFound(format!("unknown device {id}")))
}

fn params_for(rec: &DeviceRecord) -> ControlParams<f64> {
    rec.config.clone().unwrap_or_else(|| ControlParams::with_defaults(rec.dof as usize))
}

impl Shared {
    pub fn new(config: GatewayConfig, auth: Auth, store: Store) -> Self {
        Self {
            registry: Registry::new(),
            fanout: Fanout::new(config.fanout_backlog),
            missions: MissionBoard::new(),
            frames: FrameHub::new(),
            rules: RwLock::new(config.rules.clone()),
            counters: Counters::default(),
            clock: MonotoneMillis::new(),
            links: Mutex::new(HashMap::new()),
            robots: Mutex::new(HashMap::new()),
            shutdown: watch::channel(false).0,
            auth,
            store,
            config,
        }
    }

    /// Receiver that flips to `true` once shutdown begins.
    pub fn shutdown_signal(&self) -> watch::Receiver<bool> {
        self.shutdown.subscribe()
    }

    pub fn begin_shutdown(&self) {
        self.shutdown.send_replace(true);
    }

    pub fn is_shutting_down(&self) -> bool {
        *self.shutdown.borrow()
    }

    pub fn now(&self) -> u64 {
        self.clock.now()
    }

    pub fn authorize(&self, token: Option<&str>, action: Action) -> Result<Principal, ApiError> {
        let token = token.ok_or(ApiError::Unauthenticated)?;
        Ok(self.auth.check_permission(token, action, self.now())?)
    }

    pub fn publish(&self, topic: Topic, device: Option<&DeviceId>, payload: impl Serialize) {
        self.fanout.publish(Event::new(topic, device.cloned(), payload, self.now()));
    }

    pub fn robot_slot(&self, id: &DeviceId) -> Option<Arc<tokio::sync::Mutex<RobotSlot>>> {
        self.robots.lock().get(id).cloned()
    }

    fn link_sender(&self, id: &DeviceId) -> Option<mpsc::Sender<Message>> {
        self.links.lock().get(id).map(|l| l.tx.clone())
    }

    /// Sends a message to a connected device without waiting.
    pub fn send_to_device(&self, id: &DeviceId, msg: Message) -> Result<(), ApiError> {
        let tx = self.link_sender(id).ok_or_else(|| ApiError::DeviceOffline(format!("device {id} is not connected")))?;
        tx.try_send(msg).map_err(|_| ApiError::DeviceOffline(format!("link to {id} is not accepting messages")))
    }

    /// Registers a device that completed its hello and installs its link.
    pub async fn attach_device(&self, id: DeviceId, hello: &Hello, tx: mpsc::Sender<Message>) -> Result<(DeviceRecord, Arc<Notify>), ApiError> {
        let params = self.config.robots.get(id.as_str()).cloned().or_else(|| hello.params.clone());
        let reg = Registration { id: id.clone(), kind: hello.kind, dof: hello.dof, params };
        let rec = self.registry.register(reg, self.now())?;
        let kill = Arc::new(Notify::new());
        self.links.lock().insert(id.clone(), LinkHandle { epoch: rec.epoch, tx, kill: kill.clone() });
        match rec.kind {
            DeviceKind::Robot => self.reset_robot_slot(&rec, hello.pose.as_deref()).await,
            DeviceKind::Camera => self.store.reset_frames(&id),
            DeviceKind::Sensor | DeviceKind::Actuator => {}
        }
        self.publish(Topic::Device, Some(&id), &rec);
        Ok((rec, kill))
    }

    async fn reset_robot_slot(&self, rec: &DeviceRecord, pose: Option<&[f64]>) {
        let params = params_for(rec);
        let dof = rec.dof as usize;
        let existing = self.robots.lock().get(&rec.id).cloned();
        let start = |prev: Option<&PoseVector<f64>>| {
            let p = match (pose, prev) {
                (Some(p), _) => PoseVector::new(p.to_vec()).unwrap_or_else(|_| PoseVector::zeros(dof)),
                (None, Some(prev)) if prev.dof() == dof => prev.clone(),
                _ => PoseVector::zeros(dof),
            };
            clamp_workspace(&p, &params.workspace)
        };
        match existing {
            Some(slot) => {
                let mut slot = slot.lock().await;
                slot.setpoint = start(Some(&slot.setpoint));
                slot.mode = AutonomyMode::Teleop;
                slot.goal = None;
                slot.last_state = None;
            }
            None => {
                let slot = RobotSlot {
                    setpoint: start(None),
                    cmd_seq: 0,
                    mode: AutonomyMode::Teleop,
                    goal: None,
                    last_state: None,
                };
                self.robots.lock().entry(rec.id.clone()).or_insert_with(|| Arc::new(tokio::sync::Mutex::new(slot)));
            }
        }
    }

    /// Tears down a link, unless a newer registration already replaced it.
    pub fn detach_device(&self, id: &DeviceId, epoch: u64) {
        {
            let mut links = self.links.lock();
            if links.get(id).is_some_and(|l| l.epoch == epoch) {
                links.remove(id);
            }
        }
        if let Some(rec) = self.registry.disconnect(id, epoch) {
            self.publish(Topic::Device, Some(id), &rec);
        }
    }

    /// Disconnects devices silent for longer than the staleness timeout.
    pub fn sweep_stale(&self) -> Vec<DeviceId> {
        let stale = self.registry.sweep_stale(self.now(), self.config.staleness_timeout_ms);
        let mut ids = Vec::new();
        for rec in stale {
            if let Some(link) = self.links.lock().remove(&rec.id) {
                link.kill.notify_one();
            }
            tracing::info!(device = %rec.id, "device timed out");
            self.publish(Topic::Device, Some(&rec.id), &rec);
            ids.push(rec.id);
        }
        ids
    }

    /// Releases robots held by sessions whose tokens have expired.
    pub fn release_expired_sessions(&self) {
        for session in self.auth.purge_expired(self.now()) {
            for id in self.registry.release_session(&session) {
                tracing::info!(device = %id, "control released after token expiry");
                self.publish(Topic::Device, Some(&id), self.registry.lookup(&id));
            }
        }
    }

    /// Persists a reading, publishes it, and runs the anomaly monitor.
    pub async fn ingest_reading(&self, device: &DeviceId, r: SensorReading) -> Result<Vec<Mission>, ApiError> {
        let record = ReadingRecord {
            device_id: device.clone(),
            channel: r.channel,
            value: r.value,
            unit: r.unit,
            timestamp_ms: r.timestamp_ms,
        };
        self.store.append_reading(record.clone())?;
        self.counters.readings_ingested.fetch_add(1, Ordering::Relaxed);
        self.publish(Topic::Reading, Some(device), &record);
        let raised = {
            let rules = self.rules.read();
            self.missions.evaluate(&rules, &record, self.now())
        };
        let mut missions = Vec::new();
        for (mission, alert) in raised {
            tracing::warn!(rule = %alert.rule_id, value = record.value, "anomaly detected");
            let listening = self.fanout.subscriber_count() > 0;
            self.publish(Topic::Alert, Some(device), &alert);
            if listening {
                self.missions.mark_delivered(&alert.id);
            }
            self.publish(Topic::Mission, Some(&mission.target_robot), &mission);
            missions.push(self.dispatch_mission(mission).await);
        }
        Ok(missions)
    }

    /// Sends a pending mission to its robot. A robot that is offline leaves
    /// the mission pending until it registers again.
    pub async fn dispatch_mission(&self, mission: Mission) -> Mission {
        let robot = mission.target_robot.clone();
        let Some(slot) = self.robot_slot(&robot) else {
            return mission;
        };
        let Some(tx) = self.link_sender(&robot) else {
            return mission;
        };
        let mut slot = slot.lock().await;
        if mission.goal.len() != slot.setpoint.dof() {
            tracing::warn!(mission = %mission.id, "mission goal does not match robot dof; left pending");
            return mission;
        }
        let Ok(permit) = tx.try_reserve() else {
            return mission;
        };
        let cmd_seq = slot.cmd_seq + 1;
        permit.send(Message::MissionAssign(MissionAssign {
            mission_id: mission.id.clone(),
            cmd_seq,
            goal: mission.goal.clone(),
        }));
        slot.cmd_seq = cmd_seq;
        slot.mode = AutonomyMode::Autonomous;
        slot.goal = Some(mission.goal.clone());
        match self.missions.mark_dispatched(&mission.id, cmd_seq, self.now()) {
            Ok(updated) => {
                self.publish(Topic::Mission, Some(&robot), &updated);
                updated
            }
            Err(_) => mission,
        }
    }

    pub async fn dispatch_pending(&self, robot: &DeviceId) {
        for mission in self.missions.pending_for(robot) {
            self.dispatch_mission(mission).await;
        }
    }

    /// Records a state report. While an autonomous command is the latest one,
    /// the reported pose becomes the setpoint so teleoperation resumes from
    /// where the robot actually is.
    pub async fn ingest_robot_state(&self, device: &DeviceId, state: RobotState) {
        if let Some(slot) = self.robot_slot(device) {
            let mut slot = slot.lock().await;
            let adopt = slot.mode == AutonomyMode::Autonomous
                && state.status == RobotStatus::Autonomous
                && state.cmd_seq == slot.cmd_seq
                && state.pose.len() == slot.setpoint.dof();
            if let (true, Some(rec), Ok(pose)) = (adopt, self.registry.lookup(device), PoseVector::new(state.pose.clone())) {
                slot.setpoint = clamp_workspace(&pose, &params_for(&rec).workspace);
            }
            slot.last_state = Some(state.clone());
        }
        if let Some(mission_id) = &state.mission_done {
            match self.missions.mark_done(mission_id, self.now()) {
                Ok(m) => self.publish(Topic::Mission, Some(device), &m),
                Err(e) => tracing::debug!(error = %e, "ignoring mission_done"),
            }
        }
        self.publish(Topic::RobotState, Some(device), &state);
    }

    fn connected_robot(&self, id: &DeviceId) -> Result<DeviceRecord, ApiError> {
        let rec = self.registry.lookup(id).ok_or_else(|| ApiError::NotFound(format!("unknown device {id}")))?;
        if !rec.is_robot() {
            return Err(ApiError::NotFound(format!("device {id} is not a robot")));
        }
        if !rec.is_connected() {
            return Err(ApiError::DeviceOffline(format!("robot {id} is disconnected")));
        }
        Ok(rec)
    }

    /// Applies one operator increment: blend, clamp, integrate, log, then send
    /// the new setpoint to the robot.
    pub async fn route_command(&self, who: &Principal, id: &DeviceId, req: CommandRequest) -> Result<CommandOutcome, ApiError> {
        let rec = self.connected_robot(id)?;
        let params = params_for(&rec);
        let m = req.m.unwrap_or(params.m);
        if m >= 1.0 {
            return Err(ApiError::Invalid("m = 1 is fully autonomous; set a goal instead".into()));
        }
        let dof = rec.dof as usize;
        if req.v_h.len() != dof {
            return Err(ApiError::DimensionMismatch(format!("v_h has {} entries, robot {id} has {dof} axes", req.v_h.len())));
        }
        if req.v_r.as_ref().is_some_and(|v| v.len() != dof) {
            return Err(ApiError::DimensionMismatch(format!("v_r must have {dof} entries")));
        }
        let slot = self.robot_slot(id).ok_or_else(|| ApiError::DeviceOffline(format!("robot {id} has no link")))?;
        let mut slot = slot.lock().await;
        if !self.registry.is_holder(&who.session_id, id) {
            return Err(ApiError::NotHolder(format!("session does not hold robot {id}")));
        }
        let plan = match (&req.v_r, &slot.goal) {
            (Some(v_r), _) => Some(AutonomyPlan::new(v_r.clone())),
            (None, Some(goal)) if m > 0.0 => Some(params.plan_toward(slot.setpoint.coords(), goal)?),
            _ => None,
        };
        let cmd = IncrementalCommand::new(req.v_h.clone(), req.dt);
        let out = params.step(&slot.setpoint, &cmd, plan.as_ref(), req.gamma, Some(m))?;
        let mode = autonomy_mode(out.m)?;
        let tx = self.link_sender(id).ok_or_else(|| ApiError::DeviceOffline(format!("robot {id} is disconnected")))?;
        let permit = tx
            .try_reserve()
            .map_err(|_| ApiError::DeviceOffline(format!("link to {id} is not accepting messages")))?;
        let cmd_seq = slot.cmd_seq + 1;
        let now = self.now();
        let entry = SessionLogEntry {
            session_id: who.session_id.clone(),
            user: who.username.clone(),
            device_id: id.clone(),
            cmd_seq,
            v_h: req.v_h,
            v_r: out.v_r.clone(),
            dt: out.dt,
            gamma: out.gamma,
            m: out.m,
            prev_pose: slot.setpoint.coords().to_vec(),
            pose: out.pose.coords().to_vec(),
            timestamp_ms: now,
        };
        self.store.log_command(entry.clone())?;
        permit.send(Message::Command(Command {
            cmd_seq,
            setpoint: entry.pose.clone(),
            mode,
            goal: if mode == AutonomyMode::Shared { slot.goal.clone() } else { None },
        }));
        slot.setpoint = out.pose;
        slot.cmd_seq = cmd_seq;
        slot.mode = mode;
        drop(slot);
        self.counters.commands_accepted.fetch_add(1, Ordering::Relaxed);
        let outcome = CommandOutcome {
            device_id: id.clone(),
            session_id: entry.session_id,
            cmd_seq,
            mode,
            prev_pose: entry.prev_pose,
            pose: entry.pose,
            v_h: entry.v_h,
            v_r: entry.v_r,
            dt: entry.dt,
            gamma: entry.gamma,
            m: entry.m,
            timestamp_ms: now,
        };
        self.publish(Topic::Command, Some(id), &outcome);
        Ok(outcome)
    }

    /// Hands the robot a goal to pursue autonomously.
    pub async fn set_goal(&self, who: &Principal, id: &DeviceId, goal: Vec<f64>) -> Result<GoalOutcome, ApiError> {
        let rec = self.connected_robot(id)?;
        let params = params_for(&rec);
        let goal = PoseVector::new(goal)?;
        if goal.dof() != rec.dof as usize {
            return Err(ApiError::DimensionMismatch(format!("goal has {} entries, robot {id} has {} axes", goal.dof(), rec.dof)));
        }
        let goal = clamp_workspace(&goal, &params.workspace).into_inner();
        let slot = self.robot_slot(id).ok_or_else(|| ApiError::DeviceOffline(format!("robot {id} has no link")))?;
        let mut slot = slot.lock().await;
        if !self.registry.is_holder(&who.session_id, id) {
            return Err(ApiError::NotHolder(format!("session does not hold robot {id}")));
        }
        let tx = self.link_sender(id).ok_or_else(|| ApiError::DeviceOffline(format!("robot {id} is disconnected")))?;
        let permit = tx
            .try_reserve()
            .map_err(|_| ApiError::DeviceOffline(format!("link to {id} is not accepting messages")))?;
        let cmd_seq = slot.cmd_seq + 1;
        permit.send(Message::Command(Command {
            cmd_seq,
            setpoint: slot.setpoint.coords().to_vec(),
            mode: AutonomyMode::Autonomous,
            goal: Some(goal.clone()),
        }));
        slot.cmd_seq = cmd_seq;
        slot.mode = AutonomyMode::Autonomous;
        slot.goal = Some(goal.clone());
        let outcome = GoalOutcome { device_id: id.clone(), cmd_seq, goal };
        self.publish(Topic::Command, Some(id), &outcome);
        Ok(outcome)
    }
}
