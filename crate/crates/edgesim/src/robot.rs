//! Kinematic setpoint-following robot.

use iohrt_core::control::{clamp_workspace, plan_toward, AutonomyMode, ControlParams, PoseVector};
use iohrt_core::protocol::{Command, MissionAssign, RobotState, RobotStatus};
use thiserror::Error;

use crate::config::{Scenario, SimRobotConfig, GRIPPER_AXIS};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RobotError {
    #[error("setpoint has {got} axes, robot has {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("autonomous command without a goal")]
    MissingGoal,
}

#[derive(Debug, Clone)]
pub struct SimRobot {
    params: ControlParams<f64>,
    scenario: Scenario,
    tolerance: f64,
    pose: PoseVector<f64>,
    status: RobotStatus,
    goal: Option<Vec<f64>>,
    cmd_seq: u64,
    mission: Option<String>,
    finished: Option<String>,
}

impl SimRobot {
    pub fn new(cfg: &SimRobotConfig) -> Self {
        let params = cfg.params();
        let start = PoseVector::new(cfg.initial_pose()).unwrap_or_else(|_| PoseVector::zeros(cfg.dof()));
        Self {
            pose: clamp_workspace(&start, &params.workspace),
            params,
            scenario: cfg.scenario,
            tolerance: cfg.goal_tolerance,
            status: RobotStatus::Idle,
            goal: None,
            cmd_seq: 0,
            mission: None,
            finished: None,
        }
    }

    pub fn params(&self) -> &ControlParams<f64> {
        &self.params
    }

    pub fn pose(&self) -> &[f64] {
        self.pose.coords()
    }

    pub fn status(&self) -> RobotStatus {
        self.status
    }

    pub fn goal(&self) -> Option<&[f64]> {
        self.goal.as_deref()
    }

    pub fn dof(&self) -> usize {
        self.params.dof()
    }

    fn check(&self, v: &[f64], what: &'static str) -> Result<(), RobotError> {
        if v.len() != self.dof() {
            return Err(RobotError::Dimension { expected: self.dof(), got: v.len() });
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(RobotError::NonFinite(what));
        }
        Ok(())
    }

    /// Adopts a gateway setpoint. Teleop and shared commands move the robot to
    /// the setpoint at once; an autonomous command only hands over the goal.
    pub fn apply_command(&mut self, cmd: &Command) -> Result<(), RobotError> {
        self.check(&cmd.setpoint, "setpoint")?;
        if let Some(g) = &cmd.goal {
            self.check(g, "goal")?;
        }
        if cmd.mode == AutonomyMode::Autonomous && cmd.goal.is_none() && self.goal.is_none() {
            return Err(RobotError::MissingGoal);
        }
        if cmd.mode != AutonomyMode::Autonomous {
            let target = PoseVector::new(cmd.setpoint.clone()).map_err(|_| RobotError::NonFinite("setpoint"))?;
            self.pose = clamp_workspace(&target, &self.params.workspace);
        }
        if cmd.goal.is_some() {
            self.goal = cmd.goal.clone();
        }
        self.status = cmd.mode.into();
        self.cmd_seq = cmd.cmd_seq;
        self.mission = None;
        Ok(())
    }

    pub fn assign_mission(&mut self, m: &MissionAssign) -> Result<(), RobotError> {
        self.check(&m.goal, "goal")?;
        self.goal = Some(m.goal.clone());
        self.status = RobotStatus::Autonomous;
        self.cmd_seq = m.cmd_seq;
        self.mission = Some(m.mission_id.clone());
        Ok(())
    }

    /// Planned rate toward the goal, zero when there is none.
    pub fn plan(&self) -> Vec<f64> {
        match &self.goal {
            Some(g) => plan_toward(self.pose.coords(), g, self.params.planner_gain, &self.params.v_max)
                .map(|p| p.v_r)
                .unwrap_or_else(|_| vec![0.0; self.dof()]),
            None => vec![0.0; self.dof()],
        }
    }

    /// Advances autonomous motion by `dt` seconds. Returns the mission id the
    /// first time an assigned goal is reached.
    pub fn tick(&mut self, dt: f64) -> Option<String> {
        if self.status != RobotStatus::Autonomous || self.goal.is_none() {
            return None;
        }
        let v_r = self.plan();
        let moved: Vec<f64> = self.pose.coords().iter().zip(&v_r).map(|(p, v)| v * dt + p).collect();
        if let Ok(next) = PoseVector::new(moved) {
            self.pose = clamp_workspace(&next, &self.params.workspace);
        }
        if self.mission.is_some() && self.goal_error() <= self.tolerance {
            self.finished = self.mission.take();
            return self.finished.clone();
        }
        None
    }

    /// ‖pose − goal‖∞, or zero without a goal.
    pub fn goal_error(&self) -> f64 {
        self.goal.as_ref().map_or(0.0, |g| {
            self.pose.coords().iter().zip(g).map(|(p, g)| (p - g).abs()).fold(0.0, f64::max)
        })
    }

    pub fn state(&self) -> RobotState {
        let autonomous = matches!(self.status, RobotStatus::Autonomous | RobotStatus::Shared);
        RobotState {
            pose: self.pose.coords().to_vec(),
            gripper: (self.scenario == Scenario::PickPlace7dof).then(|| self.pose.coords()[GRIPPER_AXIS].clamp(0.0, 1.0)),
            status: self.status,
            cmd_seq: self.cmd_seq,
            plan: (autonomous && self.goal.is_some()).then(|| self.plan()),
            mission_done: self.finished.clone(),
        }
    }

    /// Clears the completion flag once it has been reported.
    pub fn take_finished(&mut self) -> Option<String> {
        self.finished.take()
    }
}
