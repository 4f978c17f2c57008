//! Motion-scaled teleoperation and human-robot shared control.
//!
//! The setpoint recursion is
//!
//! ```text
//! teleop:  p(t) = gamma * v_h(t) * dt + p(t-1)
//! shared:  p(t) = [(1 - m) * gamma * v_h(t) + m * v_r(t)] * dt + p(t-1)
//! ```
//!
//! with `m = 0` pure teleoperation and `m = 1` fully autonomous execution.
//! The floating point evaluation order of both laws is fixed so that two
//! implementations of the same command stream agree bit for bit.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ControlError {
    #[error("dimension mismatch: expected {expected} axes, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("dt must be > 0")]
    NonPositiveDt,
    #[error("motion scaling factor must be > 0")]
    NonPositiveGamma,
    #[error("autonomy weight {0} outside [0, 1]")]
    WeightOutOfRange(f64),
    #[error("pose must have at least one axis")]
    EmptyPose,
    #[error("invalid control parameters: {0}")]
    InvalidParams(String),
}

pub type Result<T, E = ControlError> = std::result::Result<T, E>;

/// Commanded end-effector setpoint, one entry per degree of freedom.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PoseVector<T>(Vec<T>);

impl<T: Scalar> PoseVector<T> {
    pub fn new(coords: Vec<T>) -> Result<Self> {
        if coords.is_empty() {
            return Err(ControlError::EmptyPose);
        }
        ensure_finite(&coords, "pose")?;
        Ok(Self(coords))
    }

    pub fn zeros(dof: usize) -> Self {
        Self(vec![T::zero(); dof.max(1)])
    }

    pub fn dof(&self) -> usize {
        self.0.len()
    }

    pub fn coords(&self) -> &[T] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<T> {
        self.0
    }
}

impl<T> AsRef<[T]> for PoseVector<T> {
    fn as_ref(&self) -> &[T] {
        &self.0
    }
}

/// Human incremental input `v_h` (units/s) applied over `dt` seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IncrementalCommand<T> {
    pub v_h: Vec<T>,
    pub dt: T,
}

impl<T: Scalar> IncrementalCommand<T> {
    pub fn new(v_h: Vec<T>, dt: T) -> Self {
        Self { v_h, dt }
    }

    fn validate(&self, dof: usize) -> Result<()> {
        check_dim(dof, self.v_h.len())?;
        ensure_finite(&self.v_h, "v_h")?;
        if !self.dt.is_finite() {
            return Err(ControlError::NonFinite("dt"));
        }
        if self.dt <= T::zero() {
            return Err(ControlError::NonPositiveDt);
        }
        Ok(())
    }
}

/// Robot-planned incremental value `v_r`, already in robot units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AutonomyPlan<T> {
    pub v_r: Vec<T>,
}

impl<T: Scalar> AutonomyPlan<T> {
    pub fn new(v_r: Vec<T>) -> Self {
        Self { v_r }
    }

    pub fn idle(dof: usize) -> Self {
        Self { v_r: vec![T::zero(); dof] }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AxisBounds<T> {
    pub min: T,
    pub max: T,
}

impl<T: Scalar> AxisBounds<T> {
    pub fn new(min: T, max: T) -> Self {
        Self { min, max }
    }

    pub fn contains(&self, v: T) -> bool {
        v >= self.min && v <= self.max
    }

    pub fn project(&self, v: T) -> T {
        v.max(self.min).min(self.max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AutonomyMode {
    Teleop,
    Shared,
    Autonomous,
}

impl AutonomyMode {
    pub fn as_str(self) -> &'static str {
        match self {
            AutonomyMode::Teleop => "teleop",
            AutonomyMode::Shared => "shared",
            AutonomyMode::Autonomous => "autonomous",
        }
    }
}

/// Classifies an autonomy weight: `0` teleop, `1` autonomous, anything between shared.
pub fn autonomy_mode<T: Scalar>(m: T) -> Result<AutonomyMode> {
    check_weight(m)?;
    Ok(if m == T::zero() {
        AutonomyMode::Teleop
    } else if m == T::one() {
        AutonomyMode::Autonomous
    } else {
        AutonomyMode::Shared
    })
}

/// Per-device control configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(deserialize = "T: Scalar + Deserialize<'de>"))]
pub struct ControlParams<T> {
    /// Motion scaling factor applied to the human term.
    pub gamma: T,
    /// Default autonomy weight.
    pub m: T,
    /// Upper bound on the sender-declared control interval.
    pub dt_max: T,
    /// Per-axis rate limit, units/s.
    pub v_max: Vec<T>,
    pub workspace: Vec<AxisBounds<T>>,
    /// Proportional gain of the goal-seeking planner that produces `v_r`.
    #[serde(default = "default_gain")]
    pub planner_gain: T,
}

fn default_gain<T: Scalar>() -> T {
    T::one()
}

impl<T: Scalar> ControlParams<T> {
    /// Unit scaling, pure teleop, 0.1 s interval cap, 1 unit/s rate limit
    /// and a +/-10 unit workspace on every axis.
    pub fn with_defaults(dof: usize) -> Self {
        let ten = T::from_f64_lossy(10.0);
        Self {
            gamma: T::one(),
            m: T::zero(),
            dt_max: T::from_f64_lossy(0.1),
            v_max: vec![T::one(); dof],
            workspace: vec![AxisBounds::new(-ten, ten); dof],
            planner_gain: T::one(),
        }
    }

    pub fn dof(&self) -> usize {
        self.v_max.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |s: &str| Err(ControlError::InvalidParams(s.to_owned()));
        if !(self.gamma.is_finite() && self.gamma > T::zero()) {
            return bad("gamma must be finite and > 0");
        }
        check_weight(self.m)?;
        if !(self.dt_max.is_finite() && self.dt_max > T::zero()) {
            return bad("dt_max must be finite and > 0");
        }
        if self.v_max.is_empty() {
            return bad("at least one axis required");
        }
        if self.workspace.len() != self.v_max.len() {
            return bad("workspace and v_max lengths differ");
        }
        if self.v_max.iter().any(|v| !(v.is_finite() && *v > T::zero())) {
            return bad("v_max entries must be finite and > 0");
        }
        if self
            .workspace
            .iter()
            .any(|b| !(b.min.is_finite() && b.max.is_finite() && b.min < b.max))
        {
            return bad("workspace bounds need finite min < max");
        }
        if !(self.planner_gain.is_finite() && self.planner_gain >= T::zero()) {
            return bad("planner_gain must be finite and >= 0");
        }
        Ok(())
    }

    /// Runs one full control step: cap `dt` at `dt_max`, blend the human and
    /// robot rates, rate-limit the blend, integrate, then project onto the
    /// workspace.
    pub fn step(
        &self,
        p_prev: &PoseVector<T>,
        cmd: &IncrementalCommand<T>,
        plan: Option<&AutonomyPlan<T>>,
        gamma: Option<T>,
        m: Option<T>,
    ) -> Result<StepOutcome<T>> {
        let dof = self.dof();
        check_dim(dof, p_prev.dof())?;
        let gamma = gamma.unwrap_or(self.gamma);
        let m = m.unwrap_or(self.m);
        check_gamma(gamma)?;
        check_weight(m)?;
        cmd.validate(dof)?;
        let plan = match plan {
            Some(plan) => plan.clone(),
            None => AutonomyPlan::idle(dof),
        };
        check_dim(dof, plan.v_r.len())?;
        ensure_finite(&plan.v_r, "v_r")?;

        let dt = cmd.dt.min(self.dt_max);
        let rate = clamp_rate(&blend_rate(&cmd.v_h, &plan.v_r, gamma, m), &self.v_max);
        let moved = PoseVector(advance(p_prev.coords(), &rate, dt));
        let pose = clamp_workspace(&moved, &self.workspace);
        ensure_finite(pose.coords(), "resulting pose")?;
        Ok(StepOutcome { pose, dt, gamma, m, v_r: plan.v_r })
    }

    /// Proportional goal-seeking plan bounded by this device's rate limit.
    pub fn plan_toward(&self, pose: &[T], goal: &[T]) -> Result<AutonomyPlan<T>> {
        plan_toward(pose, goal, self.planner_gain, &self.v_max)
    }
}

/// Result of [`ControlParams::step`], carrying the effective parameters used.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome<T> {
    pub pose: PoseVector<T>,
    pub dt: T,
    pub gamma: T,
    pub m: T,
    pub v_r: Vec<T>,
}

/// `p_i = ((gamma * v_h_i) * dt) + p_prev_i`.
pub fn integrate_teleop<T: Scalar>(
    p_prev: &PoseVector<T>,
    cmd: &IncrementalCommand<T>,
    gamma: T,
) -> Result<PoseVector<T>> {
    check_gamma(gamma)?;
    cmd.validate(p_prev.dof())?;
    let coords = p_prev
        .coords()
        .iter()
        .zip(&cmd.v_h)
        .map(|(&p, &v)| ((gamma * v) * cmd.dt) + p)
        .collect::<Vec<_>>();
    ensure_finite(&coords, "resulting pose")?;
    Ok(PoseVector(coords))
}

/// `p_i = (((1 - m) * gamma * v_h_i) + (m * v_r_i)) * dt + p_prev_i`.
pub fn integrate_shared<T: Scalar>(
    p_prev: &PoseVector<T>,
    cmd: &IncrementalCommand<T>,
    plan: &AutonomyPlan<T>,
    gamma: T,
    m: T,
) -> Result<PoseVector<T>> {
    check_gamma(gamma)?;
    check_weight(m)?;
    cmd.validate(p_prev.dof())?;
    check_dim(p_prev.dof(), plan.v_r.len())?;
    ensure_finite(&plan.v_r, "v_r")?;
    let rate = blend_rate(&cmd.v_h, &plan.v_r, gamma, m);
    let coords = advance(p_prev.coords(), &rate, cmd.dt);
    ensure_finite(&coords, "resulting pose")?;
    Ok(PoseVector(coords))
}

/// Blended rate `((1 - m) * gamma) * v_h + m * v_r`. Inputs must already agree in length.
pub fn blend_rate<T: Scalar>(v_h: &[T], v_r: &[T], gamma: T, m: T) -> Vec<T> {
    let human = (T::one() - m) * gamma;
    v_h.iter()
        .zip(v_r)
        .map(|(&h, &r)| (human * h) + (m * r))
        .collect()
}

fn advance<T: Scalar>(p_prev: &[T], rate: &[T], dt: T) -> Vec<T> {
    p_prev
        .iter()
        .zip(rate)
        .map(|(&p, &u)| (u * dt) + p)
        .collect()
}

/// Saturates each axis of `v` to `[-v_max_i, v_max_i]`.
pub fn clamp_rate<T: Scalar>(v: &[T], v_max: &[T]) -> Vec<T> {
    debug_assert_eq!(v.len(), v_max.len());
    v.iter()
        .zip(v_max)
        .map(|(&v, &lim)| v.max(-lim).min(lim))
        .collect()
}

/// Projects `p` onto the axis-aligned workspace box.
pub fn clamp_workspace<T: Scalar>(p: &PoseVector<T>, bounds: &[AxisBounds<T>]) -> PoseVector<T> {
    debug_assert_eq!(p.dof(), bounds.len());
    PoseVector(
        p.coords()
            .iter()
            .zip(bounds)
            .map(|(&v, b)| b.project(v))
            .collect(),
    )
}

/// `v_r = clamp_rate(gain * (goal - pose), v_max)`.
pub fn plan_toward<T: Scalar>(pose: &[T], goal: &[T], gain: T, v_max: &[T]) -> Result<AutonomyPlan<T>> {
    check_dim(pose.len(), goal.len())?;
    check_dim(pose.len(), v_max.len())?;
    ensure_finite(goal, "goal")?;
    let raw: Vec<T> = pose.iter().zip(goal).map(|(&p, &g)| gain * (g - p)).collect();
    Ok(AutonomyPlan::new(clamp_rate(&raw, v_max)))
}

fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(ControlError::DimensionMismatch { expected, got });
    }
    Ok(())
}

fn check_gamma<T: Scalar>(gamma: T) -> Result<()> {
    if !gamma.is_finite() {
        return Err(ControlError::NonFinite("gamma"));
    }
    if gamma <= T::zero() {
        return Err(ControlError::NonPositiveGamma);
    }
    Ok(())
}

fn check_weight<T: Scalar>(m: T) -> Result<()> {
    if !(m >= T::zero() && m <= T::one()) {
        return Err(ControlError::WeightOutOfRange(m.to_f64_lossy()));
    }
    Ok(())
}

fn ensure_finite<T: Scalar>(xs: &[T], what: &'static str) -> Result<()> {
    if xs.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(ControlError::NonFinite(what))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pose(v: &[f64]) -> PoseVector<f64> {
        PoseVector::new(v.to_vec()).unwrap()
    }

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn teleop_zero_increment() {
        let p = integrate_teleop(&pose(&[0.0, 0.0, 0.0]), &IncrementalCommand::new(vec![0.0; 3], 0.1), 1.0)
            .unwrap();
        assert_eq!(p.coords(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn teleop_hand_evaluated() {
        // 2 * 0.5 * 0.01 = 0.01 per unit of v_h
        let p = integrate_teleop(
            &pose(&[0.10, 0.20, 0.30]),
            &IncrementalCommand::new(vec![0.5, -0.5, 0.0], 0.01),
            2.0,
        )
        .unwrap();
        assert_close(p.coords(), &[0.11, 0.19, 0.30], 1e-15);

        // four-axis stage: 0.5 * 2 * 0.1 = 0.1
        let p = integrate_teleop(
            &pose(&[1.0, 1.0, 1.0, 1.0]),
            &IncrementalCommand::new(vec![2.0, 0.0, 0.0, -2.0], 0.1),
            0.5,
        )
        .unwrap();
        assert_close(p.coords(), &[1.1, 1.0, 1.0, 0.9], 1e-15);
    }

    #[test]
    fn teleop_rejects_bad_input() {
        let p = pose(&[0.0, 0.0]);
        assert_eq!(
            integrate_teleop(&p, &IncrementalCommand::new(vec![1.0], 0.1), 1.0),
            Err(ControlError::DimensionMismatch { expected: 2, got: 1 })
        );
        assert_eq!(
            integrate_teleop(&p, &IncrementalCommand::new(vec![1.0, 0.0], 0.0), 1.0),
            Err(ControlError::NonPositiveDt)
        );
        assert_eq!(
            integrate_teleop(&p, &IncrementalCommand::new(vec![1.0, 0.0], -0.1), 1.0),
            Err(ControlError::NonPositiveDt)
        );
        assert_eq!(
            integrate_teleop(&p, &IncrementalCommand::new(vec![f64::NAN, 0.0], 0.1), 1.0),
            Err(ControlError::NonFinite("v_h"))
        );
        assert_eq!(
            integrate_teleop(&p, &IncrementalCommand::new(vec![1.0, 0.0], 0.1), 0.0),
            Err(ControlError::NonPositiveGamma)
        );
        assert!(PoseVector::<f64>::new(vec![]).is_err());
        assert!(PoseVector::new(vec![f64::INFINITY]).is_err());
    }

    #[test]
    fn shared_endpoints() {
        let p0 = pose(&[0.3, -0.2, 0.1]);
        let cmd = IncrementalCommand::new(vec![0.7, 0.1, -0.4], 0.05);
        let plan = AutonomyPlan::new(vec![-1.0, 0.5, 2.0]);
        let shared = integrate_shared(&p0, &cmd, &plan, 1.7, 0.0).unwrap();
        let teleop = integrate_teleop(&p0, &cmd, 1.7).unwrap();
        assert_eq!(shared, teleop);

        let auto = integrate_shared(
            &pose(&[0.0, 0.0, 0.0]),
            &IncrementalCommand::new(vec![9.0, -3.0, 4.0], 0.1),
            &AutonomyPlan::new(vec![1.0, 0.0, 0.0]),
            5.0,
            1.0,
        )
        .unwrap();
        assert_close(auto.coords(), &[0.1, 0.0, 0.0], 1e-15);
    }

    #[test]
    fn shared_half_blend() {
        // 0.5*2*1*0.1 = 0.1 on x, 0.5*1*0.1 = 0.05 on y
        let p = integrate_shared(
            &pose(&[0.0, 0.0, 0.0]),
            &IncrementalCommand::new(vec![1.0, 0.0, 0.0], 0.1),
            &AutonomyPlan::new(vec![0.0, 1.0, 0.0]),
            2.0,
            0.5,
        )
        .unwrap();
        assert_close(p.coords(), &[0.1, 0.05, 0.0], 1e-15);
    }

    #[test]
    fn shared_rejects_weight_out_of_range() {
        let p = pose(&[0.0]);
        let cmd = IncrementalCommand::new(vec![1.0], 0.1);
        let plan = AutonomyPlan::new(vec![0.0]);
        assert!(matches!(
            integrate_shared(&p, &cmd, &plan, 1.0, 1.5),
            Err(ControlError::WeightOutOfRange(_))
        ));
        assert!(matches!(
            integrate_shared(&p, &cmd, &plan, 1.0, -0.1),
            Err(ControlError::WeightOutOfRange(_))
        ));
        assert!(integrate_shared(&p, &cmd, &AutonomyPlan::new(vec![0.0, 0.0]), 1.0, 0.5).is_err());
    }

    #[test]
    fn rate_clamp_cases() {
        assert_eq!(clamp_rate(&[0.5, -0.2], &[1.0, 1.0]), vec![0.5, -0.2]);
        assert_eq!(clamp_rate(&[5.0, 0.0], &[1.0, 1.0]), vec![1.0, 0.0]);
        assert_eq!(clamp_rate(&[-5.0, 3.0], &[2.0, 1.0]), vec![-2.0, 1.0]);
    }

    #[test]
    fn workspace_clamp_cases() {
        let b = vec![AxisBounds::new(-1.0, 1.0); 3];
        assert_eq!(clamp_workspace(&pose(&[0.5, 0.0, -0.5]), &b), pose(&[0.5, 0.0, -0.5]));
        assert_eq!(clamp_workspace(&pose(&[2.0, 0.0, 0.0]), &b), pose(&[1.0, 0.0, 0.0]));
    }

    #[test]
    fn autonomy_levels() {
        assert_eq!(autonomy_mode(0.0).unwrap(), AutonomyMode::Teleop);
        assert_eq!(autonomy_mode(1.0).unwrap(), AutonomyMode::Autonomous);
        assert_eq!(autonomy_mode(0.3).unwrap(), AutonomyMode::Shared);
        assert!(autonomy_mode(1.01).is_err());
        assert!(autonomy_mode(-0.01).is_err());
        assert!(autonomy_mode(f64::NAN).is_err());
    }

    #[test]
    fn planner_saturates() {
        let plan = plan_toward(&[0.0, 0.0, 0.0], &[1.0, 0.0, 0.0], 1.0, &[0.5, 0.5, 0.5]).unwrap();
        assert_eq!(plan.v_r, vec![0.5, 0.0, 0.0]);
        let at_goal = plan_toward(&[0.2, 0.3], &[0.2, 0.3], 2.0, &[1.0, 1.0]).unwrap();
        assert_eq!(at_goal.v_r, vec![0.0, 0.0]);
    }

    #[test]
    fn step_pipeline_orders_clamps() {
        let mut params = ControlParams::<f64>::with_defaults(2);
        params.v_max = vec![1.0, 1.0];
        params.workspace = vec![AxisBounds::new(-1.0, 1.0), AxisBounds::new(-1.0, 0.05)];
        // rate 5 clamps to 1, dt 0.5 caps at 0.1 -> +0.1 on x; y hits the 0.05 wall
        let out = params
            .step(&pose(&[0.0, 0.0]), &IncrementalCommand::new(vec![5.0, 0.9], 0.5), None, None, None)
            .unwrap();
        assert_eq!(out.dt, 0.1);
        assert_close(out.pose.coords(), &[0.1, 0.05], 1e-15);
    }

    #[test]
    fn step_matches_teleop_inside_limits() {
        let params = ControlParams::<f64>::with_defaults(3);
        let p0 = pose(&[0.10, 0.20, 0.30]);
        let cmd = IncrementalCommand::new(vec![0.5, -0.5, 0.0], 0.01);
        let out = params.step(&p0, &cmd, None, None, None).unwrap();
        assert_eq!(out.pose, integrate_teleop(&p0, &cmd, 1.0).unwrap());
        assert_close(out.pose.coords(), &[0.105, 0.195, 0.30], 1e-15);
    }

    #[test]
    fn params_validation() {
        let mut p = ControlParams::<f64>::with_defaults(2);
        assert!(p.validate().is_ok());
        p.workspace[1] = AxisBounds::new(1.0, 1.0);
        assert!(p.validate().is_err());
        let mut p = ControlParams::<f64>::with_defaults(2);
        p.gamma = -1.0;
        assert!(p.validate().is_err());
        let mut p = ControlParams::<f64>::with_defaults(2);
        p.v_max.pop();
        assert!(p.validate().is_err());
    }

    #[test]
    fn generic_over_f32() {
        let p = integrate_teleop(
            &PoseVector::new(vec![1.0f32, 1.0]).unwrap(),
            &IncrementalCommand::new(vec![2.0f32, -2.0], 0.25),
            0.5,
        )
        .unwrap();
        assert_eq!(p.coords(), &[1.25f32, 0.75]);
    }
}
