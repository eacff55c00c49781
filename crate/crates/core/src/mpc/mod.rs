//! Bilevel MPC: the robot plan is optimized jointly with ORCA-refined human
//! predictions whose optimality is imposed through their KKT conditions.
//!
//! [`assemble`] builds the single-level NLP and [`Controller`] runs it in a
//! receding horizon with warm starts and a braking fallback.

mod controller;
mod problem;
mod shooting;

use serde::{Deserialize, Serialize};

pub use controller::{braking_action, Controller, MpcSolutionBundle, StepDiagnostics};
pub use problem::{assemble, HumanStepDuals, PlanningMode, SicnavProblem};
pub use shooting::{optimize_actions, ShootingSolution};

use crate::error::{Error, Result};
use crate::geometry::{closest_point, Segment, Vec2};
use crate::nlp::SolverSettings;
use crate::orca::OrcaParams;
use crate::prediction::BandwidthRule;
use crate::refine::RefineConfig;
use crate::state::{ActuationLimits, RobotAction, SystemState};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MpcConfig {
    pub horizon: usize,
    pub dt: f64,
    pub goal: Vec2,
    /// Diagonal weights on the robot position error.
    pub q_position: [f64; 2],
    /// Diagonal weights on `(v, omega)`.
    pub r_action: [f64; 2],
    pub terminal_scale: f64,
    pub limits: ActuationLimits,
    pub robot_radius: f64,
    pub human_radius: f64,
    pub obstacles: Vec<Segment>,
    /// Extra clearance added to the robot-human and robot-wall distances.
    pub human_margin: f64,
    pub wall_margin: f64,
    /// Lower-level model of the humans.
    pub orca: OrcaParams,
    pub refine: RefineConfig,
    pub bandwidth: BandwidthRule,
    pub solver: SolverSettings,
    pub strategy: SolveStrategy,
}

/// How the controller solves the assembled problem.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStrategy {
    /// SQP over the actions with exact lower-level rollouts
    /// ([`optimize_actions`]).
    #[default]
    Shooting,
    /// Full-space SQP with relaxed complementarity ([`crate::nlp::solve`]).
    FullSpace,
}

impl Default for MpcConfig {
    fn default() -> Self {
        Self {
            horizon: 8,
            dt: 0.25,
            goal: Vec2::ZERO,
            q_position: [1.0, 1.0],
            r_action: [0.1, 0.05],
            terminal_scale: 10.0,
            limits: ActuationLimits::default(),
            robot_radius: 0.3,
            human_radius: 0.3,
            obstacles: Vec::new(),
            human_margin: 0.05,
            wall_margin: 0.05,
            orca: OrcaParams::default(),
            refine: RefineConfig::default(),
            bandwidth: BandwidthRule::Scott,
            solver: SolverSettings {
                max_iterations: 40,
                rho_initial: 1e-3,
                ..SolverSettings::default()
            },
            strategy: SolveStrategy::default(),
        }
    }
}

impl MpcConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if self.horizon == 0 {
            return bad("horizon must be at least one step");
        }
        if !(self.dt > 0.0) {
            return bad("dt must be positive");
        }
        if !(self.terminal_scale >= 1.0) {
            return bad("terminal scale must be >= 1");
        }
        if self
            .q_position
            .iter()
            .chain(&self.r_action)
            .any(|w| !(*w >= 0.0))
        {
            return bad("cost weights must be non-negative");
        }
        if !(self.robot_radius > 0.0 && self.human_radius > 0.0) {
            return bad("radii must be positive");
        }
        if !(self.human_margin >= 0.0 && self.wall_margin >= 0.0) {
            return bad("separation margins must be non-negative");
        }
        if !self.goal.is_finite() {
            return bad("goal must be finite");
        }
        self.limits.validate()?;
        self.orca.validate()?;
        self.solver.validate()
    }

    /// Required robot-human centre distance `d_j`.
    pub fn human_clearance(&self) -> f64 {
        self.robot_radius + self.human_radius + self.human_margin
    }

    /// Required robot-wall distance `d_l`.
    pub fn wall_clearance(&self) -> f64 {
        self.robot_radius + self.wall_margin
    }

    fn position_error(&self, position: Vec2) -> f64 {
        let e = position - self.goal;
        self.q_position[0] * e.x * e.x + self.q_position[1] * e.y * e.y
    }
}

/// Goal-tracking and control-effort cost of one step. Human and weight
/// entries of the state carry no cost.
pub fn stage_cost(state: &SystemState, action: &RobotAction, config: &MpcConfig) -> f64 {
    config.position_error(state.robot.position)
        + config.r_action[0] * action.linear_velocity.powi(2)
        + config.r_action[1] * action.angular_velocity.powi(2)
}

/// Terminal cost: the stage position term scaled by the terminal factor.
pub fn terminal_cost(state: &SystemState, config: &MpcConfig) -> f64 {
    config.terminal_scale * config.position_error(state.robot.position)
}

/// Collision residuals (non-negative when satisfied): one per human, then
/// one per wall segment, all in squared distances.
pub fn collision_constraints(state: &SystemState, config: &MpcConfig) -> Vec<f64> {
    let p = state.robot.position;
    let dj = config.human_clearance();
    let dl = config.wall_clearance();
    state
        .humans
        .iter()
        .map(|h| (p - h.position).norm_squared() - dj * dj)
        .chain(config.obstacles.iter().map(|s| {
            let (c, _) = closest_point(p, s);
            (p - c).norm_squared() - dl * dl
        }))
        .collect()
}
