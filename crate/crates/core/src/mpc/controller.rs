//! Receding-horizon controller around the assembled NLP.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::geometry::{wrap_angle, Vec2};
use crate::nlp::{self, SolveStatus};
use crate::prediction::{kde_init_weights, SampleSet};
use crate::state::{
    unicycle_step, ActuationLimits, RobotAction, RobotState, SystemState, WeightVector,
};

use super::problem::{assemble, HumanStepDuals, PlanningMode, SicnavProblem};
use super::shooting::optimize_actions;
use super::{MpcConfig, SolveStrategy};

/// Largest constraint violation of an accepted non-converged iterate.
const ACCEPT_INFEASIBILITY: f64 = 1e-4;
/// Largest complementarity product of an accepted non-converged iterate.
const ACCEPT_COMPLEMENTARITY: f64 = 1e-3;
/// Plans slower than this everywhere count as a standstill.
const STANDSTILL_SPEED: f64 = 0.05;
/// Standstill plans closer than this to the goal are not retried.
const STANDSTILL_GOAL_DISTANCE: f64 = 0.3;
/// Heading error below which the turning guess starts driving.
const TURN_ALIGNMENT: f64 = 0.5;

/// Per-step solver report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepDiagnostics {
    pub solve_time_ms: f64,
    pub status: SolveStatus,
    pub iterations: usize,
    pub kkt_residual: f64,
    pub primal_infeasibility: f64,
    pub complementarity: f64,
    /// Entropy of the sample weights at the last planning step.
    pub weight_entropy: f64,
    /// Smallest predicted robot clearance over the plan, in metres beyond
    /// the required separation.
    pub min_predicted_clearance: f64,
    /// True when the braking action replaced the optimized one.
    pub fallback: bool,
    pub message: String,
}

impl StepDiagnostics {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("diagnostics serialize")
    }
}

/// Everything one control step produces.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MpcSolutionBundle {
    /// Action to apply now.
    pub action: RobotAction,
    /// Planned actions `u_0..u_{T-1}`.
    pub actions: Vec<RobotAction>,
    /// Planned robot states `x_0..x_T`.
    pub robot_plan: Vec<RobotState>,
    /// Refined human predictions `[j][t]`, `t = 0..=T`.
    pub human_predictions: Vec<Vec<Vec2>>,
    /// Sample weights `[t][s]`, `t = 0..T-1`.
    pub weights: Vec<Vec<f64>>,
    /// Lower-level solutions `[t][j]`; empty in frozen mode.
    pub lower_level: Vec<Vec<HumanStepDuals>>,
    pub diagnostics: StepDiagnostics,
}

/// Decelerates toward standstill as fast as the rate limits allow.
pub fn braking_action(previous: RobotAction, limits: &ActuationLimits) -> RobotAction {
    limits.clamp(RobotAction::ZERO, previous)
}

/// Stateful receding-horizon controller.
#[derive(Clone, Debug)]
pub struct Controller {
    config: MpcConfig,
    mode: PlanningMode,
    previous_action: RobotAction,
    previous_plan: Option<Vec<RobotAction>>,
}

impl Controller {
    pub fn new(config: MpcConfig, mode: PlanningMode) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            mode,
            previous_action: RobotAction::ZERO,
            previous_plan: None,
        })
    }

    pub fn config(&self) -> &MpcConfig {
        &self.config
    }

    pub fn mode(&self) -> PlanningMode {
        self.mode
    }

    pub fn previous_action(&self) -> RobotAction {
        self.previous_action
    }

    /// Forgets the warm start and the previous action.
    pub fn reset(&mut self) {
        self.previous_action = RobotAction::ZERO;
        self.previous_plan = None;
    }

    /// Initial action sequence: the previous plan shifted by one step,
    /// projected onto the limits relative to the previous action.
    fn warm_start(&self) -> Vec<RobotAction> {
        let t = self.config.horizon;
        let raw: Vec<RobotAction> = match &self.previous_plan {
            Some(plan) if !plan.is_empty() => {
                (0..t).map(|k| plan[(k + 1).min(plan.len() - 1)]).collect()
            }
            _ => vec![self.previous_action; t],
        };
        let mut prev = self.previous_action;
        raw.into_iter()
            .map(|a| {
                prev = self.config.limits.clamp(a, prev);
                prev
            })
            .collect()
    }

    /// Runs one planning step from the measured state. The state's weights
    /// are replaced by a density estimate over `samples`.
    pub fn control_step(
        &mut self,
        measured: &SystemState,
        samples: &SampleSet,
    ) -> Result<MpcSolutionBundle> {
        let start = Instant::now();
        let mut state = measured.clone();
        state.weights = if measured.humans.is_empty() || samples.is_empty() {
            WeightVector::uniform(samples.len().max(1))?
        } else {
            kde_init_weights(samples, self.config.bandwidth)?
        };
        let problem = assemble(
            &state,
            samples,
            self.previous_action,
            &self.config,
            self.mode,
        )?;

        let attempt = self.solve_multistart(&problem, &state.robot);
        let bundle = match attempt {
            Ok(sol) if acceptable(&sol) => {
                let actions = problem.actions(&sol.x);
                let action = self.config.limits.clamp(actions[0], self.previous_action);
                let mut diagnostics = self.diagnostics(&problem, &sol.x, &start, false);
                diagnostics.status = sol.status;
                diagnostics.iterations = sol.iterations;
                diagnostics.kkt_residual = sol.kkt_residual;
                diagnostics.primal_infeasibility = sol.primal_infeasibility;
                diagnostics.complementarity = sol.complementarity;
                diagnostics.message = sol.message.clone();
                self.previous_plan = Some(actions.clone());
                self.bundle(&problem, &sol.x, action, actions, diagnostics)
            }
            other => {
                let (status, iterations, message) = match other {
                    Ok(sol) => (sol.status, sol.iterations, sol.message),
                    Err(e) => (SolveStatus::NumericalFailure, 0, e.to_string()),
                };
                let actions = self.braking_sequence();
                let brake = actions[0];
                self.previous_plan = None;
                let x = problem.rollout(&actions).unwrap_or_default();
                let mut diagnostics = if x.is_empty() {
                    StepDiagnostics {
                        solve_time_ms: 0.0,
                        status,
                        iterations,
                        kkt_residual: f64::NAN,
                        primal_infeasibility: f64::NAN,
                        complementarity: f64::NAN,
                        weight_entropy: state.weights.entropy(),
                        min_predicted_clearance: f64::NAN,
                        fallback: true,
                        message: String::new(),
                    }
                } else {
                    self.diagnostics(&problem, &x, &start, true)
                };
                diagnostics.status = status;
                diagnostics.iterations = iterations;
                diagnostics.message = message;
                diagnostics.solve_time_ms = start.elapsed().as_secs_f64() * 1e3;
                if x.is_empty() {
                    MpcSolutionBundle {
                        action: brake,
                        actions,
                        robot_plan: vec![state.robot],
                        human_predictions: state.humans.iter().map(|h| vec![h.position]).collect(),
                        weights: vec![state.weights.as_slice().to_vec()],
                        lower_level: Vec::new(),
                        diagnostics,
                    }
                } else {
                    self.bundle(&problem, &x, brake, actions, diagnostics)
                }
            }
        };
        self.previous_action = bundle.action;
        Ok(bundle)
    }

    fn solve_from(
        &self,
        problem: &SicnavProblem,
        initial: &[RobotAction],
    ) -> Result<nlp::NlpSolution> {
        match self.config.strategy {
            SolveStrategy::Shooting => {
                optimize_actions(problem, initial, &self.config.solver).map(|s| nlp::NlpSolution {
                    x: s.x,
                    multipliers: Default::default(),
                    status: s.status,
                    objective: s.objective,
                    kkt_residual: s.kkt_residual,
                    primal_infeasibility: s.primal_infeasibility,
                    complementarity: s.complementarity,
                    rho: 0.0,
                    iterations: s.iterations,
                    solve_time_ms: 0.0,
                    message: s.message,
                    log: Vec::new(),
                })
            }
            SolveStrategy::FullSpace => problem
                .rollout(initial)
                .and_then(|x0| nlp::solve(problem, &x0, None, &self.config.solver)),
        }
    }

    /// Solves from the warm start. When that fails, or settles on a
    /// standstill away from the goal (a stationary point of the unicycle
    /// model), a braking guess and a turn-toward-goal guess are tried too
    /// and the acceptable solution with the lowest objective is kept.
    fn solve_multistart(
        &self,
        problem: &SicnavProblem,
        robot: &RobotState,
    ) -> Result<nlp::NlpSolution> {
        let first = self.solve_from(problem, &self.warm_start());
        let away = robot.position.distance(self.config.goal) > STANDSTILL_GOAL_DISTANCE;
        let settled = match &first {
            Ok(sol) if acceptable(sol) => {
                !(away
                    && problem
                        .actions(&sol.x)
                        .iter()
                        .all(|a| a.linear_velocity.abs() < STANDSTILL_SPEED))
            }
            _ => false,
        };
        if settled {
            return first;
        }
        let mut best = first;
        for initial in [self.braking_sequence(), self.turning_sequence(robot)] {
            let candidate = self.solve_from(problem, &initial);
            let better = match (&candidate, &best) {
                (Ok(c), Ok(b)) if acceptable(c) => !acceptable(b) || c.objective < b.objective,
                (Ok(c), Err(_)) => acceptable(c),
                _ => false,
            };
            if better {
                best = candidate;
            }
        }
        best
    }

    /// Maximal deceleration from the previous action.
    fn braking_sequence(&self) -> Vec<RobotAction> {
        let mut prev = self.previous_action;
        (0..self.config.horizon)
            .map(|_| {
                prev = braking_action(prev, &self.config.limits);
                prev
            })
            .collect()
    }

    /// Rotates toward the goal, then accelerates once roughly aligned.
    fn turning_sequence(&self, robot: &RobotState) -> Vec<RobotAction> {
        let dt = self.config.dt;
        let mut prev = self.previous_action;
        let mut state = *robot;
        (0..self.config.horizon)
            .map(|_| {
                let to_goal = self.config.goal - state.position;
                let error = wrap_angle(to_goal.y.atan2(to_goal.x) - state.heading);
                let speed = if error.abs() < TURN_ALIGNMENT {
                    self.config.limits.action_max.linear_velocity
                } else {
                    0.0
                };
                prev = self
                    .config
                    .limits
                    .clamp(RobotAction::new(speed, error / dt), prev);
                state = unicycle_step(&state, &prev, dt).unwrap_or(state);
                prev
            })
            .collect()
    }

    fn diagnostics(
        &self,
        problem: &SicnavProblem,
        x: &[f64],
        start: &Instant,
        fallback: bool,
    ) -> StepDiagnostics {
        let weights = problem.weight_trajectory(x);
        let entropy = weights
            .last()
            .and_then(|w| WeightVector::new(w.clone()).ok())
            .map_or(0.0, |w| w.entropy());
        StepDiagnostics {
            solve_time_ms: start.elapsed().as_secs_f64() * 1e3,
            status: SolveStatus::Converged,
            iterations: 0,
            kkt_residual: f64::NAN,
            primal_infeasibility: f64::NAN,
            complementarity: f64::NAN,
            weight_entropy: entropy,
            min_predicted_clearance: problem.min_clearance(x),
            fallback,
            message: String::new(),
        }
    }

    fn bundle(
        &self,
        problem: &SicnavProblem,
        x: &[f64],
        action: RobotAction,
        actions: Vec<RobotAction>,
        diagnostics: StepDiagnostics,
    ) -> MpcSolutionBundle {
        MpcSolutionBundle {
            action,
            actions,
            robot_plan: problem.robot_trajectory(x),
            human_predictions: problem.human_trajectories(x),
            weights: problem.weight_trajectory(x),
            lower_level: problem.lower_level(x),
            diagnostics,
        }
    }
}

fn acceptable(sol: &nlp::NlpSolution) -> bool {
    if sol.x.iter().any(|v| !v.is_finite()) {
        return false;
    }
    match sol.status {
        SolveStatus::Converged => true,
        SolveStatus::MaxIter | SolveStatus::BudgetExhausted => {
            sol.primal_infeasibility <= ACCEPT_INFEASIBILITY
                && sol.complementarity <= ACCEPT_COMPLEMENTARITY
        }
        SolveStatus::Infeasible | SolveStatus::NumericalFailure => false,
    }
}
