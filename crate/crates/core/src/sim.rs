//! Closed-loop corridor simulator with randomized ORCA humans.
//!
//! Humans are holonomic ORCA agents with attributes the robot cannot
//! observe (radius buffer, avoidance horizon, speed). Each episode runs at
//! the planner step: predict, plan, step the world, record events.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{point_segment_distance, Segment, Vec2};
use crate::mpc::{Controller, MpcConfig};
use crate::nlp::SolveStatus;
use crate::orca::{
    agent_halfplane, obstacle_halfplane, solve_orca_qp, OrcaParams, OrcaPlanes, PairParams,
};
use crate::prediction::{
    cvg_predict, cvmm_predict, mixture_predict, ExternalPredictor, HistoryWindow, MixtureMode,
    SampleSet, TrajectorySample,
};
use crate::state::{
    integrator_step, unicycle_step, HumanState, RobotAction, RobotState, SystemState, WeightVector,
};

pub const CORRIDOR_WIDTH: f64 = 1.75;
pub const CORRIDOR_LENGTH: f64 = 9.0;
pub const HUMAN_RADIUS: f64 = 0.3;
/// The robot has arrived when its centre is this close to the goal.
pub const GOAL_TOLERANCE: f64 = 0.3;
/// Speeds below this count as frozen while away from the goal.
pub const FREEZE_SPEED: f64 = 0.05;
pub const EPISODE_TIMEOUT: f64 = 30.0;
/// Horizon of the human wall constraints.
const WALL_HORIZON: f64 = 1.0;
/// Rejection-sampling attempts per human before giving up on a seed.
const PLACEMENT_ATTEMPTS: usize = 1000;

/// Per-human parameters, none of which the robot observes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HumanAttributes {
    pub radius: f64,
    /// Inflation the human keeps from others on top of its radius.
    pub radius_buffer: f64,
    pub orca_time_horizon: f64,
    pub goal: Vec2,
    pub max_speed: f64,
    pub preferred_speed: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HumanSpawn {
    pub start: Vec2,
    pub attributes: HumanAttributes,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub seed: u64,
    pub width: f64,
    pub length: f64,
    pub walls: Vec<Segment>,
    pub robot_start: RobotState,
    pub robot_goal: Vec2,
    pub humans: Vec<HumanSpawn>,
    pub timeout: f64,
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        self.robot_start.validate()?;
        if !(self.timeout > 0.0) || !self.robot_goal.is_finite() {
            return Err(Error::InvalidConfig(
                "scenario needs a finite goal and a positive timeout".into(),
            ));
        }
        for h in &self.humans {
            let a = &h.attributes;
            let ok = a.radius > 0.0
                && a.radius_buffer >= 0.0
                && a.orca_time_horizon > 0.0
                && a.max_speed > 0.0
                && a.preferred_speed > 0.0
                && h.start.is_finite()
                && a.goal.is_finite();
            if !ok {
                return Err(Error::InvalidConfig(format!(
                    "invalid human attributes {a:?}"
                )));
            }
        }
        Ok(())
    }

    /// Copies the goal and walls into a planner configuration.
    pub fn mpc_config(&self, base: &MpcConfig) -> MpcConfig {
        MpcConfig {
            goal: self.robot_goal,
            obstacles: self.walls.clone(),
            ..base.clone()
        }
    }
}

/// Random corridor scene: the robot crosses from one end to the other while
/// humans enter at either end and walk out through the opposite one.
pub fn generate_corridor(seed: u64, num_humans: usize) -> Result<ScenarioConfig> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let half = 0.5 * CORRIDOR_WIDTH;
    let walls = vec![
        Segment::new(Vec2::new(0.0, -half), Vec2::new(CORRIDOR_LENGTH, -half))?,
        Segment::new(Vec2::new(0.0, half), Vec2::new(CORRIDOR_LENGTH, half))?,
    ];
    let robot_start = RobotState::new(Vec2::new(0.5, 0.0), 0.0, 0.0)?;
    let robot_goal = Vec2::new(CORRIDOR_LENGTH - 0.5, 0.0);
    let robot_clearance = 0.3 + HUMAN_RADIUS + 0.3;

    let mut humans: Vec<HumanSpawn> = Vec::with_capacity(num_humans);
    for _ in 0..num_humans {
        let radius_buffer = rng.gen_range(0.0..=0.1);
        let orca_time_horizon = rng.gen_range(1.0..=5.0);
        let max_speed = rng.gen_range(0.8..=1.4);
        let from_far_end = rng.gen_bool(0.5);
        let lateral = half - HUMAN_RADIUS - radius_buffer;
        let mut placed = None;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let x = if from_far_end {
                rng.gen_range(CORRIDOR_LENGTH - 3.0..=CORRIDOR_LENGTH - 1.0)
            } else {
                rng.gen_range(1.5..=3.5)
            };
            let start = Vec2::new(x, rng.gen_range(-lateral..=lateral));
            let clear_of_robot = start.distance(robot_start.position) >= robot_clearance;
            let clear_of_humans = humans.iter().all(|h| {
                start.distance(h.start)
                    >= HUMAN_RADIUS
                        + radius_buffer
                        + h.attributes.radius
                        + h.attributes.radius_buffer
            });
            if clear_of_robot && clear_of_humans {
                placed = Some(start);
                break;
            }
        }
        let start = placed
            .ok_or_else(|| Error::InfeasibleGeometry(format!("seed {seed}: cannot place human")))?;
        let jitter = rng.gen_range(-0.4..=0.4);
        let goal_x = if from_far_end {
            -1.5
        } else {
            CORRIDOR_LENGTH + 1.5
        };
        humans.push(HumanSpawn {
            start,
            attributes: HumanAttributes {
                radius: HUMAN_RADIUS,
                radius_buffer,
                orca_time_horizon,
                goal: Vec2::new(goal_x, (start.y + jitter).clamp(-lateral, lateral)),
                max_speed,
                preferred_speed: max_speed,
            },
        });
    }
    Ok(ScenarioConfig {
        seed,
        width: CORRIDOR_WIDTH,
        length: CORRIDOR_LENGTH,
        walls,
        robot_start,
        robot_goal,
        humans,
        timeout: EPISODE_TIMEOUT,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub time: f64,
    pub robot: RobotState,
    pub robot_radius: f64,
    pub humans: Vec<HumanState>,
    pub attributes: Vec<HumanAttributes>,
    pub walls: Vec<Segment>,
}

impl World {
    /// Initial world; humans start at their preferred velocity.
    pub fn new(scenario: &ScenarioConfig, robot_radius: f64, dt: f64) -> Result<Self> {
        scenario.validate()?;
        let humans = scenario
            .humans
            .iter()
            .map(|h| HumanState::new(h.start, preferred_velocity(h.start, &h.attributes, dt)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            time: 0.0,
            robot: scenario.robot_start,
            robot_radius,
            humans,
            attributes: scenario
                .humans
                .iter()
                .map(|h| h.attributes.clone())
                .collect(),
            walls: scenario.walls.clone(),
        })
    }

    pub fn human_positions(&self) -> Vec<Vec2> {
        self.humans.iter().map(|h| h.position).collect()
    }

    /// True when the robot overlaps a human (true radii) or a wall.
    pub fn robot_in_collision(&self) -> bool {
        let p = self.robot.position;
        self.humans
            .iter()
            .zip(&self.attributes)
            .any(|(h, a)| p.distance(h.position) < self.robot_radius + a.radius)
            || self
                .walls
                .iter()
                .any(|w| point_segment_distance(p, w) < self.robot_radius)
    }
}

/// Straight toward the goal at the preferred speed, slowing to land on it.
fn preferred_velocity(position: Vec2, attributes: &HumanAttributes, dt: f64) -> Vec2 {
    let d = attributes.goal - position;
    let dist = d.norm();
    if dist == 0.0 {
        return Vec2::ZERO;
    }
    d.scale(attributes.preferred_speed.min(dist / dt) / dist)
}

/// ORCA velocity of human `j` against the other humans, the robot (seen
/// through its position and velocity only) and the walls.
fn human_velocity(world: &World, j: usize, dt: f64) -> Vec2 {
    let me = &world.humans[j];
    let attr = &world.attributes[j];
    let own = attr.radius + attr.radius_buffer;
    let pair = |other_radius: f64| PairParams {
        combined_radius: own + other_radius,
        time_horizon: attr.orca_time_horizon,
        responsibility: 0.5,
        time_step: dt,
    };
    let mut planes = OrcaPlanes::default();
    for (k, other) in world.humans.iter().enumerate().filter(|(k, _)| *k != j) {
        if let Ok(hp) = agent_halfplane(
            me.position,
            me.velocity,
            other.position,
            other.velocity,
            &pair(world.attributes[k].radius),
        ) {
            planes.agents.push(hp);
        }
    }
    if let Ok(hp) = agent_halfplane(
        me.position,
        me.velocity,
        world.robot.position,
        world.robot.velocity(),
        &pair(world.robot_radius),
    ) {
        planes.agents.push(hp);
    }
    for wall in &world.walls {
        if let Ok(hp) = obstacle_halfplane(me.position, wall, own, WALL_HORIZON) {
            planes.obstacles.push(hp);
        }
    }
    let params = OrcaParams {
        time_horizon: attr.orca_time_horizon,
        time_horizon_obstacles: WALL_HORIZON,
        responsibility: 0.5,
        max_speed: attr.max_speed,
        ..OrcaParams::default()
    };
    match solve_orca_qp(&planes, preferred_velocity(me.position, attr, dt), &params) {
        Ok(sol) => sol.velocity,
        Err(_) => Vec2::ZERO,
    }
}

/// Advances the robot under `action` and every human under its ORCA
/// velocity, all computed from the same pre-step state.
pub fn step_world(world: &World, action: RobotAction, dt: f64) -> Result<World> {
    let velocities: Vec<Vec2> = (0..world.humans.len())
        .map(|j| human_velocity(world, j, dt))
        .collect();
    let humans = world
        .humans
        .iter()
        .zip(velocities)
        .map(|(h, v)| integrator_step(h, v, dt))
        .collect::<Result<Vec<_>>>()?;
    Ok(World {
        time: world.time + dt,
        robot: unicycle_step(&world.robot, &action, dt)?,
        humans,
        ..world.clone()
    })
}

/// Source of joint prediction samples for the controller.
pub trait Predictor {
    fn predict(&mut self, history: &HistoryWindow, horizon: usize) -> Result<SampleSet>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictorKind {
    Cvg,
    Cvmm,
    Mixture,
}

/// Built-in predictors; the mixture is seeded per episode.
#[derive(Clone, Debug)]
pub struct BuiltinPredictor {
    pub kind: PredictorKind,
    pub num_samples: usize,
    pub modes: Vec<MixtureMode>,
    pub noise_scale: f64,
    rng: ChaCha8Rng,
}

impl BuiltinPredictor {
    pub fn new(kind: PredictorKind, num_samples: usize, seed: u64) -> Self {
        Self {
            kind,
            num_samples,
            modes: default_modes(),
            noise_scale: 0.05,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

/// Straight on, veering left and veering right.
pub fn default_modes() -> Vec<MixtureMode> {
    vec![
        MixtureMode {
            goal_direction: 0.0,
            probability: 0.5,
        },
        MixtureMode {
            goal_direction: 0.5,
            probability: 0.25,
        },
        MixtureMode {
            goal_direction: -0.5,
            probability: 0.25,
        },
    ]
}

impl Predictor for BuiltinPredictor {
    fn predict(&mut self, history: &HistoryWindow, horizon: usize) -> Result<SampleSet> {
        match self.kind {
            PredictorKind::Cvg => cvg_predict(history, horizon, self.num_samples),
            PredictorKind::Cvmm => cvmm_predict(history, horizon, self.num_samples),
            PredictorKind::Mixture => mixture_predict(
                history,
                horizon,
                self.num_samples,
                &self.modes,
                self.noise_scale,
                &mut self.rng,
            ),
        }
    }
}

/// [`ExternalPredictor`] with a fixed sample count.
#[derive(Clone, Debug)]
pub struct RemotePredictor {
    pub client: ExternalPredictor,
    pub num_samples: usize,
}

impl Predictor for RemotePredictor {
    fn predict(&mut self, history: &HistoryWindow, horizon: usize) -> Result<SampleSet> {
        self.client.predict(history, horizon, self.num_samples)
    }
}

/// One simulator step as written to traces.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// Simulation time after the step.
    pub time: f64,
    pub robot: RobotState,
    pub humans: Vec<HumanState>,
    pub action: RobotAction,
    pub status: SolveStatus,
    pub fallback: bool,
    /// Predictions were reused from an earlier step.
    pub stale_predictions: bool,
    pub collision: bool,
    pub frozen: bool,
    pub goal_reached: bool,
    /// Wall-clock planning time; the only non-deterministic field.
    pub solve_time_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub seed: u64,
    pub success: bool,
    /// Arrival time, or the timeout when the goal was not reached.
    pub navigation_time: f64,
    pub collision_steps: usize,
    pub frozen_steps: usize,
    pub total_steps: usize,
    pub time_step: f64,
    pub trace: Vec<StepRecord>,
}

impl EpisodeResult {
    /// Rebuilds the episode counts from its step records.
    pub fn from_trace(seed: u64, time_step: f64, timeout: f64, trace: Vec<StepRecord>) -> Self {
        let success = trace.last().is_some_and(|r| r.goal_reached);
        Self {
            seed,
            success,
            navigation_time: match trace.last() {
                Some(r) if success => r.time,
                _ => timeout,
            },
            collision_steps: trace.iter().filter(|r| r.collision).count(),
            frozen_steps: trace.iter().filter(|r| r.frozen).count(),
            total_steps: trace.len(),
            time_step,
            trace,
        }
    }

    /// Reads a JSON-lines trace; blank lines are skipped.
    pub fn parse_trace(text: &str) -> Result<Vec<StepRecord>> {
        text.lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                serde_json::from_str(l).map_err(|e| Error::Parse {
                    line: i + 1,
                    message: e.to_string(),
                })
            })
            .collect()
    }

    /// Copy with wall-clock timings zeroed, for determinism checks.
    pub fn without_timing(&self) -> Self {
        let mut out = self.clone();
        out.trace.iter_mut().for_each(|r| r.solve_time_ms = 0.0);
        out
    }

    /// Summary without the trace.
    pub fn summary(&self) -> Self {
        Self {
            trace: Vec::new(),
            ..self.clone()
        }
    }

    /// Trace as JSON lines, one per step.
    pub fn trace_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.trace {
            out.push_str(&serde_json::to_string(r).expect("trace records serialize"));
            out.push('\n');
        }
        out
    }

    pub fn solve_times_ms(&self) -> Vec<f64> {
        self.trace.iter().map(|r| r.solve_time_ms).collect()
    }
}

/// What the episode loop needs from a controller.
pub trait Policy {
    /// Planner step; the simulation advances by the same amount.
    fn time_step(&self) -> f64;
    /// Prediction horizon in steps.
    fn horizon(&self) -> usize;
    fn robot_radius(&self) -> f64;
    /// Rejects scenarios the policy was not configured for.
    fn check_scenario(&self, _scenario: &ScenarioConfig) -> Result<()> {
        Ok(())
    }
    fn reset(&mut self);
    fn act(&mut self, measured: &SystemState, samples: &SampleSet) -> Result<PolicyStep>;
}

/// Action and solver report of one policy call.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyStep {
    pub action: RobotAction,
    pub status: SolveStatus,
    pub fallback: bool,
    pub solve_time_ms: f64,
}

impl Policy for Controller {
    fn time_step(&self) -> f64 {
        self.config().dt
    }

    fn horizon(&self) -> usize {
        self.config().horizon
    }

    fn robot_radius(&self) -> f64 {
        self.config().robot_radius
    }

    fn check_scenario(&self, scenario: &ScenarioConfig) -> Result<()> {
        let config = self.config();
        if config.goal != scenario.robot_goal || config.obstacles != scenario.walls {
            return Err(Error::InvalidConfig(
                "controller goal and walls must match the scenario".into(),
            ));
        }
        Ok(())
    }

    fn reset(&mut self) {
        Controller::reset(self)
    }

    fn act(&mut self, measured: &SystemState, samples: &SampleSet) -> Result<PolicyStep> {
        let bundle = self.control_step(measured, samples)?;
        Ok(PolicyStep {
            action: bundle.action,
            status: bundle.diagnostics.status,
            fallback: bundle.diagnostics.fallback,
            solve_time_ms: bundle.diagnostics.solve_time_ms,
        })
    }
}

/// Runs one closed-loop episode at the policy's time step. A
/// [`Controller`]'s goal and walls must match the scenario (see
/// [`ScenarioConfig::mpc_config`]).
pub fn run_episode(
    scenario: &ScenarioConfig,
    controller: &mut dyn Policy,
    predictor: &mut dyn Predictor,
) -> Result<EpisodeResult> {
    controller.check_scenario(scenario)?;
    let dt = controller.time_step();
    let horizon = controller.horizon();
    let n = scenario.humans.len();
    controller.reset();
    let mut world = World::new(scenario, controller.robot_radius(), dt)?;
    let mut history = HistoryWindow::new(n, dt, horizon as f64 * dt)?;
    // one step of back-history so the first velocity estimate is defined
    let before: Vec<Vec2> = world
        .humans
        .iter()
        .map(|h| h.position - dt * h.velocity)
        .collect();
    history.push(-dt, world.robot, &before)?;
    history.push(0.0, world.robot, &world.human_positions())?;

    let max_steps = (scenario.timeout / dt - 1e-9).ceil() as usize;
    let mut last_samples: Option<SampleSet> = None;
    let mut trace = Vec::with_capacity(max_steps);
    for _ in 0..max_steps {
        let (samples, stale) = if n == 0 {
            (
                SampleSet {
                    samples: Vec::new(),
                    dt,
                    stamp: world.time,
                },
                false,
            )
        } else {
            match predictor.predict(&history, horizon) {
                Ok(s) => (s, false),
                Err(e) => match &last_samples {
                    Some(prev) => (prev.shifted(1), true),
                    None => return Err(e),
                },
            }
        };
        let measured = SystemState {
            robot: world.robot,
            humans: world.humans.clone(),
            weights: WeightVector::uniform(samples.len().max(1))?,
        };
        let step = controller.act(&measured, &samples)?;
        world = step_world(&world, step.action, dt)?;
        let at_goal = world.robot.position.distance(scenario.robot_goal) <= GOAL_TOLERANCE;
        trace.push(StepRecord {
            time: world.time,
            robot: world.robot,
            humans: world.humans.clone(),
            action: step.action,
            status: step.status,
            fallback: step.fallback,
            stale_predictions: stale,
            collision: world.robot_in_collision(),
            frozen: !at_goal && world.robot.speed.abs() < FREEZE_SPEED,
            goal_reached: at_goal,
            solve_time_ms: step.solve_time_ms,
        });
        if n > 0 {
            last_samples = Some(samples);
        }
        history.push(world.time, world.robot, &world.human_positions())?;
        if at_goal {
            break;
        }
    }
    Ok(EpisodeResult::from_trace(
        scenario.seed,
        dt,
        scenario.timeout,
        trace,
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub episodes: usize,
    pub success_rate: f64,
    /// Mean arrival time over successful episodes; the timeout when there
    /// are none (see `avg_nav_time_defined`).
    pub avg_nav_time: f64,
    pub avg_nav_time_defined: bool,
    /// Collision steps per simulated second.
    pub collision_freq: f64,
    /// Frozen steps per simulated second.
    pub frozen_freq: f64,
}

pub fn aggregate_metrics(results: &[EpisodeResult]) -> Result<Metrics> {
    if results.is_empty() {
        return Err(Error::InvalidConfig("no episodes to aggregate".into()));
    }
    let successes: Vec<&EpisodeResult> = results.iter().filter(|r| r.success).collect();
    let seconds: f64 = results
        .iter()
        .map(|r| r.total_steps as f64 * r.time_step)
        .sum();
    let per_second = |count: usize| {
        if seconds > 0.0 {
            count as f64 / seconds
        } else {
            0.0
        }
    };
    let timeout = results
        .iter()
        .map(|r| r.navigation_time)
        .fold(0.0, f64::max);
    Ok(Metrics {
        episodes: results.len(),
        success_rate: successes.len() as f64 / results.len() as f64,
        avg_nav_time: if successes.is_empty() {
            timeout
        } else {
            successes.iter().map(|r| r.navigation_time).sum::<f64>() / successes.len() as f64
        },
        avg_nav_time_defined: !successes.is_empty(),
        collision_freq: per_second(results.iter().map(|r| r.collision_steps).sum()),
        frozen_freq: per_second(results.iter().map(|r| r.frozen_steps).sum()),
    })
}

/// Scripted head-on encounter in a corridor with a bimodal prediction:
/// the oncoming human either drifts toward +y or toward -y. The robot
/// starts slightly on the -y side, so the +y mode is the one that leaves
/// room to pass.
#[derive(Clone, Debug, PartialEq)]
pub struct TwoModeEncounter {
    pub state: SystemState,
    pub samples: SampleSet,
    pub previous_action: RobotAction,
    pub config: MpcConfig,
    /// Per sample: true for the +y mode.
    pub positive_mode: Vec<bool>,
}

pub fn two_mode_encounter() -> Result<TwoModeEncounter> {
    let half = 0.5 * CORRIDOR_WIDTH;
    let config = MpcConfig {
        goal: Vec2::new(6.0, 0.0),
        obstacles: vec![
            Segment::new(Vec2::new(-1.0, -half), Vec2::new(10.0, -half))?,
            Segment::new(Vec2::new(-1.0, half), Vec2::new(10.0, half))?,
        ],
        ..MpcConfig::default()
    };
    let dt = config.dt;
    let horizon = config.horizon;
    let human = HumanState::new(Vec2::new(2.5, 0.0), Vec2::new(-0.8, 0.0))?;
    let num_samples = 9;
    let positive_mode: Vec<bool> = (0..num_samples).map(|s| s < 5).collect();
    let samples = positive_mode
        .iter()
        .enumerate()
        .map(|(s, &positive)| {
            let side = if positive { 1.0 } else { -1.0 };
            let spread = 0.03 * ((s % 3) as f64 - 1.0);
            let path = (1..=horizon)
                .map(|k| {
                    let along = human.position.x + human.velocity.x * dt * k as f64;
                    let drift = side * 0.45 * (k as f64 / 4.0).min(1.0) + spread;
                    Vec2::new(along, human.position.y + drift)
                })
                .collect();
            TrajectorySample::new(vec![path])
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TwoModeEncounter {
        state: SystemState {
            robot: RobotState::new(Vec2::new(0.0, -0.15), 0.0, 0.5)?,
            humans: vec![human],
            weights: WeightVector::uniform(num_samples)?,
        },
        samples: SampleSet::new(samples, dt, 0.0)?,
        previous_action: RobotAction::new(0.5, 0.0),
        config,
        positive_mode,
    })
}
