//! Single-level NLP for the bilevel planning problem.
//!
//! Decision vector, in storage order:
//!
//! ```text
//!   r_0 (x, y, heading, speed), p_0 (2N), q (2N, human velocities at 0), w_0 (S')
//!   for t in 0..T:
//!     u_t (v, omega)
//!     per human j: v (2), s, mu, lambda (m)
//!     r_{t+1}, p_{t+1}, w_{t+1} (only while t + 1 < T)
//! ```
//!
//! `S'` counts distinct joint samples; identical samples are merged and
//! their weights summed, and with a single distinct sample the weight
//! variables disappear. In frozen mode only `r` and `u` remain and the
//! humans follow the weighted sample mean.
//!
//! Human `j` at step `t` solves the relaxed ORCA QP against the other
//! humans, the robot and the walls. Its KKT system enters as stationarity
//! equalities (defining `v` and `s`), primal inequalities, bounds on the
//! multipliers, and complementarity pairs. The slack needs no sign
//! constraint: stationarity gives `s = sum(lambda_agent) / (2P) >= 0`, so
//! its bound and multiplier are dropped, which removes a pair that would
//! be biactive whenever no relaxation is needed.

use std::cell::RefCell;
use std::rc::Rc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::ad::{Dual, Real};
use crate::error::{Error, Result};
use crate::geometry::{closest_point, Vec2};
use crate::nlp::{CompSide, ComplementarityPair, NlpProblem, RowMatrix};
use crate::orca::{
    agent_halfplane, obstacle_halfplane, solve_orca_qp, HalfPlane, OrcaPlanes, PairParams,
};
use crate::prediction::SampleSet;
use crate::refine::weight_update_with_jacobian;
use crate::state::{RobotAction, RobotState, SystemState};

use super::MpcConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanningMode {
    Bilevel,
    FrozenPredictions,
}

/// Lower-level solution of one human at one step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HumanStepDuals {
    pub velocity: Vec2,
    pub lambda: Vec<f64>,
    pub disc: f64,
    pub slack: f64,
}

#[derive(Clone, Copy, Debug)]
struct LowerIdx {
    v: usize,
    s: usize,
    mu: usize,
    lambda: usize,
}

/// First constraint row of each block, per step.
#[derive(Clone, Debug, Default)]
struct RowOffsets {
    /// Inequality rows: four rate limits.
    rate: Vec<usize>,
    /// Equality rows `[t][j]`: stationarity in `v` (2) and in `s`.
    stationarity: Vec<Vec<usize>>,
    /// Inequality rows `[t][j]`: one per half-plane, then the disc.
    planes: Vec<Vec<usize>>,
    human_dynamics: Vec<usize>,
    robot_dynamics: Vec<usize>,
    weight_dynamics: Vec<usize>,
    /// Inequality rows: humans, then walls.
    collision: Vec<usize>,
}

const NONE: usize = usize::MAX;
type D8 = Dual<8>;

/// Half-plane value with derivatives w.r.t. up to eight variables.
struct PlaneEval {
    normal: Vec2,
    offset: f64,
    dn: [[f64; 8]; 2],
    db: [f64; 8],
    vars: [usize; 8],
    agent: bool,
}

struct Evaluated {
    eq: Vec<f64>,
    jeq: RowMatrix,
    ineq: Vec<f64>,
    jin: RowMatrix,
}

/// The assembled NLP; implements [`NlpProblem`].
pub struct SicnavProblem {
    config: MpcConfig,
    mode: PlanningMode,
    num_humans: usize,
    num_planes: usize,
    /// `steps[k][s][j]`: distinct sample `s`, human `j`, future step `k + 1`.
    steps: Vec<Vec<Vec<Vec2>>>,
    groups: Vec<Vec<usize>>,
    init_robot: RobotState,
    init_positions: Vec<Vec2>,
    init_velocities: Vec<Vec2>,
    init_weights: Vec<f64>,
    previous_action: RobotAction,
    /// Frozen-mode human positions `[k][j]`, `k = 0..=T`.
    frozen: Vec<Vec<Vec2>>,
    n: usize,
    neq: usize,
    nin: usize,
    r: Vec<usize>,
    u: Vec<usize>,
    p: Vec<usize>,
    q: usize,
    w: Vec<usize>,
    lower: Vec<Vec<LowerIdx>>,
    rows: RowOffsets,
    pairs: Vec<ComplementarityPair>,
    lower_bounds: Vec<f64>,
    upper_bounds: Vec<f64>,
    cache: RefCell<Option<(Vec<f64>, Rc<Evaluated>)>>,
}

/// Builds the single-level problem for one planning step. `state.weights`
/// must hold one weight per sample of `samples`.
pub fn assemble(
    state: &SystemState,
    samples: &SampleSet,
    previous_action: RobotAction,
    config: &MpcConfig,
    mode: PlanningMode,
) -> Result<SicnavProblem> {
    SicnavProblem::new(state, samples, previous_action, config, mode)
}

impl SicnavProblem {
    fn new(
        state: &SystemState,
        samples: &SampleSet,
        previous_action: RobotAction,
        config: &MpcConfig,
        mode: PlanningMode,
    ) -> Result<Self> {
        config.validate()?;
        state.robot.validate()?;
        let nh = state.num_humans();
        let horizon = config.horizon;
        if nh > 0 {
            if samples.num_humans() != nh {
                return Err(Error::DimensionMismatch(format!(
                    "samples cover {} humans, state has {nh}",
                    samples.num_humans()
                )));
            }
            if samples.horizon() < horizon {
                return Err(Error::DimensionMismatch(format!(
                    "samples cover {} steps, horizon is {horizon}",
                    samples.horizon()
                )));
            }
            if (samples.dt - config.dt).abs() > 1e-9 {
                return Err(Error::DimensionMismatch(format!(
                    "sample spacing {} differs from planner step {}",
                    samples.dt, config.dt
                )));
            }
            if state.weights.len() != samples.len() {
                return Err(Error::DimensionMismatch(format!(
                    "{} weights for {} samples",
                    state.weights.len(),
                    samples.len()
                )));
            }
        }
        if state
            .humans
            .iter()
            .any(|h| !(h.position.is_finite() && h.velocity.is_finite()))
        {
            return Err(Error::InvalidState("non-finite human state".into()));
        }

        // merge identical joint samples
        let mut groups: Vec<Vec<usize>> = Vec::new();
        if nh > 0 {
            for (i, s) in samples.samples.iter().enumerate() {
                let same = |g: &Vec<usize>| {
                    let o = &samples.samples[g[0]];
                    (0..nh).all(|j| o.positions[j][..horizon] == s.positions[j][..horizon])
                };
                match groups.iter_mut().find(|g| same(g)) {
                    Some(g) => g.push(i),
                    None => groups.push(vec![i]),
                }
            }
        }
        let steps: Vec<Vec<Vec<Vec2>>> = (0..horizon)
            .map(|k| {
                groups
                    .iter()
                    .map(|g| {
                        (0..nh)
                            .map(|j| samples.samples[g[0]].positions[j][k])
                            .collect()
                    })
                    .collect()
            })
            .collect();
        let init_weights: Vec<f64> = groups
            .iter()
            .map(|g| g.iter().map(|&i| state.weights.as_slice()[i]).sum())
            .collect();
        let sw = if init_weights.len() >= 2 {
            init_weights.len()
        } else {
            0
        };
        config.refine.validate(sw.max(1))?;

        let frozen = if mode == PlanningMode::FrozenPredictions && nh > 0 {
            let mut f = vec![state.humans.iter().map(|h| h.position).collect::<Vec<_>>()];
            for k in 0..horizon {
                f.push(
                    (0..nh)
                        .map(|j| {
                            steps[k]
                                .iter()
                                .zip(&init_weights)
                                .fold(Vec2::ZERO, |acc, (row, w)| acc + *w * row[j])
                        })
                        .collect(),
                );
            }
            f
        } else {
            Vec::new()
        };

        let bilevel = mode == PlanningMode::Bilevel && nh > 0;
        let num_planes = if bilevel {
            nh - 1 + 1 + config.obstacles.len()
        } else {
            0
        };
        let mut n = 0;
        let mut alloc = |k: usize| {
            let start = n;
            n += k;
            start
        };
        let mut r = vec![alloc(4)];
        let mut p = Vec::new();
        let mut w = Vec::new();
        let mut q = NONE;
        if bilevel {
            p.push(alloc(2 * nh));
            q = alloc(2 * nh);
            w.push(if sw > 0 { alloc(sw) } else { NONE });
        }
        let mut u = Vec::new();
        let mut lower = Vec::new();
        for t in 0..horizon {
            u.push(alloc(2));
            if bilevel {
                lower.push(
                    (0..nh)
                        .map(|_| LowerIdx {
                            v: alloc(2),
                            s: alloc(1),
                            mu: alloc(1),
                            lambda: alloc(num_planes),
                        })
                        .collect::<Vec<_>>(),
                );
            }
            r.push(alloc(4));
            if bilevel {
                p.push(alloc(2 * nh));
                if t + 1 < horizon {
                    w.push(if sw > 0 { alloc(sw) } else { NONE });
                }
            }
        }

        let mut lb = vec![f64::NEG_INFINITY; n];
        let mut ub = vec![f64::INFINITY; n];
        let lim = &config.limits;
        for &ut in &u {
            lb[ut] = lim.action_min.linear_velocity;
            ub[ut] = lim.action_max.linear_velocity;
            lb[ut + 1] = lim.action_min.angular_velocity;
            ub[ut + 1] = lim.action_max.angular_velocity;
        }
        for li in lower.iter().flatten() {
            lb[li.mu] = 0.0;
            for i in 0..num_planes {
                lb[li.lambda + i] = 0.0;
            }
        }

        // row offsets, mirroring `compute`
        let mut rows = RowOffsets::default();
        let mut neq = 4;
        if bilevel {
            neq += 4 * nh + sw;
        }
        let mut pairs = Vec::new();
        let mut nin = 0;
        for t in 0..horizon {
            rows.rate.push(nin);
            nin += 4;
            if bilevel {
                let mut stat = Vec::with_capacity(nh);
                let mut planes = Vec::with_capacity(nh);
                for li in &lower[t] {
                    stat.push(neq);
                    neq += 3;
                    planes.push(nin);
                    for i in 0..num_planes {
                        pairs.push(ComplementarityPair {
                            a: CompSide::Variable(li.lambda + i),
                            b: CompSide::Inequality(nin + i),
                        });
                    }
                    pairs.push(ComplementarityPair {
                        a: CompSide::Variable(li.mu),
                        b: CompSide::Inequality(nin + num_planes),
                    });
                    nin += num_planes + 1;
                }
                rows.stationarity.push(stat);
                rows.planes.push(planes);
                rows.human_dynamics.push(neq);
                neq += 2 * nh;
            }
            rows.robot_dynamics.push(neq);
            neq += 4;
            if bilevel && sw > 0 && t + 1 < horizon {
                rows.weight_dynamics.push(neq);
                neq += sw;
            }
            rows.collision.push(nin);
            nin += nh + config.obstacles.len();
        }

        Ok(Self {
            config: config.clone(),
            mode,
            num_humans: nh,
            num_planes,
            steps,
            groups,
            init_robot: state.robot,
            init_positions: state.humans.iter().map(|h| h.position).collect(),
            init_velocities: state.humans.iter().map(|h| h.velocity).collect(),
            init_weights,
            previous_action,
            frozen,
            n,
            neq,
            nin,
            r,
            u,
            p,
            q,
            w,
            lower,
            rows,
            pairs,
            lower_bounds: lb,
            upper_bounds: ub,
            cache: RefCell::new(None),
        })
    }

    pub fn mode(&self) -> PlanningMode {
        self.mode
    }

    pub fn num_humans(&self) -> usize {
        self.num_humans
    }

    /// Number of distinct joint samples.
    pub fn num_distinct_samples(&self) -> usize {
        self.groups.len()
    }

    pub fn config(&self) -> &MpcConfig {
        &self.config
    }

    fn bilevel(&self) -> bool {
        !self.lower.is_empty()
    }

    fn weight_count(&self) -> usize {
        if self.w.first().is_some_and(|&i| i != NONE) {
            self.groups.len()
        } else {
            0
        }
    }

    fn weights_at(&self, x: &[f64], t: usize) -> Vec<f64> {
        match self.w.get(t) {
            Some(&i) if i != NONE => x[i..i + self.groups.len()].to_vec(),
            _ => vec![1.0],
        }
    }

    fn human_pos(&self, x: &[f64], t: usize, j: usize) -> Vec2 {
        if self.bilevel() {
            let i = self.p[t] + 2 * j;
            Vec2::new(x[i], x[i + 1])
        } else {
            self.frozen[t][j]
        }
    }

    fn human_vel_index(&self, t: usize, j: usize) -> usize {
        if t == 0 {
            self.q + 2 * j
        } else {
            self.lower[t - 1][j].v
        }
    }

    fn pair(&self, combined_radius: f64) -> PairParams {
        PairParams {
            combined_radius,
            time_horizon: self.config.orca.time_horizon,
            responsibility: self.config.orca.responsibility,
            time_step: self.config.dt,
        }
    }

    /// Half-planes of human `j` at step `t`: other humans, the robot, walls.
    fn planes(&self, x: &[f64], t: usize, j: usize) -> Vec<PlaneEval> {
        let nh = self.num_humans;
        let seed = |vals: [f64; 8], active: [bool; 8]| -> [D8; 8] {
            let mut out = [D8::constant(0.0); 8];
            for k in 0..8 {
                out[k] = if active[k] {
                    D8::variable(vals[k], k)
                } else {
                    D8::constant(vals[k])
                };
            }
            out
        };
        let pi = self.p[t] + 2 * j;
        let vi = self.human_vel_index(t, j);
        let mut out = Vec::with_capacity(self.num_planes);
        let nan_plane = |vars: [usize; 8], agent: bool| PlaneEval {
            normal: Vec2::new(f64::NAN, f64::NAN),
            offset: f64::NAN,
            dn: [[0.0; 8]; 2],
            db: [0.0; 8],
            vars,
            agent,
        };
        let to_eval = |hp: HalfPlane<D8>, vars: [usize; 8], agent: bool| PlaneEval {
            normal: hp.normal.re(),
            offset: hp.offset.re,
            dn: [hp.normal.x.eps, hp.normal.y.eps],
            db: hp.offset.eps,
            vars,
            agent,
        };
        for k in (0..nh).filter(|&k| k != j) {
            let pk = self.p[t] + 2 * k;
            let vk = self.human_vel_index(t, k);
            let vars = [pi, pi + 1, vi, vi + 1, pk, pk + 1, vk, vk + 1];
            let d = seed(vars.map(|i| x[i]), [true; 8]);
            let hp = agent_halfplane(
                Vec2::new(d[0], d[1]),
                Vec2::new(d[2], d[3]),
                Vec2::new(d[4], d[5]),
                Vec2::new(d[6], d[7]),
                &self.pair(2.0 * self.config.human_radius),
            );
            out.push(match hp {
                Ok(hp) => to_eval(hp, vars, true),
                Err(_) => nan_plane(vars, true),
            });
        }
        let rt = self.r[t];
        let vars = [pi, pi + 1, vi, vi + 1, rt, rt + 1, rt + 2, rt + 3];
        let d = seed(vars.map(|i| x[i]), [true; 8]);
        let robot_vel = Vec2::new(d[7] * d[6].cos(), d[7] * d[6].sin());
        let hp = agent_halfplane(
            Vec2::new(d[0], d[1]),
            Vec2::new(d[2], d[3]),
            Vec2::new(d[4], d[5]),
            robot_vel,
            &self.pair(self.config.human_radius + self.config.robot_radius),
        );
        out.push(match hp {
            Ok(hp) => to_eval(hp, vars, true),
            Err(_) => nan_plane(vars, true),
        });
        for seg in &self.config.obstacles {
            let vars = [pi, pi + 1, NONE, NONE, NONE, NONE, NONE, NONE];
            let pos = Vec2::new(D8::variable(x[pi], 0), D8::variable(x[pi + 1], 1));
            let hp = obstacle_halfplane(
                pos,
                seg,
                self.config.human_radius,
                self.config.orca.time_horizon_obstacles,
            );
            out.push(match hp {
                Ok(hp) => to_eval(hp, vars, false),
                Err(_) => nan_plane(vars, false),
            });
        }
        out
    }

    fn intent(&self, x: &[f64], t: usize, j: usize) -> Vec2 {
        let w = self.weights_at(x, t);
        let target = self.steps[t]
            .iter()
            .zip(&w)
            .fold(Vec2::ZERO, |acc, (row, w)| acc + *w * row[j]);
        (1.0 / self.config.dt) * (target - self.human_pos(x, t, j))
    }

    fn evaluate(&self, x: &[f64]) -> Rc<Evaluated> {
        if let Some((cx, ev)) = self.cache.borrow().as_ref() {
            if cx.as_slice() == x {
                return Rc::clone(ev);
            }
        }
        let ev = Rc::new(self.compute(x));
        *self.cache.borrow_mut() = Some((x.to_vec(), Rc::clone(&ev)));
        ev
    }

    fn compute(&self, x: &[f64]) -> Evaluated {
        let nh = self.num_humans;
        let dt = self.config.dt;
        let sw = self.weight_count();
        let bilevel = self.bilevel();
        let mut eq = Vec::with_capacity(self.neq);
        let mut jeq = RowMatrix::new(self.neq, self.n);
        let mut ineq = Vec::with_capacity(self.nin);
        let mut jin = RowMatrix::new(self.nin, self.n);

        // initial conditions
        let r0 = self.init_robot;
        let init = [r0.position.x, r0.position.y, r0.heading, r0.speed];
        for (k, v) in init.iter().enumerate() {
            jeq.push(eq.len(), self.r[0] + k, 1.0);
            eq.push(x[self.r[0] + k] - v);
        }
        if bilevel {
            for j in 0..nh {
                for (c, v) in [self.init_positions[j].x, self.init_positions[j].y]
                    .iter()
                    .enumerate()
                {
                    jeq.push(eq.len(), self.p[0] + 2 * j + c, 1.0);
                    eq.push(x[self.p[0] + 2 * j + c] - v);
                }
            }
            for j in 0..nh {
                for (c, v) in [self.init_velocities[j].x, self.init_velocities[j].y]
                    .iter()
                    .enumerate()
                {
                    jeq.push(eq.len(), self.q + 2 * j + c, 1.0);
                    eq.push(x[self.q + 2 * j + c] - v);
                }
            }
            for s in 0..sw {
                jeq.push(eq.len(), self.w[0] + s, 1.0);
                eq.push(x[self.w[0] + s] - self.init_weights[s]);
            }
        }

        let lim = &self.config.limits;
        let vmax = self.config.orca.max_speed;
        let penalty = self.config.orca.relaxation_penalty;
        for t in 0..self.horizon() {
            // rate limits against the previous action
            debug_assert_eq!(ineq.len(), self.rows.rate[t]);
            let ut = self.u[t];
            for c in 0..2 {
                let prev = if t == 0 {
                    self.previous_action.as_array()[c]
                } else {
                    x[self.u[t - 1] + c]
                };
                let diff = x[ut + c] - prev;
                let (lo, hi) = (lim.rate_min.as_array()[c], lim.rate_max.as_array()[c]);
                let row = ineq.len();
                jin.push(row, ut + c, 1.0);
                if t > 0 {
                    jin.push(row, self.u[t - 1] + c, -1.0);
                }
                ineq.push(diff - lo);
                let row = ineq.len();
                jin.push(row, ut + c, -1.0);
                if t > 0 {
                    jin.push(row, self.u[t - 1] + c, 1.0);
                }
                ineq.push(hi - diff);
            }

            if bilevel {
                for j in 0..nh {
                    let li = self.lower[t][j];
                    let planes = self.planes(x, t, j);
                    let v = Vec2::new(x[li.v], x[li.v + 1]);
                    let (s, mu) = (x[li.s], x[li.mu]);
                    let vint = self.intent(x, t, j);
                    let pj = self.p[t] + 2 * j;
                    debug_assert_eq!(eq.len(), self.rows.stationarity[t][j]);

                    // stationarity in v
                    for c in 0..2 {
                        let row = eq.len();
                        let vc = if c == 0 { v.x } else { v.y };
                        let ic = if c == 0 { vint.x } else { vint.y };
                        let mut val = 2.0 * (1.0 + mu) * vc - 2.0 * ic;
                        jeq.push(row, li.v + c, 2.0 * (1.0 + mu));
                        jeq.push(row, li.mu, 2.0 * vc);
                        jeq.push(row, pj + c, 2.0 / dt);
                        if sw > 0 {
                            for s in 0..sw {
                                let y = self.steps[t][s][j];
                                let yc = if c == 0 { y.x } else { y.y };
                                jeq.push(row, self.w[t] + s, -2.0 * yc / dt);
                            }
                        }
                        for (i, pl) in planes.iter().enumerate() {
                            let lam = x[li.lambda + i];
                            let nc = if c == 0 { pl.normal.x } else { pl.normal.y };
                            val -= lam * nc;
                            jeq.push(row, li.lambda + i, -nc);
                            if lam != 0.0 {
                                for (k, &vi) in pl.vars.iter().enumerate() {
                                    if vi != NONE {
                                        jeq.push(row, vi, -lam * pl.dn[c][k]);
                                    }
                                }
                            }
                        }
                        eq.push(val);
                    }
                    // stationarity in the slack
                    let row = eq.len();
                    let mut val = 2.0 * penalty * s;
                    jeq.push(row, li.s, 2.0 * penalty);
                    for (i, pl) in planes.iter().enumerate() {
                        if pl.agent {
                            val -= x[li.lambda + i];
                            jeq.push(row, li.lambda + i, -1.0);
                        }
                    }
                    eq.push(val);

                    // primal feasibility of each half-plane and the disc
                    debug_assert_eq!(ineq.len(), self.rows.planes[t][j]);
                    for pl in &planes {
                        let row = ineq.len();
                        let mut val = pl.normal.dot(v) - pl.offset;
                        jin.push(row, li.v, pl.normal.x);
                        jin.push(row, li.v + 1, pl.normal.y);
                        if pl.agent {
                            val += s;
                            jin.push(row, li.s, 1.0);
                        }
                        for (k, &vi) in pl.vars.iter().enumerate() {
                            if vi != NONE {
                                jin.push(row, vi, v.x * pl.dn[0][k] + v.y * pl.dn[1][k] - pl.db[k]);
                            }
                        }
                        ineq.push(val);
                    }
                    let row = ineq.len();
                    jin.push(row, li.v, -2.0 * v.x);
                    jin.push(row, li.v + 1, -2.0 * v.y);
                    ineq.push(vmax * vmax - v.norm_squared());
                }
                // human dynamics
                debug_assert_eq!(eq.len(), self.rows.human_dynamics[t]);
                for j in 0..nh {
                    let li = self.lower[t][j];
                    for c in 0..2 {
                        let row = eq.len();
                        jeq.push(row, self.p[t + 1] + 2 * j + c, 1.0);
                        jeq.push(row, self.p[t] + 2 * j + c, -1.0);
                        jeq.push(row, li.v + c, -dt);
                        eq.push(
                            x[self.p[t + 1] + 2 * j + c]
                                - x[self.p[t] + 2 * j + c]
                                - dt * x[li.v + c],
                        );
                    }
                }
            }

            // robot dynamics
            let (rt, rn) = (self.r[t], self.r[t + 1]);
            let (th, vel, om) = (x[rt + 2], x[ut], x[ut + 1]);
            let (c, s) = (th.cos(), th.sin());
            debug_assert_eq!(eq.len(), self.rows.robot_dynamics[t]);
            let row = eq.len();
            jeq.push(row, rn, 1.0);
            jeq.push(row, rt, -1.0);
            jeq.push(row, rt + 2, dt * vel * s);
            jeq.push(row, ut, -dt * c);
            eq.push(x[rn] - x[rt] - dt * vel * c);
            let row = eq.len();
            jeq.push(row, rn + 1, 1.0);
            jeq.push(row, rt + 1, -1.0);
            jeq.push(row, rt + 2, -dt * vel * c);
            jeq.push(row, ut, -dt * s);
            eq.push(x[rn + 1] - x[rt + 1] - dt * vel * s);
            let row = eq.len();
            jeq.push(row, rn + 2, 1.0);
            jeq.push(row, rt + 2, -1.0);
            jeq.push(row, ut + 1, -dt);
            eq.push(x[rn + 2] - x[rt + 2] - dt * om);
            let row = eq.len();
            jeq.push(row, rn + 3, 1.0);
            jeq.push(row, ut, -1.0);
            eq.push(x[rn + 3] - vel);

            // weight dynamics
            if bilevel && sw > 0 && t + 1 < self.horizon() {
                debug_assert_eq!(eq.len(), self.rows.weight_dynamics[t]);
                let prev = self.weights_at(x, t);
                let refined: Vec<Vec2> = (0..nh).map(|j| self.human_pos(x, t + 1, j)).collect();
                match weight_update_with_jacobian(
                    &prev,
                    &refined,
                    &self.steps[t],
                    &self.config.refine,
                ) {
                    Ok(step) => {
                        for a in 0..sw {
                            let row = eq.len();
                            jeq.push(row, self.w[t + 1] + a, 1.0);
                            for k in 0..sw {
                                jeq.push(row, self.w[t] + k, -step.d_prev[(a, k)]);
                            }
                            for c in 0..2 * nh {
                                jeq.push(row, self.p[t + 1] + c, -step.d_refined[(a, c)]);
                            }
                            eq.push(x[self.w[t + 1] + a] - step.weights[a]);
                        }
                    }
                    Err(_) => eq.extend(std::iter::repeat(f64::NAN).take(sw)),
                }
            }

            // collision avoidance at step t + 1
            debug_assert_eq!(ineq.len(), self.rows.collision[t]);
            let rp = Vec2::new(x[rn], x[rn + 1]);
            let dj = self.config.human_clearance();
            for j in 0..nh {
                let hp = self.human_pos(x, t + 1, j);
                let d = rp - hp;
                let row = ineq.len();
                jin.push(row, rn, 2.0 * d.x);
                jin.push(row, rn + 1, 2.0 * d.y);
                if bilevel {
                    let pj = self.p[t + 1] + 2 * j;
                    jin.push(row, pj, -2.0 * d.x);
                    jin.push(row, pj + 1, -2.0 * d.y);
                }
                ineq.push(d.norm_squared() - dj * dj);
            }
            let dl = self.config.wall_clearance();
            for seg in &self.config.obstacles {
                let (cp, _) = closest_point(rp, seg);
                let d = rp - cp;
                let row = ineq.len();
                jin.push(row, rn, 2.0 * d.x);
                jin.push(row, rn + 1, 2.0 * d.y);
                ineq.push(d.norm_squared() - dl * dl);
            }
        }
        debug_assert_eq!(eq.len(), self.neq);
        debug_assert_eq!(ineq.len(), self.nin);
        Evaluated { eq, jeq, ineq, jin }
    }

    pub fn horizon(&self) -> usize {
        self.config.horizon
    }

    /// Rolls the model forward under `actions`: robot by its dynamics and
    /// every human by solving its ORCA QP exactly, so the returned point
    /// satisfies all equalities and complementarity conditions.
    pub fn rollout(&self, actions: &[RobotAction]) -> Result<Vec<f64>> {
        if actions.len() != self.horizon() {
            return Err(Error::DimensionMismatch(format!(
                "{} actions for horizon {}",
                actions.len(),
                self.horizon()
            )));
        }
        let nh = self.num_humans;
        let dt = self.config.dt;
        let sw = self.weight_count();
        let mut x = vec![0.0; self.n];
        let r0 = self.init_robot;
        x[self.r[0]..self.r[0] + 4].copy_from_slice(&[
            r0.position.x,
            r0.position.y,
            r0.heading,
            r0.speed,
        ]);
        if self.bilevel() {
            for j in 0..nh {
                x[self.p[0] + 2 * j] = self.init_positions[j].x;
                x[self.p[0] + 2 * j + 1] = self.init_positions[j].y;
                x[self.q + 2 * j] = self.init_velocities[j].x;
                x[self.q + 2 * j + 1] = self.init_velocities[j].y;
            }
            if sw > 0 {
                x[self.w[0]..self.w[0] + sw].copy_from_slice(&self.init_weights);
            }
        }
        for (t, a) in actions.iter().enumerate() {
            let ut = self.u[t];
            x[ut] = a.linear_velocity;
            x[ut + 1] = a.angular_velocity;
            if self.bilevel() {
                for j in 0..nh {
                    let li = self.lower[t][j];
                    let planes = self.planes(&x, t, j);
                    let mut op = OrcaPlanes::default();
                    for pl in &planes {
                        let hp = HalfPlane {
                            normal: pl.normal,
                            offset: pl.offset,
                        };
                        if pl.agent {
                            op.agents.push(hp);
                        } else {
                            op.obstacles.push(hp);
                        }
                    }
                    let vint = self.intent(&x, t, j);
                    match solve_orca_qp(&op, vint, &self.config.orca) {
                        Ok(sol) => {
                            x[li.v] = sol.velocity.x;
                            x[li.v + 1] = sol.velocity.y;
                            x[li.s] = sol.slack;
                            x[li.mu] = sol.disc_dual;
                            for (i, l) in sol.duals.iter().enumerate() {
                                x[li.lambda + i] = l.max(0.0);
                            }
                        }
                        Err(_) => {
                            let v = vint.scale(
                                (self.config.orca.max_speed / vint.norm().max(1e-12)).min(1.0),
                            );
                            x[li.v] = v.x;
                            x[li.v + 1] = v.y;
                        }
                    }
                }
                for j in 0..nh {
                    let li = self.lower[t][j];
                    for c in 0..2 {
                        x[self.p[t + 1] + 2 * j + c] = x[self.p[t] + 2 * j + c] + dt * x[li.v + c];
                    }
                }
            }
            let (rt, rn) = (self.r[t], self.r[t + 1]);
            let th = x[rt + 2];
            x[rn] = x[rt] + dt * a.linear_velocity * th.cos();
            x[rn + 1] = x[rt + 1] + dt * a.linear_velocity * th.sin();
            x[rn + 2] = th + dt * a.angular_velocity;
            x[rn + 3] = a.linear_velocity;
            if self.bilevel() && sw > 0 && t + 1 < self.horizon() {
                let prev = self.weights_at(&x, t);
                let refined: Vec<Vec2> = (0..nh).map(|j| self.human_pos(&x, t + 1, j)).collect();
                let step = weight_update_with_jacobian(
                    &prev,
                    &refined,
                    &self.steps[t],
                    &self.config.refine,
                )?;
                x[self.w[t + 1]..self.w[t + 1] + sw].copy_from_slice(&step.weights);
            }
        }
        Ok(x)
    }

    pub fn actions(&self, x: &[f64]) -> Vec<RobotAction> {
        self.u
            .iter()
            .map(|&i| RobotAction::new(x[i], x[i + 1]))
            .collect()
    }

    pub fn robot_trajectory(&self, x: &[f64]) -> Vec<RobotState> {
        self.r
            .iter()
            .map(|&i| RobotState {
                position: Vec2::new(x[i], x[i + 1]),
                heading: crate::geometry::wrap_angle(x[i + 2]),
                speed: x[i + 3],
            })
            .collect()
    }

    /// Predicted human positions `[j][t]`, `t = 0..=T`.
    pub fn human_trajectories(&self, x: &[f64]) -> Vec<Vec<Vec2>> {
        (0..self.num_humans)
            .map(|j| {
                (0..=self.horizon())
                    .map(|t| self.human_pos(x, t, j))
                    .collect()
            })
            .collect()
    }

    /// Weights over the original samples at `t = 0..T-1`; merged samples
    /// share their group's weight equally.
    pub fn weight_trajectory(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let total: usize = self.groups.iter().map(Vec::len).sum();
        (0..self.horizon())
            .map(|t| {
                let merged = if self.bilevel() {
                    self.weights_at(x, t)
                } else {
                    self.init_weights.clone()
                };
                let merged = if merged.len() == self.groups.len() {
                    merged
                } else {
                    vec![1.0]
                };
                let mut out = vec![0.0; total];
                for (g, w) in self.groups.iter().zip(&merged) {
                    // clip and renormalize so iterates off the simplex still
                    // report a valid distribution
                    for &i in g {
                        out[i] = w.max(0.0) / g.len() as f64;
                    }
                }
                let z: f64 = out.iter().sum();
                if z > 0.0 {
                    out.iter_mut().for_each(|v| *v /= z);
                }
                out
            })
            .collect()
    }

    /// Lower-level solutions `[t][j]`.
    pub fn lower_level(&self, x: &[f64]) -> Vec<Vec<HumanStepDuals>> {
        self.lower
            .iter()
            .map(|row| {
                row.iter()
                    .map(|li| HumanStepDuals {
                        velocity: Vec2::new(x[li.v], x[li.v + 1]),
                        lambda: x[li.lambda..li.lambda + self.num_planes].to_vec(),
                        disc: x[li.mu],
                        slack: x[li.s],
                    })
                    .collect()
            })
            .collect()
    }

    /// Lower-level planes of human `j` at step `t` evaluated at `x`.
    pub fn lower_level_planes(&self, x: &[f64], t: usize, j: usize) -> OrcaPlanes {
        let mut op = OrcaPlanes::default();
        for pl in self.planes(x, t, j) {
            let hp = HalfPlane {
                normal: pl.normal,
                offset: pl.offset,
            };
            if pl.agent {
                op.agents.push(hp);
            } else {
                op.obstacles.push(hp);
            }
        }
        op
    }

    /// Intent velocity of human `j` at step `t` evaluated at `x`.
    pub fn intent_velocity(&self, x: &[f64], t: usize, j: usize) -> Vec2 {
        self.intent(x, t, j)
    }

    /// Smallest robot-human and robot-wall clearances over the plan, as
    /// distances minus the required separation.
    pub fn min_clearance(&self, x: &[f64]) -> f64 {
        let ev = self.evaluate(x);
        let mut worst = f64::INFINITY;
        for &row in &self.rows.collision {
            for k in 0..self.num_humans + self.config.obstacles.len() {
                let req = if k < self.num_humans {
                    self.config.human_clearance()
                } else {
                    self.config.wall_clearance()
                };
                worst = worst.min((ev.ineq[row + k] + req * req).max(0.0).sqrt() - req);
            }
        }
        worst
    }

    /// Collision residuals of every step, in row order.
    pub(crate) fn collision_rows(&self) -> Vec<usize> {
        let per_step = self.num_humans + self.config.obstacles.len();
        self.rows
            .collision
            .iter()
            .flat_map(|&r| r..r + per_step)
            .collect()
    }

    /// Rate-limit rows of every step.
    pub(crate) fn rate_rows(&self) -> Vec<usize> {
        self.rows.rate.iter().flat_map(|&r| r..r + 4).collect()
    }

    pub(crate) fn action_indices(&self) -> &[usize] {
        &self.u
    }

    /// Derivatives of every variable with respect to the actions, `n x 2T`,
    /// along the manifold where all equalities hold and each lower-level
    /// problem keeps its active set. `x` must satisfy the equalities and
    /// complementarity exactly, as [`Self::rollout`] produces.
    ///
    /// The blocks are solved forward in time: human `j` at step `t`
    /// depends only on states at `t`, so each lower-level block is a small
    /// square system.
    pub fn action_sensitivities(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        let ev = self.evaluate(x);
        let nu = 2 * self.horizon();
        let mut d = DMatrix::zeros(self.n, nu);
        let fix = |i: usize| vec![(i, 1.0)];
        for t in 0..self.horizon() {
            d[(self.u[t], 2 * t)] = 1.0;
            d[(self.u[t] + 1, 2 * t + 1)] = 1.0;
            if self.bilevel() {
                for (j, li) in self.lower[t].iter().enumerate() {
                    let mut vars = vec![li.v, li.v + 1, li.s, li.mu];
                    vars.extend(li.lambda..li.lambda + self.num_planes);
                    let st = self.rows.stationarity[t][j];
                    let mut rows: Vec<Vec<(usize, f64)>> =
                        (st..st + 3).map(|r| ev.jeq.rows[r].clone()).collect();
                    let pr = self.rows.planes[t][j];
                    for i in 0..self.num_planes {
                        rows.push(if x[li.lambda + i] > 0.0 {
                            ev.jin.rows[pr + i].clone()
                        } else {
                            fix(li.lambda + i)
                        });
                    }
                    rows.push(if x[li.mu] > 0.0 {
                        ev.jin.rows[pr + self.num_planes].clone()
                    } else {
                        fix(li.mu)
                    });
                    solve_block(&mut d, &vars, &rows)?;
                }
                let hd = self.rows.human_dynamics[t];
                let vars: Vec<usize> =
                    (self.p[t + 1]..self.p[t + 1] + 2 * self.num_humans).collect();
                let rows: Vec<_> = (hd..hd + vars.len())
                    .map(|r| ev.jeq.rows[r].clone())
                    .collect();
                solve_block(&mut d, &vars, &rows)?;
            }
            let rd = self.rows.robot_dynamics[t];
            let vars: Vec<usize> = (self.r[t + 1]..self.r[t + 1] + 4).collect();
            let rows: Vec<_> = (rd..rd + 4).map(|r| ev.jeq.rows[r].clone()).collect();
            solve_block(&mut d, &vars, &rows)?;
            if let Some(&wd) = self.rows.weight_dynamics.get(t) {
                let sw = self.weight_count();
                let vars: Vec<usize> = (self.w[t + 1]..self.w[t + 1] + sw).collect();
                let rows: Vec<_> = (wd..wd + sw).map(|r| ev.jeq.rows[r].clone()).collect();
                solve_block(&mut d, &vars, &rows)?;
            }
        }
        Ok(d)
    }
}

/// Solves `sum_k a_rk dx_k = 0` for the rows of `vars` in `d`, given rows
/// whose remaining columns are already known.
fn solve_block(d: &mut DMatrix<f64>, vars: &[usize], rows: &[Vec<(usize, f64)>]) -> Result<()> {
    let k = vars.len();
    let nu = d.ncols();
    let mut a = DMatrix::zeros(k, k);
    let mut b = DMatrix::zeros(k, nu);
    for (r, row) in rows.iter().enumerate() {
        for &(c, v) in row {
            match vars.iter().position(|&i| i == c) {
                Some(local) => a[(r, local)] += v,
                None => {
                    for col in 0..nu {
                        b[(r, col)] -= v * d[(c, col)];
                    }
                }
            }
        }
    }
    let sol = match a.clone().lu().solve(&b) {
        Some(sol) if sol.iter().all(|v: &f64| v.is_finite()) => sol,
        _ => a
            .svd(true, true)
            .solve(&b, 1e-12)
            .map_err(|e| Error::InvalidState(format!("degenerate sensitivity block: {e}")))?,
    };
    for (local, &i) in vars.iter().enumerate() {
        for col in 0..nu {
            d[(i, col)] = sol[(local, col)];
        }
    }
    Ok(())
}

impl NlpProblem for SicnavProblem {
    fn num_variables(&self) -> usize {
        self.n
    }

    fn num_equalities(&self) -> usize {
        self.neq
    }

    fn num_inequalities(&self) -> usize {
        self.nin
    }

    fn objective(&self, x: &[f64]) -> f64 {
        let c = &self.config;
        let mut f = 0.0;
        for t in 0..=self.horizon() {
            let i = self.r[t];
            let (ex, ey) = (x[i] - c.goal.x, x[i + 1] - c.goal.y);
            let scale = if t == self.horizon() {
                c.terminal_scale
            } else {
                1.0
            };
            f += scale * (c.q_position[0] * ex * ex + c.q_position[1] * ey * ey);
        }
        for &u in &self.u {
            f += c.r_action[0] * x[u] * x[u] + c.r_action[1] * x[u + 1] * x[u + 1];
        }
        f
    }

    fn gradient(&self, x: &[f64]) -> Vec<f64> {
        let c = &self.config;
        let mut g = vec![0.0; self.n];
        for t in 0..=self.horizon() {
            let i = self.r[t];
            let scale = if t == self.horizon() {
                c.terminal_scale
            } else {
                1.0
            };
            g[i] = 2.0 * scale * c.q_position[0] * (x[i] - c.goal.x);
            g[i + 1] = 2.0 * scale * c.q_position[1] * (x[i + 1] - c.goal.y);
        }
        for &u in &self.u {
            g[u] = 2.0 * c.r_action[0] * x[u];
            g[u + 1] = 2.0 * c.r_action[1] * x[u + 1];
        }
        g
    }

    fn equalities(&self, x: &[f64]) -> Vec<f64> {
        self.evaluate(x).eq.clone()
    }

    fn equality_jacobian(&self, x: &[f64]) -> RowMatrix {
        self.evaluate(x).jeq.clone()
    }

    fn inequalities(&self, x: &[f64]) -> Vec<f64> {
        self.evaluate(x).ineq.clone()
    }

    fn inequality_jacobian(&self, x: &[f64]) -> RowMatrix {
        self.evaluate(x).jin.clone()
    }

    fn bounds(&self) -> (Vec<f64>, Vec<f64>) {
        (self.lower_bounds.clone(), self.upper_bounds.clone())
    }

    fn complementarity(&self) -> Vec<ComplementarityPair> {
        self.pairs.clone()
    }

    fn hessian(&self, _x: &[f64]) -> Option<RowMatrix> {
        let c = &self.config;
        let mut h = RowMatrix::new(self.n, self.n);
        for t in 0..=self.horizon() {
            let i = self.r[t];
            let scale = if t == self.horizon() {
                c.terminal_scale
            } else {
                1.0
            };
            h.push(i, i, 2.0 * scale * c.q_position[0]);
            h.push(i + 1, i + 1, 2.0 * scale * c.q_position[1]);
        }
        for &u in &self.u {
            h.push(u, u, 2.0 * c.r_action[0]);
            h.push(u + 1, u + 1, 2.0 * c.r_action[1]);
        }
        Some(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Segment;
    use crate::nlp::check_gradients;
    use crate::prediction::TrajectorySample;
    use crate::state::{HumanState, WeightVector};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn corridor_config() -> MpcConfig {
        MpcConfig {
            goal: Vec2::new(8.0, 0.0),
            obstacles: vec![
                Segment::new(Vec2::new(-1.0, -0.875), Vec2::new(10.0, -0.875)).unwrap(),
                Segment::new(Vec2::new(-1.0, 0.875), Vec2::new(10.0, 0.875)).unwrap(),
            ],
            ..MpcConfig::default()
        }
    }

    fn scenario(num_samples: usize, seed: u64) -> (SystemState, SampleSet) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let humans = vec![
            HumanState::new(Vec2::new(3.0, 0.3), Vec2::new(-0.9, 0.0)).unwrap(),
            HumanState::new(Vec2::new(4.5, -0.4), Vec2::new(-1.0, 0.1)).unwrap(),
            HumanState::new(Vec2::new(1.5, -0.5), Vec2::new(0.6, 0.0)).unwrap(),
        ];
        let samples = (0..num_samples)
            .map(|_| {
                let pos = humans
                    .iter()
                    .map(|h| {
                        let drift = Vec2::new(rng.gen_range(-0.2..0.2), rng.gen_range(-0.3..0.3));
                        (1..=8)
                            .map(|k| h.position + (0.25 * k as f64) * (h.velocity + drift))
                            .collect()
                    })
                    .collect();
                TrajectorySample::new(pos).unwrap()
            })
            .collect();
        let samples = SampleSet::new(samples, 0.25, 0.0).unwrap();
        let state = SystemState {
            robot: RobotState::new(Vec2::ZERO, 0.0, 0.5).unwrap(),
            humans,
            weights: WeightVector::uniform(num_samples).unwrap(),
        };
        (state, samples)
    }

    #[test]
    fn rollout_satisfies_equalities_and_complementarity() {
        let (state, samples) = scenario(5, 1);
        let p = assemble(
            &state,
            &samples,
            RobotAction::new(0.5, 0.0),
            &corridor_config(),
            PlanningMode::Bilevel,
        )
        .unwrap();
        let x = p.rollout(&vec![RobotAction::new(0.6, 0.1); 8]).unwrap();
        let eq = p.equalities(&x);
        assert!(
            eq.iter().all(|v| v.abs() < 1e-8),
            "{:?}",
            eq.iter().fold(0.0f64, |m, v| m.max(v.abs()))
        );
        let g = p.inequalities(&x);
        let (lb, _) = p.bounds();
        for pair in p.complementarity() {
            let val = |side: CompSide| match side {
                CompSide::Variable(i) => x[i],
                CompSide::Inequality(i) => g[i],
            };
            let (a, b) = (val(pair.a), val(pair.b));
            assert!((a * b).abs() < 1e-8, "{a} {b}");
        }
        for (i, v) in x.iter().enumerate() {
            assert!(*v >= lb[i] - 1e-12);
        }
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let (state, samples) = scenario(4, 2);
        let p = assemble(
            &state,
            &samples,
            RobotAction::new(0.5, 0.0),
            &corridor_config(),
            PlanningMode::Bilevel,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..5 {
            let actions: Vec<_> = (0..8)
                .map(|_| RobotAction::new(rng.gen_range(0.0..1.0), rng.gen_range(-1.0..1.0)))
                .collect();
            let mut x = p.rollout(&actions).unwrap();
            for v in &mut x {
                *v += rng.gen_range(-0.01..0.01);
            }
            let err = check_gradients(&p, &x, 1e-6).unwrap();
            assert!(err < 1e-4, "{err}");
        }
    }

    #[test]
    fn identical_samples_are_merged() {
        let (state, samples) = scenario(1, 4);
        let dup = SampleSet::new(vec![samples.samples[0].clone(); 4], 0.25, 0.0).unwrap();
        let state = SystemState {
            weights: WeightVector::uniform(4).unwrap(),
            ..state
        };
        let p = assemble(
            &state,
            &dup,
            RobotAction::ZERO,
            &corridor_config(),
            PlanningMode::Bilevel,
        )
        .unwrap();
        assert_eq!(p.num_distinct_samples(), 1);
        let x = p.rollout(&vec![RobotAction::ZERO; 8]).unwrap();
        let w = p.weight_trajectory(&x);
        assert!(w
            .iter()
            .all(|row| row.iter().all(|v| (v - 0.25).abs() < 1e-15)));
    }

    #[test]
    fn sensitivities_match_rollout_differences() {
        let (state, samples) = scenario(4, 6);
        let p = assemble(
            &state,
            &samples,
            RobotAction::new(0.5, 0.0),
            &corridor_config(),
            PlanningMode::Bilevel,
        )
        .unwrap();
        let base: Vec<RobotAction> = (0..8)
            .map(|k| RobotAction::new(0.3 + 0.02 * k as f64, 0.05))
            .collect();
        let x = p.rollout(&base).unwrap();
        let d = p.action_sensitivities(&x).unwrap();
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        for k in 0..16 {
            let shifted = |sign: f64| {
                let mut a = base.clone();
                if k % 2 == 0 {
                    a[k / 2].linear_velocity += sign * h;
                } else {
                    a[k / 2].angular_velocity += sign * h;
                }
                p.rollout(&a).unwrap()
            };
            let (xp, xm) = (shifted(1.0), shifted(-1.0));
            // positions, velocities and weights; multipliers may switch sign
            // structure under the perturbation only at degenerate points
            for i in 0..p.num_variables() {
                let fd = (xp[i] - xm[i]) / (2.0 * h);
                worst = worst.max((fd - d[(i, k)]).abs() / (1.0 + fd.abs()));
            }
        }
        assert!(worst < 1e-4, "{worst}");
    }
}
