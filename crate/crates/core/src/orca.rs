//! ORCA velocity constraints and the relaxed per-agent velocity QP.
//!
//! Each agent picks the velocity closest to its intent velocity subject to
//! one linear half-plane per neighbour (agents and wall segments) and a
//! speed disc. Agent-agent half-planes share a single non-negative slack
//! `s` penalized by `relaxation_penalty * s^2`, so the problem is always
//! feasible unless the wall constraints alone are inconsistent with the
//! speed limit. Wall half-planes are never relaxed.
//!
//! Half-plane construction follows the reference ORCA geometry (truncated
//! velocity obstacle, cut-off circle vs. cone legs, one-step escape when
//! already overlapping), written generically so the bilevel planner can
//! differentiate it with [`crate::ad::Dual`].

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::ad::Real;
use crate::error::{Error, Result};
use crate::geometry::{closest_point, Segment, Vec2};
use crate::qp::{DenseQp, QpError};

/// Feasible set `{v : normal . v >= offset}`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HalfPlane<T = f64> {
    pub normal: Vec2<T>,
    pub offset: T,
}

impl HalfPlane<f64> {
    pub fn new(normal: Vec2, offset: f64) -> Result<Self> {
        if (normal.norm() - 1.0).abs() > 1e-9 || !offset.is_finite() {
            return Err(Error::InvalidState(format!(
                "half-plane normal must be unit length, got {normal:?}"
            )));
        }
        Ok(Self { normal, offset })
    }

    /// `normal . v - offset`; non-negative when satisfied.
    pub fn margin(&self, v: Vec2) -> f64 {
        self.normal.dot(v) - self.offset
    }
}

impl<T: Real> HalfPlane<T> {
    pub fn re(&self) -> HalfPlane<f64> {
        HalfPlane {
            normal: self.normal.re(),
            offset: self.offset.re(),
        }
    }
}

/// Geometry parameters for one agent-agent half-plane.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairParams {
    pub combined_radius: f64,
    /// Collision-avoidance horizon `tau`.
    pub time_horizon: f64,
    /// Share of the avoidance this agent takes on, in `[0, 1]`.
    pub responsibility: f64,
    /// Escape horizon used when the agents already overlap.
    pub time_step: f64,
}

/// ORCA half-plane for the agent at `self_pos` against one neighbour.
pub fn agent_halfplane<T: Real>(
    self_pos: Vec2<T>,
    self_vel: Vec2<T>,
    other_pos: Vec2<T>,
    other_vel: Vec2<T>,
    pair: &PairParams,
) -> Result<HalfPlane<T>> {
    if !(pair.combined_radius > 0.0 && pair.time_horizon > 0.0 && pair.time_step > 0.0)
        || !(0.0..=1.0).contains(&pair.responsibility)
    {
        return Err(Error::InvalidConfig(format!(
            "bad ORCA pair parameters {pair:?}"
        )));
    }
    let rel_pos = other_pos - self_pos;
    let rel_vel = self_vel - other_vel;
    let dist_sq = rel_pos.norm_squared();
    if dist_sq.re() == 0.0 {
        return Err(Error::DegenerateGeometry(
            "agents occupy the same position".into(),
        ));
    }
    let r = T::cst(pair.combined_radius);
    let r_sq = r * r;

    let (direction, u) = if dist_sq.re() > r_sq.re() {
        let inv_tau = 1.0 / pair.time_horizon;
        let w = rel_vel - rel_pos.scale(T::cst(inv_tau));
        let w_len_sq = w.norm_squared();
        let dot1 = w.dot(rel_pos);
        if dot1.re() < 0.0 && (dot1 * dot1).re() > (r_sq * w_len_sq).re() {
            // closest boundary point lies on the cut-off circle
            let w_len = w_len_sq.sqrt();
            let unit_w = w.scale(T::cst(1.0) / w_len);
            let direction = Vec2::new(unit_w.y, -unit_w.x);
            let u = unit_w.scale(r.scale(inv_tau) - w_len);
            (direction, u)
        } else {
            let leg = (dist_sq - r_sq).sqrt();
            let direction = if rel_pos.det(w).re() > 0.0 {
                Vec2::new(
                    rel_pos.x * leg - rel_pos.y * r,
                    rel_pos.x * r + rel_pos.y * leg,
                )
                .scale(T::cst(1.0) / dist_sq)
            } else {
                -Vec2::new(
                    rel_pos.x * leg + rel_pos.y * r,
                    -rel_pos.x * r + rel_pos.y * leg,
                )
                .scale(T::cst(1.0) / dist_sq)
            };
            let u = direction.scale(rel_vel.dot(direction)) - rel_vel;
            (direction, u)
        }
    } else {
        let inv_dt = 1.0 / pair.time_step;
        let w = rel_vel - rel_pos.scale(T::cst(inv_dt));
        let w_len = w.norm();
        let unit_w = if w_len.re() > 0.0 {
            w.scale(T::cst(1.0) / w_len)
        } else {
            -rel_pos.scale(T::cst(1.0) / dist_sq.sqrt())
        };
        let direction = Vec2::new(unit_w.y, -unit_w.x);
        let u = unit_w.scale(r.scale(inv_dt) - w_len);
        (direction, u)
    };
    let point = self_vel + u.scale(T::cst(pair.responsibility));
    // feasible side is to the left of the directed boundary line
    let normal = direction.perp();
    Ok(HalfPlane {
        normal,
        offset: normal.dot(point),
    })
}

/// Conservative wall constraint linearized about the nearest segment feature.
///
/// Keeps `normal . (p + tau_obst v - c) >= radius`, where `c` is the closest
/// point and `normal` points from `c` to the agent. The same formula yields
/// an escape constraint (positive offset) when the agent is already inside
/// the inflated segment.
pub fn obstacle_halfplane<T: Real>(
    self_pos: Vec2<T>,
    segment: &Segment,
    radius: f64,
    time_horizon_obstacles: f64,
) -> Result<HalfPlane<T>> {
    if !(time_horizon_obstacles > 0.0 && radius >= 0.0) {
        return Err(Error::InvalidConfig(
            "obstacle horizon must be positive".into(),
        ));
    }
    let (closest, _) = closest_point(self_pos, segment);
    let diff = self_pos - closest;
    let dist = diff.norm();
    if dist.re() == 0.0 {
        return Err(Error::DegenerateGeometry(
            "agent centre lies on a wall segment".into(),
        ));
    }
    let normal = diff.scale(T::cst(1.0) / dist);
    let offset = (T::cst(radius) - dist).scale(1.0 / time_horizon_obstacles);
    Ok(HalfPlane { normal, offset })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrcaParams {
    pub time_horizon: f64,
    pub time_horizon_obstacles: f64,
    pub responsibility: f64,
    pub max_speed: f64,
    pub relaxation_penalty: f64,
}

impl Default for OrcaParams {
    fn default() -> Self {
        Self {
            time_horizon: 2.0,
            time_horizon_obstacles: 1.0,
            responsibility: 0.5,
            max_speed: 1.5,
            relaxation_penalty: 1e4,
        }
    }
}

impl OrcaParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.time_horizon > 0.0
            && self.time_horizon_obstacles > 0.0
            && (0.0..=1.0).contains(&self.responsibility)
            && self.max_speed > 0.0
            && self.relaxation_penalty > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!(
                "invalid ORCA parameters {self:?}"
            )))
        }
    }
}

/// Half-planes for one agent: relaxable agent constraints first, then walls.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OrcaPlanes {
    pub agents: Vec<HalfPlane>,
    pub obstacles: Vec<HalfPlane>,
}

impl OrcaPlanes {
    pub fn len(&self) -> usize {
        self.agents.len() + self.obstacles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = (&HalfPlane, bool)> {
        self.agents
            .iter()
            .map(|p| (p, true))
            .chain(self.obstacles.iter().map(|p| (p, false)))
    }
}

/// Maximum number of half-planes accepted by [`solve_orca_qp`].
pub const MAX_PLANES: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct OrcaSolution {
    pub velocity: Vec2,
    /// One multiplier per half-plane, in [`OrcaPlanes::iter`] order.
    pub duals: Vec<f64>,
    /// Multiplier of the speed constraint `max_speed^2 - |v|^2 >= 0`.
    pub disc_dual: f64,
    pub slack: f64,
    /// Multiplier of `slack >= 0`.
    pub slack_dual: f64,
    /// Active constraints: plane indices, `len` for the disc, `len + 1`
    /// for the slack bound.
    pub active_set: Vec<usize>,
}

struct LinearSolve {
    velocity: Vec2,
    slack: f64,
    duals: Vec<f64>,
    slack_dual: f64,
    active: Vec<usize>,
}

fn solve_fixed_disc_weight(
    planes: &OrcaPlanes,
    v_intent: Vec2,
    params: &OrcaParams,
    disc_weight: f64,
) -> std::result::Result<LinearSolve, QpError> {
    let m = planes.len();
    let h = DMatrix::from_diagonal(&DVector::from_column_slice(&[
        2.0 * (1.0 + disc_weight),
        2.0 * (1.0 + disc_weight),
        2.0 * params.relaxation_penalty,
    ]));
    let g = DVector::from_column_slice(&[-2.0 * v_intent.x, -2.0 * v_intent.y, 0.0]);
    let mut a = DMatrix::zeros(m + 1, 3);
    let mut b = DVector::zeros(m + 1);
    for (i, (plane, relaxable)) in planes.iter().enumerate() {
        a[(i, 0)] = plane.normal.x;
        a[(i, 1)] = plane.normal.y;
        a[(i, 2)] = if relaxable { 1.0 } else { 0.0 };
        b[i] = plane.offset;
    }
    a[(m, 2)] = 1.0;
    let sol = DenseQp {
        hessian: &h,
        linear: &g,
        a: &a,
        b: &b,
        num_equalities: 0,
    }
    .solve()?;
    Ok(LinearSolve {
        velocity: Vec2::new(sol.x[0], sol.x[1]),
        slack: sol.x[2].max(0.0),
        duals: sol.multipliers.rows(0, m).iter().copied().collect(),
        slack_dual: sol.multipliers[m],
        active: sol.active,
    })
}

/// Solves the relaxed ORCA QP exactly.
///
/// ```text
///     minimize    |v - v_intent|^2 + P s^2
///     subject to  n_i . v + s >= b_i   (agent planes)
///                 n_k . v     >= b_k   (wall planes)
///                 |v| <= max_speed,  s >= 0
/// ```
///
/// The speed disc is handled through its multiplier `mu`: for fixed `mu`
/// the problem is a linearly constrained QP with objective
/// `|v - v_intent|^2 + mu |v|^2 + P s^2`, and `|v(mu)|` is non-increasing
/// in `mu`, so the complementary `mu` is found by bracketing and bisection.
pub fn solve_orca_qp(
    planes: &OrcaPlanes,
    v_intent: Vec2,
    params: &OrcaParams,
) -> Result<OrcaSolution> {
    params.validate()?;
    if planes.len() > MAX_PLANES {
        return Err(Error::DimensionMismatch(format!(
            "{} half-planes exceed the limit of {MAX_PLANES}",
            planes.len()
        )));
    }
    if !v_intent.is_finite() {
        return Err(Error::InvalidState("intent velocity is not finite".into()));
    }
    let infeasible = |e: QpError| match e {
        QpError::Infeasible(_) => {
            Error::InfeasibleGeometry("wall constraints admit no velocity".into())
        }
        other => Error::InvalidState(format!("lower-level QP failed: {other}")),
    };
    let vmax = params.max_speed;
    if v_intent.norm() <= vmax && planes.iter().all(|(p, _)| p.margin(v_intent) >= 0.0) {
        return Ok(OrcaSolution {
            velocity: v_intent,
            duals: vec![0.0; planes.len()],
            disc_dual: 0.0,
            slack: 0.0,
            slack_dual: 0.0,
            active_set: vec![],
        });
    }
    let base = solve_fixed_disc_weight(planes, v_intent, params, 0.0).map_err(infeasible)?;
    let (lin, disc_dual) = if base.velocity.norm() <= vmax {
        (base, 0.0)
    } else {
        let mut lo = 0.0;
        let mut hi = 1.0;
        let mut hi_sol = loop {
            let s = solve_fixed_disc_weight(planes, v_intent, params, hi).map_err(infeasible)?;
            if s.velocity.norm() <= vmax {
                break s;
            }
            lo = hi;
            hi *= 4.0;
            if hi > 1e14 {
                return Err(Error::InfeasibleGeometry(
                    "wall constraints are incompatible with the speed limit".into(),
                ));
            }
        };
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            let s = solve_fixed_disc_weight(planes, v_intent, params, mid).map_err(infeasible)?;
            if s.velocity.norm() <= vmax {
                hi = mid;
                hi_sol = s;
            } else {
                lo = mid;
            }
        }
        (hi_sol, hi)
    };
    let m = planes.len();
    // row m of the linear QP is the slack bound; report it as m + 1
    let mut active_set: Vec<usize> = lin
        .active
        .iter()
        .map(|&i| if i == m { m + 1 } else { i })
        .collect();
    if disc_dual > 0.0 {
        active_set.push(m);
    }
    Ok(OrcaSolution {
        velocity: lin.velocity,
        duals: lin.duals,
        disc_dual,
        slack: lin.slack,
        slack_dual: lin.slack_dual,
        active_set: dedup_sorted(active_set),
    })
}

fn dedup_sorted(mut v: Vec<usize>) -> Vec<usize> {
    v.sort_unstable();
    v.dedup();
    v
}

/// KKT residual blocks of the relaxed ORCA QP at a candidate solution.
#[derive(Clone, Debug, PartialEq)]
pub struct KktResiduals {
    /// Gradient of the Lagrangian w.r.t. `(v_x, v_y, s)`.
    pub stationarity: [f64; 3],
    /// `max(0, b_i - n_i . v - s_i)` per plane, then disc and slack bound.
    pub primal: Vec<f64>,
    /// `min(0, multiplier)` per plane, then disc and slack multipliers.
    pub dual: Vec<f64>,
    /// Multiplier times constraint value, same order.
    pub complementarity: Vec<f64>,
}

impl KktResiduals {
    pub fn max_abs(&self) -> f64 {
        self.stationarity
            .iter()
            .chain(&self.primal)
            .chain(&self.dual)
            .chain(&self.complementarity)
            .fold(0.0, |m, r| m.max(r.abs()))
    }
}

pub fn kkt_residuals(
    planes: &OrcaPlanes,
    solution: &OrcaSolution,
    v_intent: Vec2,
    params: &OrcaParams,
) -> Result<KktResiduals> {
    if solution.duals.len() != planes.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} duals for {} half-planes",
            solution.duals.len(),
            planes.len()
        )));
    }
    let v = solution.velocity;
    let s = solution.slack;
    let mut grad_v = 2.0 * (v - v_intent) + (2.0 * solution.disc_dual) * v;
    let mut grad_s = 2.0 * params.relaxation_penalty * s - solution.slack_dual;
    let mut primal = Vec::with_capacity(planes.len() + 2);
    let mut dual = Vec::with_capacity(planes.len() + 2);
    let mut comp = Vec::with_capacity(planes.len() + 2);
    for ((plane, relaxable), &lambda) in planes.iter().zip(&solution.duals) {
        grad_v -= lambda * plane.normal;
        let slack = if relaxable { s } else { 0.0 };
        if relaxable {
            grad_s -= lambda;
        }
        let g = plane.margin(v) + slack;
        primal.push((-g).max(0.0));
        dual.push(lambda.min(0.0));
        comp.push(lambda * g);
    }
    let disc = params.max_speed * params.max_speed - v.norm_squared();
    primal.push((-disc).max(0.0));
    dual.push(solution.disc_dual.min(0.0));
    comp.push(solution.disc_dual * disc);
    primal.push((-s).max(0.0));
    dual.push(solution.slack_dual.min(0.0));
    comp.push(solution.slack_dual * s);
    Ok(KktResiduals {
        stationarity: [grad_v.x, grad_v.y, grad_s],
        primal,
        dual,
        complementarity: comp,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ad::Dual;
    use crate::geometry::point_segment_distance;
    use proptest::prelude::*;

    fn pair() -> PairParams {
        PairParams {
            combined_radius: 0.6,
            time_horizon: 2.0,
            responsibility: 0.5,
            time_step: 0.25,
        }
    }

    fn params() -> OrcaParams {
        OrcaParams::default()
    }

    #[test]
    fn diverging_agents_keep_current_velocity() {
        let hp = agent_halfplane(
            Vec2::new(0.0, 0.0),
            Vec2::new(-1.0, 0.0),
            Vec2::new(3.0, 0.0),
            Vec2::new(1.0, 0.0),
            &pair(),
        )
        .unwrap();
        assert!(hp.margin(Vec2::new(-1.0, 0.0)) >= 0.0);
    }

    #[test]
    fn head_on_pair_is_mirror_symmetric() {
        let a = agent_halfplane(
            Vec2::new(-2.0, 0.0),
            Vec2::new(1.0, 0.0),
            Vec2::new(2.0, 0.0),
            Vec2::new(-1.0, 0.0),
            &pair(),
        )
        .unwrap();
        let b = agent_halfplane(
            Vec2::new(2.0, 0.0),
            Vec2::new(-1.0, 0.0),
            Vec2::new(-2.0, 0.0),
            Vec2::new(1.0, 0.0),
            &pair(),
        )
        .unwrap();
        // point reflection through the midpoint maps one constraint onto the other
        assert!((a.normal.x + b.normal.x).abs() < 1e-12);
        assert!((a.normal.y + b.normal.y).abs() < 1e-12);
        assert!((a.offset - b.offset).abs() < 1e-12);
    }

    #[test]
    fn coincident_agents_rejected() {
        let e = agent_halfplane(Vec2::ZERO, Vec2::ZERO, Vec2::ZERO, Vec2::ZERO, &pair());
        assert!(matches!(e, Err(Error::DegenerateGeometry(_))));
    }

    #[test]
    fn overlapping_agents_escape_within_one_step() {
        let hp = agent_halfplane(
            Vec2::new(0.0, 0.0),
            Vec2::ZERO,
            Vec2::new(0.4, 0.0),
            Vec2::ZERO,
            &pair(),
        )
        .unwrap();
        // responsibility 0.5: own share of the 0.2 m overlap over 0.25 s
        assert!((hp.normal.x + 1.0).abs() < 1e-12);
        assert!((hp.offset - 0.4).abs() < 1e-12);
    }

    #[test]
    fn far_wall_is_inactive() {
        let wall = Segment::new(Vec2::new(-5.0, 3.0), Vec2::new(5.0, 3.0)).unwrap();
        let hp = obstacle_halfplane(Vec2::new(0.0, 0.0), &wall, 0.3, 0.5).unwrap();
        for k in 0..64 {
            let v = 1.5 * Vec2::from_angle(k as f64 * std::f64::consts::TAU / 64.0);
            assert!(hp.margin(v) >= 0.0);
        }
    }

    #[test]
    fn parallel_motion_along_wall_is_feasible() {
        let wall = Segment::new(Vec2::new(-50.0, 1.0), Vec2::new(50.0, 1.0)).unwrap();
        let hp = obstacle_halfplane(Vec2::new(0.0, 0.2), &wall, 0.3, 2.0).unwrap();
        assert!((hp.normal.y + 1.0).abs() < 1e-12);
        assert!(hp.margin(Vec2::new(1.2, 0.0)) >= 0.0);
    }

    #[test]
    fn no_planes_returns_intent() {
        let s = solve_orca_qp(&OrcaPlanes::default(), Vec2::new(0.7, -0.3), &params()).unwrap();
        assert_eq!(s.velocity, Vec2::new(0.7, -0.3));
        assert_eq!(s.slack, 0.0);
        assert_eq!(s.disc_dual, 0.0);
    }

    #[test]
    fn single_violated_plane_projects() {
        let planes = OrcaPlanes {
            agents: vec![],
            obstacles: vec![HalfPlane::new(Vec2::new(0.0, 1.0), 0.2).unwrap()],
        };
        let s = solve_orca_qp(&planes, Vec2::new(0.5, -0.4), &params()).unwrap();
        assert!((s.velocity.x - 0.5).abs() < 1e-12);
        assert!((s.velocity.y - 0.2).abs() < 1e-12);
        assert!((s.duals[0] - 1.2).abs() < 1e-12);
    }

    #[test]
    fn fast_intent_is_clipped_by_the_disc() {
        let s = solve_orca_qp(&OrcaPlanes::default(), Vec2::new(3.0, 4.0), &params()).unwrap();
        assert!((s.velocity.norm() - 1.5).abs() < 1e-10);
        assert!((s.velocity.x / s.velocity.y - 0.75).abs() < 1e-9);
        let r = kkt_residuals(&OrcaPlanes::default(), &s, Vec2::new(3.0, 4.0), &params()).unwrap();
        assert!(r.max_abs() < 1e-8, "{r:?}");
    }

    #[test]
    fn contradictory_agent_planes_use_slack() {
        let planes = OrcaPlanes {
            agents: vec![
                HalfPlane::new(Vec2::new(1.0, 0.0), 0.5).unwrap(),
                HalfPlane::new(Vec2::new(-1.0, 0.0), 0.5).unwrap(),
            ],
            obstacles: vec![],
        };
        let s = solve_orca_qp(&planes, Vec2::ZERO, &params()).unwrap();
        assert!(s.slack > 0.49);
        let r = kkt_residuals(&planes, &s, Vec2::ZERO, &params()).unwrap();
        assert!(r.max_abs() < 1e-8, "{r:?}");
    }

    #[test]
    fn contradictory_walls_are_infeasible() {
        let planes = OrcaPlanes {
            agents: vec![],
            obstacles: vec![
                HalfPlane::new(Vec2::new(1.0, 0.0), 0.5).unwrap(),
                HalfPlane::new(Vec2::new(-1.0, 0.0), 0.5).unwrap(),
            ],
        };
        assert!(matches!(
            solve_orca_qp(&planes, Vec2::ZERO, &params()),
            Err(Error::InfeasibleGeometry(_))
        ));
        let far = OrcaPlanes {
            agents: vec![],
            obstacles: vec![HalfPlane::new(Vec2::new(1.0, 0.0), 2.0).unwrap()],
        };
        assert!(matches!(
            solve_orca_qp(&far, Vec2::ZERO, &params()),
            Err(Error::InfeasibleGeometry(_))
        ));
    }

    #[test]
    fn perturbation_along_active_normal_shows_in_residuals() {
        let planes = OrcaPlanes {
            agents: vec![],
            obstacles: vec![HalfPlane::new(Vec2::new(0.0, 1.0), 0.2).unwrap()],
        };
        let vi = Vec2::new(0.5, -0.4);
        let mut s = solve_orca_qp(&planes, vi, &params()).unwrap();
        s.velocity = s.velocity - Vec2::new(0.0, 1e-3);
        let r = kkt_residuals(&planes, &s, vi, &params()).unwrap();
        assert!(r.max_abs() > 5e-4 && r.max_abs() < 1e-2);
    }

    #[test]
    fn zero_duals_stationarity_is_twice_the_offset() {
        let planes = OrcaPlanes::default();
        let vi = Vec2::new(0.3, 0.1);
        let s = OrcaSolution {
            velocity: Vec2::new(-0.2, 0.5),
            duals: vec![],
            disc_dual: 0.0,
            slack: 0.0,
            slack_dual: 0.0,
            active_set: vec![],
        };
        let r = kkt_residuals(&planes, &s, vi, &params()).unwrap();
        let g = Vec2::new(r.stationarity[0], r.stationarity[1]);
        assert!((g.norm() - 2.0 * (s.velocity - vi).norm()).abs() < 1e-15);
        assert!(kkt_residuals(
            &OrcaPlanes {
                agents: vec![HalfPlane::new(Vec2::new(1.0, 0.0), 0.0).unwrap()],
                obstacles: vec![]
            },
            &s,
            vi,
            &params()
        )
        .is_err());
    }

    #[test]
    fn dual_evaluation_matches_scalar_path() {
        let p = |x: f64| {
            agent_halfplane(
                Vec2::new(x, 0.1),
                Vec2::new(0.9, 0.0),
                Vec2::new(2.0, -0.2),
                Vec2::new(-0.8, 0.1),
                &pair(),
            )
            .unwrap()
        };
        let d = agent_halfplane(
            Vec2::new(Dual::<1>::variable(0.0, 0), Dual::constant(0.1)),
            Vec2::cst(Vec2::new(0.9, 0.0)),
            Vec2::cst(Vec2::new(2.0, -0.2)),
            Vec2::cst(Vec2::new(-0.8, 0.1)),
            &pair(),
        )
        .unwrap();
        let h = 1e-6;
        let fd = (p(h).offset - p(-h).offset) / (2.0 * h);
        assert!((d.offset.re - p(0.0).offset).abs() < 1e-15);
        assert!((d.offset.eps[0] - fd).abs() < 1e-7);
    }

    fn random_pair() -> impl Strategy<Value = (Vec2, Vec2, Vec2, Vec2)> {
        (
            -3.0..3.0f64,
            -3.0..3.0f64,
            -1.5..1.5f64,
            -1.5..1.5f64,
            -3.0..3.0f64,
            -3.0..3.0f64,
            -1.5..1.5f64,
            -1.5..1.5f64,
        )
            .prop_map(|(a, b, c, d, e, f, g, h)| {
                (
                    Vec2::new(a, b),
                    Vec2::new(c, d),
                    Vec2::new(e, f),
                    Vec2::new(g, h),
                )
            })
    }

    proptest! {
        #[test]
        fn reciprocal_halfplanes_prevent_collision(
            (pa, va, pb, vb) in random_pair(),
            ta in 0.0..std::f64::consts::TAU, tb in 0.0..std::f64::consts::TAU,
            sa in 0.0..2.0f64, sb in 0.0..2.0f64,
        ) {
            let pp = pair();
            prop_assume!(pa.distance(pb) > pp.combined_radius + 1e-3);
            let ha = agent_halfplane(pa, va, pb, vb, &pp).unwrap();
            let hb = agent_halfplane(pb, vb, pa, va, &pp).unwrap();
            // any velocity on each feasible side: project a random probe
            let project = |h: &HalfPlane, v: Vec2| {
                let m = h.margin(v);
                if m >= 0.0 { v } else { v - m * h.normal }
            };
            let na = project(&ha, sa * Vec2::from_angle(ta));
            let nb = project(&hb, sb * Vec2::from_angle(tb));
            let steps = 2000;
            for k in 0..=steps {
                let t = pp.time_horizon * k as f64 / steps as f64;
                let d = (pb + t * nb).distance(pa + t * na);
                prop_assert!(d >= pp.combined_radius - 1e-6, "distance {} at t={}", d, t);
            }
        }

        #[test]
        fn wall_halfplane_keeps_clearance(
            px in -2.0..2.0f64, py in 0.4..3.0f64,
            ax in -3.0..0.0f64, bx in 0.0..3.0f64, tilt in -0.5..0.5f64,
            speed in 0.0..1.5f64, angle in 0.0..std::f64::consts::TAU,
        ) {
            let wall = Segment::new(Vec2::new(ax, tilt * ax), Vec2::new(bx, tilt * bx)).unwrap();
            let p = Vec2::new(px, py);
            let radius = 0.3;
            prop_assume!(point_segment_distance(p, &wall) > radius);
            let tau = 1.0;
            let hp = obstacle_halfplane(p, &wall, radius, tau).unwrap();
            let v = speed * Vec2::from_angle(angle);
            let v = if hp.margin(v) >= 0.0 { v } else { v - hp.margin(v) * hp.normal };
            for k in 0..=1000 {
                let t = tau * k as f64 / 1000.0;
                prop_assert!(point_segment_distance(p + t * v, &wall) >= radius - 1e-3);
            }
        }

        #[test]
        fn feasible_intent_is_returned_unchanged(
            normals in proptest::collection::vec(0.0..std::f64::consts::TAU, 0..6),
            margins in proptest::collection::vec(0.0..1.0f64, 6),
            vx in -1.0..1.0f64, vy in -1.0..1.0f64,
        ) {
            let vi = Vec2::new(vx, vy);
            let planes = OrcaPlanes {
                agents: normals.iter().zip(&margins).take(3).map(|(a, m)| {
                    let n = Vec2::from_angle(*a);
                    HalfPlane::new(n, n.dot(vi) - m).unwrap()
                }).collect(),
                obstacles: normals.iter().zip(&margins).skip(3).map(|(a, m)| {
                    let n = Vec2::from_angle(*a);
                    HalfPlane::new(n, n.dot(vi) - m).unwrap()
                }).collect(),
            };
            let s = solve_orca_qp(&planes, vi, &params()).unwrap();
            prop_assert_eq!(s.velocity, vi);
        }

        #[test]
        fn adding_planes_never_moves_solution_closer(
            normals in proptest::collection::vec(0.0..std::f64::consts::TAU, 1..8),
            offsets in proptest::collection::vec(-0.6..0.4f64, 8),
            vx in -1.4..1.4f64, vy in -1.4..1.4f64,
        ) {
            let vi = Vec2::new(vx, vy);
            let mut planes = OrcaPlanes::default();
            let mut last = 0.0;
            for (a, b) in normals.iter().zip(&offsets) {
                planes.agents.push(HalfPlane::new(Vec2::from_angle(*a), *b).unwrap());
                let s = solve_orca_qp(&planes, vi, &params()).unwrap();
                let r = kkt_residuals(&planes, &s, vi, &params()).unwrap();
                prop_assert!(r.max_abs() <= 1e-8, "{:?}", r);
                let dist = (s.velocity - vi).norm_squared()
                    + params().relaxation_penalty * s.slack * s.slack;
                prop_assert!(dist >= last - 1e-12);
                last = dist;
            }
        }
    }
}
