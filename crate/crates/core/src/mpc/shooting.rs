//! SQP over the robot actions alone.
//!
//! Every iterate is a rollout: the lower-level problems are solved exactly
//! for the candidate actions, so the embedded KKT systems hold at each
//! iterate and only the action bounds, rate limits and collision rows
//! remain as constraints. Step directions come from a Gauss-Newton QP in
//! the actions, built from the fixed-active-set sensitivities of the
//! assembled problem, and are globalized with an l1 merit line search on
//! the rolled-out collision residuals.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::nlp::{NlpProblem, SolveStatus, SolverSettings};
use crate::qp::{DenseQp, QpError};
use crate::state::RobotAction;

use super::problem::SicnavProblem;

/// Result of [`optimize_actions`].
#[derive(Clone, Debug)]
pub struct ShootingSolution {
    pub x: Vec<f64>,
    pub status: SolveStatus,
    pub iterations: usize,
    pub objective: f64,
    /// Worst of reduced stationarity, collision violation and multiplier
    /// complementarity.
    pub kkt_residual: f64,
    /// Largest violation over all constraints of the assembled problem.
    pub primal_infeasibility: f64,
    /// Largest lower-level complementarity product.
    pub complementarity: f64,
    pub message: String,
}

struct Iterate {
    u: Vec<f64>,
    x: Vec<f64>,
    f: f64,
    /// Collision residuals, `>= 0` when satisfied.
    coll: Vec<f64>,
}

impl Iterate {
    fn violation(&self) -> f64 {
        self.coll.iter().map(|v| (-v).max(0.0)).sum()
    }
}

fn rollout(problem: &SicnavProblem, u: &[f64]) -> Result<Iterate> {
    let actions: Vec<RobotAction> = u.chunks(2).map(|c| RobotAction::new(c[0], c[1])).collect();
    let x = problem.rollout(&actions)?;
    let f = problem.objective(&x);
    let g = problem.inequalities(&x);
    let coll = problem
        .collision_rows()
        .iter()
        .map(|&r| g[r])
        .collect::<Vec<_>>();
    if !f.is_finite() || coll.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidState(
            "rollout produced non-finite values".into(),
        ));
    }
    Ok(Iterate {
        u: u.to_vec(),
        x,
        f,
        coll,
    })
}

/// Optimizes the action sequence starting from `initial`, which must
/// satisfy the action bounds and rate limits.
pub fn optimize_actions(
    problem: &SicnavProblem,
    initial: &[RobotAction],
    settings: &SolverSettings,
) -> Result<ShootingSolution> {
    settings.validate()?;
    let start = Instant::now();
    let u0: Vec<f64> = initial
        .iter()
        .flat_map(|a| [a.linear_velocity, a.angular_velocity])
        .collect();
    let nu = u0.len();
    if nu != 2 * problem.horizon() {
        return Err(Error::DimensionMismatch(format!(
            "{} actions for horizon {}",
            initial.len(),
            problem.horizon()
        )));
    }
    let (lb, ub) = problem.bounds();
    let ui = problem.action_indices();
    let (ulo, uhi): (Vec<f64>, Vec<f64>) = (0..nu)
        .map(|k| (lb[ui[k / 2] + k % 2], ub[ui[k / 2] + k % 2]))
        .unzip();
    let rate_rows = problem.rate_rows();
    let coll_rows = problem.collision_rows();
    let hess_f = problem.hessian(&u0).unwrap_or_default();
    let mut weights = vec![0.0; problem.num_variables()];
    for (r, row) in hess_f.rows.iter().enumerate() {
        for &(c, v) in row {
            if c == r {
                weights[r] += v;
            }
        }
    }
    let mut model: Option<DMatrix<f64>> = None;
    let mut stalled = 0;
    let mut last: Option<Previous> = None;

    let mut it = rollout(problem, &u0)?;
    let mut nu_merit = 1.0f64;
    let mut delta = settings.convexification;
    let mut iterations = 0;
    let mut kkt = f64::INFINITY;
    let mut status = SolveStatus::MaxIter;
    let mut message = String::new();
    loop {
        if iterations >= settings.max_iterations {
            break;
        }
        if start.elapsed().as_secs_f64() * 1e3 > settings.budget_ms {
            status = SolveStatus::BudgetExhausted;
            break;
        }
        iterations += 1;

        let d = problem.action_sensitivities(&it.x)?;
        let grad = DVector::from_vec(problem.gradient(&it.x));
        let g_red = d.tr_mul(&grad);
        // constraint rows on the step: bounds, rates, collisions
        let ineq = problem.inequality_jacobian(&it.x);
        let g_all = problem.inequalities(&it.x);
        let m = 2 * nu + rate_rows.len() + coll_rows.len();
        let mut a = DMatrix::zeros(m, nu);
        let mut b = DVector::zeros(m);
        for k in 0..nu {
            a[(2 * k, k)] = 1.0;
            b[2 * k] = ulo[k] - it.u[k];
            a[(2 * k + 1, k)] = -1.0;
            b[2 * k + 1] = it.u[k] - uhi[k];
        }
        let mut row = 2 * nu;
        for &r in rate_rows.iter().chain(&coll_rows) {
            for &(c, v) in &ineq.rows[r] {
                for k in 0..nu {
                    a[(row, k)] += v * d[(c, k)];
                }
            }
            b[row] = -g_all[r];
            row += 1;
        }
        let first_coll = 2 * nu + rate_rows.len();

        // damped BFGS on the reduced Lagrangian, seeded with Gauss-Newton
        let b_mat = match (model.take(), &last) {
            (Some(mut bm), Some(prev)) => {
                let grad_l = &g_red - a.tr_mul(&prev.multipliers);
                let s_vec =
                    DVector::from_iterator(nu, it.u.iter().zip(&prev.u).map(|(a, b)| a - b));
                bfgs_update(&mut bm, &s_vec, &(grad_l - &prev.grad_l));
                bm
            }
            _ => gauss_newton(&d, &weights),
        };
        let mut h = b_mat.clone();
        for k in 0..nu {
            h[(k, k)] += delta;
        }
        let (step, multipliers, residual) = match (DenseQp {
            hessian: &h,
            linear: &g_red,
            a: &a,
            b: &b,
            num_equalities: 0,
        })
        .solve()
        {
            Ok(sol) => (sol.x, sol.multipliers, 0.0),
            Err(QpError::Infeasible(_) | QpError::IterationLimit) => {
                elastic(&h, &g_red, &a, &b, first_coll, nu_merit)?
            }
            Err(e) => return Err(Error::InvalidState(format!("action QP failed: {e}"))),
        };

        // reduced KKT at the current iterate, with the new multipliers,
        // scaled by the gradient and multiplier magnitudes
        let stat = (&h * &step).amax() / (1.0 + g_red.amax());
        let comp = multipliers
            .iter()
            .zip(b.iter())
            .map(|(z, bi)| (z * bi).abs())
            .fold(0.0, f64::max)
            / (1.0 + multipliers.amax());
        let primal = it.coll.iter().map(|v| (-v).max(0.0)).fold(0.0, f64::max);
        kkt = stat.max(comp).max(primal);
        if kkt <= settings.kkt_tolerance {
            status = SolveStatus::Converged;
            break;
        }
        if step.amax() <= 1e-10 || stalled >= 2 {
            message = "no further progress before the tolerance was met".into();
            break;
        }
        last = Some(Previous {
            u: it.u.clone(),
            grad_l: &g_red - a.tr_mul(&multipliers),
            multipliers: multipliers.clone(),
        });
        model = Some(b_mat);

        nu_merit = multipliers
            .rows(first_coll, m - first_coll)
            .iter()
            .fold(nu_merit, |acc, z| acc.max(1.1 * z.abs()));
        let viol = it.violation();
        let merit = it.f + nu_merit * viol;
        let slope = g_red.dot(&step) - nu_merit * (viol - residual);
        let mut alpha = 1.0;
        let mut accepted = None;
        while alpha >= settings.min_step {
            let ut: Vec<f64> =
                it.u.iter()
                    .zip(step.iter())
                    .enumerate()
                    .map(|(k, (u, s))| (u + alpha * s).clamp(ulo[k], uhi[k]))
                    .collect();
            if let Ok(trial) = rollout(problem, &ut) {
                if trial.f + nu_merit * trial.violation()
                    <= merit + settings.armijo * alpha * slope.min(0.0)
                {
                    accepted = Some(trial);
                    break;
                }
            }
            alpha *= settings.backtrack;
        }
        match accepted {
            Some(trial) => {
                let merit_after = trial.f + nu_merit * trial.violation();
                stalled = if merit - merit_after <= 1e-9 * (1.0 + merit.abs()) {
                    stalled + 1
                } else {
                    0
                };
                it = trial;
                delta = if alpha == 1.0 {
                    (delta * 0.1).max(settings.convexification)
                } else if alpha < 0.25 {
                    delta * 10.0
                } else {
                    delta
                };
            }
            None if model.is_some() => {
                // retry from the Gauss-Newton model
                model = None;
                last = None;
                delta *= 10.0;
            }
            None => {
                message = "line search failed".into();
                break;
            }
        }
    }

    let primal_all = assembled_violation(problem, &it.x);
    let complementarity = complementarity(problem, &it.x);
    if status != SolveStatus::Converged && it.coll.iter().any(|v| *v < -settings.kkt_tolerance) {
        if message.is_empty() {
            message = format!("{status:?} with collision residuals violated");
        }
        status = SolveStatus::Infeasible;
    }
    Ok(ShootingSolution {
        x: it.x,
        status,
        iterations,
        objective: it.f,
        kkt_residual: kkt,
        primal_infeasibility: primal_all,
        complementarity,
        message,
    })
}

struct Previous {
    u: Vec<f64>,
    grad_l: DVector<f64>,
    multipliers: DVector<f64>,
}

/// `D' W D` for the diagonal cost Hessian `W`.
fn gauss_newton(d: &DMatrix<f64>, weights: &[f64]) -> DMatrix<f64> {
    let mut scaled = d.clone();
    for (r, w) in weights.iter().enumerate() {
        scaled.row_mut(r).scale_mut(*w);
    }
    d.tr_mul(&scaled)
}

/// Powell-damped BFGS update of `b` with step `s` and gradient change `y`.
fn bfgs_update(b: &mut DMatrix<f64>, s: &DVector<f64>, y: &DVector<f64>) {
    let bs = &*b * s;
    let sbs = s.dot(&bs);
    if sbs <= 1e-14 {
        return;
    }
    let sy = s.dot(y);
    let r = if sy < 0.2 * sbs {
        let theta = 0.8 * sbs / (sbs - sy);
        theta * y + (1.0 - theta) * &bs
    } else {
        y.clone()
    };
    let sr = s.dot(&r);
    *b += &r * r.transpose() / sr - &bs * bs.transpose() / sbs;
}

/// QP with one extra variable relaxing the collision rows, penalized by
/// `weight`.
fn elastic(
    h: &DMatrix<f64>,
    g: &DVector<f64>,
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    first_coll: usize,
    weight: f64,
) -> Result<(DVector<f64>, DVector<f64>, f64)> {
    let n = h.nrows();
    let m = a.nrows();
    let weight = 10.0 * weight.max(1.0);
    let mut he = DMatrix::zeros(n + 1, n + 1);
    he.view_mut((0, 0), (n, n)).copy_from(h);
    he[(n, n)] = 1e-6 * weight;
    let ge = g.clone().insert_row(n, weight);
    let mut ae = DMatrix::zeros(m + 1, n + 1);
    ae.view_mut((0, 0), (m, n)).copy_from(a);
    for r in first_coll..=m {
        ae[(r, n)] = 1.0;
    }
    let be = b.clone().insert_row(m, 0.0);
    let sol = DenseQp {
        hessian: &he,
        linear: &ge,
        a: &ae,
        b: &be,
        num_equalities: 0,
    }
    .solve()
    .map_err(|e| Error::InvalidState(format!("elastic action QP failed: {e}")))?;
    let t = sol.x[n].max(0.0);
    Ok((
        sol.x.rows(0, n).into_owned(),
        sol.multipliers.rows(0, m).into_owned(),
        (m - first_coll) as f64 * t,
    ))
}

/// Largest violation of the equalities, inequalities and bounds.
pub(crate) fn assembled_violation(problem: &SicnavProblem, x: &[f64]) -> f64 {
    let (lb, ub) = problem.bounds();
    let bounds = x
        .iter()
        .zip(lb.iter().zip(&ub))
        .map(|(v, (l, u))| (l - v).max(v - u).max(0.0));
    problem
        .equalities(x)
        .iter()
        .map(|v| v.abs())
        .chain(problem.inequalities(x).iter().map(|v| (-v).max(0.0)))
        .chain(bounds)
        .fold(0.0, f64::max)
}

/// Largest complementarity product over the lower-level pairs.
pub(crate) fn complementarity(problem: &SicnavProblem, x: &[f64]) -> f64 {
    let g = problem.inequalities(x);
    problem
        .complementarity()
        .iter()
        .map(|p| {
            let side = |s| match s {
                crate::nlp::CompSide::Variable(i) => x[i],
                crate::nlp::CompSide::Inequality(i) => g[i],
            };
            side(p.a) * side(p.b)
        })
        .fold(0.0, f64::max)
}
