//! Dense SQP solver for smooth NLPs with relaxed complementarity constraints.
//!
//! ```text
//!     minimize    f(x)
//!     subject to  c(x)  = 0
//!                 g(x) >= 0
//!                 l <= x <= u
//!                 a_k(x) >= 0, b_k(x) >= 0, a_k(x) b_k(x) <= rho
//! ```
//!
//! Each complementarity pair becomes the smooth inequality
//! `rho - a_k b_k >= 0` and `rho` is driven from `rho_initial` to `rho_min`
//! over outer stages. Inside a stage, steps come from convex QPs built from
//! a Gauss-Newton (or damped BFGS) Hessian and linearized constraints, and
//! are globalized with an l1 merit line search.
//!
//! The QP subproblems are dense and solved with the dual active-set method
//! of [`crate::qp`]; infeasible linearizations fall back to an elastic mode.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::qp::{DenseQp, QpError, QpSolution};

/// Row-wise sparse matrix.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RowMatrix {
    pub ncols: usize,
    pub rows: Vec<Vec<(usize, f64)>>,
}

impl RowMatrix {
    pub fn new(nrows: usize, ncols: usize) -> Self {
        Self {
            ncols,
            rows: vec![Vec::new(); nrows],
        }
    }

    pub fn nrows(&self) -> usize {
        self.rows.len()
    }

    /// Adds `value` at `(row, col)`; duplicate entries accumulate.
    pub fn push(&mut self, row: usize, col: usize, value: f64) {
        debug_assert!(col < self.ncols);
        if value != 0.0 {
            self.rows[row].push((col, value));
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.nrows(), self.ncols);
        for (r, row) in self.rows.iter().enumerate() {
            for &(c, v) in row {
                m[(r, c)] += v;
            }
        }
        m
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        self.rows
            .iter()
            .map(|row| row.iter().map(|&(c, v)| v * x[c]).sum())
            .collect()
    }

    /// `self^T y`
    pub fn tr_mul_vec(&self, y: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.ncols];
        for (row, &yr) in self.rows.iter().zip(y) {
            if yr != 0.0 {
                for &(c, v) in row {
                    out[c] += v * yr;
                }
            }
        }
        out
    }

    fn is_finite(&self) -> bool {
        self.rows.iter().flatten().all(|(_, v)| v.is_finite())
    }
}

/// One side of a complementarity pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CompSide {
    Variable(usize),
    Inequality(usize),
}

/// `a >= 0, b >= 0, a b <= rho`. Non-negativity of each side must be
/// stated separately, as a bound or an inequality.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComplementarityPair {
    pub a: CompSide,
    pub b: CompSide,
}

/// Callback interface of a smooth NLP. Inequalities use the `g(x) >= 0`
/// convention.
pub trait NlpProblem {
    fn num_variables(&self) -> usize;
    fn num_equalities(&self) -> usize;
    fn num_inequalities(&self) -> usize;
    fn objective(&self, x: &[f64]) -> f64;
    fn gradient(&self, x: &[f64]) -> Vec<f64>;
    fn equalities(&self, x: &[f64]) -> Vec<f64>;
    fn equality_jacobian(&self, x: &[f64]) -> RowMatrix;
    fn inequalities(&self, x: &[f64]) -> Vec<f64>;
    fn inequality_jacobian(&self, x: &[f64]) -> RowMatrix;

    /// Lower and upper variable bounds; infinite entries are ignored.
    fn bounds(&self) -> (Vec<f64>, Vec<f64>) {
        let n = self.num_variables();
        (vec![f64::NEG_INFINITY; n], vec![f64::INFINITY; n])
    }

    fn complementarity(&self) -> Vec<ComplementarityPair> {
        Vec::new()
    }

    /// Gauss-Newton approximation of the objective Hessian. `None` selects
    /// the BFGS fallback.
    fn hessian(&self, _x: &[f64]) -> Option<RowMatrix> {
        None
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverSettings {
    /// Total SQP iterations over all relaxation stages.
    pub max_iterations: usize,
    pub kkt_tolerance: f64,
    pub rho_initial: f64,
    pub rho_min: f64,
    pub rho_decay: f64,
    /// Sufficient-decrease constant of the merit line search.
    pub armijo: f64,
    pub backtrack: f64,
    pub min_step: f64,
    /// Accepted stationarity error of each QP subproblem.
    pub qp_tolerance: f64,
    /// Proximal term added to the QP Hessian.
    pub convexification: f64,
    pub budget_ms: f64,
    pub log_iterations: bool,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            max_iterations: 200,
            kkt_tolerance: 1e-6,
            rho_initial: 1e-1,
            rho_min: 1e-5,
            rho_decay: 0.2,
            armijo: 1e-4,
            backtrack: 0.5,
            min_step: 1e-6,
            qp_tolerance: 1e-7,
            convexification: 1e-4,
            budget_ms: 10_000.0,
            log_iterations: false,
        }
    }
}

impl SolverSettings {
    pub fn validate(&self) -> Result<()> {
        let ok = self.max_iterations > 0
            && self.kkt_tolerance > 0.0
            && self.rho_min > 0.0
            && self.rho_initial >= self.rho_min
            && self.rho_decay > 0.0
            && self.rho_decay < 1.0
            && self.armijo > 0.0
            && self.armijo < 0.5
            && self.backtrack > 0.0
            && self.backtrack < 1.0
            && self.min_step > 0.0
            && self.qp_tolerance > 0.0
            && self.convexification > 0.0
            && self.budget_ms > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!(
                "invalid solver settings {self:?}"
            )))
        }
    }

    fn schedule(&self) -> Vec<f64> {
        let mut out = vec![self.rho_initial];
        let mut rho = self.rho_initial;
        while rho > self.rho_min * (1.0 + 1e-12) {
            rho = (rho * self.rho_decay).max(self.rho_min);
            out.push(rho);
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Converged,
    MaxIter,
    BudgetExhausted,
    Infeasible,
    NumericalFailure,
}

/// Lagrange multipliers in problem order. Complementarity multipliers
/// belong to the relaxed `rho - a b >= 0` rows.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Multipliers {
    pub equality: Vec<f64>,
    pub inequality: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub complementarity: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub rho: f64,
    pub merit_before: f64,
    pub merit_after: f64,
    pub kkt: f64,
    pub step: f64,
    pub step_norm: f64,
    pub qp_iterations: usize,
    pub elastic: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NlpSolution {
    pub x: Vec<f64>,
    pub multipliers: Multipliers,
    pub status: SolveStatus,
    pub objective: f64,
    /// Worst of stationarity, primal infeasibility and multiplier
    /// complementarity at the final relaxation level.
    pub kkt_residual: f64,
    pub primal_infeasibility: f64,
    /// Largest complementarity product `a_k b_k`.
    pub complementarity: f64,
    pub rho: f64,
    pub iterations: usize,
    pub solve_time_ms: f64,
    pub message: String,
    pub log: Vec<IterationRecord>,
}

/// Which problem object an internal inequality row came from.
#[derive(Clone, Copy, Debug)]
enum RowKind {
    Inequality(usize),
    Lower(usize),
    Upper(usize),
    Comp(usize),
}

struct Layout {
    n: usize,
    neq: usize,
    kinds: Vec<RowKind>,
    lower: Vec<f64>,
    upper: Vec<f64>,
    pairs: Vec<ComplementarityPair>,
}

struct Eval {
    f: f64,
    grad: Vec<f64>,
    c: Vec<f64>,
    jc: RowMatrix,
    h: Vec<f64>,
    jh: RowMatrix,
    comp_max: f64,
}

impl Layout {
    fn new<P: NlpProblem + ?Sized>(problem: &P) -> Result<Self> {
        let n = problem.num_variables();
        let neq = problem.num_equalities();
        let nin = problem.num_inequalities();
        let (lower, upper) = problem.bounds();
        if lower.len() != n || upper.len() != n {
            return Err(Error::DimensionMismatch(
                "bounds length differs from n".into(),
            ));
        }
        let pairs = problem.complementarity();
        for p in &pairs {
            for side in [p.a, p.b] {
                let ok = match side {
                    CompSide::Variable(i) => i < n,
                    CompSide::Inequality(i) => i < nin,
                };
                if !ok {
                    return Err(Error::DimensionMismatch(format!(
                        "complementarity side {side:?}"
                    )));
                }
            }
        }
        let mut kinds: Vec<RowKind> = (0..nin).map(RowKind::Inequality).collect();
        kinds.extend((0..n).filter(|&i| lower[i].is_finite()).map(RowKind::Lower));
        kinds.extend((0..n).filter(|&i| upper[i].is_finite()).map(RowKind::Upper));
        kinds.extend((0..pairs.len()).map(RowKind::Comp));

        Ok(Self {
            n,
            neq,
            kinds,
            lower,
            upper,
            pairs,
        })
    }

    fn evaluate<P: NlpProblem + ?Sized>(&self, problem: &P, x: &[f64], rho: f64) -> Result<Eval> {
        let f = problem.objective(x);
        let grad = problem.gradient(x);
        let c = problem.equalities(x);
        let jc = problem.equality_jacobian(x);
        let g = problem.inequalities(x);
        let jg = problem.inequality_jacobian(x);
        if grad.len() != self.n
            || c.len() != self.neq
            || jc.nrows() != self.neq
            || g.len() != problem.num_inequalities()
            || jg.nrows() != g.len()
        {
            return Err(Error::DimensionMismatch(
                "callback output sizes are inconsistent".into(),
            ));
        }
        let finite = f.is_finite()
            && grad.iter().chain(&c).chain(&g).all(|v| v.is_finite())
            && jc.is_finite()
            && jg.is_finite();
        if !finite {
            return Err(Error::InvalidState(
                "callback returned non-finite values".into(),
            ));
        }
        let side = |s: CompSide| -> (f64, Vec<(usize, f64)>) {
            match s {
                CompSide::Variable(i) => (x[i], vec![(i, 1.0)]),
                CompSide::Inequality(i) => (g[i], jg.rows[i].clone()),
            }
        };
        let mut h = Vec::with_capacity(self.kinds.len());
        let mut jh = RowMatrix::new(self.kinds.len(), self.n);
        let mut comp_max: f64 = 0.0;
        for (r, kind) in self.kinds.iter().enumerate() {
            match *kind {
                RowKind::Inequality(i) => {
                    h.push(g[i]);
                    jh.rows[r] = jg.rows[i].clone();
                }
                RowKind::Lower(i) => {
                    h.push(x[i] - self.lower[i]);
                    jh.push(r, i, 1.0);
                }
                RowKind::Upper(i) => {
                    h.push(self.upper[i] - x[i]);
                    jh.push(r, i, -1.0);
                }
                RowKind::Comp(k) => {
                    let (a, ja) = side(self.pairs[k].a);
                    let (b, jb) = side(self.pairs[k].b);
                    comp_max = comp_max.max(a * b);
                    h.push(rho - a * b);
                    for (col, v) in ja {
                        jh.push(r, col, -b * v);
                    }
                    for (col, v) in jb {
                        jh.push(r, col, -a * v);
                    }
                }
            }
        }
        Ok(Eval {
            f,
            grad,
            c,
            jc,
            h,
            jh,
            comp_max,
        })
    }

    fn violation(&self, e: &Eval) -> f64 {
        e.c.iter().map(|v| v.abs()).sum::<f64>() + e.h.iter().map(|v| (-v).max(0.0)).sum::<f64>()
    }

    fn max_violation(&self, e: &Eval) -> f64 {
        e.c.iter()
            .map(|v| v.abs())
            .chain(e.h.iter().map(|v| (-v).max(0.0)))
            .fold(0.0, f64::max)
    }

    fn split_multipliers(&self, y: &[f64], z: &[f64]) -> Multipliers {
        let mut m = Multipliers {
            equality: y.to_vec(),
            inequality: Vec::new(),
            lower: vec![0.0; self.n],
            upper: vec![0.0; self.n],
            complementarity: vec![0.0; self.pairs.len()],
        };
        for (kind, &v) in self.kinds.iter().zip(z) {
            match *kind {
                RowKind::Inequality(_) => m.inequality.push(v),
                RowKind::Lower(i) => m.lower[i] = v,
                RowKind::Upper(i) => m.upper[i] = v,
                RowKind::Comp(k) => m.complementarity[k] = v,
            }
        }
        m
    }

    fn join_multipliers(&self, m: &Multipliers) -> Option<(Vec<f64>, Vec<f64>)> {
        if m.equality.len() != self.neq
            || m.lower.len() != self.n
            || m.upper.len() != self.n
            || m.complementarity.len() != self.pairs.len()
        {
            return None;
        }
        let mut z = Vec::with_capacity(self.kinds.len());
        for kind in &self.kinds {
            z.push(match *kind {
                RowKind::Inequality(i) => *m.inequality.get(i)?,
                RowKind::Lower(i) => m.lower[i],
                RowKind::Upper(i) => m.upper[i],
                RowKind::Comp(k) => m.complementarity[k],
            });
        }
        Some((m.equality.clone(), z))
    }

    /// Stationarity, primal and multiplier-complementarity residuals.
    fn kkt(&self, e: &Eval, y: &[f64], z: &[f64]) -> (f64, f64, f64) {
        let jy = e.jc.tr_mul_vec(y);
        let jz = e.jh.tr_mul_vec(z);
        let stat = (0..self.n)
            .map(|i| (e.grad[i] - jy[i] - jz[i]).abs())
            .fold(0.0, f64::max);
        let primal = self.max_violation(e);
        let comp =
            e.h.iter()
                .zip(z)
                .map(|(h, z)| (h * z).abs())
                .chain(z.iter().map(|z| (-z).max(0.0)))
                .fold(0.0, f64::max);
        (stat, primal, comp)
    }
}

enum Hessian {
    Sparse(RowMatrix),
    Dense(DMatrix<f64>),
}

impl Hessian {
    /// Symmetrized dense matrix with `delta` added to diagonal entries that
    /// carry no curvature of their own, or to the whole diagonal when that
    /// is not enough for positive definiteness.
    fn convexified(&self, n: usize, delta: f64) -> DMatrix<f64> {
        let h = match self {
            Hessian::Sparse(m) => m.to_dense(),
            Hessian::Dense(m) => m.clone(),
        };
        let h = 0.5 * (&h + h.transpose());
        let mut out = h.clone();
        for i in 0..n {
            if out[(i, i)] <= delta {
                out[(i, i)] += delta;
            }
        }
        if out.clone().cholesky().is_some() {
            return out;
        }
        let mut out = h;
        for i in 0..n {
            out[(i, i)] += delta;
        }
        out
    }
}

struct QpStep {
    d: Vec<f64>,
    y: Vec<f64>,
    z: Vec<f64>,
    iterations: usize,
    elastic: bool,
    /// Linearized l1 violation remaining after the step.
    residual_violation: f64,
}

/// Builds and solves the QP subproblem for the step `d`, falling back to an
/// elastic l_inf relaxation of the inequalities when it is infeasible.
fn qp_step(
    layout: &Layout,
    e: &Eval,
    hess: &Hessian,
    delta: f64,
    elastic_weight: f64,
    tolerance: f64,
) -> Result<QpStep> {
    let n = layout.n;
    let neq = layout.neq;
    let m = e.h.len();
    let h = hess.convexified(n, delta);
    let mut a = DMatrix::zeros(neq + m, n);
    for (r, row) in e.jc.rows.iter().chain(&e.jh.rows).enumerate() {
        for &(c, v) in row {
            a[(r, c)] += v;
        }
    }
    let b = DVector::from_iterator(neq + m, e.c.iter().chain(&e.h).map(|v| -v));
    let g = DVector::from_column_slice(&e.grad);
    let plain = DenseQp {
        hessian: &h,
        linear: &g,
        a: &a,
        b: &b,
        num_equalities: neq,
    }
    .solve();
    match plain {
        Ok(sol) => {
            check_qp(&h, &g, &a, &b, neq, &sol, tolerance)?;
            return Ok(QpStep {
                d: sol.x.iter().copied().collect(),
                y: sol.multipliers.rows(0, neq).iter().copied().collect(),
                z: sol.multipliers.rows(neq, m).iter().copied().collect(),
                iterations: sol.iterations,
                elastic: false,
                residual_violation: 0.0,
            });
        }
        Err(QpError::Infeasible(_) | QpError::IterationLimit) => {}
        Err(err) => return Err(Error::InvalidState(format!("QP subproblem failed: {err}"))),
    }
    // elastic: one extra variable t >= 0 relaxing every inequality
    let mut he = DMatrix::zeros(n + 1, n + 1);
    he.view_mut((0, 0), (n, n)).copy_from(&h);
    he[(n, n)] = delta.max(1e-8) * elastic_weight.max(1.0);
    let ge = g.clone().insert_row(n, elastic_weight);
    let mut ae = DMatrix::zeros(neq + m + 1, n + 1);
    ae.view_mut((0, 0), (neq + m, n)).copy_from(&a);
    for r in neq..neq + m + 1 {
        ae[(r, n)] = 1.0;
    }
    let be = b.insert_row(neq + m, 0.0);
    let sol = DenseQp {
        hessian: &he,
        linear: &ge,
        a: &ae,
        b: &be,
        num_equalities: neq,
    }
    .solve()
    .map_err(|err| Error::InvalidState(format!("elastic QP subproblem failed: {err}")))?;
    check_qp(&he, &ge, &ae, &be, neq, &sol, tolerance)?;
    let t = sol.x[n].max(0.0);
    Ok(QpStep {
        d: sol.x.rows(0, n).iter().copied().collect(),
        y: sol.multipliers.rows(0, neq).iter().copied().collect(),
        z: sol.multipliers.rows(neq, m).iter().copied().collect(),
        iterations: sol.iterations,
        elastic: true,
        residual_violation: m as f64 * t,
    })
}

/// Rejects subproblem solutions whose scaled KKT residual exceeds
/// `tolerance`.
fn check_qp(
    h: &DMatrix<f64>,
    g: &DVector<f64>,
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    neq: usize,
    sol: &QpSolution,
    tolerance: f64,
) -> Result<()> {
    let stat = h * &sol.x + g - a.tr_mul(&sol.multipliers);
    let scale = 1.0 + g.amax() + (h * &sol.x).amax();
    let ax = a * &sol.x - b;
    let primal = ax
        .iter()
        .enumerate()
        .map(|(i, v)| if i < neq { v.abs() } else { (-v).max(0.0) })
        .fold(0.0, f64::max);
    let residual = (stat.amax() / scale).max(primal / (1.0 + b.amax()));
    if residual <= tolerance {
        Ok(())
    } else {
        Err(Error::InvalidState(format!(
            "QP subproblem residual {residual:.2e}"
        )))
    }
}

struct Best {
    x: Vec<f64>,
    y: Vec<f64>,
    z: Vec<f64>,
    feasible: bool,
    objective: f64,
    violation: f64,
}

impl Best {
    fn better(&self, feasible: bool, objective: f64, violation: f64) -> bool {
        match (feasible, self.feasible) {
            (true, false) => true,
            (false, true) => false,
            (true, true) => objective < self.objective,
            (false, false) => violation < self.violation,
        }
    }
}

/// Runs the relaxation homotopy from `x0`, optionally warm-started with
/// multipliers from a previous solve.
pub fn solve<P: NlpProblem + ?Sized>(
    problem: &P,
    x0: &[f64],
    warm: Option<&Multipliers>,
    settings: &SolverSettings,
) -> Result<NlpSolution> {
    settings.validate()?;
    let start = Instant::now();
    let layout = Layout::new(problem)?;
    if x0.len() != layout.n {
        return Err(Error::DimensionMismatch(format!(
            "initial guess has {} entries, problem has {}",
            x0.len(),
            layout.n
        )));
    }
    let schedule = settings.schedule();
    let rho_final = *schedule.last().expect("schedule is non-empty");
    let feas_tol = settings.kkt_tolerance;

    let mut x = x0.to_vec();
    let mut rho = schedule[0];
    let mut e = match layout.evaluate(problem, &x, rho) {
        Ok(e) => e,
        Err(err) => return Ok(failure(&layout, x, err, start, rho)),
    };
    let (mut y, mut z) = warm
        .and_then(|m| layout.join_multipliers(m))
        .unwrap_or_else(|| (vec![0.0; layout.neq], vec![0.0; e.h.len()]));
    let mut nu = y.iter().chain(&z).fold(1.0f64, |m, v| m.max(1.1 * v.abs()));
    let mut delta = settings.convexification;
    let mut bfgs: Option<DMatrix<f64>> = None;
    let mut log = Vec::new();
    let mut iterations = 0;
    let mut status = SolveStatus::MaxIter;
    let mut message = String::new();

    let final_eval = |x: &[f64]| layout.evaluate(problem, x, rho_final);
    let mut best = {
        let ef = final_eval(&x).ok();
        let (viol, obj) = ef.as_ref().map_or((f64::INFINITY, f64::INFINITY), |ef| {
            (layout.max_violation(ef), ef.f)
        });
        Best {
            x: x.clone(),
            y: y.clone(),
            z: z.clone(),
            feasible: viol <= feas_tol,
            objective: obj,
            violation: viol,
        }
    };

    'stages: for (stage, &stage_rho) in schedule.iter().enumerate() {
        let last_stage = stage + 1 == schedule.len();
        if stage_rho != rho {
            rho = stage_rho;
            e = match layout.evaluate(problem, &x, rho) {
                Ok(e) => e,
                Err(err) => {
                    status = SolveStatus::NumericalFailure;
                    message = err.to_string();
                    break 'stages;
                }
            };
        }
        let tol = if last_stage {
            settings.kkt_tolerance
        } else {
            settings.kkt_tolerance.max(rho)
        };
        let mut failures = 0;
        loop {
            let (stat, primal, comp) = layout.kkt(&e, &y, &z);
            let kkt = stat.max(primal).max(comp);
            if kkt <= tol {
                if last_stage {
                    status = SolveStatus::Converged;
                    break 'stages;
                }
                continue 'stages;
            }
            if iterations >= settings.max_iterations {
                status = SolveStatus::MaxIter;
                break 'stages;
            }
            if start.elapsed().as_secs_f64() * 1e3 > settings.budget_ms {
                status = SolveStatus::BudgetExhausted;
                break 'stages;
            }
            iterations += 1;

            let hess = match problem.hessian(&x) {
                Some(h) => Hessian::Sparse(h),
                None => Hessian::Dense(
                    bfgs.get_or_insert_with(|| DMatrix::identity(layout.n, layout.n))
                        .clone(),
                ),
            };
            let step = match qp_step(
                &layout,
                &e,
                &hess,
                delta,
                10.0 * nu.max(1.0),
                settings.qp_tolerance,
            ) {
                Ok(s) => s,
                Err(err) => {
                    status = SolveStatus::NumericalFailure;
                    message = err.to_string();
                    break 'stages;
                }
            };
            nu = step
                .y
                .iter()
                .chain(&step.z)
                .fold(nu, |m, v| m.max(1.1 * v.abs() + 1e-8));

            let viol = layout.violation(&e);
            let merit = e.f + nu * viol;
            let gd: f64 = e.grad.iter().zip(&step.d).map(|(g, d)| g * d).sum();
            let slope = gd - nu * (viol - step.residual_violation);
            let step_norm = step.d.iter().fold(0.0f64, |m, v| m.max(v.abs()));

            let mut alpha = 1.0;
            let mut accepted = None;
            while alpha >= settings.min_step {
                let xt: Vec<f64> = x.iter().zip(&step.d).map(|(x, d)| x + alpha * d).collect();
                if let Ok(et) = layout.evaluate(problem, &xt, rho) {
                    let mt = et.f + nu * layout.violation(&et);
                    if mt <= merit + settings.armijo * alpha * slope.min(0.0) {
                        accepted = Some((xt, et, mt));
                        break;
                    }
                }
                alpha *= settings.backtrack;
            }
            let Some((xn, en, merit_after)) = accepted else {
                failures += 1;
                log.push(IterationRecord {
                    iteration: iterations,
                    rho,
                    merit_before: merit,
                    merit_after: merit,
                    kkt,
                    step: 0.0,
                    step_norm,
                    qp_iterations: step.iterations,
                    elastic: step.elastic,
                });
                if failures >= 3 {
                    message = "line search failed".into();
                    break 'stages;
                }
                delta *= 10.0;
                continue;
            };
            failures = 0;
            // proximal weight follows the accepted step length
            if alpha < 0.25 {
                delta *= 10.0;
            } else if alpha == 1.0 {
                delta = (delta * 0.1).max(settings.convexification);
            }

            if let Some(b) = bfgs.as_mut() {
                bfgs_update(b, &layout, &e, &en, &x, &xn, &step.y, &step.z);
            }
            x = xn;
            e = en;
            y = step.y;
            z = step.z;

            let (stat, primal, comp) = layout.kkt(&e, &y, &z);
            log.push(IterationRecord {
                iteration: iterations,
                rho,
                merit_before: merit,
                merit_after,
                kkt: stat.max(primal).max(comp),
                step: alpha,
                step_norm,
                qp_iterations: step.iterations,
                elastic: step.elastic,
            });

            if let Ok(ef) = final_eval(&x) {
                let v = layout.max_violation(&ef);
                if best.better(v <= feas_tol, ef.f, v) {
                    best = Best {
                        x: x.clone(),
                        y: y.clone(),
                        z: z.clone(),
                        feasible: v <= feas_tol,
                        objective: ef.f,
                        violation: v,
                    };
                }
            }
        }
    }

    let (x_out, y_out, z_out) = if status == SolveStatus::Converged {
        (x, y, z)
    } else {
        (best.x, best.y, best.z)
    };
    let ef = match final_eval(&x_out) {
        Ok(ef) => ef,
        Err(err) => return Ok(failure(&layout, x_out, err, start, rho)),
    };
    let (stat, primal, comp) = layout.kkt(&ef, &y_out, &z_out);
    if status != SolveStatus::Converged
        && status != SolveStatus::NumericalFailure
        && primal > feas_tol
    {
        if message.is_empty() {
            message = format!("{status:?} without a feasible iterate");
        }
        status = SolveStatus::Infeasible;
    }
    Ok(NlpSolution {
        objective: ef.f,
        kkt_residual: stat.max(primal).max(comp),
        primal_infeasibility: primal,
        complementarity: ef.comp_max,
        multipliers: layout.split_multipliers(&y_out, &z_out),
        x: x_out,
        status,
        rho,
        iterations,
        solve_time_ms: start.elapsed().as_secs_f64() * 1e3,
        message,
        log: if settings.log_iterations {
            log
        } else {
            Vec::new()
        },
    })
}

fn failure(layout: &Layout, x: Vec<f64>, err: Error, start: Instant, rho: f64) -> NlpSolution {
    NlpSolution {
        x,
        multipliers: layout
            .split_multipliers(&vec![0.0; layout.neq], &vec![0.0; layout.kinds.len()]),
        status: SolveStatus::NumericalFailure,
        objective: f64::NAN,
        kkt_residual: f64::INFINITY,
        primal_infeasibility: f64::INFINITY,
        complementarity: f64::INFINITY,
        rho,
        iterations: 0,
        solve_time_ms: start.elapsed().as_secs_f64() * 1e3,
        message: err.to_string(),
        log: Vec::new(),
    }
}

#[allow(clippy::too_many_arguments)]
fn bfgs_update(
    b: &mut DMatrix<f64>,
    layout: &Layout,
    old: &Eval,
    new: &Eval,
    x: &[f64],
    xn: &[f64],
    y: &[f64],
    z: &[f64],
) {
    let grad_l = |e: &Eval| {
        let jy = e.jc.tr_mul_vec(y);
        let jz = e.jh.tr_mul_vec(z);
        DVector::from_iterator(layout.n, (0..layout.n).map(|i| e.grad[i] - jy[i] - jz[i]))
    };
    let s = DVector::from_iterator(layout.n, xn.iter().zip(x).map(|(a, b)| a - b));
    let mut r = grad_l(new) - grad_l(old);
    let bs = &*b * &s;
    let sbs = s.dot(&bs);
    if sbs <= 1e-14 {
        return;
    }
    let sr = s.dot(&r);
    if sr < 0.2 * sbs {
        let theta = 0.8 * sbs / (sbs - sr);
        r = theta * r + (1.0 - theta) * &bs;
    }
    let sr = s.dot(&r);
    *b += &r * r.transpose() / sr - &bs * bs.transpose() / sbs;
}

/// Worst relative error between analytic derivatives and central
/// differences, `|fd - an| / max(1, |an|, |fd|)`, over the objective
/// gradient and both constraint Jacobians.
pub fn check_gradients<P: NlpProblem + ?Sized>(problem: &P, x: &[f64], step: f64) -> Result<f64> {
    if !(step > 0.0) {
        return Err(Error::InvalidConfig(
            "finite-difference step must be positive".into(),
        ));
    }
    let n = problem.num_variables();
    if x.len() != n {
        return Err(Error::DimensionMismatch(
            "point dimension differs from n".into(),
        ));
    }
    let grad = problem.gradient(x);
    let jc = problem.equality_jacobian(x).to_dense();
    let jg = problem.inequality_jacobian(x).to_dense();
    let rel = |fd: f64, an: f64| (fd - an).abs() / 1f64.max(an.abs()).max(fd.abs());
    let mut worst: f64 = 0.0;
    let mut xp = x.to_vec();
    let mut xm = x.to_vec();
    for i in 0..n {
        xp[i] = x[i] + step;
        xm[i] = x[i] - step;
        let inv = 0.5 / step;
        worst = worst.max(rel(
            (problem.objective(&xp) - problem.objective(&xm)) * inv,
            grad[i],
        ));
        let (cp, cm) = (problem.equalities(&xp), problem.equalities(&xm));
        for r in 0..cp.len() {
            worst = worst.max(rel((cp[r] - cm[r]) * inv, jc[(r, i)]));
        }
        let (gp, gm) = (problem.inequalities(&xp), problem.inequalities(&xm));
        for r in 0..gp.len() {
            worst = worst.max(rel((gp[r] - gm[r]) * inv, jg[(r, i)]));
        }
        xp[i] = x[i];
        xm[i] = x[i];
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// min sum (x_i - c_i)^2 with optional unit-disc inequality.
    struct Quadratic {
        c: Vec<f64>,
        disc: bool,
        corrupt: bool,
    }

    impl NlpProblem for Quadratic {
        fn num_variables(&self) -> usize {
            self.c.len()
        }
        fn num_equalities(&self) -> usize {
            0
        }
        fn num_inequalities(&self) -> usize {
            usize::from(self.disc)
        }
        fn objective(&self, x: &[f64]) -> f64 {
            x.iter().zip(&self.c).map(|(x, c)| (x - c).powi(2)).sum()
        }
        fn gradient(&self, x: &[f64]) -> Vec<f64> {
            x.iter().zip(&self.c).map(|(x, c)| 2.0 * (x - c)).collect()
        }
        fn equalities(&self, _x: &[f64]) -> Vec<f64> {
            Vec::new()
        }
        fn equality_jacobian(&self, _x: &[f64]) -> RowMatrix {
            RowMatrix::new(0, self.c.len())
        }
        fn inequalities(&self, x: &[f64]) -> Vec<f64> {
            if self.disc {
                vec![1.0 - x.iter().map(|v| v * v).sum::<f64>()]
            } else {
                Vec::new()
            }
        }
        fn inequality_jacobian(&self, x: &[f64]) -> RowMatrix {
            let mut j = RowMatrix::new(usize::from(self.disc), x.len());
            if self.disc {
                for (i, v) in x.iter().enumerate() {
                    let bad = if self.corrupt && i == 0 { 0.5 } else { 0.0 };
                    j.push(0, i, -2.0 * v + bad);
                }
            }
            j
        }
        fn hessian(&self, x: &[f64]) -> Option<RowMatrix> {
            let mut h = RowMatrix::new(x.len(), x.len());
            for i in 0..x.len() {
                h.push(i, i, 2.0);
            }
            Some(h)
        }
    }

    #[test]
    fn unconstrained_quadratic_in_one_step() {
        let p = Quadratic {
            c: vec![1.0, -2.0, 3.0],
            disc: false,
            corrupt: false,
        };
        let s = solve(&p, &[10.0, 10.0, -4.0], None, &SolverSettings::default()).unwrap();
        assert_eq!(s.status, SolveStatus::Converged);
        assert!(s.iterations <= 2);
        for (a, b) in s.x.iter().zip(&p.c) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn projection_onto_disc() {
        let p = Quadratic {
            c: vec![3.0, 4.0],
            disc: true,
            corrupt: false,
        };
        let s = solve(&p, &[0.0, 0.0], None, &SolverSettings::default()).unwrap();
        assert_eq!(s.status, SolveStatus::Converged);
        assert!((s.x[0] - 0.6).abs() < 1e-6 && (s.x[1] - 0.8).abs() < 1e-6);
    }

    #[test]
    fn gradient_check_detects_corruption() {
        let good = Quadratic {
            c: vec![0.3, -0.1],
            disc: true,
            corrupt: false,
        };
        assert!(check_gradients(&good, &[0.2, 0.4], 1e-5).unwrap() <= 1e-7);
        let bad = Quadratic {
            corrupt: true,
            ..good
        };
        assert!(check_gradients(&bad, &[0.2, 0.4], 1e-5).unwrap() >= 1e-2);
    }

    /// min (x-1)^2 + (y-1)^2, x, y >= 0, x y <= rho.
    struct Toy;

    impl NlpProblem for Toy {
        fn num_variables(&self) -> usize {
            2
        }
        fn num_equalities(&self) -> usize {
            0
        }
        fn num_inequalities(&self) -> usize {
            0
        }
        fn objective(&self, x: &[f64]) -> f64 {
            (x[0] - 1.0).powi(2) + (x[1] - 1.0).powi(2)
        }
        fn gradient(&self, x: &[f64]) -> Vec<f64> {
            vec![2.0 * (x[0] - 1.0), 2.0 * (x[1] - 1.0)]
        }
        fn equalities(&self, _x: &[f64]) -> Vec<f64> {
            Vec::new()
        }
        fn equality_jacobian(&self, _x: &[f64]) -> RowMatrix {
            RowMatrix::new(0, 2)
        }
        fn inequalities(&self, _x: &[f64]) -> Vec<f64> {
            Vec::new()
        }
        fn inequality_jacobian(&self, _x: &[f64]) -> RowMatrix {
            RowMatrix::new(0, 2)
        }
        fn bounds(&self) -> (Vec<f64>, Vec<f64>) {
            (vec![0.0, 0.0], vec![f64::INFINITY; 2])
        }
        fn complementarity(&self) -> Vec<ComplementarityPair> {
            vec![ComplementarityPair {
                a: CompSide::Variable(0),
                b: CompSide::Variable(1),
            }]
        }
    }

    #[test]
    fn complementarity_toy_matches_grid() {
        let settings = SolverSettings {
            log_iterations: true,
            ..Default::default()
        };
        let s = solve(&Toy, &[0.9, 0.2], None, &settings).unwrap();
        assert_eq!(s.status, SolveStatus::Converged, "{}", s.message);
        assert!(s.x[0].min(s.x[1]) <= settings.rho_min.sqrt());
        // grid over the relaxed feasible set
        let steps = 2000;
        let h = 1.5 / steps as f64;
        let mut best = f64::INFINITY;
        for i in 0..=steps {
            for j in 0..=steps {
                let (a, b) = (i as f64 * h, j as f64 * h);
                if a * b <= settings.rho_min {
                    best = best.min(Toy.objective(&[a, b]));
                }
            }
        }
        assert!(s.objective <= best + 1e-9);
        assert!(best <= s.objective + 4.0 * h);
        for r in &s.log {
            assert!(r.merit_after <= r.merit_before + 1e-12);
        }
    }

    #[test]
    fn non_finite_callbacks_fail_cleanly() {
        let p = Quadratic {
            c: vec![f64::NAN],
            disc: false,
            corrupt: false,
        };
        let s = solve(&p, &[0.0], None, &SolverSettings::default()).unwrap();
        assert_eq!(s.status, SolveStatus::NumericalFailure);
    }

    /// Equality-constrained chain: x1 = x0^2, x2 = x0 + x1, minimize
    /// (x2 - 2)^2 + x0^2 subject to x0 <= 0.8.
    struct Chain;

    impl NlpProblem for Chain {
        fn num_variables(&self) -> usize {
            3
        }
        fn num_equalities(&self) -> usize {
            2
        }
        fn num_inequalities(&self) -> usize {
            1
        }
        fn objective(&self, x: &[f64]) -> f64 {
            (x[2] - 2.0).powi(2) + x[0] * x[0]
        }
        fn gradient(&self, x: &[f64]) -> Vec<f64> {
            vec![2.0 * x[0], 0.0, 2.0 * (x[2] - 2.0)]
        }
        fn equalities(&self, x: &[f64]) -> Vec<f64> {
            vec![x[1] - x[0] * x[0], x[2] - x[0] - x[1]]
        }
        fn equality_jacobian(&self, x: &[f64]) -> RowMatrix {
            let mut j = RowMatrix::new(2, 3);
            j.push(0, 1, 1.0);
            j.push(0, 0, -2.0 * x[0]);
            j.push(1, 2, 1.0);
            j.push(1, 0, -1.0);
            j.push(1, 1, -1.0);
            j
        }
        fn inequalities(&self, x: &[f64]) -> Vec<f64> {
            vec![0.8 - x[0]]
        }
        fn inequality_jacobian(&self, _x: &[f64]) -> RowMatrix {
            let mut j = RowMatrix::new(1, 3);
            j.push(0, 0, -1.0);
            j
        }
        fn hessian(&self, _x: &[f64]) -> Option<RowMatrix> {
            let mut h = RowMatrix::new(3, 3);
            h.push(0, 0, 2.0);
            h.push(2, 2, 2.0);
            Some(h)
        }
    }

    #[test]
    fn equality_chain_matches_reduced_oracle() {
        let sol = solve(&Chain, &[0.1, 0.0, 0.0], None, &SolverSettings::default()).unwrap();
        assert_eq!(sol.status, SolveStatus::Converged, "{}", sol.message);
        // oracle: minimize the reduced objective in x0 alone on a fine grid
        let reduced = |t: f64| (t + t * t - 2.0).powi(2) + t * t;
        let best = (0..=400_000)
            .map(|i| -2.0 + 2.8 * i as f64 / 400_000.0)
            .min_by(|a, b| reduced(*a).total_cmp(&reduced(*b)))
            .unwrap();
        assert!((sol.x[0] - best).abs() < 1e-4, "{} vs {best}", sol.x[0]);
        assert!((sol.x[1] - sol.x[0] * sol.x[0]).abs() < 1e-8);
        assert!((sol.x[2] - sol.x[0] - sol.x[1]).abs() < 1e-8);
    }

    #[test]
    fn identical_runs_are_identical() {
        let settings = SolverSettings {
            log_iterations: true,
            ..Default::default()
        };
        let a = solve(&Toy, &[0.7, 0.4], None, &settings).unwrap();
        let b = solve(&Toy, &[0.7, 0.4], None, &settings).unwrap();
        assert_eq!(a.x, b.x);
        assert_eq!(
            a.log.iter().map(|r| r.merit_after).collect::<Vec<_>>(),
            b.log.iter().map(|r| r.merit_after).collect::<Vec<_>>()
        );
    }

    #[test]
    fn bfgs_fallback_converges() {
        struct Rosen;
        impl NlpProblem for Rosen {
            fn num_variables(&self) -> usize {
                2
            }
            fn num_equalities(&self) -> usize {
                0
            }
            fn num_inequalities(&self) -> usize {
                0
            }
            fn objective(&self, x: &[f64]) -> f64 {
                (1.0 - x[0]).powi(2) + 10.0 * (x[1] - x[0] * x[0]).powi(2)
            }
            fn gradient(&self, x: &[f64]) -> Vec<f64> {
                let r = x[1] - x[0] * x[0];
                vec![-2.0 * (1.0 - x[0]) - 40.0 * x[0] * r, 20.0 * r]
            }
            fn equalities(&self, _x: &[f64]) -> Vec<f64> {
                Vec::new()
            }
            fn equality_jacobian(&self, _x: &[f64]) -> RowMatrix {
                RowMatrix::new(0, 2)
            }
            fn inequalities(&self, _x: &[f64]) -> Vec<f64> {
                Vec::new()
            }
            fn inequality_jacobian(&self, _x: &[f64]) -> RowMatrix {
                RowMatrix::new(0, 2)
            }
        }
        let s = solve(&Rosen, &[-1.0, 1.0], None, &SolverSettings::default()).unwrap();
        assert_eq!(s.status, SolveStatus::Converged, "{}", s.message);
        assert!((s.x[0] - 1.0).abs() < 1e-5 && (s.x[1] - 1.0).abs() < 1e-5);
    }
}
