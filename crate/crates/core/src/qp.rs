//! Dense strictly convex QP solver (Goldfarb–Idnani dual active set).
//!
//! Solves
//!
//! ```text
//!     minimize    1/2 x' H x + g' x
//!     subject to  a_i' x  = b_i   (i < num_equalities)
//!                 a_i' x >= b_i   (otherwise)
//! ```
//!
//! with `H` symmetric positive definite. The dual method starts from the
//! unconstrained minimizer and adds violated constraints one at a time,
//! so no feasible starting point is required and infeasibility is detected
//! exactly when a violated constraint cannot be reached.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QpError {
    #[error("hessian is not positive definite")]
    NotPositiveDefinite,
    #[error("constraints are infeasible (constraint {0} cannot be satisfied)")]
    Infeasible(usize),
    #[error("active-set iteration limit reached")]
    IterationLimit,
    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

#[derive(Clone, Debug)]
pub struct QpSolution {
    pub x: DVector<f64>,
    /// One multiplier per constraint row; inequality multipliers are >= 0.
    pub multipliers: DVector<f64>,
    /// Indices of constraints in the final active set, in insertion order.
    pub active: Vec<usize>,
    pub iterations: usize,
}

/// Constraint rows are stored as the rows of `a`.
pub struct DenseQp<'a> {
    pub hessian: &'a DMatrix<f64>,
    pub linear: &'a DVector<f64>,
    pub a: &'a DMatrix<f64>,
    pub b: &'a DVector<f64>,
    pub num_equalities: usize,
}

/// Scaled violation below which a constraint counts as satisfied.
const FEAS_TOL: f64 = 1e-12;

impl DenseQp<'_> {
    pub fn solve(&self) -> Result<QpSolution, QpError> {
        let n = self.hessian.nrows();
        let m = self.a.nrows();
        if self.hessian.ncols() != n
            || self.linear.len() != n
            || (m > 0 && self.a.ncols() != n)
            || self.b.len() != m
            || self.num_equalities > m
        {
            return Err(QpError::Dimension(format!(
                "H {}x{}, g {}, A {}x{}, b {}",
                n,
                self.hessian.ncols(),
                self.linear.len(),
                m,
                self.a.ncols(),
                self.b.len()
            )));
        }
        let chol = self
            .hessian
            .clone()
            .cholesky()
            .ok_or(QpError::NotPositiveDefinite)?;
        // J = L^{-T}
        let l_inv = chol
            .l()
            .solve_lower_triangular(&DMatrix::identity(n, n))
            .ok_or(QpError::NotPositiveDefinite)?;
        let mut solver = Workspace {
            n,
            j: l_inv.transpose(),
            r: DMatrix::zeros(n, n),
            active: Vec::with_capacity(n),
            sign: Vec::with_capacity(n),
            u: Vec::with_capacity(n),
        };
        let mut x = -chol.solve(self.linear);
        let row_norms: Vec<f64> = (0..m).map(|i| self.a.row(i).norm()).collect();
        let mut is_active = vec![false; m];
        let mut iterations = 0;
        let max_iterations = 20 * (n + m) + 100;

        loop {
            // pick the constraint to add: pending equalities first, then the
            // most violated inequality (scaled by row norm)
            let mut pick: Option<(usize, f64)> = None;
            for (i, active) in is_active.iter().enumerate().take(self.num_equalities) {
                if !*active && row_norms[i] > 0.0 {
                    let s = self.a.row(i).dot(&x.transpose()) - self.b[i];
                    pick = Some((i, if s > 0.0 { -1.0 } else { 1.0 }));
                    break;
                }
            }
            if pick.is_none() {
                let ax = self.a.rows(self.num_equalities, m - self.num_equalities) * &x;
                let mut worst = -FEAS_TOL;
                for k in 0..ax.len() {
                    let i = k + self.num_equalities;
                    if is_active[i] || row_norms[i] == 0.0 {
                        continue;
                    }
                    let s = (ax[k] - self.b[i]) / (row_norms[i] * (1.0 + x.amax()));
                    if s < worst {
                        worst = s;
                        pick = Some((i, 1.0));
                    }
                }
            }
            let Some((p, sign)) = pick else {
                break;
            };
            let np: DVector<f64> = self.a.row(p).transpose() * sign;
            let bp = self.b[p] * sign;
            let mut u_p = 0.0;
            let is_equality = p < self.num_equalities;

            loop {
                iterations += 1;
                if iterations > max_iterations {
                    return Err(QpError::IterationLimit);
                }
                let slack = np.dot(&x) - bp;
                let d = solver.j.tr_mul(&np);
                let q = solver.active.len();
                let z = solver.j.columns(q, n - q) * d.rows(q, n - q);
                let r = solver.dual_direction(&d);

                // largest dual step keeping active inequality multipliers >= 0
                let mut t1 = f64::INFINITY;
                let mut drop_at = None;
                for k in 0..q {
                    if solver.active[k] >= self.num_equalities && r[k] > 0.0 {
                        let ratio = solver.u[k] / r[k];
                        if ratio < t1 {
                            t1 = ratio;
                            drop_at = Some(k);
                        }
                    }
                }
                let curvature = z.dot(&np);
                let dependent = curvature <= 1e-14 * d.norm_squared();
                let t2 = if dependent {
                    f64::INFINITY
                } else {
                    (-slack / curvature).max(0.0)
                };
                if !is_equality && slack >= 0.0 && u_p == 0.0 {
                    break;
                }
                let t = t1.min(t2);
                if t.is_infinite() {
                    return Err(QpError::Infeasible(p));
                }
                for k in 0..q {
                    solver.u[k] -= t * r[k];
                }
                u_p += t;
                if dependent {
                    let k = drop_at.expect("finite step implies a blocking constraint");
                    is_active[solver.active[k]] = false;
                    solver.drop(k);
                    continue;
                }
                x += &z * t;
                if t2 <= t1 {
                    solver.add(p, sign, u_p, d);
                    is_active[p] = true;
                    break;
                }
                let k = drop_at.expect("partial step implies a blocking constraint");
                is_active[solver.active[k]] = false;
                solver.drop(k);
            }
        }

        let mut multipliers = DVector::zeros(m);
        for (k, &i) in solver.active.iter().enumerate() {
            multipliers[i] = solver.u[k] * solver.sign[k];
        }
        Ok(QpSolution {
            x,
            multipliers,
            active: solver.active,
            iterations,
        })
    }
}

struct Workspace {
    n: usize,
    j: DMatrix<f64>,
    r: DMatrix<f64>,
    active: Vec<usize>,
    sign: Vec<f64>,
    u: Vec<f64>,
}

impl Workspace {
    /// Solves `R r = d[..q]` by back substitution.
    fn dual_direction(&self, d: &DVector<f64>) -> Vec<f64> {
        let q = self.active.len();
        let mut r = vec![0.0; q];
        for i in (0..q).rev() {
            let mut acc = d[i];
            for k in i + 1..q {
                acc -= self.r[(i, k)] * r[k];
            }
            r[i] = acc / self.r[(i, i)];
        }
        r
    }

    fn rotate_columns(&mut self, a: usize, b: usize, c: f64, s: f64) {
        for i in 0..self.n {
            let ja = self.j[(i, a)];
            let jb = self.j[(i, b)];
            self.j[(i, a)] = c * ja + s * jb;
            self.j[(i, b)] = -s * ja + c * jb;
        }
    }

    fn add(&mut self, index: usize, sign: f64, multiplier: f64, mut d: DVector<f64>) {
        let q = self.active.len();
        for i in (q + 1..self.n).rev() {
            let (a, b) = (d[i - 1], d[i]);
            if b == 0.0 {
                continue;
            }
            let h = a.hypot(b);
            let (c, s) = (a / h, b / h);
            d[i - 1] = h;
            d[i] = 0.0;
            self.rotate_columns(i - 1, i, c, s);
        }
        for i in 0..=q {
            self.r[(i, q)] = d[i];
        }
        self.active.push(index);
        self.sign.push(sign);
        self.u.push(multiplier);
    }

    fn drop(&mut self, k: usize) {
        let q = self.active.len();
        for col in k..q - 1 {
            for row in 0..=col + 1 {
                self.r[(row, col)] = self.r[(row, col + 1)];
            }
        }
        for row in 0..q {
            self.r[(row, q - 1)] = 0.0;
        }
        for jcol in k..q - 1 {
            let (a, b) = (self.r[(jcol, jcol)], self.r[(jcol + 1, jcol)]);
            if b == 0.0 {
                continue;
            }
            let h = a.hypot(b);
            let (c, s) = (a / h, b / h);
            for col in jcol..q - 1 {
                let ra = self.r[(jcol, col)];
                let rb = self.r[(jcol + 1, col)];
                self.r[(jcol, col)] = c * ra + s * rb;
                self.r[(jcol + 1, col)] = -s * ra + c * rb;
            }
            self.r[(jcol + 1, jcol)] = 0.0;
            self.rotate_columns(jcol, jcol + 1, c, s);
        }
        self.active.remove(k);
        self.sign.remove(k);
        self.u.remove(k);
    }
}
