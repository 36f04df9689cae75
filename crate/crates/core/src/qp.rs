//! Dense strictly convex QP solver with KKT certification.
//!
//! Solves `min 1/2 z'Qz + c'z  s.t.  A z <= b,  E z = d` with the dual
//! active-set method of Goldfarb and Idnani: start at the unconstrained
//! minimizer, repeatedly add the most violated constraint, and keep the
//! factorization `J = L^-T Q_r` of the active set current with Givens
//! rotations. The iterate stays dual feasible, so the first primal feasible
//! point is optimal, and a violated constraint that cannot be added certifies
//! infeasibility.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAX_VARIABLES: usize = 64;
pub const MAX_CONSTRAINTS: usize = 256;
pub const KKT_TOLERANCE: f64 = 1e-6;
const PIVOT_FLOOR: f64 = 1e-10;
const REGULARIZATION: f64 = 1e-9;
const FEASIBILITY_TOL: f64 = 1e-10;

#[derive(Debug, Error, PartialEq)]
pub enum QpError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("problem too large: {0} variables, {1} constraints")]
    TooLarge(usize, usize),
    #[error("cost matrix is not symmetric (max asymmetry {0:e})")]
    Asymmetric(f64),
    #[error("cost matrix is not positive definite even after regularization")]
    NotPositiveDefinite,
    #[error("non-finite problem data")]
    NonFinite,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QpProblem {
    pub q: DMatrix<f64>,
    pub c: DVector<f64>,
    pub a_ineq: DMatrix<f64>,
    pub b_ineq: DVector<f64>,
    pub a_eq: DMatrix<f64>,
    pub b_eq: DVector<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QpStatus {
    Optimal,
    Infeasible,
    MaxIterations,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QpSolution {
    pub z: DVector<f64>,
    /// Inequality multipliers first, then equality multipliers.
    pub lambda: DVector<f64>,
    pub status: QpStatus,
    pub kkt_residual: f64,
    /// Indices (into the inequality rows) of the active inequalities.
    pub active_set: Vec<usize>,
    pub iterations: usize,
    /// Set when `1e-9 I` was added to a near-singular cost matrix.
    pub regularized: bool,
}

impl QpProblem {
    /// Problem with inequality constraints only.
    pub fn inequality(q: DMatrix<f64>, c: DVector<f64>, a: DMatrix<f64>, b: DVector<f64>) -> Self {
        let n = c.len();
        QpProblem {
            q,
            c,
            a_ineq: a,
            b_ineq: b,
            a_eq: DMatrix::zeros(0, n),
            b_eq: DVector::zeros(0),
        }
    }

    pub fn n(&self) -> usize {
        self.c.len()
    }

    pub fn objective(&self, z: &DVector<f64>) -> f64 {
        0.5 * z.dot(&(&self.q * z)) + self.c.dot(z)
    }

    pub fn validate(&self) -> Result<(), QpError> {
        let n = self.n();
        let (m, p) = (self.a_ineq.nrows(), self.a_eq.nrows());
        if self.q.shape() != (n, n) {
            return Err(QpError::Dimension(format!("Q is {:?}, expected {n}x{n}", self.q.shape())));
        }
        if self.a_ineq.ncols() != n || self.b_ineq.len() != m {
            return Err(QpError::Dimension("inequality block".into()));
        }
        if self.a_eq.ncols() != n || self.b_eq.len() != p {
            return Err(QpError::Dimension("equality block".into()));
        }
        if n > MAX_VARIABLES || m + p > MAX_CONSTRAINTS {
            return Err(QpError::TooLarge(n, m + p));
        }
        let finite = [&self.q, &self.a_ineq, &self.a_eq].iter().all(|x| x.iter().all(|v| v.is_finite()))
            && [&self.c, &self.b_ineq, &self.b_eq].iter().all(|x| x.iter().all(|v| v.is_finite()));
        if !finite {
            return Err(QpError::NonFinite);
        }
        let asym = (&self.q - self.q.transpose()).amax();
        if asym > 1e-12 {
            return Err(QpError::Asymmetric(asym));
        }
        Ok(())
    }
}

/// Largest violation among stationarity `||Qz + c + A'l||_inf`, primal
/// feasibility, multiplier sign and complementarity `|l_i (Az - b)_i|`.
pub fn check_kkt(p: &QpProblem, s: &QpSolution) -> f64 {
    let m = p.a_ineq.nrows();
    let lam_in = s.lambda.rows(0, m);
    let lam_eq = s.lambda.rows(m, p.a_eq.nrows());
    let grad = &p.q * &s.z + &p.c + p.a_ineq.transpose() * lam_in + p.a_eq.transpose() * lam_eq;
    let mut worst = grad.amax();
    let slack = &p.a_ineq * &s.z - &p.b_ineq;
    for i in 0..m {
        worst = worst
            .max(slack[i].max(0.0))
            .max((-lam_in[i]).max(0.0))
            .max((lam_in[i] * slack[i]).abs());
    }
    let eq = &p.a_eq * &s.z - &p.b_eq;
    if eq.len() > 0 {
        worst = worst.max(eq.amax());
    }
    worst
}

/// Reusable solver workspace; one per thread.
#[derive(Debug, Default)]
pub struct QpSolver {
    j: DMatrix<f64>,
    r: DMatrix<f64>,
}

struct Constraint<'a> {
    normal: nalgebra::DVectorView<'a, f64>,
    bound: f64,
}

impl QpSolver {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn solve(&mut self, p: &QpProblem, max_iter: usize) -> Result<QpSolution, QpError> {
        p.validate()?;
        let n = p.n();
        let m = p.a_ineq.nrows();
        let n_eq = p.a_eq.nrows();

        let (chol, regularized) = factor(&p.q)?;
        // constraints are handled internally as  -row' z >= -bound
        let rows_ineq = p.a_ineq.transpose();
        let rows_eq = p.a_eq.transpose();
        let constraint = |k: usize| -> Constraint<'_> {
            if k < m {
                Constraint {
                    normal: rows_ineq.column(k),
                    bound: p.b_ineq[k],
                }
            } else {
                Constraint {
                    normal: rows_eq.column(k - m),
                    bound: p.b_eq[k - m],
                }
            }
        };
        // slack of  -a'z >= -b  is  b - a'z; for an equality the sign can be flipped
        let slack = |k: usize, z: &DVector<f64>, sign: f64| {
            let c = constraint(k);
            sign * (c.bound - c.normal.dot(z))
        };

        let l_inv_t = chol
            .l()
            .transpose()
            .solve_upper_triangular(&DMatrix::identity(n, n))
            .ok_or(QpError::NotPositiveDefinite)?;
        self.j = l_inv_t;
        self.r = DMatrix::zeros(n, n);
        let mut z = -chol.solve(&p.c);
        let mut active: Vec<usize> = Vec::new();
        let mut signs: Vec<f64> = Vec::new();
        let mut u: Vec<f64> = Vec::new();
        let mut iterations = 0;
        let mut status = QpStatus::Optimal;

        'outer: loop {
            // pick the next constraint: pending equalities in order, then
            // the most violated inequality (lowest index on ties)
            let mut chosen: Option<(usize, f64)> = None;
            for k in m..m + n_eq {
                if !active.contains(&k) {
                    let s = slack(k, &z, 1.0);
                    chosen = Some((k, if s > 0.0 { -1.0 } else { 1.0 }));
                    break;
                }
            }
            if chosen.is_none() {
                let mut worst = -FEASIBILITY_TOL;
                for k in 0..m {
                    if active.contains(&k) {
                        continue;
                    }
                    let s = slack(k, &z, 1.0);
                    if s < worst {
                        worst = s;
                        chosen = Some((k, 1.0));
                    }
                }
            }
            let Some((k, sign)) = chosen else { break };
            let mut u_new = 0.0;

            loop {
                iterations += 1;
                if iterations > max_iter {
                    status = QpStatus::MaxIterations;
                    break 'outer;
                }
                let q = active.len();
                let con = constraint(k);
                // internal normal is  -sign * a
                let normal: DVector<f64> = con.normal.into_owned() * (-sign);
                let d = self.j.transpose() * &normal;
                let step = self.j.columns(q, n - q) * d.rows(q, n - q);
                let r_dir = if q > 0 {
                    self.r
                        .view((0, 0), (q, q))
                        .solve_upper_triangular(&d.rows(0, q).into_owned())
                        .expect("active-set factor is nonsingular")
                } else {
                    DVector::zeros(0)
                };

                let mut partial = f64::INFINITY;
                let mut blocking = None;
                for (idx, &kk) in active.iter().enumerate() {
                    if kk >= m || r_dir[idx] <= 0.0 {
                        continue;
                    }
                    let ratio = u[idx] / r_dir[idx];
                    if ratio < partial {
                        partial = ratio;
                        blocking = Some(idx);
                    }
                }
                let step_norm = step.norm();
                let full = if step_norm > 1e-12 * (1.0 + normal.norm()) {
                    -slack(k, &z, sign) / step.dot(&normal)
                } else {
                    f64::INFINITY
                };
                let t = partial.min(full);
                if !t.is_finite() {
                    status = QpStatus::Infeasible;
                    break 'outer;
                }
                for idx in 0..q {
                    u[idx] -= t * r_dir[idx];
                }
                u_new += t;
                if full.is_finite() {
                    z += &step * t;
                }
                if full <= partial {
                    self.add_constraint(q, d);
                    active.push(k);
                    signs.push(sign);
                    u.push(u_new);
                    continue 'outer;
                }
                // partial step: the blocking multiplier hit zero, release it
                // and retry the same constraint
                let idx = blocking.expect("partial step has a blocking constraint");
                self.drop_constraint(idx, q);
                active.remove(idx);
                signs.remove(idx);
                u.remove(idx);
            }
        }

        let mut lambda = DVector::zeros(m + n_eq);
        for (idx, &k) in active.iter().enumerate() {
            // internal multiplier u >= 0 on  -sign a'z >= -sign b
            lambda[k] = u[idx] * signs[idx];
        }
        let mut sol = QpSolution {
            z,
            lambda,
            status,
            kkt_residual: f64::INFINITY,
            active_set: active.iter().copied().filter(|&k| k < m).collect(),
            iterations,
            regularized,
        };
        if status == QpStatus::Optimal {
            sol.kkt_residual = check_kkt(p, &sol);
            if sol.kkt_residual > 1e-9 {
                polish(p, &active, &mut sol);
                sol.kkt_residual = sol.kkt_residual.min(check_kkt(p, &sol));
            }
            // an unverifiable optimum is not reported as one
            if sol.kkt_residual > KKT_TOLERANCE {
                sol.status = QpStatus::MaxIterations;
            }
        } else {
            sol.kkt_residual = check_kkt(p, &sol);
        }
        Ok(sol)
    }

    /// Rotates `d = J' n` so that only its first `q + 1` entries are nonzero
    /// and appends them as the new column of `R`.
    fn add_constraint(&mut self, q: usize, mut d: DVector<f64>) {
        let n = d.len();
        for j in (q + 1..n).rev() {
            let (a, b) = (d[j - 1], d[j]);
            if b == 0.0 {
                continue;
            }
            let h = a.hypot(b);
            let (c, s) = (a / h, b / h);
            d[j - 1] = h;
            d[j] = 0.0;
            rotate_columns(&mut self.j, j - 1, j, c, s);
        }
        for i in 0..=q {
            self.r[(i, q)] = d[i];
        }
    }

    /// Removes active column `idx` from `R` and restores triangularity.
    fn drop_constraint(&mut self, idx: usize, q: usize) {
        for col in idx..q - 1 {
            for row in 0..=col + 1 {
                self.r[(row, col)] = self.r[(row, col + 1)];
            }
        }
        for row in 0..q {
            self.r[(row, q - 1)] = 0.0;
        }
        for j in idx..q - 1 {
            let (a, b) = (self.r[(j, j)], self.r[(j + 1, j)]);
            if b == 0.0 {
                continue;
            }
            let h = a.hypot(b);
            let (c, s) = (a / h, b / h);
            for col in j..q - 1 {
                let (x, y) = (self.r[(j, col)], self.r[(j + 1, col)]);
                self.r[(j, col)] = c * x + s * y;
                self.r[(j + 1, col)] = -s * x + c * y;
            }
            self.r[(j + 1, j)] = 0.0;
            rotate_columns(&mut self.j, j, j + 1, c, s);
        }
    }
}

fn rotate_columns(j: &mut DMatrix<f64>, a: usize, b: usize, c: f64, s: f64) {
    for row in 0..j.nrows() {
        let (x, y) = (j[(row, a)], j[(row, b)]);
        j[(row, a)] = c * x + s * y;
        j[(row, b)] = -s * x + c * y;
    }
}

fn factor(q: &DMatrix<f64>) -> Result<(nalgebra::Cholesky<f64, nalgebra::Dyn>, bool), QpError> {
    if let Some(chol) = q.clone().cholesky() {
        let min_pivot = chol.l_dirty().diagonal().iter().fold(f64::INFINITY, |a, &b| a.min(b));
        if min_pivot >= PIVOT_FLOOR {
            return Ok((chol, false));
        }
    }
    let reg = q + DMatrix::identity(q.nrows(), q.ncols()) * REGULARIZATION;
    reg.cholesky().map(|c| (c, true)).ok_or(QpError::NotPositiveDefinite)
}

/// Re-solves the equality-constrained KKT system on the final active set.
fn polish(p: &QpProblem, active: &[usize], sol: &mut QpSolution) {
    let n = p.n();
    let m = p.a_ineq.nrows();
    let k = active.len();
    let mut kkt = DMatrix::zeros(n + k, n + k);
    let mut rhs = DVector::zeros(n + k);
    kkt.view_mut((0, 0), (n, n)).copy_from(&p.q);
    rhs.rows_mut(0, n).copy_from(&(-&p.c));
    for (r, &c) in active.iter().enumerate() {
        let (row, bound) = if c < m {
            (p.a_ineq.row(c), p.b_ineq[c])
        } else {
            (p.a_eq.row(c - m), p.b_eq[c - m])
        };
        for j in 0..n {
            kkt[(n + r, j)] = row[j];
            kkt[(j, n + r)] = row[j];
        }
        rhs[n + r] = bound;
    }
    if let Some(x) = kkt.lu().solve(&rhs) {
        if x.iter().all(|v| v.is_finite()) {
            let mut candidate = sol.clone();
            candidate.z = x.rows(0, n).into_owned();
            for (r, &c) in active.iter().enumerate() {
                candidate.lambda[c] = x[n + r];
            }
            if check_kkt(p, &candidate) < check_kkt(p, sol) {
                *sol = candidate;
            }
        }
    }
}

/// One-shot convenience wrapper around [`QpSolver::solve`].
pub fn solve(p: &QpProblem, max_iter: usize) -> Result<QpSolution, QpError> {
    QpSolver::new().solve(p, max_iter)
}
