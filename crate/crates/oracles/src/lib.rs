//! Independent reference computations for the stepnav test suites.
//!
//! Nothing here shares code with the implementation under test: the
//! oracles work on plain arrays and `nalgebra` matrices and use brute
//! force, numeric integration or a different algorithm family.

pub mod geometry {
    /// Distance from `p` to the boundary of a rotated ellipse, by dense
    /// sampling of `samples` boundary points.
    pub fn ellipse_boundary_distance(center: [f64; 2], semi_axes: [f64; 2], rotation: f64, p: [f64; 2], samples: usize) -> f64 {
        let (s, c) = rotation.sin_cos();
        (0..samples)
            .map(|k| {
                let t = k as f64 * std::f64::consts::TAU / samples as f64;
                let lx = semi_axes[0] * t.cos();
                let ly = semi_axes[1] * t.sin();
                let x = center[0] + c * lx - s * ly;
                let y = center[1] + s * lx + c * ly;
                ((x - p[0]).powi(2) + (y - p[1]).powi(2)).sqrt()
            })
            .fold(f64::INFINITY, f64::min)
    }

    pub fn point_segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
        let e = [b[0] - a[0], b[1] - a[1]];
        let w = [p[0] - a[0], p[1] - a[1]];
        let t = ((w[0] * e[0] + w[1] * e[1]) / (e[0] * e[0] + e[1] * e[1])).clamp(0.0, 1.0);
        ((w[0] - t * e[0]).powi(2) + (w[1] - t * e[1]).powi(2)).sqrt()
    }
}

pub mod ode {
    /// Integrates `q'' = omega0^2 q` with classic RK4 over `duration` using
    /// `substeps` equal steps. Returns the final `(q, v)`.
    pub fn rk4_pendulum(q0: f64, v0: f64, omega0: f64, duration: f64, substeps: usize) -> (f64, f64) {
        let w2 = omega0 * omega0;
        let h = duration / substeps as f64;
        let (mut q, mut v) = (q0, v0);
        for _ in 0..substeps {
            let k1 = (v, w2 * q);
            let k2 = (v + 0.5 * h * k1.1, w2 * (q + 0.5 * h * k1.0));
            let k3 = (v + 0.5 * h * k2.1, w2 * (q + 0.5 * h * k2.0));
            let k4 = (v + h * k3.1, w2 * (q + h * k3.0));
            q += h / 6.0 * (k1.0 + 2.0 * k2.0 + 2.0 * k3.0 + k4.0);
            v += h / 6.0 * (k1.1 + 2.0 * k2.1 + 2.0 * k3.1 + k4.1);
        }
        (q, v)
    }
}

pub mod qp {
    //! Reference solvers for `min 1/2 z'Qz + c'z  s.t.  A z <= b,  E z = d`
    //! with `Q` positive definite.

    use nalgebra::{DMatrix, DVector};

    pub struct Reference {
        pub z: DVector<f64>,
        pub objective: f64,
    }

    pub fn objective(q: &DMatrix<f64>, c: &DVector<f64>, z: &DVector<f64>) -> f64 {
        0.5 * z.dot(&(q * z)) + c.dot(z)
    }

    /// Solves the KKT system with `active` rows as equalities. The point is
    /// returned only if it is primal feasible and the active multipliers are
    /// nonnegative, both to `tol`.
    #[allow(clippy::too_many_arguments)]
    pub fn solve_on_active(
        q: &DMatrix<f64>,
        c: &DVector<f64>,
        a: &DMatrix<f64>,
        b: &DVector<f64>,
        e: &DMatrix<f64>,
        d: &DVector<f64>,
        active: &[usize],
        tol: f64,
    ) -> Option<DVector<f64>> {
        let n = q.nrows();
        let p = e.nrows();
        let k = active.len() + p;
        if k > n {
            return None;
        }
        let mut kkt = DMatrix::zeros(n + k, n + k);
        let mut rhs = DVector::zeros(n + k);
        kkt.view_mut((0, 0), (n, n)).copy_from(q);
        rhs.rows_mut(0, n).copy_from(&(-c));
        for (r, &i) in active.iter().enumerate() {
            for j in 0..n {
                kkt[(n + r, j)] = a[(i, j)];
                kkt[(j, n + r)] = a[(i, j)];
            }
            rhs[n + r] = b[i];
        }
        for r in 0..p {
            let row = n + active.len() + r;
            for j in 0..n {
                kkt[(row, j)] = e[(r, j)];
                kkt[(j, row)] = e[(r, j)];
            }
            rhs[row] = d[r];
        }
        let sol = kkt.lu().solve(&rhs)?;
        if sol.iter().any(|v| !v.is_finite()) {
            return None;
        }
        let z = sol.rows(0, n).into_owned();
        if (0..active.len()).any(|r| sol[n + r] < -tol) {
            return None;
        }
        if (a * &z - b).iter().any(|&v| v > tol) || (e * &z - d).iter().any(|v| v.abs() > tol) {
            return None;
        }
        Some(z)
    }

    /// Exhaustive active-set enumeration: every subset of inequality rows is
    /// tried as the active set, the equality-constrained KKT system is solved
    /// by LU, and the best point that is primal feasible with nonnegative
    /// multipliers is returned. `None` when no subset qualifies (infeasible).
    pub fn enumerate_active_sets(
        q: &DMatrix<f64>,
        c: &DVector<f64>,
        a: &DMatrix<f64>,
        b: &DVector<f64>,
        e: &DMatrix<f64>,
        d: &DVector<f64>,
        tol: f64,
    ) -> Option<Reference> {
        let n = q.nrows();
        let m = a.nrows();
        let p = e.nrows();
        assert!(m <= 20, "enumeration is exponential in the row count");
        let mut best: Option<Reference> = None;
        for mask in 0u32..(1 << m) {
            let active: Vec<usize> = (0..m).filter(|i| mask >> i & 1 == 1).collect();
            let k = active.len() + p;
            if k > n {
                continue;
            }
            let Some(z) = solve_on_active(q, c, a, b, e, d, &active, tol) else { continue };
            let f = objective(q, c, &z);
            if best.as_ref().map_or(true, |r| f < r.objective) {
                best = Some(Reference { z, objective: f });
            }
        }
        best
    }

    /// Primal-dual interior point (Mehrotra predictor-corrector) with slacks
    /// `A z + s = b`, `s, l >= 0`. Each Newton system is reduced to
    /// `[Q + A' (L/S) A, E'; E, 0]` and solved by LU. `None` if the iteration
    /// stalls before the residuals and the duality measure fall below `tol`.
    pub fn interior_point(
        q: &DMatrix<f64>,
        c: &DVector<f64>,
        a: &DMatrix<f64>,
        b: &DVector<f64>,
        e: &DMatrix<f64>,
        d: &DVector<f64>,
        tol: f64,
    ) -> Option<Reference> {
        let n = q.nrows();
        let m = a.nrows();
        let p = e.nrows();
        let mut z = DVector::zeros(n);
        let mut s = (b - a * &z).map(|v| v.max(1.0));
        let mut l = DVector::from_element(m, 1.0);
        let mut nu = DVector::zeros(p);
        let max_step = |x: &DVector<f64>, dx: &DVector<f64>| {
            x.iter().zip(dx.iter()).fold(1.0f64, |t, (&v, &dv)| if dv < 0.0 { t.min(-v / dv) } else { t })
        };
        for _ in 0..200 {
            let rd = q * &z + c + a.transpose() * &l + e.transpose() * &nu;
            let rp = a * &z + &s - b;
            let re = e * &z - d;
            let mu = if m > 0 { s.dot(&l) / m as f64 } else { 0.0 };
            let worst = rd.amax().max(if m > 0 { rp.amax() } else { 0.0 }).max(if p > 0 { re.amax() } else { 0.0 });
            if worst < tol && mu < tol {
                // polish on the identified active set when that is consistent
                let active: Vec<usize> = (0..m).filter(|&i| l[i] > s[i]).collect();
                let z = solve_on_active(q, c, a, b, e, d, &active, 1e-9).unwrap_or(z);
                let f = objective(q, c, &z);
                return Some(Reference { z, objective: f });
            }
            let w = l.component_div(&s);
            let mut k = DMatrix::zeros(n + p, n + p);
            let aw = DMatrix::from_fn(m, n, |i, j| a[(i, j)] * w[i]);
            k.view_mut((0, 0), (n, n)).copy_from(&(q + a.transpose() * aw));
            k.view_mut((n, 0), (p, n)).copy_from(e);
            k.view_mut((0, n), (n, p)).copy_from(&e.transpose());
            let lu = k.lu();
            // rc is the complementarity residual S l - target
            let solve = |rc: &DVector<f64>| -> Option<(DVector<f64>, DVector<f64>, DVector<f64>)> {
                let inner = (-rc + l.component_mul(&rp)).component_div(&s);
                let mut rhs = DVector::zeros(n + p);
                rhs.rows_mut(0, n).copy_from(&(-&rd - a.transpose() * &inner));
                rhs.rows_mut(n, p).copy_from(&(-&re));
                let sol = lu.solve(&rhs)?;
                let dz = sol.rows(0, n).into_owned();
                let ds = -&rp - a * &dz;
                let dl = (-rc - l.component_mul(&ds)).component_div(&s);
                let dnu = sol.rows(n, p);
                let step = DVector::from_iterator(n + p, dz.iter().chain(dnu.iter()).copied());
                Some((step, ds, dl))
            };
            let (_, ds_aff, dl_aff) = solve(&s.component_mul(&l))?;
            let t_aff = max_step(&s, &ds_aff).min(max_step(&l, &dl_aff));
            let mu_aff = if m > 0 { (&s + &ds_aff * t_aff).dot(&(&l + &dl_aff * t_aff)) / m as f64 } else { 0.0 };
            let sigma = if mu > 0.0 { (mu_aff / mu).powi(3) } else { 0.0 };
            let rc = s.component_mul(&l) + ds_aff.component_mul(&dl_aff) - DVector::from_element(m, sigma * mu);
            let (step, ds, dl) = solve(&rc)?;
            let t = (0.99 * max_step(&s, &ds).min(max_step(&l, &dl))).min(1.0);
            z += step.rows(0, n) * t;
            nu += step.rows(n, p) * t;
            s += ds * t;
            l += dl * t;
            if z.iter().any(|v| !v.is_finite()) {
                return None;
            }
        }
        None
    }

    /// Accelerated projected-gradient ascent on the Lagrange dual
    /// `g(l) = -1/2 (c + G'l)' Q^-1 (c + G'l) - h'l`, `l_ineq >= 0`, where
    /// `G = [A; E]`, `h = [b; d]`. Stops when the projected dual gradient
    /// and the primal residual are below `tol` or after `max_iter`
    /// iterations. Returns the primal point `z(l)` and the dual value.
    pub fn dual_projected_gradient(
        q: &DMatrix<f64>,
        c: &DVector<f64>,
        a: &DMatrix<f64>,
        b: &DVector<f64>,
        e: &DMatrix<f64>,
        d: &DVector<f64>,
        tol: f64,
        max_iter: usize,
    ) -> (Reference, f64) {
        let n = q.nrows();
        let m = a.nrows();
        let p = e.nrows();
        let mut g = DMatrix::zeros(m + p, n);
        g.view_mut((0, 0), (m, n)).copy_from(a);
        g.view_mut((m, 0), (p, n)).copy_from(e);
        let mut h = DVector::zeros(m + p);
        h.rows_mut(0, m).copy_from(b);
        h.rows_mut(m, p).copy_from(d);
        let qinv = q.clone().try_inverse().expect("Q must be invertible");
        let primal = |l: &DVector<f64>| -(&qinv * (c + g.transpose() * l));
        let dual_value = |l: &DVector<f64>| {
            let w = c + g.transpose() * l;
            -0.5 * w.dot(&(&qinv * &w)) - h.dot(l)
        };
        let hess = &g * &qinv * g.transpose();
        let lipschitz = hess.symmetric_eigenvalues().amax().max(1e-12);
        let step = 1.0 / lipschitz;
        let project = |l: &mut DVector<f64>| {
            for i in 0..m {
                l[i] = l[i].max(0.0);
            }
        };
        let mut lam = DVector::zeros(m + p);
        let mut y = lam.clone();
        let mut t = 1.0f64;
        let mut prev_val = f64::NEG_INFINITY;
        for _ in 0..max_iter {
            let z = primal(&y);
            let grad = &g * &z - &h;
            let mut next = &y + grad * step;
            project(&mut next);
            let val = dual_value(&next);
            // adaptive restart keeps the iteration monotone
            if val < prev_val {
                y = lam.clone();
                t = 1.0;
                continue;
            }
            prev_val = val;
            let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
            y = &next + (&next - &lam) * ((t - 1.0) / t_next);
            lam = next;
            t = t_next;

            let z = primal(&lam);
            let resid = &g * &z - &h;
            let mut worst: f64 = 0.0;
            for i in 0..m {
                worst = worst.max(resid[i].max(0.0)).max((lam[i] * resid[i]).abs());
            }
            for i in m..m + p {
                worst = worst.max(resid[i].abs());
            }
            if worst < tol {
                break;
            }
        }
        let z = primal(&lam);
        let f = objective(q, c, &z);
        (Reference { z, objective: f }, dual_value(&lam))
    }
}

pub mod numdiff {
    /// Central finite difference of `f` with respect to parameter `i`,
    /// where `set(i, value)` writes a parameter and `get(i)` reads it.
    pub fn central_difference<F, G, S>(i: usize, eps: f64, mut get: G, mut set: S, mut f: F) -> f64
    where
        F: FnMut() -> f64,
        G: FnMut(usize) -> f64,
        S: FnMut(usize, f64),
    {
        let x = get(i);
        set(i, x + eps);
        let up = f();
        set(i, x - eps);
        let down = f();
        set(i, x);
        (up - down) / (2.0 * eps)
    }

    /// Relative error used for gradient checks; gradients below `floor` in
    /// magnitude are compared absolutely against `floor`.
    pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
        (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
    }
}

pub mod stats {
    /// Two-sided binomial band: `n p +- k sqrt(n p (1-p))`.
    pub fn binomial_band(n: usize, p: f64, k: f64) -> (f64, f64) {
        let mean = n as f64 * p;
        let sd = (n as f64 * p * (1.0 - p)).sqrt();
        (mean - k * sd, mean + k * sd)
    }
}
