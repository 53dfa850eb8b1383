//! Dense convex QP solver.
//!
//! Solves
//!
//! ```text
//!     minimize    ½ x'Qx + q'x
//!     subject to  A_eq x  = b_eq
//!                 A_in x <= b_in
//!                 lo <= x <= hi
//! ```
//!
//! with an over-relaxed operator-splitting (ADMM) iteration on the stacked
//! constraint form `l <= Ax <= u`, Ruiz equilibration, residual-driven penalty
//! adaptation and a polishing pass that solves the equality-constrained KKT
//! system on the detected active set. Everything is dense; the intended
//! problem sizes are tens to a few hundred variables.
//!
//! Dual sign convention: `Qx + q + A_eq'λ + A_in'μ + ν = 0` with `μ >= 0`,
//! `ν_j > 0` only on an active upper bound and `ν_j < 0` only on an active lower bound.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, LU};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QpError {
    #[error("invalid program: {0}")]
    Invalid(String),
    #[error("quadratic cost is not positive semidefinite")]
    NotConvex,
    #[error("linear system factorization failed")]
    Factorization,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvexProgram {
    pub quad: DMatrix<f64>,
    pub lin: DVector<f64>,
    pub eq_mat: DMatrix<f64>,
    pub eq_rhs: DVector<f64>,
    pub ineq_mat: DMatrix<f64>,
    pub ineq_rhs: DVector<f64>,
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
}

impl ConvexProgram {
    /// Unconstrained program with zero cost in `n` variables.
    pub fn new(n: usize) -> Self {
        ConvexProgram {
            quad: DMatrix::zeros(n, n),
            lin: DVector::zeros(n),
            eq_mat: DMatrix::zeros(0, n),
            eq_rhs: DVector::zeros(0),
            ineq_mat: DMatrix::zeros(0, n),
            ineq_rhs: DVector::zeros(0),
            lower: DVector::from_element(n, f64::NEG_INFINITY),
            upper: DVector::from_element(n, f64::INFINITY),
        }
    }

    pub fn n_vars(&self) -> usize {
        self.lin.len()
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.quad * x)) + self.lin.dot(x)
    }

    pub fn validate(&self) -> Result<(), QpError> {
        let n = self.n_vars();
        let bad = |m: &str| Err(QpError::Invalid(m.to_string()));
        if self.quad.shape() != (n, n) {
            return bad("quadratic cost has wrong shape");
        }
        if self.eq_mat.ncols() != n || self.eq_mat.nrows() != self.eq_rhs.len() {
            return bad("equality system has inconsistent dimensions");
        }
        if self.ineq_mat.ncols() != n || self.ineq_mat.nrows() != self.ineq_rhs.len() {
            return bad("inequality system has inconsistent dimensions");
        }
        if self.lower.len() != n || self.upper.len() != n {
            return bad("variable bounds have wrong length");
        }
        let finite = |m: &DMatrix<f64>| m.iter().all(|v| v.is_finite());
        if !finite(&self.quad)
            || !finite(&self.eq_mat)
            || !finite(&self.ineq_mat)
            || !self.lin.iter().all(|v| v.is_finite())
            || !self.eq_rhs.iter().all(|v| v.is_finite())
            || self.ineq_rhs.iter().any(|v| v.is_nan())
        {
            return bad("non-finite data");
        }
        for j in 0..n {
            if self.lower[j].is_nan() || self.upper[j].is_nan() || self.lower[j] > self.upper[j] {
                return bad("variable bounds are inverted or NaN");
            }
        }
        let scale = self.quad.amax().max(1.0);
        if (&self.quad - self.quad.transpose()).amax() > 1e-9 * scale {
            return bad("quadratic cost is not symmetric");
        }
        if n > 0 {
            let shifted = &self.quad + DMatrix::identity(n, n) * (1e-10 * scale);
            if Cholesky::new(shifted).is_none() {
                return Err(QpError::NotConvex);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Duals {
    pub eq: DVector<f64>,
    pub ineq: DVector<f64>,
    pub bounds: DVector<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KktResidual {
    pub stationarity: f64,
    pub primal: f64,
    pub complementarity: f64,
}

impl KktResidual {
    pub fn max(&self) -> f64 {
        self.stationarity.max(self.primal).max(self.complementarity)
    }
}

/// Residuals of the KKT conditions for a primal/dual pair, recomputed from scratch.
pub fn kkt_residual(prog: &ConvexProgram, x: &DVector<f64>, duals: &Duals) -> KktResidual {
    let mut grad = &prog.quad * x + &prog.lin + &duals.bounds;
    if prog.eq_mat.nrows() > 0 {
        grad += prog.eq_mat.tr_mul(&duals.eq);
    }
    if prog.ineq_mat.nrows() > 0 {
        grad += prog.ineq_mat.tr_mul(&duals.ineq);
    }
    let stationarity = grad.amax();

    let mut primal: f64 = 0.0;
    let mut comp: f64 = 0.0;
    if prog.eq_mat.nrows() > 0 {
        primal = primal.max((&prog.eq_mat * x - &prog.eq_rhs).amax());
    }
    if prog.ineq_mat.nrows() > 0 {
        let ax = &prog.ineq_mat * x;
        for i in 0..ax.len() {
            let slack = prog.ineq_rhs[i] - ax[i];
            primal = primal.max(-slack);
            let mu = duals.ineq[i];
            comp = comp.max(if mu < 0.0 {
                -mu
            } else if prog.ineq_rhs[i].is_finite() {
                mu * slack.abs()
            } else {
                mu
            });
        }
    }
    for j in 0..x.len() {
        let (lo, hi, v) = (prog.lower[j], prog.upper[j], duals.bounds[j]);
        primal = primal.max(lo - x[j]).max(x[j] - hi);
        comp = comp.max(if v > 0.0 {
            if hi.is_finite() { v * (hi - x[j]).abs() } else { v }
        } else if v < 0.0 {
            if lo.is_finite() { -v * (x[j] - lo).abs() } else { -v }
        } else {
            0.0
        });
    }
    KktResidual { stationarity, primal: primal.max(0.0), complementarity: comp }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStatus {
    Optimal,
    MaxIterations,
    PrimalInfeasible,
    DualInfeasible,
}

impl SolveStatus {
    pub fn is_infeasible(&self) -> bool {
        matches!(self, SolveStatus::PrimalInfeasible | SolveStatus::DualInfeasible)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveReport {
    pub x: DVector<f64>,
    pub duals: Duals,
    pub residual: KktResidual,
    pub objective: f64,
    pub iterations: usize,
    pub polished: bool,
    pub status: SolveStatus,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSettings {
    /// Every KKT residual must fall below this for `Optimal`.
    pub tol: f64,
    pub max_iter: usize,
    pub rho: f64,
    pub sigma: f64,
    pub alpha: f64,
    pub adaptive_rho: bool,
    pub adaptive_rho_interval: usize,
    pub scaling_iters: usize,
    pub polish: bool,
    pub polish_refine_iters: usize,
    /// Active-set updates per polish attempt.
    pub polish_rounds: usize,
    pub check_interval: usize,
    pub infeasibility_tol: f64,
}

impl Default for QpSettings {
    fn default() -> Self {
        QpSettings {
            tol: 1e-8,
            max_iter: 20_000,
            rho: 0.1,
            sigma: 1e-6,
            alpha: 1.6,
            adaptive_rho: true,
            adaptive_rho_interval: 25,
            scaling_iters: 10,
            polish: true,
            polish_refine_iters: 5,
            polish_rounds: 60,
            check_interval: 5,
            infeasibility_tol: 1e-7,
        }
    }
}

/// Primal, slack and dual iterate in unscaled coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct WarmStart {
    pub x: DVector<f64>,
    pub z: DVector<f64>,
    pub y: DVector<f64>,
}

const RHO_EQ_FACTOR: f64 = 1e3;
const RHO_MIN: f64 = 1e-6;
const RHO_MAX: f64 = 1e6;
const POLISH_CACHE: usize = 4;

/// Solver bound to one program. The quadratic part and constraints are fixed;
/// the linear cost may be replaced between solves, which keeps every
/// factorization valid.
#[derive(Debug, Clone)]
pub struct QpSolver {
    settings: QpSettings,
    prog: ConvexProgram,
    n: usize,
    // stacked, scaled data
    p: DMatrix<f64>,
    q: DVector<f64>,
    a: DMatrix<f64>,
    l: DVector<f64>,
    u: DVector<f64>,
    d: DVector<f64>,
    e: DVector<f64>,
    c: f64,
    box_vars: Vec<usize>,
    rho: f64,
    rho_vec: DVector<f64>,
    chol: Cholesky<f64, Dyn>,
    // most recently used first
    polish_cache: Vec<(Vec<i8>, LU<f64, Dyn, Dyn>, DMatrix<f64>)>,
    // active set of the last successful polish
    last_active: Option<Vec<i8>>,
    // active sets whose polish already failed for the current linear cost
    polish_failed: Vec<Vec<i8>>,
    last: Option<WarmStart>,
}

impl QpSolver {
    pub fn new(prog: &ConvexProgram, settings: QpSettings) -> Result<Self, QpError> {
        prog.validate()?;
        let n = prog.n_vars();
        let box_vars: Vec<usize> = (0..n)
            .filter(|&j| prog.lower[j].is_finite() || prog.upper[j].is_finite())
            .collect();
        let (m_eq, m_in) = (prog.eq_mat.nrows(), prog.ineq_mat.nrows());
        let m = m_eq + m_in + box_vars.len();

        let mut a = DMatrix::zeros(m, n);
        let mut l = DVector::zeros(m);
        let mut u = DVector::zeros(m);
        a.rows_mut(0, m_eq).copy_from(&prog.eq_mat);
        l.rows_mut(0, m_eq).copy_from(&prog.eq_rhs);
        u.rows_mut(0, m_eq).copy_from(&prog.eq_rhs);
        a.rows_mut(m_eq, m_in).copy_from(&prog.ineq_mat);
        for i in 0..m_in {
            l[m_eq + i] = f64::NEG_INFINITY;
            u[m_eq + i] = prog.ineq_rhs[i];
        }
        for (k, &j) in box_vars.iter().enumerate() {
            let r = m_eq + m_in + k;
            a[(r, j)] = 1.0;
            l[r] = prog.lower[j];
            u[r] = prog.upper[j];
        }

        let mut p = prog.quad.clone();
        let mut q = prog.lin.clone();
        let mut d = DVector::from_element(n, 1.0);
        let mut e = DVector::from_element(m, 1.0);
        for _ in 0..settings.scaling_iters {
            let mut dd = DVector::from_element(n, 1.0);
            for j in 0..n {
                let norm = p.column(j).amax().max(a.column(j).amax());
                dd[j] = scale_factor(norm);
            }
            let mut de = DVector::from_element(m, 1.0);
            for i in 0..m {
                de[i] = scale_factor(a.row(i).amax());
            }
            for j in 0..n {
                for i in 0..n {
                    p[(i, j)] *= dd[i] * dd[j];
                }
                for i in 0..m {
                    a[(i, j)] *= de[i] * dd[j];
                }
            }
            d.component_mul_assign(&dd);
            e.component_mul_assign(&de);
        }
        q.component_mul_assign(&d);
        let mut c = 1.0;
        if n > 0 {
            let mean_col = (0..n).map(|j| p.column(j).amax()).sum::<f64>() / n as f64;
            let scale = mean_col.max(q.amax());
            if scale > 1e-4 && scale.is_finite() {
                c = (1.0 / scale).clamp(1e-4, 1e4);
            }
        }
        p *= c;
        q *= c;
        for i in 0..m {
            l[i] *= e[i];
            u[i] *= e[i];
        }

        let rho = settings.rho;
        let rho_vec = rho_vector(&l, &u, rho);
        let chol = factor(&p, &a, &rho_vec, settings.sigma)?;
        Ok(QpSolver {
            settings,
            prog: prog.clone(),
            n,
            p,
            q,
            a,
            l,
            u,
            d,
            e,
            c,
            box_vars,
            rho,
            rho_vec,
            chol,
            polish_cache: Vec::new(),
            last_active: None,
            polish_failed: Vec::new(),
            last: None,
        })
    }

    pub fn program(&self) -> &ConvexProgram {
        &self.prog
    }

    /// Iterate left by the most recent solve, for warm-starting a solver on a
    /// program with the same variable and row layout.
    pub fn last_iterate(&self) -> Option<&WarmStart> {
        self.last.as_ref()
    }

    /// Replaces the linear cost `q`; factorizations stay valid.
    pub fn set_linear_cost(&mut self, lin: &DVector<f64>) {
        assert_eq!(lin.len(), self.n);
        self.prog.lin.copy_from(lin);
        self.q = lin.component_mul(&self.d) * self.c;
        self.polish_failed.clear();
    }

    /// Solves from `warm` if given, otherwise from the last iterate of this solver.
    pub fn solve(&mut self, warm: Option<&WarmStart>) -> SolveReport {
        let s = self.settings.clone();
        let (n, m) = (self.n, self.l.len());
        let start = warm.cloned().or_else(|| self.last.clone());
        let (mut x, mut z, mut y) = match start {
            Some(w) if w.x.len() == n && w.z.len() == m && w.y.len() == m => (
                w.x.component_div(&self.d),
                w.z.component_mul(&self.e),
                w.y.component_div(&self.e) * self.c,
            ),
            _ => (DVector::zeros(n), DVector::zeros(m), DVector::zeros(m)),
        };

        let mut best: Option<SolveReport> = None;
        let mut iterations = 0;
        let mut prev_x = x.clone();
        let mut prev_y = y.clone();
        let mut status = SolveStatus::MaxIterations;

        // An iterate may already satisfy the tolerance (warm start).
        if let Some(rep) = self.try_accept(&x, &z, &y, 0, &mut best) {
            return self.finish(rep);
        }

        while iterations < s.max_iter {
            iterations += 1;
            let rhs = &x * s.sigma - &self.q + self.a.tr_mul(&(self.rho_vec.component_mul(&z) - &y));
            let x_tilde = self.chol.solve(&rhs);
            let z_tilde = &self.a * &x_tilde;
            prev_x.copy_from(&x);
            prev_y.copy_from(&y);
            x = &x_tilde * s.alpha + &x * (1.0 - s.alpha);
            let z_hat = &z_tilde * s.alpha + &z * (1.0 - s.alpha);
            let mut z_new = &z_hat + y.component_div(&self.rho_vec);
            for i in 0..m {
                z_new[i] = z_new[i].clamp(self.l[i], self.u[i]);
            }
            y += self.rho_vec.component_mul(&(&z_hat - &z_new));
            z = z_new;

            if iterations % s.check_interval == 0 || iterations == s.max_iter {
                if let Some(rep) = self.try_accept(&x, &z, &y, iterations, &mut best) {
                    return self.finish(rep);
                }
                if let Some(st) = self.infeasibility(&(&x - &prev_x), &(&y - &prev_y)) {
                    status = st;
                    break;
                }
            }
            if s.adaptive_rho && iterations % s.adaptive_rho_interval == 0 {
                self.adapt_rho(&x, &z, &y);
            }
        }

        let mut rep = best.unwrap_or_else(|| self.report(&x, &y, iterations, false));
        rep.iterations = iterations;
        rep.status = status;
        self.last = Some(WarmStart {
            x: x.component_mul(&self.d),
            z: z.component_div(&self.e),
            y: y.component_mul(&self.e) / self.c,
        });
        rep
    }

    fn finish(&mut self, rep: SolveReport) -> SolveReport {
        let m = self.l.len();
        let mut y = DVector::zeros(m);
        let (m_eq, m_in) = (self.prog.eq_mat.nrows(), self.prog.ineq_mat.nrows());
        y.rows_mut(0, m_eq).copy_from(&rep.duals.eq);
        y.rows_mut(m_eq, m_in).copy_from(&rep.duals.ineq);
        for (k, &j) in self.box_vars.iter().enumerate() {
            y[m_eq + m_in + k] = rep.duals.bounds[j];
        }
        let mut z = DVector::zeros(m);
        let ax_eq = &self.prog.eq_mat * &rep.x;
        let ax_in = &self.prog.ineq_mat * &rep.x;
        z.rows_mut(0, m_eq).copy_from(&ax_eq);
        z.rows_mut(m_eq, m_in).copy_from(&ax_in);
        for (k, &j) in self.box_vars.iter().enumerate() {
            z[m_eq + m_in + k] = rep.x[j];
        }
        self.last = Some(WarmStart { x: rep.x.clone(), z, y });
        rep
    }

    /// Unscaled report for a scaled iterate.
    fn report(&self, xs: &DVector<f64>, ys: &DVector<f64>, iterations: usize, polished: bool) -> SolveReport {
        let x = xs.component_mul(&self.d);
        let y = ys.component_mul(&self.e) / self.c;
        let duals = self.split_duals(&y);
        let residual = kkt_residual(&self.prog, &x, &duals);
        SolveReport {
            objective: self.prog.objective(&x),
            x,
            duals,
            residual,
            iterations,
            polished,
            status: SolveStatus::MaxIterations,
        }
    }

    fn split_duals(&self, y: &DVector<f64>) -> Duals {
        let (m_eq, m_in) = (self.prog.eq_mat.nrows(), self.prog.ineq_mat.nrows());
        let mut bounds = DVector::zeros(self.n);
        for (k, &j) in self.box_vars.iter().enumerate() {
            bounds[j] = y[m_eq + m_in + k];
        }
        Duals {
            eq: y.rows(0, m_eq).into_owned(),
            ineq: y.rows(m_eq, m_in).into_owned(),
            bounds,
        }
    }

    fn try_accept(
        &mut self,
        x: &DVector<f64>,
        z: &DVector<f64>,
        y: &DVector<f64>,
        iterations: usize,
        best: &mut Option<SolveReport>,
    ) -> Option<SolveReport> {
        let tol = self.settings.tol;
        let mut rep = self.report(x, y, iterations, false);
        if rep.residual.max() < tol {
            rep.status = SolveStatus::Optimal;
            return Some(rep);
        }
        if best.as_ref().map_or(true, |b| rep.residual.max() < b.residual.max()) {
            *best = Some(rep.clone());
        }
        // a warm start retries the last successful active set first
        let guess = match (&self.last_active, iterations) {
            (Some(sig), 0) => Some(sig.clone()),
            (_, 0) => None,
            _ if rep.residual.max() < 1e-2 => Some(self.active_signature(z, y)),
            _ => None,
        };
        if let Some(sig) = guess.filter(|_| self.settings.polish) {
            if let Some(mut pol) = self.polish(sig, x, y, iterations) {
                if pol.residual.max() < tol {
                    pol.status = SolveStatus::Optimal;
                    return Some(pol);
                }
                if best.as_ref().map_or(true, |b| pol.residual.max() < b.residual.max()) {
                    *best = Some(pol);
                }
            }
        }
        None
    }

    /// Active-set guess from a splitting iterate: 2 equality, ±1 bound side, 0 inactive.
    fn active_signature(&self, z: &DVector<f64>, y: &DVector<f64>) -> Vec<i8> {
        (0..self.l.len())
            .map(|i| {
                if self.l[i] == self.u[i] {
                    2
                } else if z[i] - self.l[i] < -y[i] {
                    -1
                } else if self.u[i] - z[i] < y[i] {
                    1
                } else {
                    0
                }
            })
            .collect()
    }

    /// Solves the KKT system on an active set, then re-classifies rows from the
    /// result (primal-dual active-set update) until the set repeats or a
    /// solution within tolerance appears.
    fn polish(&mut self, mut sig: Vec<i8>, x: &DVector<f64>, y: &DVector<f64>, iterations: usize) -> Option<SolveReport> {
        let mut best: Option<SolveReport> = None;
        for _ in 0..self.settings.polish_rounds {
            if self.polish_failed.contains(&sig) {
                break;
            }
            let (xs, ys) = self.solve_active(&sig, x, y)?;
            let rep = self.report(&xs, &ys, iterations, true);
            if rep.residual.max() < self.settings.tol {
                self.last_active = Some(sig);
                return Some(rep);
            }
            self.polish_failed.push(sig.clone());
            if best.as_ref().map_or(true, |b| rep.residual.max() < b.residual.max()) {
                best = Some(rep);
            }
            let ax = &self.a * &xs;
            // Add every violated row; only when none is violated, release the
            // single row whose multiplier has the wrong sign by the most.
            let mut next = sig.clone();
            let mut added = false;
            for i in 0..sig.len() {
                if sig[i] == 0 {
                    if ax[i] > self.u[i] {
                        next[i] = 1;
                        added = true;
                    } else if ax[i] < self.l[i] {
                        next[i] = -1;
                        added = true;
                    }
                }
            }
            if !added {
                let worst = (0..sig.len())
                    .filter_map(|i| match sig[i] {
                        1 if ys[i] < 0.0 => Some((i, -ys[i])),
                        -1 if ys[i] > 0.0 => Some((i, ys[i])),
                        _ => None,
                    })
                    .max_by(|a, b| a.1.total_cmp(&b.1));
                match worst {
                    Some((i, _)) => next[i] = 0,
                    None => break,
                }
            }
            if next == sig {
                break;
            }
            sig = next;
        }
        best
    }

    /// Regularized KKT solve with iterative refinement on active set `sig`,
    /// in scaled coordinates.
    fn solve_active(&mut self, sig: &[i8], x: &DVector<f64>, y: &DVector<f64>) -> Option<(DVector<f64>, DVector<f64>)> {
        let (n, m) = (self.n, self.l.len());
        let active: Vec<usize> = (0..m).filter(|&i| sig[i] != 0).collect();
        let k = n + active.len();
        let delta = 1e-9;

        if let Some(pos) = self.polish_cache.iter().position(|(s, _, _)| s.as_slice() == sig) {
            let hit = self.polish_cache.remove(pos);
            self.polish_cache.insert(0, hit);
        } else {
            let mut kkt = DMatrix::zeros(k, k);
            kkt.view_mut((0, 0), (n, n)).copy_from(&self.p);
            for (r, &i) in active.iter().enumerate() {
                for j in 0..n {
                    let v = self.a[(i, j)];
                    kkt[(n + r, j)] = v;
                    kkt[(j, n + r)] = v;
                }
            }
            let mut reg = kkt.clone();
            for j in 0..n {
                reg[(j, j)] += delta;
            }
            for r in 0..active.len() {
                reg[(n + r, n + r)] -= delta;
            }
            self.polish_cache.insert(0, (sig.to_vec(), reg.lu(), kkt));
            self.polish_cache.truncate(POLISH_CACHE);
        }
        let (_, lu, kkt) = &self.polish_cache[0];

        let mut rhs = DVector::zeros(k);
        rhs.rows_mut(0, n).copy_from(&(-&self.q));
        for (r, &i) in active.iter().enumerate() {
            rhs[n + r] = if sig[i] == 1 { self.u[i] } else { self.l[i] };
        }
        // refinement from the splitting iterate keeps its component along
        // directions the active set leaves undetermined
        let mut sol = DVector::zeros(k);
        sol.rows_mut(0, n).copy_from(x);
        for (r, &i) in active.iter().enumerate() {
            sol[n + r] = y[i];
        }
        for _ in 0..=self.settings.polish_refine_iters {
            let res = &rhs - kkt * &sol;
            if res.amax() < 1e-14 {
                break;
            }
            sol += lu.solve(&res)?;
        }
        if !sol.iter().all(|v| v.is_finite()) {
            return None;
        }
        let xs = sol.rows(0, n).into_owned();
        let mut ys = DVector::zeros(m);
        for (r, &i) in active.iter().enumerate() {
            ys[i] = sol[n + r];
        }
        Some((xs, ys))
    }

    fn adapt_rho(&mut self, x: &DVector<f64>, z: &DVector<f64>, y: &DVector<f64>) {
        let ax = &self.a * x;
        let aty = self.a.tr_mul(y);
        let px = &self.p * x;
        let r_prim = (&ax - z).amax();
        let r_dual = (&px + &self.q + &aty).amax();
        let p_norm = ax.amax().max(z.amax()).max(1e-30);
        let d_norm = px.amax().max(aty.amax()).max(self.q.amax()).max(1e-30);
        let ratio = ((r_prim / p_norm) / (r_dual / d_norm + 1e-30)).sqrt();
        let new_rho = (self.rho * ratio).clamp(RHO_MIN, RHO_MAX);
        if !(new_rho.is_finite()) || (new_rho < 5.0 * self.rho && new_rho > 0.2 * self.rho) {
            return;
        }
        let rho_vec = rho_vector(&self.l, &self.u, new_rho);
        if let Ok(chol) = factor(&self.p, &self.a, &rho_vec, self.settings.sigma) {
            self.rho = new_rho;
            self.rho_vec = rho_vec;
            self.chol = chol;
        }
    }

    /// Certificate checks on the (unscaled) iterate differences.
    fn infeasibility(&self, dx_s: &DVector<f64>, dy_s: &DVector<f64>) -> Option<SolveStatus> {
        let eps = self.settings.infeasibility_tol;
        let dy = dy_s.component_mul(&self.e) / self.c;
        let dy_norm = dy.amax();
        if dy_norm > 1e-12 {
            let mut support = 0.0;
            let mut finite = true;
            let l = self.l.component_div(&self.e);
            let u = self.u.component_div(&self.e);
            for i in 0..dy.len() {
                let v = dy[i] / dy_norm;
                if v > 1e-12 {
                    if u[i].is_infinite() {
                        finite = false;
                        break;
                    }
                    support += u[i] * v;
                } else if v < -1e-12 {
                    if l[i].is_infinite() {
                        finite = false;
                        break;
                    }
                    support += l[i] * v;
                }
            }
            let aty = self.stacked_tr_mul(&(&dy / dy_norm));
            if finite && aty.amax() < eps && support < -eps {
                return Some(SolveStatus::PrimalInfeasible);
            }
        }
        let dx = dx_s.component_mul(&self.d);
        let dx_norm = dx.amax();
        if dx_norm > 1e-12 {
            let dxn = &dx / dx_norm;
            let pdx = (&self.prog.quad * &dxn).amax();
            let qdx = self.prog.lin.dot(&dxn);
            if pdx < eps && qdx < -eps {
                let adx = self.stacked_mul(&dxn);
                let l = self.l.component_div(&self.e);
                let u = self.u.component_div(&self.e);
                let ok = (0..adx.len()).all(|i| {
                    (u[i].is_infinite() || adx[i] < eps) && (l[i].is_infinite() || adx[i] > -eps)
                });
                if ok {
                    return Some(SolveStatus::DualInfeasible);
                }
            }
        }
        None
    }

    fn stacked_mul(&self, x: &DVector<f64>) -> DVector<f64> {
        let xs = x.component_div(&self.d);
        (&self.a * xs).component_div(&self.e)
    }

    fn stacked_tr_mul(&self, y: &DVector<f64>) -> DVector<f64> {
        self.a.tr_mul(&y.component_div(&self.e)).component_div(&self.d)
    }
}

fn scale_factor(norm: f64) -> f64 {
    if norm < 1e-4 || !norm.is_finite() {
        1.0
    } else {
        1.0 / norm.sqrt()
    }
}

fn rho_vector(l: &DVector<f64>, u: &DVector<f64>, rho: f64) -> DVector<f64> {
    DVector::from_iterator(
        l.len(),
        (0..l.len()).map(|i| {
            if l[i] == u[i] {
                rho * RHO_EQ_FACTOR
            } else if l[i].is_infinite() && u[i].is_infinite() {
                RHO_MIN
            } else {
                rho
            }
        }),
    )
}

fn factor(
    p: &DMatrix<f64>,
    a: &DMatrix<f64>,
    rho: &DVector<f64>,
    sigma: f64,
) -> Result<Cholesky<f64, Dyn>, QpError> {
    let n = p.nrows();
    let mut scaled = a.clone();
    for i in 0..a.nrows() {
        let r = rho[i];
        scaled.row_mut(i).scale_mut(r);
    }
    let k = p + DMatrix::identity(n, n) * sigma + a.tr_mul(&scaled);
    Cholesky::new(k).ok_or(QpError::Factorization)
}

/// One-shot solve with default settings and the given tolerance / iteration cap.
pub fn solve_qp(prog: &ConvexProgram, tol: f64, max_iter: usize) -> Result<SolveReport, QpError> {
    let settings = QpSettings { tol, max_iter, ..QpSettings::default() };
    Ok(QpSolver::new(prog, settings)?.solve(None))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn one_dim() -> ConvexProgram {
        // min x² s.t. x >= 1, as an inequality row −x <= −1
        let mut p = ConvexProgram::new(1);
        p.quad[(0, 0)] = 2.0;
        p.ineq_mat = DMatrix::from_element(1, 1, -1.0);
        p.ineq_rhs = DVector::from_element(1, -1.0);
        p
    }

    #[test]
    fn active_bound() {
        let rep = solve_qp(&one_dim(), 1e-9, 10_000).unwrap();
        assert_eq!(rep.status, SolveStatus::Optimal);
        assert_relative_eq!(rep.x[0], 1.0, epsilon = 1e-8);
        assert_relative_eq!(rep.duals.ineq[0], 2.0, epsilon = 1e-6);
    }

    #[test]
    fn same_problem_as_box() {
        let mut p = ConvexProgram::new(1);
        p.quad[(0, 0)] = 2.0;
        p.lower[0] = 1.0;
        let rep = solve_qp(&p, 1e-9, 10_000).unwrap();
        assert_relative_eq!(rep.x[0], 1.0, epsilon = 1e-8);
        assert_relative_eq!(rep.duals.bounds[0], -2.0, epsilon = 1e-6);
    }

    #[test]
    fn l1_epigraph() {
        // variables (ω, s): min s, ω = −0.3, −s <= ω <= s
        let mut p = ConvexProgram::new(2);
        p.lin[1] = 1.0;
        p.eq_mat = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        p.eq_rhs = DVector::from_element(1, -0.3);
        p.ineq_mat = DMatrix::from_row_slice(2, 2, &[1.0, -1.0, -1.0, -1.0]);
        p.ineq_rhs = DVector::zeros(2);
        let rep = solve_qp(&p, 1e-9, 10_000).unwrap();
        assert_eq!(rep.status, SolveStatus::Optimal);
        assert_relative_eq!(rep.x[1], 0.3, epsilon = 1e-8);
    }

    #[test]
    fn kkt_hand_solved() {
        let p = one_dim();
        let x = DVector::from_element(1, 1.0);
        let duals = Duals { eq: DVector::zeros(0), ineq: DVector::from_element(1, 2.0), bounds: DVector::zeros(1) };
        let r = kkt_residual(&p, &x, &duals);
        assert!(r.max() < 1e-12);
        let r = kkt_residual(&p, &DVector::from_element(1, 1.1), &duals);
        assert!(r.stationarity > 0.0);
    }

    #[test]
    fn infeasible_is_reported() {
        // x <= −1 and x >= 1
        let mut p = ConvexProgram::new(1);
        p.quad[(0, 0)] = 1.0;
        p.ineq_mat = DMatrix::from_row_slice(2, 1, &[1.0, -1.0]);
        p.ineq_rhs = DVector::from_row_slice(&[-1.0, -1.0]);
        let rep = solve_qp(&p, 1e-9, 20_000).unwrap();
        assert_eq!(rep.status, SolveStatus::PrimalInfeasible);
    }

    #[test]
    fn unbounded_is_reported() {
        let mut p = ConvexProgram::new(2);
        p.lin[0] = -1.0;
        p.upper[1] = 1.0;
        let rep = solve_qp(&p, 1e-9, 20_000).unwrap();
        assert_eq!(rep.status, SolveStatus::DualInfeasible);
    }

    #[test]
    fn rejects_nonconvex() {
        let mut p = ConvexProgram::new(1);
        p.quad[(0, 0)] = -1.0;
        assert_eq!(p.validate(), Err(QpError::NotConvex));
        let mut p = ConvexProgram::new(2);
        p.quad[(0, 1)] = 1.0;
        assert!(matches!(p.validate(), Err(QpError::Invalid(_))));
    }

    #[test]
    fn resolve_is_bit_identical() {
        let p = one_dim();
        let a = solve_qp(&p, 1e-9, 10_000).unwrap();
        let b = solve_qp(&p, 1e-9, 10_000).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn linear_cost_update_reuses_factorization() {
        let mut solver = QpSolver::new(&one_dim(), QpSettings::default()).unwrap();
        let first = solver.solve(None);
        assert_relative_eq!(first.x[0], 1.0, epsilon = 1e-8);
        // min x² − 6x, x >= 1 → x = 3
        solver.set_linear_cost(&DVector::from_element(1, -6.0));
        let second = solver.solve(None);
        assert_eq!(second.status, SolveStatus::Optimal);
        assert_relative_eq!(second.x[0], 3.0, epsilon = 1e-8);
    }
}
