//! Dense convex QP solver returning primal and dual solutions.
//!
//! Solves
//!
//! ```text
//!     minimize    1/2 y' P y + q' y
//!     subject to  A_eq y  = b_eq
//!                 A_in y <= b_in
//! ```
//!
//! with operator-splitting (ADMM) iterations over the stacked constraint
//! `l <= A y <= u`, diagonally preconditioned by Ruiz equilibration, followed
//! by an active-set polishing solve. The duals feed the sensor-scheduling
//! relevance scores, so polishing is mandatory rather than cosmetic: the
//! polished KKT system delivers multipliers to near machine precision.
//!
//! Trajectory QPs have an almost block-tridiagonal normal matrix; the ADMM
//! linear system is factored once per solve with a banded Cholesky under a
//! reverse Cuthill-McKee ordering, so a horizon-25 planning QP costs
//! milliseconds on one core.

use crate::linalg::{BandedCholesky, SymPattern};
use crate::{cst, Error, Result, Scalar};
use nalgebra::{DMatrix, DVector};
use serde::Serialize;

/// Provenance label for one constraint row, used to map duals back to
/// obstacle/time pairs and for diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ConstraintTag {
    /// dynamics equality at step t
    Dynamics { t: usize },
    /// keep-out half-space for (obstacle, horizon step)
    KeepOut { obstacle: usize, t: usize },
    /// slack nonnegativity paired with a keep-out row
    SlackNonneg { obstacle: usize, t: usize },
    /// input box row at step t
    InputBound { t: usize },
    /// safe-set box row at step t
    StateBound { t: usize },
    Generic,
}

/// Dense convex QP with separate equality and inequality blocks.
#[derive(Debug, Clone)]
pub struct QuadraticProgram<S: Scalar = f64> {
    pub p: DMatrix<S>,
    pub q: DVector<S>,
    pub a_eq: DMatrix<S>,
    pub b_eq: DVector<S>,
    pub a_in: DMatrix<S>,
    pub b_in: DVector<S>,
    pub eq_tags: Vec<ConstraintTag>,
    pub in_tags: Vec<ConstraintTag>,
}

impl<S: Scalar> QuadraticProgram<S> {
    pub fn new(
        p: DMatrix<S>,
        q: DVector<S>,
        a_eq: DMatrix<S>,
        b_eq: DVector<S>,
        a_in: DMatrix<S>,
        b_in: DVector<S>,
    ) -> Result<Self> {
        let d = q.len();
        if p.nrows() != d || p.ncols() != d {
            return Err(Error::Config("P must be d x d".into()));
        }
        if a_eq.ncols() != d && a_eq.nrows() > 0 {
            return Err(Error::Config("A_eq column count must match d".into()));
        }
        if a_in.ncols() != d && a_in.nrows() > 0 {
            return Err(Error::Config("A_in column count must match d".into()));
        }
        if a_eq.nrows() != b_eq.len() || a_in.nrows() != b_in.len() {
            return Err(Error::Config("constraint right-hand sides do not match row counts".into()));
        }
        let mut p = p;
        crate::linalg::symmetrize(&mut p);
        let eq_tags = vec![ConstraintTag::Generic; a_eq.nrows()];
        let in_tags = vec![ConstraintTag::Generic; a_in.nrows()];
        Ok(Self {
            p,
            q,
            a_eq,
            b_eq,
            a_in,
            b_in,
            eq_tags,
            in_tags,
        })
    }

    pub fn num_vars(&self) -> usize {
        self.q.len()
    }

    pub fn num_eq(&self) -> usize {
        self.a_eq.nrows()
    }

    pub fn num_in(&self) -> usize {
        self.a_in.nrows()
    }

    pub fn objective(&self, y: &DVector<S>) -> S {
        (y.dot(&(&self.p * y))) * cst::<S>(0.5) + self.q.dot(y)
    }

    /// Self-describing JSON dump (row-major dense arrays) for offline
    /// reproduction of a problematic instance.
    pub fn dump_json<W: std::io::Write>(&self, w: &mut W) -> std::io::Result<()> {
        fn flat<S: Scalar>(m: &DMatrix<S>) -> Vec<f64> {
            let mut out = Vec::with_capacity(m.nrows() * m.ncols());
            for i in 0..m.nrows() {
                for j in 0..m.ncols() {
                    out.push(crate::as_f64(m[(i, j)]));
                }
            }
            out
        }
        let doc = serde_json::json!({
            "format": "dense-qp",
            "layout": "row-major",
            "num_vars": self.num_vars(),
            "num_eq": self.num_eq(),
            "num_in": self.num_in(),
            "P": flat(&self.p),
            "q": self.q.iter().map(|v| crate::as_f64(*v)).collect::<Vec<_>>(),
            "A_eq": flat(&self.a_eq),
            "b_eq": self.b_eq.iter().map(|v| crate::as_f64(*v)).collect::<Vec<_>>(),
            "A_in": flat(&self.a_in),
            "b_in": self.b_in.iter().map(|v| crate::as_f64(*v)).collect::<Vec<_>>(),
            "eq_tags": self.eq_tags,
            "in_tags": self.in_tags,
        });
        w.write_all(serde_json::to_string_pretty(&doc).unwrap().as_bytes())
    }
}

/// (stationarity inf-norm, primal violation inf-norm, max complementarity
/// product)
#[derive(Debug, Clone, Copy)]
pub struct KktResiduals<S: Scalar = f64> {
    pub stationarity: S,
    pub primal: S,
    pub complementarity: S,
}

impl<S: Scalar> KktResiduals<S> {
    pub fn max(&self) -> S {
        self.stationarity.max(self.primal).max(self.complementarity)
    }
}

/// Exact KKT residuals of a candidate primal/dual point.
pub fn kkt_residuals<S: Scalar>(
    qp: &QuadraticProgram<S>,
    y: &DVector<S>,
    lambda_eq: &DVector<S>,
    lambda_in: &DVector<S>,
) -> KktResiduals<S> {
    let mut grad = &qp.p * y + &qp.q;
    if qp.num_eq() > 0 {
        grad += qp.a_eq.transpose() * lambda_eq;
    }
    if qp.num_in() > 0 {
        grad += qp.a_in.transpose() * lambda_in;
    }
    let stationarity = grad.amax();

    let mut primal = S::zero();
    if qp.num_eq() > 0 {
        primal = (&qp.a_eq * y - &qp.b_eq).amax();
    }
    let mut complementarity = S::zero();
    if qp.num_in() > 0 {
        let slack = &qp.a_in * y - &qp.b_in;
        for i in 0..slack.len() {
            primal = primal.max(slack[i]);
            complementarity = complementarity.max((lambda_in[i] * slack[i]).abs());
        }
    }
    KktResiduals {
        stationarity,
        primal,
        complementarity,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Optimal,
    PrimalInfeasible,
    MaxIter,
}

#[derive(Debug, Clone)]
pub struct QpSolution<S: Scalar = f64> {
    pub y: DVector<S>,
    pub lambda_eq: DVector<S>,
    /// nonnegative multipliers of the inequality rows
    pub lambda_in: DVector<S>,
    pub objective: S,
    pub status: QpStatus,
    pub kkt: KktResiduals<S>,
    pub iterations: usize,
    pub polished: bool,
    /// Farkas-type certificate direction when primal infeasible
    pub certificate: Option<DVector<S>>,
}

#[derive(Debug, Clone, Copy)]
pub struct SolverSettings<S: Scalar = f64> {
    pub eps_abs: S,
    pub eps_rel: S,
    pub max_iter: usize,
    pub rho: S,
    pub sigma: S,
    /// over-relaxation
    pub alpha: S,
    /// multiplier applied to rho on equality rows
    pub rho_eq_scale: S,
    /// iterations between convergence checks
    pub check_interval: usize,
    /// checks between early polish attempts
    pub polish_every_checks: usize,
    /// a row counts as active when its residual is within this of its bound
    pub active_set_tol: S,
    /// regularization of the polish KKT system
    pub polish_delta: S,
    /// Ruiz equilibration sweeps
    pub scaling_iters: usize,
    pub infeasibility_tol: S,
}

impl<S: Scalar> Default for SolverSettings<S> {
    fn default() -> Self {
        Self {
            eps_abs: cst(1e-6),
            eps_rel: cst(1e-6),
            max_iter: 20_000,
            rho: cst(0.1),
            sigma: cst(1e-6),
            alpha: cst(1.6),
            rho_eq_scale: cst(1e3),
            check_interval: 25,
            polish_every_checks: 2,
            active_set_tol: cst(1e-5),
            polish_delta: cst(1e-9),
            scaling_iters: 10,
            infeasibility_tol: cst(1e-9),
        }
    }
}

/// Stateless solver front end; every call owns a private workspace, so one
/// instance per thread is the natural usage.
#[derive(Debug, Clone, Default)]
pub struct QpSolver<S: Scalar = f64> {
    pub settings: SolverSettings<S>,
}

struct SparseRows<S> {
    rows: Vec<Vec<(usize, S)>>,
}

impl<S: Scalar> SparseRows<S> {
    fn from_stacked(a_eq: &DMatrix<S>, a_in: &DMatrix<S>) -> Self {
        let mut rows = Vec::with_capacity(a_eq.nrows() + a_in.nrows());
        for block in [a_eq, a_in] {
            for i in 0..block.nrows() {
                let mut row = Vec::new();
                for j in 0..block.ncols() {
                    let v = block[(i, j)];
                    if v != S::zero() {
                        row.push((j, v));
                    }
                }
                rows.push(row);
            }
        }
        Self { rows }
    }

    /// out = A x
    fn mul(&self, x: &DVector<S>, out: &mut DVector<S>) {
        for (i, row) in self.rows.iter().enumerate() {
            let mut acc = S::zero();
            for &(j, v) in row {
                acc += v * x[j];
            }
            out[i] = acc;
        }
    }

    /// out += A^T w
    fn tr_mul_add(&self, w: &DVector<S>, out: &mut DVector<S>) {
        for (i, row) in self.rows.iter().enumerate() {
            let wi = w[i];
            if wi != S::zero() {
                for &(j, v) in row {
                    out[j] += v * wi;
                }
            }
        }
    }
}

/// Scaled problem data and the Ruiz diagonals that map back to the original.
struct Scaled<S: Scalar> {
    p: DMatrix<S>,
    q: DVector<S>,
    rows: SparseRows<S>,
    l: DVector<S>,
    u: DVector<S>,
    /// variable scaling x = d .* x_hat
    d: DVector<S>,
    /// row scaling
    e: DVector<S>,
    /// cost scaling
    c: S,
}

impl<S: Scalar> QpSolver<S> {
    pub fn new(settings: SolverSettings<S>) -> Self {
        Self { settings }
    }

    /// Solve with an optional primal warm start.
    pub fn solve(&self, qp: &QuadraticProgram<S>, warm_start: Option<&DVector<S>>) -> QpSolution<S> {
        self.solve_full(qp, warm_start, None)
    }

    /// Solve with primal and dual warm starts (stacked [eq; in] duals).
    pub fn solve_full(
        &self,
        qp: &QuadraticProgram<S>,
        warm_y: Option<&DVector<S>>,
        warm_duals: Option<&DVector<S>>,
    ) -> QpSolution<S> {
        let st = &self.settings;
        let n = qp.num_vars();
        let m_eq = qp.num_eq();
        let m = m_eq + qp.num_in();
        let inf = cst::<S>(f64::INFINITY);

        let scaled = ruiz_scale(qp, st.scaling_iters);

        // stacked rho: equalities get a stiffer penalty
        let mut rho = DVector::from_element(m, st.rho);
        for i in 0..m_eq {
            rho[i] *= st.rho_eq_scale;
        }

        let mut factor = match factorize(&scaled, &rho, st.sigma) {
            Some(f) => f,
            None => {
                return self.finish(qp, &DVector::zeros(n), &DVector::zeros(m), 0, false, None);
            }
        };

        // iterates (scaled)
        let mut x = DVector::<S>::zeros(n);
        if let Some(w) = warm_y {
            for j in 0..n {
                x[j] = w[j] / scaled.d[j];
            }
        }
        let mut z = DVector::<S>::zeros(m);
        scaled.rows.mul(&x, &mut z);
        for i in 0..m {
            z[i] = z[i].clamp(scaled.l[i], scaled.u[i]);
        }
        let mut y = DVector::<S>::zeros(m);
        if let Some(w) = warm_duals {
            for i in 0..m {
                y[i] = w[i] * scaled.c / scaled.e[i];
            }
        }

        let mut y_at_last_check = y.clone();
        let mut best: Option<(DVector<S>, DVector<S>, KktResiduals<S>)> = None;
        let mut checks = 0usize;
        let mut iter = 0usize;

        let mut rhs = DVector::<S>::zeros(n);
        let mut ax = DVector::<S>::zeros(m);

        while iter < st.max_iter {
            iter += 1;
            // x-update: (P + sigma I + A' diag(rho) A) x~ = sigma x - q + A'(rho z - y)
            for j in 0..n {
                rhs[j] = st.sigma * x[j] - scaled.q[j];
            }
            let mut w = DVector::<S>::zeros(m);
            for i in 0..m {
                w[i] = rho[i] * z[i] - y[i];
            }
            scaled.rows.tr_mul_add(&w, &mut rhs);
            factor.solve_in_place(&mut rhs);
            let x_tilde = &rhs;

            scaled.rows.mul(x_tilde, &mut ax);
            let one_m_alpha = S::one() - st.alpha;
            for i in 0..m {
                let v = st.alpha * ax[i] + one_m_alpha * z[i] + y[i] / rho[i];
                let z_new = v.clamp(scaled.l[i], scaled.u[i]);
                y[i] += rho[i] * (v - z_new);
                z[i] = z_new;
            }
            for j in 0..n {
                x[j] = st.alpha * x_tilde[j] + one_m_alpha * x[j];
            }

            if iter % st.check_interval != 0 && iter != st.max_iter {
                continue;
            }
            checks += 1;

            // unscale
            let (xu, yu) = unscale(&scaled, &x, &y);
            let (lam_eq, lam_in) = split_duals(&yu, m_eq, qp.num_in());
            let kkt = kkt_residuals(qp, &xu, &lam_eq, &lam_in);
            if best.as_ref().map(|(_, _, k)| kkt.max() < k.max()).unwrap_or(true) {
                best = Some((xu.clone(), yu.clone(), kkt));
            }

            if self.accepts(&kkt) {
                return self.finish(qp, &xu, &yu, iter, false, None);
            }

            // polish attempt
            if checks % st.polish_every_checks == 0 {
                if let Some((xp, yp)) = self.polish(qp, &xu, &yu) {
                    let (le, li) = split_duals(&yp, m_eq, qp.num_in());
                    let kktp = kkt_residuals(qp, &xp, &le, &li);
                    if self.accepts(&kktp) {
                        return self.finish(qp, &xp, &yp, iter, true, None);
                    }
                }
            }

            // primal infeasibility certificate from the dual direction
            let mut dy = DVector::<S>::zeros(m);
            for i in 0..m {
                dy[i] = (y[i] - y_at_last_check[i]) * scaled.e[i] / scaled.c;
            }
            y_at_last_check.copy_from(&y);
            let dy_norm = dy.amax();
            if dy_norm > cst::<S>(1e-12) {
                let mut atd = DVector::<S>::zeros(n);
                // unscaled A^T dy: A = E^-1 * A_hat * D^-1 scaled... compute from qp directly
                if m_eq > 0 {
                    atd += qp.a_eq.transpose() * DVector::from_fn(m_eq, |i, _| dy[i]);
                }
                if qp.num_in() > 0 {
                    atd +=
                        qp.a_in.transpose() * DVector::from_fn(qp.num_in(), |i, _| dy[m_eq + i]);
                }
                let mut support = S::zero();
                let mut bounded = true;
                for i in 0..m {
                    let (lo, hi) = if i < m_eq {
                        (qp.b_eq[i], qp.b_eq[i])
                    } else {
                        (-inf, qp.b_in[i - m_eq])
                    };
                    if dy[i] > S::zero() {
                        if hi == inf {
                            bounded = false;
                            break;
                        }
                        support += hi * dy[i];
                    } else if dy[i] < S::zero() {
                        if lo == -inf {
                            bounded = false;
                            break;
                        }
                        support += lo * dy[i];
                    }
                }
                if bounded
                    && atd.amax() <= st.infeasibility_tol * dy_norm
                    && support < -st.infeasibility_tol * dy_norm
                {
                    let (xu, yu) = unscale(&scaled, &x, &y);
                    let mut sol = self.finish(qp, &xu, &yu, iter, false, Some(dy));
                    sol.status = QpStatus::PrimalInfeasible;
                    return sol;
                }
            }

            // residual-balancing rho adaptation (requires refactorization)
            if checks % 4 == 0 {
                let mut axn = DVector::<S>::zeros(m);
                scaled.rows.mul(&x, &mut axn);
                let mut r_prim = S::zero();
                let mut scale_prim = cst::<S>(1e-12);
                for i in 0..m {
                    r_prim = r_prim.max((axn[i] - z[i]).abs());
                    scale_prim = scale_prim.max(axn[i].abs()).max(z[i].abs());
                }
                let mut grad = scaled.p.column(0).clone_owned();
                grad.fill(S::zero());
                grad += &scaled.p * &x;
                let px_norm = grad.amax();
                grad += &scaled.q;
                let mut aty = DVector::<S>::zeros(n);
                scaled.rows.tr_mul_add(&y, &mut aty);
                let aty_norm = aty.amax();
                grad += &aty;
                let r_dual = grad.amax();
                let scale_dual = px_norm
                    .max(aty_norm)
                    .max(scaled.q.amax())
                    .max(cst::<S>(1e-12));
                let ratio =
                    ((r_prim / scale_prim) / (r_dual / scale_dual + cst::<S>(1e-300))).sqrt();
                if ratio > cst::<S>(5.0) || ratio < cst::<S>(0.2) {
                    let new_rho = (st.rho * ratio).clamp(cst::<S>(1e-6), cst::<S>(1e6));
                    for i in 0..m {
                        rho[i] = if i < m_eq { new_rho * st.rho_eq_scale } else { new_rho };
                    }
                    if let Some(f) = factorize(&scaled, &rho, st.sigma) {
                        factor = f;
                    }
                }
            }
        }

        // out of iterations: best iterate, with one last polish try
        let (xu, yu, _) = best.unwrap_or_else(|| {
            let (xu, yu) = unscale(&scaled, &x, &y);
            let (le, li) = split_duals(&yu, m_eq, qp.num_in());
            let k = kkt_residuals(qp, &xu, &le, &li);
            (xu, yu, k)
        });
        if let Some((xp, yp)) = self.polish(qp, &xu, &yu) {
            let (le, li) = split_duals(&yp, m_eq, qp.num_in());
            if self.accepts(&kkt_residuals(qp, &xp, &le, &li)) {
                return self.finish(qp, &xp, &yp, self.settings.max_iter, true, None);
            }
        }
        self.finish(qp, &xu, &yu, self.settings.max_iter, false, None)
    }

    fn accepts(&self, kkt: &KktResiduals<S>) -> bool {
        let tol = self.settings.eps_abs;
        kkt.stationarity <= tol && kkt.primal <= tol && kkt.complementarity <= tol
    }

    fn finish(
        &self,
        qp: &QuadraticProgram<S>,
        y: &DVector<S>,
        duals: &DVector<S>,
        iterations: usize,
        polished: bool,
        certificate: Option<DVector<S>>,
    ) -> QpSolution<S> {
        let (lambda_eq, mut lambda_in) = split_duals(duals, qp.num_eq(), qp.num_in());
        // inequality multipliers are nonnegative up to solver tolerance
        for v in lambda_in.iter_mut() {
            if *v < S::zero() && *v > -self.settings.eps_abs {
                *v = S::zero();
            }
        }
        let kkt = kkt_residuals(qp, y, &lambda_eq, &lambda_in);
        let status = if self.accepts(&kkt) {
            QpStatus::Optimal
        } else {
            QpStatus::MaxIter
        };
        QpSolution {
            objective: qp.objective(y),
            y: y.clone(),
            lambda_eq,
            lambda_in,
            status,
            kkt,
            iterations,
            polished,
            certificate,
        }
    }

    /// Equality-constrained KKT solve on the detected active set. Returns
    /// the polished primal and stacked duals, or None when the active set
    /// is inconsistent.
    fn polish(
        &self,
        qp: &QuadraticProgram<S>,
        x: &DVector<S>,
        duals: &DVector<S>,
    ) -> Option<(DVector<S>, DVector<S>)> {
        let st = &self.settings;
        let m_eq = qp.num_eq();
        let m_in = qp.num_in();
        let mut active: Vec<usize> = Vec::new();
        let slack = if m_in > 0 {
            &qp.a_in * x - &qp.b_in
        } else {
            DVector::zeros(0)
        };
        for i in 0..m_in {
            if slack[i] >= -st.active_set_tol || duals[m_eq + i] > st.active_set_tol {
                active.push(i);
            }
        }

        for _pass in 0..4 {
            let (xp, nu) = self.solve_kkt(qp, &active)?;
            // drop rows with clearly negative multipliers
            let neg: Vec<usize> = (0..active.len())
                .filter(|&k| nu[m_eq + k] < -cst::<S>(1e-7))
                .collect();
            if !neg.is_empty() {
                for &k in neg.iter().rev() {
                    active.remove(k);
                }
                continue;
            }
            // add rows the polished point violates
            let mut violated = Vec::new();
            if m_in > 0 {
                let s = &qp.a_in * &xp - &qp.b_in;
                for i in 0..m_in {
                    if s[i] > st.eps_abs && !active.contains(&i) {
                        violated.push(i);
                    }
                }
            }
            if violated.is_empty() {
                let mut stacked = DVector::zeros(m_eq + m_in);
                for i in 0..m_eq {
                    stacked[i] = nu[i];
                }
                for (k, &i) in active.iter().enumerate() {
                    stacked[m_eq + i] = nu[m_eq + k].max(S::zero());
                }
                return Some((xp, stacked));
            }
            active.extend(violated);
            active.sort_unstable();
        }
        None
    }

    /// Solve the delta-regularized KKT system on `eq rows + active` with two
    /// rounds of iterative refinement against the unregularized system.
    fn solve_kkt(
        &self,
        qp: &QuadraticProgram<S>,
        active: &[usize],
    ) -> Option<(DVector<S>, DVector<S>)> {
        let n = qp.num_vars();
        let m_eq = qp.num_eq();
        let ma = m_eq + active.len();
        let delta = self.settings.polish_delta;

        // dense symmetric KKT with +/- delta regularization
        let mut k = DMatrix::<S>::zeros(n + ma, n + ma);
        for i in 0..n {
            for j in 0..n {
                k[(i, j)] = qp.p[(i, j)];
            }
            k[(i, i)] += delta;
        }
        for r in 0..m_eq {
            for j in 0..n {
                let v = qp.a_eq[(r, j)];
                k[(n + r, j)] = v;
                k[(j, n + r)] = v;
            }
        }
        for (idx, &r) in active.iter().enumerate() {
            for j in 0..n {
                let v = qp.a_in[(r, j)];
                k[(n + m_eq + idx, j)] = v;
                k[(j, n + m_eq + idx)] = v;
            }
        }
        for i in 0..ma {
            k[(n + i, n + i)] = -delta;
        }
        let lu = k.lu();

        let mut rhs = DVector::<S>::zeros(n + ma);
        for j in 0..n {
            rhs[j] = -qp.q[j];
        }
        for r in 0..m_eq {
            rhs[n + r] = qp.b_eq[r];
        }
        for (idx, &r) in active.iter().enumerate() {
            rhs[n + m_eq + idx] = qp.b_in[r];
        }
        let mut sol = lu.solve(&rhs)?;

        // refinement against the unregularized KKT
        for _ in 0..2 {
            let mut res = rhs.clone();
            for i in 0..n {
                let mut acc = S::zero();
                for j in 0..n {
                    acc += qp.p[(i, j)] * sol[j];
                }
                for r in 0..m_eq {
                    acc += qp.a_eq[(r, i)] * sol[n + r];
                }
                for (idx, &r) in active.iter().enumerate() {
                    acc += qp.a_in[(r, i)] * sol[n + m_eq + idx];
                }
                res[i] -= acc;
            }
            for r in 0..m_eq {
                let mut acc = S::zero();
                for j in 0..n {
                    acc += qp.a_eq[(r, j)] * sol[j];
                }
                res[n + r] -= acc;
            }
            for (idx, &r) in active.iter().enumerate() {
                let mut acc = S::zero();
                for j in 0..n {
                    acc += qp.a_in[(r, j)] * sol[j];
                }
                res[n + m_eq + idx] -= acc;
            }
            let corr = lu.solve(&res)?;
            sol += corr;
        }

        let x = DVector::from_fn(n, |i, _| sol[i]);
        let nu = DVector::from_fn(ma, |i, _| sol[n + i]);
        Some((x, nu))
    }
}

fn split_duals<S: Scalar>(stacked: &DVector<S>, m_eq: usize, m_in: usize) -> (DVector<S>, DVector<S>) {
    let lam_eq = DVector::from_fn(m_eq, |i, _| stacked[i]);
    let lam_in = DVector::from_fn(m_in, |i, _| stacked[m_eq + i]);
    (lam_eq, lam_in)
}

fn unscale<S: Scalar>(sc: &Scaled<S>, x: &DVector<S>, y: &DVector<S>) -> (DVector<S>, DVector<S>) {
    let xu = DVector::from_fn(x.len(), |j, _| x[j] * sc.d[j]);
    let yu = DVector::from_fn(y.len(), |i, _| y[i] * sc.e[i] / sc.c);
    (xu, yu)
}

/// Modified Ruiz equilibration on the stacked [P A'; A 0] pattern, plus cost
/// normalization.
fn ruiz_scale<S: Scalar>(qp: &QuadraticProgram<S>, iters: usize) -> Scaled<S> {
    let n = qp.num_vars();
    let m = qp.num_eq() + qp.num_in();
    let inf = cst::<S>(f64::INFINITY);

    let mut p = qp.p.clone();
    let mut q = qp.q.clone();
    let mut a = DMatrix::<S>::zeros(m, n);
    for i in 0..qp.num_eq() {
        for j in 0..n {
            a[(i, j)] = qp.a_eq[(i, j)];
        }
    }
    for i in 0..qp.num_in() {
        for j in 0..n {
            a[(qp.num_eq() + i, j)] = qp.a_in[(i, j)];
        }
    }
    let mut l = DVector::from_fn(m, |i, _| {
        if i < qp.num_eq() {
            qp.b_eq[i]
        } else {
            -inf
        }
    });
    let mut u = DVector::from_fn(m, |i, _| {
        if i < qp.num_eq() {
            qp.b_eq[i]
        } else {
            qp.b_in[i - qp.num_eq()]
        }
    });

    let mut d = DVector::from_element(n, S::one());
    let mut e = DVector::from_element(m, S::one());
    let mut c = S::one();

    for _ in 0..iters {
        // column scaling over [P; A]
        for j in 0..n {
            let mut mx = S::zero();
            for i in 0..n {
                mx = mx.max(p[(i, j)].abs());
            }
            for i in 0..m {
                mx = mx.max(a[(i, j)].abs());
            }
            let s = if mx > S::zero() {
                S::one() / mx.sqrt()
            } else {
                S::one()
            }
            .clamp(cst::<S>(1e-4), cst::<S>(1e4));
            for i in 0..n {
                p[(i, j)] *= s;
                p[(j, i)] *= s;
            }
            for i in 0..m {
                a[(i, j)] *= s;
            }
            q[j] *= s;
            d[j] *= s;
        }
        // row scaling of A
        for i in 0..m {
            let mut mx = S::zero();
            for j in 0..n {
                mx = mx.max(a[(i, j)].abs());
            }
            let s = if mx > S::zero() {
                S::one() / mx.sqrt()
            } else {
                S::one()
            }
            .clamp(cst::<S>(1e-4), cst::<S>(1e4));
            for j in 0..n {
                a[(i, j)] *= s;
            }
            if l[i] > -inf {
                l[i] *= s;
            }
            if u[i] < inf {
                u[i] *= s;
            }
            e[i] *= s;
        }
        // cost scaling
        let mut mean_col = S::zero();
        for j in 0..n {
            let mut mx = S::zero();
            for i in 0..n {
                mx = mx.max(p[(i, j)].abs());
            }
            mean_col += mx;
        }
        if n > 0 {
            mean_col /= cst::<S>(n as f64);
        }
        let denom = mean_col.max(q.amax());
        if denom > S::zero() {
            let s = (S::one() / denom).clamp(cst::<S>(1e-4), cst::<S>(1e4));
            if (s - S::one()).abs() > cst::<S>(1e-12) {
                p *= s;
                q *= s;
                c *= s;
            }
        }
    }

    let a_eq_view = a.rows(0, qp.num_eq()).into_owned();
    let a_in_view = a.rows(qp.num_eq(), qp.num_in()).into_owned();
    Scaled {
        p,
        q,
        rows: SparseRows::from_stacked(&a_eq_view, &a_in_view),
        l,
        u,
        d,
        e,
        c,
    }
}

/// Factor `P + sigma I + A' diag(rho) A` with a fill-reducing banded
/// Cholesky.
fn factorize<S: Scalar>(
    sc: &Scaled<S>,
    rho: &DVector<S>,
    sigma: S,
) -> Option<BandedCholesky<S>> {
    let n = sc.p.nrows();
    let mut k = sc.p.clone();
    for i in 0..n {
        k[(i, i)] += sigma;
    }
    for (i, row) in sc.rows.rows.iter().enumerate() {
        let r = rho[i];
        for &(c1, v1) in row {
            for &(c2, v2) in row {
                k[(c1, c2)] += r * v1 * v2;
            }
        }
    }
    // pattern: P nonzeros plus per-row cliques
    let mut pattern: SymPattern = vec![Vec::new(); n];
    for i in 0..n {
        for j in 0..n {
            if i != j && sc.p[(i, j)] != S::zero() {
                pattern[i].push(j);
            }
        }
    }
    for row in &sc.rows.rows {
        for &(c1, _) in row {
            for &(c2, _) in row {
                if c1 != c2 {
                    pattern[c1].push(c2);
                }
            }
        }
    }
    for row in pattern.iter_mut() {
        row.sort_unstable();
        row.dedup();
    }
    BandedCholesky::new(&k, &pattern)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::rngs::SmallRng;
    use rand::{Rng, SeedableRng};

    fn solver() -> QpSolver<f64> {
        QpSolver::default()
    }

    fn no_eq(d: usize) -> (DMatrix<f64>, DVector<f64>) {
        (DMatrix::zeros(0, d), DVector::zeros(0))
    }

    #[test]
    fn scalar_bound_example() {
        // min 1/2 ||y||^2 s.t. y_1 >= 1  ->  y = (1, 0), lambda = 1
        let d = 2;
        let (a_eq, b_eq) = no_eq(d);
        let qp = QuadraticProgram::new(
            DMatrix::identity(d, d),
            DVector::zeros(d),
            a_eq,
            b_eq,
            DMatrix::from_row_slice(1, d, &[-1.0, 0.0]),
            DVector::from_row_slice(&[-1.0]),
        )
        .unwrap();
        let sol = solver().solve(&qp, None);
        assert_eq!(sol.status, QpStatus::Optimal);
        assert_relative_eq!(sol.y, DVector::from_row_slice(&[1.0, 0.0]), epsilon = 1e-6);
        assert_relative_eq!(sol.lambda_in[0], 1.0, epsilon = 1e-6);
        assert!(sol.kkt.max() <= 1e-6);
    }

    #[test]
    fn equality_simplex_example() {
        // min 1/2 ||y||^2 s.t. 1'y = 1 -> y = (1/2, 1/2), lambda_eq = -1/2
        let qp = QuadraticProgram::new(
            DMatrix::identity(2, 2),
            DVector::zeros(2),
            DMatrix::from_row_slice(1, 2, &[1.0, 1.0]),
            DVector::from_row_slice(&[1.0]),
            DMatrix::zeros(0, 2),
            DVector::zeros(0),
        )
        .unwrap();
        let sol = solver().solve(&qp, None);
        assert_eq!(sol.status, QpStatus::Optimal);
        assert_relative_eq!(sol.y, DVector::from_element(2, 0.5), epsilon = 1e-7);
        assert_relative_eq!(sol.lambda_eq[0], -0.5, epsilon = 1e-7);
    }

    #[test]
    fn unconstrained_is_newton_solve() {
        let p = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let q = DVector::from_row_slice(&[1.0, -2.0]);
        let (a_eq, b_eq) = no_eq(2);
        let qp = QuadraticProgram::new(p.clone(), q.clone(), a_eq, b_eq, DMatrix::zeros(0, 2), DVector::zeros(0))
            .unwrap();
        let sol = solver().solve(&qp, None);
        let expected = -p.lu().solve(&q).unwrap();
        assert_relative_eq!(sol.y, expected, epsilon = 1e-7);
        assert!(sol.kkt.max() <= 1e-6);
    }

    #[test]
    fn detects_primal_infeasible() {
        // y <= -1 and -y <= -2 (y >= 2): empty
        let (a_eq, b_eq) = no_eq(1);
        let qp = QuadraticProgram::new(
            DMatrix::identity(1, 1),
            DVector::zeros(1),
            a_eq,
            b_eq,
            DMatrix::from_row_slice(2, 1, &[1.0, -1.0]),
            DVector::from_row_slice(&[-1.0, -2.0]),
        )
        .unwrap();
        let sol = solver().solve(&qp, None);
        assert_eq!(sol.status, QpStatus::PrimalInfeasible);
        assert!(sol.certificate.is_some());
    }

    /// Independent oracle: enumerate all active subsets, solve the
    /// equality-constrained KKT, keep feasible candidates with nonnegative
    /// multipliers.
    pub(crate) fn brute_force_active_set(
        qp: &QuadraticProgram<f64>,
    ) -> Option<(DVector<f64>, DVector<f64>, DVector<f64>)> {
        let n = qp.num_vars();
        let m_eq = qp.num_eq();
        let m_in = qp.num_in();
        assert!(m_in <= 16);
        let mut best: Option<(f64, DVector<f64>, DVector<f64>, DVector<f64>)> = None;
        for mask in 0u32..(1 << m_in) {
            let active: Vec<usize> = (0..m_in).filter(|i| mask >> i & 1 == 1).collect();
            let ma = m_eq + active.len();
            let mut kkt = DMatrix::<f64>::zeros(n + ma, n + ma);
            kkt.view_mut((0, 0), (n, n)).copy_from(&qp.p);
            for r in 0..m_eq {
                for j in 0..n {
                    kkt[(n + r, j)] = qp.a_eq[(r, j)];
                    kkt[(j, n + r)] = qp.a_eq[(r, j)];
                }
            }
            for (idx, &r) in active.iter().enumerate() {
                for j in 0..n {
                    kkt[(n + m_eq + idx, j)] = qp.a_in[(r, j)];
                    kkt[(j, n + m_eq + idx)] = qp.a_in[(r, j)];
                }
            }
            let mut rhs = DVector::<f64>::zeros(n + ma);
            for j in 0..n {
                rhs[j] = -qp.q[j];
            }
            for r in 0..m_eq {
                rhs[n + r] = qp.b_eq[r];
            }
            for (idx, &r) in active.iter().enumerate() {
                rhs[n + m_eq + idx] = qp.b_in[r];
            }
            let lu = kkt.clone().lu();
            let Some(sol) = lu.solve(&rhs) else { continue };
            // reject inaccurate solves of singular systems
            if (&kkt * &sol - &rhs).amax() > 1e-8 {
                continue;
            }
            let y = DVector::from_fn(n, |i, _| sol[i]);
            let lam_eq = DVector::from_fn(m_eq, |i, _| sol[n + i]);
            let mut lam_in = DVector::<f64>::zeros(m_in);
            let mut dual_ok = true;
            for (idx, &r) in active.iter().enumerate() {
                let v = sol[n + m_eq + idx];
                if v < -1e-9 {
                    dual_ok = false;
                    break;
                }
                lam_in[r] = v.max(0.0);
            }
            if !dual_ok {
                continue;
            }
            let feasible = (0..m_in).all(|i| {
                let s: f64 = (0..n).map(|j| qp.a_in[(i, j)] * y[j]).sum();
                s <= qp.b_in[i] + 1e-8
            });
            if !feasible {
                continue;
            }
            let obj = qp.objective(&y);
            if best.as_ref().map(|(b, ..)| obj < *b).unwrap_or(true) {
                best = Some((obj, y, lam_eq, lam_in));
            }
        }
        best.map(|(_, y, le, li)| (y, le, li))
    }

    pub(crate) fn random_feasible_qp(rng: &mut SmallRng, d: usize, m_in: usize, m_eq: usize) -> QuadraticProgram<f64> {
        let r = DMatrix::from_fn(d, d, |_, _| rng.random::<f64>() * 2.0 - 1.0);
        let p = &r * r.transpose() + DMatrix::identity(d, d);
        let q = DVector::from_fn(d, |_, _| rng.random::<f64>() * 4.0 - 2.0);
        let x_feas = DVector::from_fn(d, |_, _| rng.random::<f64>() * 2.0 - 1.0);
        let a_in = DMatrix::from_fn(m_in, d, |_, _| rng.random::<f64>() * 2.0 - 1.0);
        let b_in = &a_in * &x_feas
            + DVector::from_fn(m_in, |_, _| rng.random::<f64>() * 0.9 + 0.1);
        let a_eq = DMatrix::from_fn(m_eq, d, |_, _| rng.random::<f64>() * 2.0 - 1.0);
        let b_eq = &a_eq * &x_feas;
        QuadraticProgram::new(p, q, a_eq, b_eq, a_in, b_in).unwrap()
    }

    #[test]
    fn matches_brute_force_oracle_on_random_qps() {
        let mut rng = SmallRng::seed_from_u64(11);
        for trial in 0..50 {
            let d = rng.random_range(2..7);
            let m_in = rng.random_range(1..7);
            let m_eq = rng.random_range(0..2.min(d));
            let qp = random_feasible_qp(&mut rng, d, m_in, m_eq);
            let sol = solver().solve(&qp, None);
            assert_eq!(sol.status, QpStatus::Optimal, "trial {trial}");
            let (y, le, li) = brute_force_active_set(&qp).expect("oracle found optimum");
            assert_relative_eq!(sol.y, y, epsilon = 1e-5);
            if m_eq > 0 {
                assert_relative_eq!(sol.lambda_eq, le, epsilon = 1e-5);
            }
            assert_relative_eq!(sol.lambda_in, li, epsilon = 1e-5);
            assert!(sol.kkt.max() <= 1e-6, "kkt {:?}", sol.kkt);
        }
    }

    #[test]
    fn strong_duality_spot_check() {
        let mut rng = SmallRng::seed_from_u64(3);
        for _ in 0..20 {
            let d = rng.random_range(2..6);
            let m_in = rng.random_range(1..5);
            let qp = random_feasible_qp(&mut rng, d, m_in, 0);
            let sol = solver().solve(&qp, None);
            assert_eq!(sol.status, QpStatus::Optimal);
            // dual value: -1/2 w' P^-1 w - b' lambda, w = q + A' lambda
            let w = &qp.q + qp.a_in.transpose() * &sol.lambda_in;
            let pinv_w = qp.p.clone().cholesky().unwrap().solve(&w);
            let dual = -0.5 * w.dot(&pinv_w) - qp.b_in.dot(&sol.lambda_in);
            assert_relative_eq!(sol.objective, dual, epsilon = 1e-5, max_relative = 1e-5);
        }
    }

    #[test]
    fn deterministic_given_inputs() {
        let mut rng = SmallRng::seed_from_u64(5);
        let qp = random_feasible_qp(&mut rng, 5, 4, 1);
        let a = solver().solve(&qp, None);
        let b = solver().solve(&qp, None);
        assert_eq!(a.y, b.y);
        assert_eq!(a.lambda_in, b.lambda_in);
        assert_eq!(a.iterations, b.iterations);
    }

    #[test]
    fn scaling_equivariance_of_the_primal() {
        let mut rng = SmallRng::seed_from_u64(9);
        for _ in 0..10 {
            let qp = random_feasible_qp(&mut rng, 4, 3, 0);
            let c = 37.5;
            let scaled = QuadraticProgram::new(
                c * &qp.p,
                c * &qp.q,
                qp.a_eq.clone(),
                qp.b_eq.clone(),
                qp.a_in.clone(),
                qp.b_in.clone(),
            )
            .unwrap();
            let sol = solver().solve(&qp, None);
            let sol_c = solver().solve(&scaled, None);
            assert_relative_eq!(sol.y, sol_c.y, epsilon = 1e-5);
            assert_relative_eq!(c * &sol.lambda_in, sol_c.lambda_in, epsilon = 1e-4, max_relative = 1e-4);
        }
    }

    #[test]
    fn kkt_residuals_cases() {
        // exact KKT point of the scalar bound example
        let (a_eq, b_eq) = no_eq(2);
        let qp = QuadraticProgram::new(
            DMatrix::identity(2, 2),
            DVector::zeros(2),
            a_eq,
            b_eq,
            DMatrix::from_row_slice(1, 2, &[-1.0, 0.0]),
            DVector::from_row_slice(&[-1.0]),
        )
        .unwrap();
        let y = DVector::from_row_slice(&[1.0, 0.0]);
        let lam = DVector::from_row_slice(&[1.0]);
        let kkt = kkt_residuals(&qp, &y, &DVector::zeros(0), &lam);
        assert!(kkt.max() <= 1e-12, "{:?}", kkt);

        // perturbing along an unconstrained direction grows stationarity linearly
        for eps in [1e-4, 2e-4, 4e-4] {
            let yp = DVector::from_row_slice(&[1.0, eps]);
            let k = kkt_residuals(&qp, &yp, &DVector::zeros(0), &lam);
            assert_relative_eq!(k.stationarity, eps, epsilon = 1e-12);
        }

        // interior optimum of an unconstrained QP with zero multipliers
        let qp2 = QuadraticProgram::new(
            DMatrix::identity(2, 2),
            DVector::from_row_slice(&[-1.0, 0.5]),
            DMatrix::zeros(0, 2),
            DVector::zeros(0),
            DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
            DVector::from_row_slice(&[100.0]),
        )
        .unwrap();
        let k = kkt_residuals(
            &qp2,
            &DVector::from_row_slice(&[1.0, -0.5]),
            &DVector::zeros(0),
            &DVector::zeros(1),
        );
        assert!(k.stationarity <= 1e-12 && k.complementarity <= 1e-12);
        assert!(k.primal <= 0.0 + 1e-12);
    }

    #[test]
    fn warm_start_converges_faster() {
        let mut rng = SmallRng::seed_from_u64(21);
        let qp = random_feasible_qp(&mut rng, 8, 6, 2);
        let cold = solver().solve(&qp, None);
        let warm = solver().solve_full(
            &qp,
            Some(&cold.y),
            Some(&{
                let mut d = DVector::zeros(qp.num_eq() + qp.num_in());
                for i in 0..qp.num_eq() {
                    d[i] = cold.lambda_eq[i];
                }
                for i in 0..qp.num_in() {
                    d[qp.num_eq() + i] = cold.lambda_in[i];
                }
                d
            }),
        );
        assert!(warm.iterations <= cold.iterations);
        assert_relative_eq!(warm.y, cold.y, epsilon = 1e-6);
    }

    #[test]
    fn json_dump_roundtrips_shape() {
        let mut rng = SmallRng::seed_from_u64(2);
        let qp = random_feasible_qp(&mut rng, 3, 2, 1);
        let mut buf = Vec::new();
        qp.dump_json(&mut buf).unwrap();
        let doc: serde_json::Value = serde_json::from_slice(&buf).unwrap();
        assert_eq!(doc["num_vars"], 3);
        assert_eq!(doc["P"].as_array().unwrap().len(), 9);
        assert_eq!(doc["A_in"].as_array().unwrap().len(), 6);
    }
}
