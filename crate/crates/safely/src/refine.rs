//! Project-and-linearize refinement and duality-based sensor scheduling.
//!
//! The SQP plan satisfies the keep-out constraints through linearizations
//! taken at its own iterates, which hides how much a *smaller* ellipsoid
//! would help. The refinement replaces those rows with supporting
//! hyperplanes at the projections of the plan onto each ellipsoid, so the
//! dual variable of row (o, t) measures exactly how much the optimal cost
//! would drop if that ellipsoid were relaxed. Summing duals per obstacle
//! with a discount gives the relevance score that drives the top-K sensor
//! selection.

use crate::occupancy::{constraint_value, KeepOutEllipsoid, KeepOutGrid};
use crate::qpsolver::{ConstraintTag, QpSolution, QpSolver, QuadraticProgram, SolverSettings};
use crate::sqp::{rollout, FixedPositionRows, PlanIterate, PlanningProblem, SqpStatus};
use crate::{cst, Error, Result, Scalar};
use nalgebra::{DMatrix, DVector};

/// Euclidean projection of `x` onto the *solid* ellipsoid
/// `{p : (p - mu)' (Q+)^-1 (p - mu) <= 1}`.
///
/// Interior points project to themselves. Otherwise the KKT system reduces
/// to a scalar secular equation in the multiplier `nu`, solved by a
/// safeguarded Newton iteration bracketed by bisection, to a boundary
/// residual of 1e-10.
pub fn project_to_ellipsoid<S: Scalar>(
    e: &KeepOutEllipsoid<S>,
    x: &DVector<S>,
) -> Result<DVector<S>> {
    if e.vacuous {
        return Err(Error::Config("cannot project onto a vacuous ellipsoid".into()));
    }
    if constraint_value(e, x) <= S::one() {
        return Ok(x.clone());
    }
    let eig = e.shape.clone().symmetric_eigen();
    let lam = &eig.eigenvalues;
    let w = eig.eigenvectors.transpose() * (x - &e.center);
    let n = w.len();

    // phi(nu) = sum_i lam_i w_i^2 / (lam_i + nu)^2 - 1, strictly decreasing
    let phi = |nu: S| -> S {
        let mut acc = -S::one();
        for i in 0..n {
            let d = lam[i] + nu;
            acc += lam[i] * w[i] * w[i] / (d * d);
        }
        acc
    };
    let dphi = |nu: S| -> S {
        let mut acc = S::zero();
        for i in 0..n {
            let d = lam[i] + nu;
            acc -= cst::<S>(2.0) * lam[i] * w[i] * w[i] / (d * d * d);
        }
        acc
    };

    let mut lo = S::zero();
    let mut hi = S::one();
    let mut guard = 0;
    while phi(hi) > S::zero() {
        hi *= cst::<S>(2.0);
        guard += 1;
        if guard > 300 {
            return Err(Error::Numerical("projection bracket did not close".into()));
        }
    }
    let mut nu = (lo + hi) * cst::<S>(0.5);
    let tol = cst::<S>(1e-10);
    for _ in 0..200 {
        let f = phi(nu);
        if f.abs() <= tol {
            break;
        }
        if f > S::zero() {
            lo = nu;
        } else {
            hi = nu;
        }
        let step = f / dphi(nu);
        let newton = nu - step;
        nu = if newton > lo && newton < hi {
            newton
        } else {
            (lo + hi) * cst::<S>(0.5)
        };
    }

    let mut d = DVector::zeros(n);
    for i in 0..n {
        d[i] = lam[i] * w[i] / (lam[i] + nu);
    }
    Ok(&e.center + eig.eigenvectors * d)
}

/// Supporting half-spaces of the keep-out grid at the projections of a
/// plan, as rows over the stacked position trajectory.
#[derive(Debug, Clone)]
pub struct SupportingHalfspaceSet<S: Scalar = f64> {
    /// `(T * N_O) x (T * n_pos)`; row `o * T + (t-1)` touches the position
    /// block of step `t`
    pub c_proj: DMatrix<S>,
    pub d_proj: DVector<S>,
    /// (obstacle, horizon step) per row
    pub row_tags: Vec<(usize, usize)>,
    /// projection point per row (`None` for vacuous pairs)
    pub projection_points: Vec<Option<DVector<S>>>,
    /// unit outward normal per row (`None` for vacuous pairs)
    pub normals: Vec<Option<DVector<S>>>,
    /// rows built from a plan point found *inside* the ellipsoid
    pub flagged_inside: Vec<bool>,
    pub num_obstacles: usize,
    pub horizon: usize,
    pub n_pos: usize,
}

impl<S: Scalar> SupportingHalfspaceSet<S> {
    pub fn row_index(&self, o: usize, t: usize) -> usize {
        o * self.horizon + (t - 1)
    }

    /// Rows in the form consumed by the trajectory QP builder.
    pub(crate) fn to_fixed_rows(&self) -> FixedPositionRows<S> {
        let rows = self
            .row_tags
            .iter()
            .enumerate()
            .map(|(r, &(o, t))| {
                let mut coef = DVector::zeros(self.n_pos);
                for i in 0..self.n_pos {
                    coef[i] = self.c_proj[(r, (t - 1) * self.n_pos + i)];
                }
                (t, coef, self.d_proj[r], ConstraintTag::KeepOut { obstacle: o, t })
            })
            .collect();
        FixedPositionRows { rows }
    }
}

/// Build the supporting half-space of every (o, t) pair at the projection
/// of the plan's position at step t; vacuous pairs contribute a trivially
/// satisfied row so the indexing stays dense.
pub fn build_supporting_halfspaces<S: Scalar>(
    keepouts: &KeepOutGrid<S>,
    model: &dyn crate::sqp::RobotModel<S>,
    x_sqp: &PlanIterate<S>,
) -> Result<SupportingHalfspaceSet<S>> {
    let t_max = keepouts.horizon;
    let n_o = keepouts.num_obstacles;
    let n_pos = model.position_dim();
    let mut c_proj = DMatrix::zeros(n_o * t_max, t_max * n_pos);
    let mut d_proj = DVector::zeros(n_o * t_max);
    let mut row_tags = Vec::with_capacity(n_o * t_max);
    let mut projection_points = Vec::with_capacity(n_o * t_max);
    let mut normals = Vec::with_capacity(n_o * t_max);
    let mut flagged_inside = vec![false; n_o * t_max];

    for o in 0..n_o {
        for t in 1..=t_max {
            let row = o * t_max + (t - 1);
            row_tags.push((o, t));
            let e = keepouts.at(o, t);
            if e.vacuous {
                // 0' x <= 1: always satisfied
                d_proj[row] = S::one();
                projection_points.push(None);
                normals.push(None);
                continue;
            }
            let pos = model.position(&x_sqp.states[t]);
            let p = if constraint_value(e, &pos) < S::one() {
                flagged_inside[row] = true;
                log::warn!(
                    "plan point inside keep-out (obstacle {o}, t {t}); \
                     building the row at the nearest boundary point"
                );
                nearest_boundary_point(e, &pos)
            } else {
                project_to_ellipsoid(e, &pos)?
            };
            let mut a = e.inv_mul(&(&p - &e.center));
            let norm = a.norm();
            if norm <= cst::<S>(1e-300) {
                return Err(Error::Numerical("degenerate supporting hyperplane normal".into()));
            }
            a /= norm;
            // -a' x[t] <= -a' p keeps the robot on the outside
            for i in 0..n_pos {
                c_proj[(row, (t - 1) * n_pos + i)] = -a[i];
            }
            d_proj[row] = -a.dot(&p);
            projection_points.push(Some(p));
            normals.push(Some(a));
        }
    }
    Ok(SupportingHalfspaceSet {
        c_proj,
        d_proj,
        row_tags,
        projection_points,
        normals,
        flagged_inside,
        num_obstacles: n_o,
        horizon: t_max,
        n_pos,
    })
}

/// Boundary point nearest to an interior point: radial scaling from the
/// center (exact for spheres; the flagged recovery path, not the normal
/// projection route).
fn nearest_boundary_point<S: Scalar>(e: &KeepOutEllipsoid<S>, x: &DVector<S>) -> DVector<S> {
    let qform = constraint_value(e, x);
    if qform > cst::<S>(1e-16) {
        &e.center + (x - &e.center) / qform.sqrt()
    } else {
        let eig = e.shape.clone().symmetric_eigen();
        let mut best = 0;
        for i in 1..eig.eigenvalues.len() {
            if eig.eigenvalues[i] > eig.eigenvalues[best] {
                best = i;
            }
        }
        let v: DVector<S> = eig.eigenvectors.column(best).into();
        let tau = S::one() / v.dot(&e.inv_mul(&v)).sqrt();
        &e.center + v * tau
    }
}

/// Per-obstacle relevance scores and the top-K selection.
#[derive(Debug, Clone)]
pub struct RelevanceReport<S: Scalar = f64> {
    /// `N_O x T` nonnegative duals of the half-space rows
    pub lambda_grid: DMatrix<S>,
    /// `Lambda_o = sum_t gamma^t lambda[o][t]`
    pub scores: DVector<S>,
    /// obstacles to measure, at most K, ties broken by lowest index
    pub selected: Vec<usize>,
    pub gamma: S,
}

/// Discounted dual aggregation and top-K selection. Obstacles whose score
/// does not exceed `threshold` are never selected, so a cycle with no
/// active keep-out rows schedules no measurement.
pub fn compute_relevance<S: Scalar>(
    lambda_grid: &DMatrix<S>,
    gamma: S,
    k: usize,
    threshold: S,
) -> Result<RelevanceReport<S>> {
    if gamma <= S::zero() || gamma > S::one() {
        return Err(Error::Config("gamma must be in (0, 1]".into()));
    }
    let n_o = lambda_grid.nrows();
    let t_max = lambda_grid.ncols();
    let mut grid = lambda_grid.clone();
    for v in grid.iter_mut() {
        if *v < S::zero() {
            if *v < cst::<S>(-1e-8) {
                return Err(Error::Config("negative dual in the relevance grid".into()));
            }
            *v = S::zero();
        }
    }
    let mut scores = DVector::zeros(n_o);
    for o in 0..n_o {
        let mut disc = S::one();
        let mut acc = S::zero();
        for t in 0..t_max {
            disc *= gamma;
            acc += disc * grid[(o, t)];
        }
        scores[o] = acc;
    }
    let mut order: Vec<usize> = (0..n_o).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let selected = order
        .into_iter()
        .filter(|&o| scores[o] > threshold)
        .take(k)
        .collect();
    Ok(RelevanceReport {
        lambda_grid: grid,
        scores,
        selected,
        gamma,
    })
}

pub struct RefinedSolution<S: Scalar = f64> {
    pub plan: PlanIterate<S>,
    pub report: RelevanceReport<S>,
    /// the refined QP at the accepted iterate and its solution, for
    /// sensitivity audits
    pub qp: QuadraticProgram<S>,
    pub solution: QpSolution<S>,
    /// the refinement could not improve on x_sqp and returned it unchanged
    pub fell_back: bool,
}

/// Solve the refinement: the same cost and dynamics, with the keep-out
/// constraints replaced by the fixed supporting half-spaces. A single QP
/// for linear robots, an SQP with immovable rows otherwise. The result is
/// never worse than `x_sqp` (which is feasible for every row).
pub fn solve_refined<S: Scalar>(
    problem: &PlanningProblem<'_, S>,
    halfspaces: &SupportingHalfspaceSet<S>,
    x_sqp: &PlanIterate<S>,
    gamma: S,
    k: usize,
    threshold: S,
) -> Result<RefinedSolution<S>> {
    let rows = halfspaces.to_fixed_rows();
    let engine = crate::sqp::sqp_solve_fixed_rows(problem, &rows, x_sqp)?;

    let mut plan = engine.iterate;
    let mut fell_back = false;
    let sqp_objective = problem.cost.value(&x_sqp.states, &x_sqp.inputs);
    if plan.objective > sqp_objective + cst::<S>(1e-8)
        || engine.status == SqpStatus::InfeasibleSoft
    {
        // dominance guard: keep the SQP plan
        fell_back = true;
        plan = PlanIterate {
            states: rollout(problem.model, &problem.x0, &x_sqp.inputs),
            inputs: x_sqp.inputs.clone(),
            objective: sqp_objective,
            slack_total: x_sqp.slack_total,
        };
    }

    // duals of the half-space rows, mapped through the row tags
    let mut lambda_grid = DMatrix::zeros(halfspaces.num_obstacles, halfspaces.horizon);
    for (tag, lam) in engine
        .final_qp
        .in_tags
        .iter()
        .zip(engine.final_solution.lambda_in.iter())
    {
        if let ConstraintTag::KeepOut { obstacle, t } = tag {
            lambda_grid[(*obstacle, t - 1)] += *lam;
        }
    }
    let report = compute_relevance(&lambda_grid, gamma, k, threshold)?;
    Ok(RefinedSolution {
        plan,
        report,
        qp: engine.final_qp,
        solution: engine.final_solution,
        fell_back,
    })
}

pub struct SensitivityAudit<S: Scalar = f64> {
    /// first-order prediction `lambda_row * delta`
    pub predicted_drop: S,
    /// `p*(0) - p*(delta)` from the re-solve
    pub actual_drop: S,
    /// `p*(delta) >= p*(0) - lambda' delta - 1e-6`
    pub bound_satisfied: bool,
}

/// Relax one inequality row by `delta`, re-solve, and compare the actual
/// objective drop against the dual prediction.
pub fn sensitivity_audit<S: Scalar>(
    qp: &QuadraticProgram<S>,
    solution: &QpSolution<S>,
    row: usize,
    delta: S,
    settings: &SolverSettings<S>,
) -> Result<SensitivityAudit<S>> {
    if row >= qp.num_in() {
        return Err(Error::Config("sensitivity row out of range".into()));
    }
    if delta <= S::zero() {
        return Err(Error::Config("sensitivity delta must be positive".into()));
    }
    let mut relaxed = qp.clone();
    relaxed.b_in[row] += delta;
    let solver = QpSolver::new(*settings);
    let resolved = solver.solve(&relaxed, Some(&solution.y));
    let predicted_drop = solution.lambda_in[row] * delta;
    let actual_drop = solution.objective - resolved.objective;
    let bound_satisfied = resolved.objective >= solution.objective - predicted_drop - cst::<S>(1e-6);
    Ok(SensitivityAudit {
        predicted_drop,
        actual_drop,
        bound_satisfied,
    })
}

#[derive(Debug, Clone)]
pub struct ChebyshevResult<S: Scalar = f64> {
    pub radius: S,
    pub center: DVector<S>,
    /// the inscribed ball grew without bound
    pub unbounded: bool,
}

/// Chebyshev center of `{x : a_i' x <= b_i}`: the largest inscribed ball,
/// via the LP `max r s.t. a_i' x + ||a_i|| r <= b_i` solved as a QP with a
/// vanishing quadratic regularizer (which also picks the minimum-norm
/// center among ties). A positive radius certifies Slater's condition; a
/// nonpositive one flags an empty interior.
pub fn chebyshev_center<S: Scalar>(
    rows: &[(DVector<S>, S)],
    dim: usize,
    settings: &SolverSettings<S>,
) -> Result<ChebyshevResult<S>> {
    const RADIUS_CAP: f64 = 1e9;
    let d = dim + 1;
    let mut p = DMatrix::zeros(d, d);
    for i in 0..d {
        p[(i, i)] = cst::<S>(1e-9);
    }
    let mut q = DVector::zeros(d);
    q[dim] = -S::one();

    let m = rows.len() + 1;
    let mut a_in = DMatrix::zeros(m, d);
    let mut b_in = DVector::zeros(m);
    for (r, (normal, rhs)) in rows.iter().enumerate() {
        if normal.len() != dim {
            return Err(Error::Config("polytope row dimension mismatch".into()));
        }
        for i in 0..dim {
            a_in[(r, i)] = normal[i];
        }
        a_in[(r, dim)] = normal.norm();
        b_in[r] = *rhs;
    }
    // cap the radius so an unbounded polytope stays detectable
    a_in[(rows.len(), dim)] = S::one();
    b_in[rows.len()] = cst::<S>(RADIUS_CAP);

    let qp = QuadraticProgram::new(p, q, DMatrix::zeros(0, d), DVector::zeros(0), a_in, b_in)?;
    let sol = QpSolver::new(*settings).solve(&qp, None);
    let radius = sol.y[dim];
    let unbounded = radius >= cst::<S>(RADIUS_CAP * 0.1);
    Ok(ChebyshevResult {
        radius: if unbounded { cst::<S>(f64::INFINITY) } else { radius },
        center: DVector::from_fn(dim, |i, _| sol.y[i]),
        unbounded,
    })
}

/// Chebyshev radius of the refined problem's inequality polytope: the
/// supporting half-spaces plus the safe-box rows over the stacked position
/// trajectory.
pub fn chebyshev_radius<S: Scalar>(
    halfspaces: &SupportingHalfspaceSet<S>,
    pos_lo: &DVector<S>,
    pos_hi: &DVector<S>,
    settings: &SolverSettings<S>,
) -> Result<ChebyshevResult<S>> {
    let n_pos = halfspaces.n_pos;
    let dim = halfspaces.horizon * n_pos;
    let mut rows: Vec<(DVector<S>, S)> = Vec::new();
    for (r, normal) in halfspaces.normals.iter().enumerate() {
        if normal.is_some() {
            let mut coef = DVector::zeros(dim);
            for i in 0..dim {
                coef[i] = halfspaces.c_proj[(r, i)];
            }
            rows.push((coef, halfspaces.d_proj[r]));
        }
    }
    for t in 0..halfspaces.horizon {
        for i in 0..n_pos {
            let mut up = DVector::zeros(dim);
            up[t * n_pos + i] = S::one();
            rows.push((up.clone(), pos_hi[i]));
            let mut lo = DVector::zeros(dim);
            lo[t * n_pos + i] = -S::one();
            rows.push((lo, -pos_lo[i]));
        }
    }
    chebyshev_center(&rows, dim, settings)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use crate::sqp::RobotModel;
    use rand::rngs::SmallRng;
    use rand::{Rng, SeedableRng};

    fn sphere(radius2: f64) -> KeepOutEllipsoid<f64> {
        KeepOutEllipsoid::new(
            DVector::zeros(2),
            radius2 * DMatrix::identity(2, 2),
            0,
            1,
        )
        .unwrap()
    }

    #[test]
    fn projection_sphere_is_radial() {
        let e = sphere(4.0);
        let p = project_to_ellipsoid(&e, &DVector::from_row_slice(&[4.0, 0.0])).unwrap();
        assert_relative_eq!(p, DVector::from_row_slice(&[2.0, 0.0]), epsilon = 1e-10);
    }

    #[test]
    fn projection_axis_aligned() {
        let e = KeepOutEllipsoid::new(
            DVector::zeros(2),
            DMatrix::from_row_slice(2, 2, &[4.0, 0.0, 0.0, 1.0]),
            0,
            1,
        )
        .unwrap();
        let p = project_to_ellipsoid(&e, &DVector::from_row_slice(&[0.0, 3.0])).unwrap();
        assert_relative_eq!(p, DVector::from_row_slice(&[0.0, 1.0]), epsilon = 1e-10);
    }

    #[test]
    fn projection_interior_point_is_identity() {
        let e = sphere(4.0);
        let x = DVector::from_row_slice(&[0.3, -0.4]);
        assert_eq!(project_to_ellipsoid(&e, &x).unwrap(), x);
    }

    #[test]
    fn projection_matches_frozen_value_and_grid_oracle() {
        // Q+ = diag(4, 1), x = (3, 2); frozen from an independent
        // high-precision secular solve
        let e = KeepOutEllipsoid::new(
            DVector::zeros(2),
            DMatrix::from_row_slice(2, 2, &[4.0, 0.0, 0.0, 1.0]),
            0,
            1,
        )
        .unwrap();
        let x = DVector::from_row_slice(&[3.0, 2.0]);
        let p = project_to_ellipsoid(&e, &x).unwrap();
        assert_relative_eq!(p[0], 1.7254112548559846, epsilon = 1e-9);
        assert_relative_eq!(p[1], 0.5057064369810553, epsilon = 1e-9);

        // dense angle grid (1e-3 step) with golden-section refinement
        let oracle = grid_oracle_2d(&e, &x);
        assert!(((&p - &x).norm() - (&oracle - &x).norm()).abs() < 1e-6);
    }

    pub(crate) fn grid_oracle_2d(e: &KeepOutEllipsoid<f64>, x: &DVector<f64>) -> DVector<f64> {
        let eig = e.shape.clone().symmetric_eigen();
        let boundary = |phi: f64| -> DVector<f64> {
            let s = DVector::from_row_slice(&[
                eig.eigenvalues[0].sqrt() * phi.cos(),
                eig.eigenvalues[1].sqrt() * phi.sin(),
            ]);
            &e.center + &eig.eigenvectors * s
        };
        let dist = |phi: f64| (boundary(phi) - x).norm();
        let mut best_phi = 0.0;
        let mut best = f64::INFINITY;
        let n = 6284; // ~1e-3 rad
        for k in 0..n {
            let phi = k as f64 / n as f64 * std::f64::consts::TAU;
            let d = dist(phi);
            if d < best {
                best = d;
                best_phi = phi;
            }
        }
        // golden-section refine around the best cell
        let gr = (5f64.sqrt() - 1.0) / 2.0;
        let (mut a, mut b) = (best_phi - 2e-3, best_phi + 2e-3);
        for _ in 0..80 {
            let c = b - gr * (b - a);
            let d = a + gr * (b - a);
            if dist(c) < dist(d) {
                b = d;
            } else {
                a = c;
            }
        }
        boundary(0.5 * (a + b))
    }

    #[test]
    fn projection_kkt_certificate_randomized() {
        let mut rng = SmallRng::seed_from_u64(31);
        for _ in 0..300 {
            let n = rng.random_range(2..4usize);
            let r = DMatrix::from_fn(n, n, |_, _| rng.random::<f64>() - 0.5);
            let shape = &r * r.transpose() + 0.05 * DMatrix::identity(n, n);
            let center = DVector::from_fn(n, |_, _| rng.random::<f64>() * 2.0 - 1.0);
            let e = KeepOutEllipsoid::new(center, shape, 0, 1).unwrap();
            let x = DVector::from_fn(n, |_, _| rng.random::<f64>() * 8.0 - 4.0);
            let p = project_to_ellipsoid(&e, &x).unwrap();
            if constraint_value(&e, &x) <= 1.0 {
                assert_eq!(p, x);
                continue;
            }
            // on the boundary
            assert_relative_eq!(constraint_value(&e, &p), 1.0, epsilon = 1e-7);
            // x - p is parallel to the outward normal (Q+)^-1 (p - mu)
            let normal = e.inv_mul(&(&p - &e.center));
            let gap = &x - &p;
            let cosine = gap.dot(&normal) / (gap.norm() * normal.norm());
            assert!(cosine > 1.0 - 1e-7, "projection normal misaligned: {cosine}");
        }
    }

    struct Cart;
    impl crate::sqp::RobotModel<f64> for Cart {
        fn state_dim(&self) -> usize {
            2
        }
        fn input_dim(&self) -> usize {
            1
        }
        fn position_dim(&self) -> usize {
            1
        }
        fn position_map(&self) -> DMatrix<f64> {
            DMatrix::from_row_slice(1, 2, &[1.0, 0.0])
        }
        fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
            DVector::from_row_slice(&[x[0] + 0.5 * x[1] + 0.125 * u[0], x[1] + 0.5 * u[0]])
        }
        fn jacobian(&self, _: &DVector<f64>, _: &DVector<f64>) -> DMatrix<f64> {
            DMatrix::from_row_slice(2, 3, &[1.0, 0.5, 0.125, 0.0, 1.0, 0.5])
        }
        fn input_bounds(&self) -> (DVector<f64>, DVector<f64>) {
            (DVector::from_row_slice(&[-1.0]), DVector::from_row_slice(&[1.0]))
        }
        fn position_bounds(&self) -> (DVector<f64>, DVector<f64>) {
            (DVector::from_row_slice(&[-10.0]), DVector::from_row_slice(&[10.0]))
        }
        fn is_linear(&self) -> bool {
            true
        }
    }

    #[test]
    fn halfspace_rows_from_sphere() {
        // sphere Q+ = I at origin, plan at x = 2 in 1-D via a 2-state cart:
        // the row is -x <= -1, i.e. x >= 1 with unit normal
        let mut cells = vec![KeepOutEllipsoid::new(
            DVector::from_row_slice(&[0.0]),
            DMatrix::from_row_slice(1, 1, &[1.0]),
            0,
            1,
        )
        .unwrap()];
        cells.extend((2..=3).map(|t| KeepOutEllipsoid::vacuous(1, 0, t)));
        let grid = KeepOutGrid::from_cells(cells, 1, 3).unwrap();
        let model = Cart;
        let plan = PlanIterate {
            states: vec![
                DVector::from_row_slice(&[2.5, 0.0]),
                DVector::from_row_slice(&[2.0, 0.0]),
                DVector::from_row_slice(&[2.0, 0.0]),
                DVector::from_row_slice(&[2.0, 0.0]),
            ],
            inputs: vec![DVector::zeros(1); 3],
            objective: 0.0,
            slack_total: 0.0,
        };
        let hs = build_supporting_halfspaces(&grid, &model, &plan).unwrap();
        assert_eq!(hs.row_tags.len(), 3);
        assert_relative_eq!(hs.c_proj[(0, 0)], -1.0, epsilon = 1e-10);
        assert_relative_eq!(hs.d_proj[0], -1.0, epsilon = 1e-10);
        // vacuous rows are trivially satisfied
        assert_eq!(hs.normals[1], None);
        assert_eq!(hs.d_proj[1], 1.0);
        // every row satisfied by the plan
        for (r, &(_, t)) in hs.row_tags.iter().enumerate() {
            let pos = model.position(&plan.states[t]);
            let mut lhs = 0.0;
            for i in 0..hs.n_pos {
                lhs += hs.c_proj[(r, (t - 1) * hs.n_pos + i)] * pos[i];
            }
            assert!(lhs <= hs.d_proj[r] + 1e-8);
        }
    }

    #[test]
    fn boundary_plan_point_gives_tangent_row_with_zero_margin() {
        let cells = vec![KeepOutEllipsoid::new(
            DVector::from_row_slice(&[0.0]),
            DMatrix::from_row_slice(1, 1, &[1.0]),
            0,
            1,
        )
        .unwrap()];
        let grid = KeepOutGrid::from_cells(cells, 1, 1).unwrap();
        let model = Cart;
        let plan = PlanIterate {
            states: vec![
                DVector::from_row_slice(&[1.5, 0.0]),
                DVector::from_row_slice(&[1.0, 0.0]),
            ],
            inputs: vec![DVector::zeros(1)],
            objective: 0.0,
            slack_total: 0.0,
        };
        let hs = build_supporting_halfspaces(&grid, &model, &plan).unwrap();
        let margin = hs.d_proj[0] - hs.c_proj[(0, 0)] * 1.0;
        assert_relative_eq!(margin, 0.0, epsilon = 1e-9);
    }

    #[test]
    fn relevance_selection_cases() {
        // all zero: nothing selected
        let grid = DMatrix::<f64>::zeros(3, 5);
        let rep = compute_relevance(&grid, 1.0, 2, 1e-9).unwrap();
        assert!(rep.selected.is_empty());

        // single nonzero dual
        let mut grid = DMatrix::<f64>::zeros(4, 6);
        grid[(2, 3)] = 1.0;
        let rep = compute_relevance(&grid, 1.0, 1, 1e-9).unwrap();
        assert_eq!(rep.selected, vec![2]);
        assert_relative_eq!(rep.scores[2], 1.0);

        // discounting prefers near-term relevance: lambda[1][10]=1 vs
        // lambda[3][1]=0.5 at gamma=0.8 (1-based steps)
        let mut grid = DMatrix::<f64>::zeros(4, 12);
        grid[(1, 9)] = 1.0;
        grid[(3, 0)] = 0.5;
        let rep = compute_relevance(&grid, 0.8, 1, 1e-9).unwrap();
        assert_relative_eq!(rep.scores[1], 0.1073741824, epsilon = 1e-12);
        assert_relative_eq!(rep.scores[3], 0.4, epsilon = 1e-12);
        assert_eq!(rep.selected, vec![3]);

        // ties break toward the lowest index
        let mut grid = DMatrix::<f64>::zeros(3, 2);
        grid[(1, 0)] = 0.7;
        grid[(2, 0)] = 0.7;
        let rep = compute_relevance(&grid, 1.0, 1, 1e-9).unwrap();
        assert_eq!(rep.selected, vec![1]);

        assert!(compute_relevance(&grid, 1.5, 1, 1e-9).is_err());
        let mut bad = DMatrix::<f64>::zeros(1, 1);
        bad[(0, 0)] = -1e-3;
        assert!(compute_relevance(&bad, 1.0, 1, 1e-9).is_err());
    }

    #[test]
    fn sensitivity_scalar_hand_example() {
        // min y^2 s.t. 1 - y <= 0: p*(0) = 1, lambda = 2
        let qp = QuadraticProgram::<f64>::new(
            DMatrix::from_row_slice(1, 1, &[2.0]),
            DVector::zeros(1),
            DMatrix::zeros(0, 1),
            DVector::zeros(0),
            DMatrix::from_row_slice(1, 1, &[-1.0]),
            DVector::from_row_slice(&[-1.0]),
        )
        .unwrap();
        let solver = QpSolver::default();
        let sol = solver.solve(&qp, None);
        assert_relative_eq!(sol.objective, 1.0, epsilon = 1e-8);
        assert_relative_eq!(sol.lambda_in[0], 2.0, epsilon = 1e-6);
        let audit = sensitivity_audit(&qp, &sol, 0, 0.1, &SolverSettings::default()).unwrap();
        assert_relative_eq!(audit.predicted_drop, 0.2, epsilon = 1e-6);
        assert_relative_eq!(audit.actual_drop, 0.19, epsilon = 1e-6);
        assert!(audit.bound_satisfied);
    }

    #[test]
    fn sensitivity_inactive_row_is_flat() {
        let qp = QuadraticProgram::<f64>::new(
            DMatrix::from_row_slice(1, 1, &[2.0]),
            DVector::zeros(1),
            DMatrix::zeros(0, 1),
            DVector::zeros(0),
            DMatrix::from_row_slice(1, 1, &[1.0]),
            DVector::from_row_slice(&[5.0]),
        )
        .unwrap();
        let solver = QpSolver::default();
        let sol = solver.solve(&qp, None);
        let audit = sensitivity_audit(&qp, &sol, 0, 0.3, &SolverSettings::default()).unwrap();
        assert!(audit.predicted_drop.abs() < 1e-9);
        assert!(audit.actual_drop.abs() < 1e-7);
        assert!(audit.bound_satisfied);
    }

    #[test]
    fn chebyshev_box_and_halfplane() {
        let st = SolverSettings::<f64>::default();
        // [-1, 1]^2
        let rows = vec![
            (DVector::from_row_slice(&[1.0, 0.0]), 1.0),
            (DVector::from_row_slice(&[-1.0, 0.0]), 1.0),
            (DVector::from_row_slice(&[0.0, 1.0]), 1.0),
            (DVector::from_row_slice(&[0.0, -1.0]), 1.0),
        ];
        let res = chebyshev_center(&rows, 2, &st).unwrap();
        assert_relative_eq!(res.radius, 1.0, epsilon = 1e-5);
        assert_relative_eq!(res.center, DVector::zeros(2), epsilon = 1e-4);

        // x1 >= 1 intersected with [-2, 2]^2: radius 1/2, center (1.5, 0)
        let rows = vec![
            (DVector::from_row_slice(&[-1.0, 0.0]), -1.0),
            (DVector::from_row_slice(&[1.0, 0.0]), 2.0),
            (DVector::from_row_slice(&[-1.0, 0.0]), 2.0),
            (DVector::from_row_slice(&[0.0, 1.0]), 2.0),
            (DVector::from_row_slice(&[0.0, -1.0]), 2.0),
        ];
        let res = chebyshev_center(&rows, 2, &st).unwrap();
        assert_relative_eq!(res.radius, 0.5, epsilon = 1e-5);
        assert_relative_eq!(res.center, DVector::from_row_slice(&[1.5, 0.0]), epsilon = 1e-4);

        // contradictory box: empty interior, radius <= 0
        let rows = vec![
            (DVector::from_row_slice(&[1.0, 0.0]), -1.0),
            (DVector::from_row_slice(&[-1.0, 0.0]), -1.0),
        ];
        let res = chebyshev_center(&rows, 2, &st).unwrap();
        assert!(res.radius <= 0.0);
        assert!(!res.unbounded);

        // single half-space: unbounded ball
        let rows = vec![(DVector::from_row_slice(&[1.0, 0.0]), 1.0)];
        let res = chebyshev_center(&rows, 2, &st).unwrap();
        assert!(res.unbounded);
        assert!(res.radius.is_infinite());
    }
}
