//! Sequential quadratic programming over linearized keep-out constraints.
//!
//! Each iteration builds a convex QP from a quadratic model of the cost, the
//! dynamics linearized at the current iterate, and first-order half-space
//! models of the ellipsoidal keep-out constraints, relaxed by penalized
//! slacks so the subproblem is always feasible. Iterates are kept
//! dynamically feasible by rolling the QP's inputs through the true
//! dynamics, and a merit function with step halving keeps progress monotone.

use crate::occupancy::{constraint_value, KeepOutEllipsoid, KeepOutGrid};
use crate::qpsolver::{ConstraintTag, QpSolution, QpSolver, QuadraticProgram, SolverSettings};
use crate::{cst, Error, Result, Scalar};
use nalgebra::{DMatrix, DVector};

/// Robot dynamics and operating constraints, as seen by the planner.
pub trait RobotModel<S: Scalar = f64>: Sync {
    fn state_dim(&self) -> usize;
    fn input_dim(&self) -> usize;
    fn position_dim(&self) -> usize;

    /// Selection matrix extracting the position sub-vector from the state.
    fn position_map(&self) -> DMatrix<S>;

    /// One exact step of the discrete dynamics `f(x, u)`.
    fn step(&self, x: &DVector<S>, u: &DVector<S>) -> DVector<S>;

    /// `n_x x (n_x + n_u)` Jacobian `[df/dx  df/du]` at `(x, u)`.
    fn jacobian(&self, x: &DVector<S>, u: &DVector<S>) -> DMatrix<S>;

    /// Elementwise input box `U`.
    fn input_bounds(&self) -> (DVector<S>, DVector<S>);

    /// Elementwise safe box `S` on the position sub-vector.
    fn position_bounds(&self) -> (DVector<S>, DVector<S>);

    fn is_linear(&self) -> bool {
        false
    }

    fn position(&self, x: &DVector<S>) -> DVector<S> {
        self.position_map() * x
    }

    /// Input best reproducing `x_next` from `x` in least squares, clamped to
    /// the input box. Gauss-Newton from the box midpoint; exact for linear
    /// dynamics.
    fn fit_input(&self, x: &DVector<S>, x_next: &DVector<S>) -> DVector<S> {
        let (lo, hi) = self.input_bounds();
        let mut u = (&lo + &hi) * cst::<S>(0.5);
        for _ in 0..8 {
            let jac = self.jacobian(x, &u);
            let ju = jac.columns(self.state_dim(), self.input_dim()).into_owned();
            let residual = x_next - self.step(x, &u);
            if residual.amax() < cst::<S>(1e-12) {
                break;
            }
            let svd = ju.svd(true, true);
            let Ok(du) = svd.solve(&residual, cst::<S>(1e-10)) else {
                break;
            };
            u += du;
            for i in 0..u.len() {
                u[i] = u[i].clamp(lo[i], hi[i]);
            }
        }
        u
    }

    /// Lift a desired position path (entries for steps `1..=T`) into full
    /// states for cold-start initialization. The default keeps the
    /// non-position coordinates of `x0`.
    fn lift_position_path(&self, x0: &DVector<S>, path: &[DVector<S>]) -> Vec<DVector<S>> {
        let pm = self.position_map();
        path.iter()
            .map(|p| {
                let mut x = x0.clone();
                // overwrite the position coordinates selected by the map
                for r in 0..pm.nrows() {
                    for c in 0..pm.ncols() {
                        if pm[(r, c)] != S::zero() {
                            x[c] = p[r] / pm[(r, c)];
                        }
                    }
                }
                x
            })
            .collect()
    }
}

/// Cost over the stacked decision `(x[1..T], u[0..T-1])`.
///
/// `hessian` returns the surrogate `M` used as the QP's quadratic term
/// `d' M d`; for a quadratic cost it must equal half the true Hessian so the
/// QP is the exact second-order model.
pub trait CostModel<S: Scalar = f64>: Sync {
    fn value(&self, states: &[DVector<S>], inputs: &[DVector<S>]) -> S;
    fn gradient(&self, states: &[DVector<S>], inputs: &[DVector<S>]) -> DVector<S>;
    fn hessian(&self, states: &[DVector<S>], inputs: &[DVector<S>]) -> DMatrix<S>;
}

/// Offsets of the stacked decision vector `(x[1..=T], u[0..T-1])`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StackLayout {
    pub n_x: usize,
    pub n_u: usize,
    pub horizon: usize,
}

impl StackLayout {
    pub fn x_offset(&self, t: usize) -> usize {
        debug_assert!((1..=self.horizon).contains(&t));
        (t - 1) * self.n_x
    }

    pub fn u_offset(&self, t: usize) -> usize {
        debug_assert!(t < self.horizon);
        self.horizon * self.n_x + t * self.n_u
    }

    pub fn xu_dim(&self) -> usize {
        self.horizon * (self.n_x + self.n_u)
    }
}

/// Stacked state/input trajectory over one planning horizon.
#[derive(Debug, Clone)]
pub struct PlanIterate<S: Scalar = f64> {
    /// `T + 1` states, `states[0]` fixed to the cycle's initial state
    pub states: Vec<DVector<S>>,
    /// `T` inputs
    pub inputs: Vec<DVector<S>>,
    pub objective: S,
    /// total true keep-out violation of the trajectory
    pub slack_total: S,
}

impl<S: Scalar> PlanIterate<S> {
    pub fn horizon(&self) -> usize {
        self.inputs.len()
    }

    pub fn layout(&self) -> StackLayout {
        StackLayout {
            n_x: self.states[0].len(),
            n_u: self.inputs.first().map(|u| u.len()).unwrap_or(0),
            horizon: self.horizon(),
        }
    }

    /// Stack `(x[1..=T], u[0..T-1])` into one decision vector.
    pub fn stacked(&self) -> DVector<S> {
        let layout = self.layout();
        let mut y = DVector::zeros(layout.xu_dim());
        for t in 1..=layout.horizon {
            y.rows_mut(layout.x_offset(t), layout.n_x)
                .copy_from(&self.states[t]);
        }
        for t in 0..layout.horizon {
            y.rows_mut(layout.u_offset(t), layout.n_u)
                .copy_from(&self.inputs[t]);
        }
        y
    }
}

/// Simulate inputs through the true dynamics.
pub fn rollout<S: Scalar>(
    model: &dyn RobotModel<S>,
    x0: &DVector<S>,
    inputs: &[DVector<S>],
) -> Vec<DVector<S>> {
    let mut states = Vec::with_capacity(inputs.len() + 1);
    states.push(x0.clone());
    for u in inputs {
        let next = model.step(states.last().unwrap(), u);
        states.push(next);
    }
    states
}

/// First-order model of the dynamics at step `t` of the iterate:
/// `x[t+1] = C_dyn' [x; u] + d_dyn`, with `C_dyn = (grad f)' = [A B]'` for
/// linear dynamics and `d_dyn = f(x,u) - J [x; u]`.
pub fn linearize_dynamics<S: Scalar>(
    model: &dyn RobotModel<S>,
    iterate: &PlanIterate<S>,
    t: usize,
) -> (DMatrix<S>, DVector<S>) {
    let x = &iterate.states[t];
    let u = &iterate.inputs[t];
    let jac = model.jacobian(x, u);
    let mut xu = DVector::zeros(x.len() + u.len());
    xu.rows_mut(0, x.len()).copy_from(x);
    xu.rows_mut(x.len(), u.len()).copy_from(u);
    let d = model.step(x, u) - &jac * xu;
    (jac.transpose(), d)
}

/// Half-space `c_obs' x <= d_obs` excluding the ellipsoid interior: the
/// first-order model of `g(x) = 1 - (x-mu)'(Q+)^-1(x-mu) <= 0` at `x_k`.
/// When `x_k` coincides with the center the gradient vanishes; the fallback
/// is the supporting half-space at the boundary along the widest axis.
pub fn linearize_keepout<S: Scalar>(
    e: &KeepOutEllipsoid<S>,
    x_k_pos: &DVector<S>,
) -> Result<(DVector<S>, S)> {
    if e.vacuous {
        return Err(Error::Config("cannot linearize a vacuous keep-out".into()));
    }
    let d = x_k_pos - &e.center;
    let s = e.inv_mul(&d);
    let qform = d.dot(&s);
    if qform <= cst::<S>(1e-16) {
        log::warn!(
            "keep-out linearization point at the ellipsoid center (obstacle {}, t {}); \
             falling back to a boundary half-space",
            e.obstacle_id,
            e.time_index
        );
        let eig = e.shape.clone().symmetric_eigen();
        let mut best = 0;
        for i in 1..eig.eigenvalues.len() {
            if eig.eigenvalues[i] > eig.eigenvalues[best] {
                best = i;
            }
        }
        let v: DVector<S> = eig.eigenvectors.column(best).into();
        let tau = S::one() / v.dot(&e.inv_mul(&v)).sqrt();
        let p = &e.center + &v * tau;
        let a = e.inv_mul(&(&p - &e.center));
        // -a' x <= -a' p keeps the robot on the outward side
        return Ok((-a.clone(), -a.dot(&p)));
    }
    let c_obs = -(&s * cst::<S>(2.0));
    let d_obs = qform - S::one() + c_obs.dot(x_k_pos);
    Ok((c_obs, d_obs))
}

/// Fixed linear constraint rows over the robot's position at given horizon
/// steps; used by the projection refinement where the rows do not move with
/// the iterate.
#[derive(Debug, Clone)]
pub struct FixedPositionRows<S: Scalar = f64> {
    /// (horizon step t in 1..=T, coefficients on position, rhs, tag)
    pub rows: Vec<(usize, DVector<S>, S, ConstraintTag)>,
}

pub(crate) enum ObstacleRows<'a, S: Scalar> {
    /// keep-out half-spaces re-linearized at each iterate, with L1 slacks
    Linearized {
        grid: &'a KeepOutGrid<S>,
        slack_weight: S,
    },
    /// immovable rows, no slacks
    Fixed(&'a FixedPositionRows<S>),
}

/// The planning problem a cycle hands to the SQP engine.
pub struct PlanningProblem<'a, S: Scalar = f64> {
    pub model: &'a dyn RobotModel<S>,
    pub cost: &'a dyn CostModel<S>,
    pub x0: DVector<S>,
    pub horizon: usize,
    pub settings: SqpSettings<S>,
}

#[derive(Debug, Clone, Copy)]
pub struct SqpSettings<S: Scalar = f64> {
    /// absolute objective-change convergence threshold
    pub obj_tol: S,
    pub max_iter: usize,
    /// L1 penalty weight on keep-out slacks
    pub slack_weight: S,
    /// merit-decrease step halvings before accepting the best candidate
    pub max_halvings: usize,
    /// post-convergence keep-out tolerance: constraint_value >= 1 - this
    pub constraint_tol: S,
    pub solver: SolverSettings<S>,
}

impl<S: Scalar> Default for SqpSettings<S> {
    fn default() -> Self {
        Self {
            obj_tol: cst(1e-4),
            max_iter: 50,
            slack_weight: cst(1e4),
            max_halvings: 8,
            constraint_tol: cst(1e-6),
            solver: SolverSettings::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SqpStatus {
    Converged,
    MaxIter,
    /// slacks could not be driven to zero; the iterate violates a keep-out
    InfeasibleSoft,
}

#[derive(Debug, Clone)]
pub struct SqpTrace<S: Scalar = f64> {
    pub iteration: usize,
    pub objective: S,
    pub qp_slack_sum: S,
    pub true_violation: S,
    pub step_norm: S,
    pub halvings: usize,
    pub qp_iterations: usize,
}

/// Stream the per-iteration trace as CSV.
pub fn write_trace_csv<S: Scalar, W: std::io::Write>(
    trace: &[SqpTrace<S>],
    w: &mut W,
) -> std::io::Result<()> {
    writeln!(w, "iteration,objective,qp_slack_sum,true_violation,step_norm,halvings,qp_iterations")?;
    for t in trace {
        writeln!(
            w,
            "{},{:.12e},{:.12e},{:.12e},{:.12e},{},{}",
            t.iteration,
            crate::as_f64(t.objective),
            crate::as_f64(t.qp_slack_sum),
            crate::as_f64(t.true_violation),
            crate::as_f64(t.step_norm),
            t.halvings,
            t.qp_iterations
        )?;
    }
    Ok(())
}

pub struct SqpResult<S: Scalar = f64> {
    pub iterate: PlanIterate<S>,
    pub status: SqpStatus,
    pub iterations: usize,
    pub trace: Vec<SqpTrace<S>>,
    /// minimum keep-out constraint value over the final trajectory
    pub min_constraint_value: S,
    /// QP and solution at the final accepted iterate
    pub final_qp: QuadraticProgram<S>,
    pub final_solution: QpSolution<S>,
}

/// Straight-line cold start: positions interpolate from `x0` to the goal,
/// lifted to full states, with inputs from a least-squares dynamics fit and
/// the states re-rolled through the true dynamics.
pub fn initial_iterate<S: Scalar>(
    model: &dyn RobotModel<S>,
    x0: &DVector<S>,
    goal_pos: &DVector<S>,
    horizon: usize,
) -> PlanIterate<S> {
    let p0 = model.position(x0);
    let path: Vec<DVector<S>> = (1..=horizon)
        .map(|t| {
            let frac = cst::<S>(t as f64 / horizon as f64);
            &p0 + (goal_pos - &p0) * frac
        })
        .collect();
    let desired = model.lift_position_path(x0, &path);
    let (lo, hi) = model.input_bounds();
    let mut inputs = Vec::with_capacity(horizon);
    let mut x = x0.clone();
    for target in &desired {
        let mut u = model.fit_input(&x, target);
        for i in 0..u.len() {
            u[i] = u[i].clamp(lo[i], hi[i]);
        }
        x = model.step(&x, &u);
        inputs.push(u);
    }
    let states = rollout(model, x0, &inputs);
    PlanIterate {
        states,
        inputs,
        objective: S::zero(),
        slack_total: S::zero(),
    }
}

/// Total violation of the (non-vacuous) keep-out constraints by a state
/// sequence, and the minimum constraint value encountered.
fn keepout_violation<S: Scalar>(
    model: &dyn RobotModel<S>,
    grid: &KeepOutGrid<S>,
    states: &[DVector<S>],
) -> (S, S) {
    let mut total = S::zero();
    let mut min_val = cst::<S>(f64::INFINITY);
    for e in grid.iter().filter(|e| !e.vacuous) {
        let pos = model.position(&states[e.time_index]);
        let v = constraint_value(e, &pos);
        min_val = min_val.min(v);
        total += (S::one() - v).max(S::zero());
    }
    (total, min_val)
}

fn fixed_rows_violation<S: Scalar>(
    model: &dyn RobotModel<S>,
    rows: &FixedPositionRows<S>,
    states: &[DVector<S>],
) -> S {
    let mut total = S::zero();
    for (t, coef, rhs, _) in &rows.rows {
        let pos = model.position(&states[*t]);
        total += (coef.dot(&pos) - *rhs).max(S::zero());
    }
    total
}

/// Assemble one SQP subproblem at `iterate`.
///
/// Decision vector: `(x[1..=T], u[0..T-1], s)` with one slack per
/// non-vacuous keep-out pair. Dynamics are equality rows, keep-outs carry
/// slacks penalized in the linear cost, input and safe-set boxes are hard.
pub fn assemble_qp<S: Scalar>(
    model: &dyn RobotModel<S>,
    keepouts: &KeepOutGrid<S>,
    iterate: &PlanIterate<S>,
    cost: &dyn CostModel<S>,
    slack_weight: S,
) -> Result<QuadraticProgram<S>> {
    assemble(
        model,
        iterate,
        cost,
        &ObstacleRows::Linearized {
            grid: keepouts,
            slack_weight,
        },
    )
}

fn assemble<S: Scalar>(
    model: &dyn RobotModel<S>,
    iterate: &PlanIterate<S>,
    cost: &dyn CostModel<S>,
    obstacles: &ObstacleRows<'_, S>,
) -> Result<QuadraticProgram<S>> {
    let layout = iterate.layout();
    let t_max = layout.horizon;
    let (n_x, n_u) = (layout.n_x, layout.n_u);
    let xu = layout.xu_dim();
    let pm = model.position_map();
    let n_pos = pm.nrows();

    let n_slack = match obstacles {
        ObstacleRows::Linearized { grid, .. } => grid.num_nonvacuous(),
        ObstacleRows::Fixed(_) => 0,
    };
    let d = xu + n_slack;

    // quadratic model of the cost: P = 2 M on the (x, u) block
    let m_surrogate = cost.hessian(&iterate.states, &iterate.inputs);
    if m_surrogate.nrows() != xu {
        return Err(Error::Config("cost hessian does not match the decision layout".into()));
    }
    let mut p = DMatrix::<S>::zeros(d, d);
    for i in 0..xu {
        for j in 0..xu {
            p[(i, j)] = m_surrogate[(i, j)] * cst::<S>(2.0);
        }
    }
    let y_k = iterate.stacked();
    let grad = cost.gradient(&iterate.states, &iterate.inputs);
    let mut q = DVector::<S>::zeros(d);
    {
        let p_yk = p.view((0, 0), (xu, xu)) * &y_k;
        for i in 0..xu {
            q[i] = grad[i] - p_yk[i];
        }
    }

    // equality block: dynamics
    let mut a_eq = DMatrix::<S>::zeros(t_max * n_x, d);
    let mut b_eq = DVector::<S>::zeros(t_max * n_x);
    let mut eq_tags = Vec::with_capacity(t_max * n_x);
    for t in 0..t_max {
        let (c_dyn, d_dyn) = linearize_dynamics(model, iterate, t);
        let jac = c_dyn.transpose(); // n_x x (n_x + n_u)
        let row0 = t * n_x;
        for r in 0..n_x {
            a_eq[(row0 + r, layout.x_offset(t + 1) + r)] = S::one();
            for c in 0..n_u {
                a_eq[(row0 + r, layout.u_offset(t) + c)] = -jac[(r, n_x + c)];
            }
            if t >= 1 {
                for c in 0..n_x {
                    a_eq[(row0 + r, layout.x_offset(t) + c)] = -jac[(r, c)];
                }
                b_eq[row0 + r] = d_dyn[r];
            } else {
                // x[0] is data, not a variable
                let mut rhs = d_dyn[r];
                for c in 0..n_x {
                    rhs += jac[(r, c)] * iterate.states[0][c];
                }
                b_eq[row0 + r] = rhs;
            }
            eq_tags.push(ConstraintTag::Dynamics { t });
        }
    }

    // inequality block
    let (lo_u, hi_u) = model.input_bounds();
    let (lo_s, hi_s) = model.position_bounds();
    let n_obstacle_rows = match obstacles {
        ObstacleRows::Linearized { grid, .. } => grid.num_nonvacuous(),
        ObstacleRows::Fixed(rows) => rows.rows.len(),
    };
    let m_in = n_obstacle_rows + n_slack + 2 * t_max * n_u + 2 * t_max * n_pos;
    let mut a_in = DMatrix::<S>::zeros(m_in, d);
    let mut b_in = DVector::<S>::zeros(m_in);
    let mut in_tags = Vec::with_capacity(m_in);
    let mut row = 0usize;

    match obstacles {
        ObstacleRows::Linearized { grid, slack_weight } => {
            let mut slack_idx = 0usize;
            for e in grid.iter().filter(|e| !e.vacuous) {
                let pos = model.position(&iterate.states[e.time_index]);
                let (c_obs, d_obs) = linearize_keepout(e, &pos)?;
                // c_obs' P_map x[t] - s <= d_obs
                let coef_x = pm.transpose() * &c_obs;
                for c in 0..n_x {
                    a_in[(row, layout.x_offset(e.time_index) + c)] = coef_x[c];
                }
                a_in[(row, xu + slack_idx)] = -S::one();
                b_in[row] = d_obs;
                in_tags.push(ConstraintTag::KeepOut {
                    obstacle: e.obstacle_id,
                    t: e.time_index,
                });
                // slack cost
                q[xu + slack_idx] = *slack_weight;
                row += 1;
                slack_idx += 1;
            }
            // s >= 0
            let mut slack_idx = 0usize;
            for e in grid.iter().filter(|e| !e.vacuous) {
                a_in[(row, xu + slack_idx)] = -S::one();
                in_tags.push(ConstraintTag::SlackNonneg {
                    obstacle: e.obstacle_id,
                    t: e.time_index,
                });
                row += 1;
                slack_idx += 1;
            }
        }
        ObstacleRows::Fixed(rows) => {
            for (t, coef, rhs, tag) in &rows.rows {
                let coef_x = pm.transpose() * coef;
                for c in 0..n_x {
                    a_in[(row, layout.x_offset(*t) + c)] = coef_x[c];
                }
                b_in[row] = *rhs;
                in_tags.push(*tag);
                row += 1;
            }
        }
    }

    for t in 0..t_max {
        for i in 0..n_u {
            a_in[(row, layout.u_offset(t) + i)] = S::one();
            b_in[row] = hi_u[i];
            in_tags.push(ConstraintTag::InputBound { t });
            row += 1;
            a_in[(row, layout.u_offset(t) + i)] = -S::one();
            b_in[row] = -lo_u[i];
            in_tags.push(ConstraintTag::InputBound { t });
            row += 1;
        }
    }
    for t in 1..=t_max {
        for i in 0..n_pos {
            for c in 0..n_x {
                a_in[(row, layout.x_offset(t) + c)] = pm[(i, c)];
                a_in[(row + 1, layout.x_offset(t) + c)] = -pm[(i, c)];
            }
            b_in[row] = hi_s[i];
            in_tags.push(ConstraintTag::StateBound { t });
            b_in[row + 1] = -lo_s[i];
            in_tags.push(ConstraintTag::StateBound { t });
            row += 2;
        }
    }
    debug_assert_eq!(row, m_in);

    let mut qp = QuadraticProgram::new(p, q, a_eq, b_eq, a_in, b_in)?;
    qp.eq_tags = eq_tags;
    qp.in_tags = in_tags;
    Ok(qp)
}

/// Run the SQP loop against linearized keep-out constraints.
pub fn sqp_solve<S: Scalar>(
    problem: &PlanningProblem<'_, S>,
    keepouts: &KeepOutGrid<S>,
    init: &PlanIterate<S>,
) -> Result<SqpResult<S>> {
    let slack_weight = problem.settings.slack_weight;
    sqp_engine(
        problem,
        &ObstacleRows::Linearized {
            grid: keepouts,
            slack_weight,
        },
        init,
        false,
    )
}

/// Run the SQP loop against fixed position-space rows (the projection
/// refinement). One extra QP is solved at the accepted iterate so the
/// returned duals are consistent with the returned plan.
pub(crate) fn sqp_solve_fixed_rows<S: Scalar>(
    problem: &PlanningProblem<'_, S>,
    rows: &FixedPositionRows<S>,
    init: &PlanIterate<S>,
) -> Result<SqpResult<S>> {
    sqp_engine(problem, &ObstacleRows::Fixed(rows), init, true)
}

fn sqp_engine<S: Scalar>(
    problem: &PlanningProblem<'_, S>,
    obstacles: &ObstacleRows<'_, S>,
    init: &PlanIterate<S>,
    resolve_at_final: bool,
) -> Result<SqpResult<S>> {
    let st = &problem.settings;
    let model = problem.model;
    let cost = problem.cost;
    if init.states.len() != problem.horizon + 1 || init.inputs.len() != problem.horizon {
        return Err(Error::Config("initial iterate does not match the horizon".into()));
    }
    if (&init.states[0] - &problem.x0).amax() > cst::<S>(1e-9) {
        return Err(Error::Config("initial iterate does not start at x0".into()));
    }
    let solver = QpSolver::new(st.solver);

    let merit_of = |states: &[DVector<S>], inputs: &[DVector<S>]| -> (S, S, S) {
        let obj = cost.value(states, inputs);
        let viol = match obstacles {
            ObstacleRows::Linearized { grid, slack_weight } => {
                let (v, _) = keepout_violation(model, grid, states);
                return (obj + *slack_weight * v, obj, v);
            }
            // fixed rows are hard; a large fixed penalty only steers damping
            ObstacleRows::Fixed(rows) => fixed_rows_violation(model, rows, states),
        };
        (obj + cst::<S>(1e6) * viol, obj, viol)
    };

    // make the iterate dynamically feasible from the start
    let mut states = rollout(model, &problem.x0, &init.inputs);
    let mut inputs = init.inputs.clone();
    let (mut merit_prev, mut obj_prev, _) = merit_of(&states, &inputs);

    let mut trace: Vec<SqpTrace<S>> = Vec::new();
    let mut warm: Option<QpSolution<S>> = None;
    let mut last_qp: Option<(QuadraticProgram<S>, QpSolution<S>)> = None;
    let mut iterations = 0usize;

    for k in 0..st.max_iter {
        iterations = k + 1;
        let iterate = PlanIterate {
            states: states.clone(),
            inputs: inputs.clone(),
            objective: obj_prev,
            slack_total: S::zero(),
        };
        let qp = assemble(model, &iterate, cost, obstacles)?;
        let warm_stacked = warm.as_ref().map(|w| {
            let mut d = DVector::zeros(qp.num_eq() + qp.num_in());
            for i in 0..qp.num_eq().min(w.lambda_eq.len()) {
                d[i] = w.lambda_eq[i];
            }
            for i in 0..qp.num_in().min(w.lambda_in.len()) {
                d[qp.num_eq() + i] = w.lambda_in[i];
            }
            d
        });
        let sol = solver.solve_full(
            &qp,
            warm.as_ref().map(|w| &w.y),
            warm_stacked.as_ref(),
        );

        let layout = iterate.layout();
        let u_cand: Vec<DVector<S>> = (0..layout.horizon)
            .map(|t| {
                let mut u = DVector::zeros(layout.n_u);
                for i in 0..layout.n_u {
                    u[i] = sol.y[layout.u_offset(t) + i];
                }
                u
            })
            .collect();
        let qp_slack_sum = (layout.xu_dim()..qp.num_vars()).fold(S::zero(), |acc, i| acc + sol.y[i]);

        // merit-damped acceptance of the input step
        let mut accepted: Option<(Vec<DVector<S>>, Vec<DVector<S>>, S, S, S, usize)> = None;
        let mut best: Option<(Vec<DVector<S>>, Vec<DVector<S>>, S, S, S, usize)> = None;
        let mut scale = S::one();
        for halving in 0..=st.max_halvings {
            let u_try: Vec<DVector<S>> = inputs
                .iter()
                .zip(&u_cand)
                .map(|(u0, u1)| u0 + (u1 - u0) * scale)
                .collect();
            let s_try = rollout(model, &problem.x0, &u_try);
            let (merit, obj, viol) = merit_of(&s_try, &u_try);
            if best
                .as_ref()
                .map(|(.., m, _, _)| merit < *m)
                .unwrap_or(true)
            {
                best = Some((s_try.clone(), u_try.clone(), merit, obj, viol, halving));
            }
            if merit <= merit_prev + cst::<S>(1e-12) {
                accepted = Some((s_try, u_try, merit, obj, viol, halving));
                break;
            }
            scale *= cst::<S>(0.5);
        }
        let (s_new, u_new, merit_new, obj_new, _viol_new, halvings) =
            accepted.or(best).expect("at least one candidate evaluated");

        let step_norm = u_new
            .iter()
            .zip(&inputs)
            .map(|(a, b)| (a - b).amax())
            .fold(S::zero(), |acc, v| acc.max(v));

        states = s_new;
        inputs = u_new;
        trace.push(SqpTrace {
            iteration: k,
            objective: obj_new,
            qp_slack_sum,
            true_violation: _viol_new,
            step_norm,
            halvings,
            qp_iterations: sol.iterations,
        });
        warm = Some(sol.clone());
        last_qp = Some((qp, sol));

        let obj_delta = (obj_new - obj_prev).abs();
        merit_prev = merit_new.min(merit_prev);
        obj_prev = obj_new;
        if obj_delta < st.obj_tol {
            break;
        }
    }

    // final accounting on the rolled trajectory
    let (slack_total, min_cv) = match obstacles {
        ObstacleRows::Linearized { grid, .. } => keepout_violation(model, grid, &states),
        ObstacleRows::Fixed(rows) => {
            let v = fixed_rows_violation(model, rows, &states);
            (v, cst::<S>(f64::INFINITY))
        }
    };
    let converged = iterations < st.max_iter;
    let feasible = match obstacles {
        ObstacleRows::Linearized { .. } => {
            min_cv >= S::one() - st.constraint_tol && slack_total <= st.constraint_tol
        }
        ObstacleRows::Fixed(_) => slack_total <= st.constraint_tol,
    };
    let status = if !feasible {
        SqpStatus::InfeasibleSoft
    } else if converged {
        SqpStatus::Converged
    } else {
        SqpStatus::MaxIter
    };

    let objective = cost.value(&states, &inputs);
    let iterate = PlanIterate {
        states,
        inputs,
        objective,
        slack_total,
    };

    let (final_qp, final_solution) = if resolve_at_final {
        let qp = assemble(model, &iterate, cost, obstacles)?;
        let warm_stacked = warm.as_ref().map(|w| {
            let mut d = DVector::zeros(qp.num_eq() + qp.num_in());
            for i in 0..qp.num_eq().min(w.lambda_eq.len()) {
                d[i] = w.lambda_eq[i];
            }
            for i in 0..qp.num_in().min(w.lambda_in.len()) {
                d[qp.num_eq() + i] = w.lambda_in[i];
            }
            d
        });
        let sol = solver.solve_full(&qp, warm.as_ref().map(|w| &w.y), warm_stacked.as_ref());
        (qp, sol)
    } else {
        last_qp.ok_or_else(|| Error::Numerical("SQP ran zero iterations".into()))?
    };

    Ok(SqpResult {
        iterate,
        status,
        iterations,
        trace,
        min_constraint_value: min_cv,
        final_qp,
        final_solution,
    })
}

/// Maximum relative disagreement between a cost model's analytic gradient
/// and central finite differences over the stacked decision.
pub fn cost_fd_error<S: Scalar>(
    cost: &dyn CostModel<S>,
    states: &[DVector<S>],
    inputs: &[DVector<S>],
) -> f64 {
    let layout = StackLayout {
        n_x: states[0].len(),
        n_u: inputs.first().map(|u| u.len()).unwrap_or(0),
        horizon: inputs.len(),
    };
    let grad = cost.gradient(states, inputs);
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    let eval = |states: &[DVector<S>], inputs: &[DVector<S>]| crate::as_f64(cost.value(states, inputs));
    for idx in 0..layout.xu_dim() {
        let perturb = |d: f64| {
            let mut s = states.to_vec();
            let mut u = inputs.to_vec();
            if idx < layout.horizon * layout.n_x {
                let t = idx / layout.n_x + 1;
                let i = idx % layout.n_x;
                s[t][i] += cst::<S>(d);
            } else {
                let rem = idx - layout.horizon * layout.n_x;
                let t = rem / layout.n_u;
                let i = rem % layout.n_u;
                u[t][i] += cst::<S>(d);
            }
            eval(&s, &u)
        };
        let fd = (perturb(h) - perturb(-h)) / (2.0 * h);
        let an = crate::as_f64(grad[idx]);
        worst = worst.max((fd - an).abs() / an.abs().max(1.0));
    }
    worst
}

/// Maximum relative disagreement between the analytic Jacobian and central
/// finite differences at `(x, u)`.
pub fn jacobian_fd_error<S: Scalar>(
    model: &dyn RobotModel<S>,
    x: &DVector<S>,
    u: &DVector<S>,
) -> f64 {
    let n_x = model.state_dim();
    let n_u = model.input_dim();
    let jac = model.jacobian(x, u);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for col in 0..(n_x + n_u) {
        let mut xp = x.clone();
        let mut xm = x.clone();
        let mut up = u.clone();
        let mut um = u.clone();
        if col < n_x {
            xp[col] += cst::<S>(h);
            xm[col] -= cst::<S>(h);
        } else {
            up[col - n_x] += cst::<S>(h);
            um[col - n_x] -= cst::<S>(h);
        }
        let fp = model.step(&xp, &up);
        let fm = model.step(&xm, &um);
        for r in 0..n_x {
            let fd = (crate::as_f64(fp[r]) - crate::as_f64(fm[r])) / (2.0 * h);
            let an = crate::as_f64(jac[(r, col)]);
            let denom = an.abs().max(1.0);
            worst = worst.max((fd - an).abs() / denom);
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::occupancy::KeepOutEllipsoid;
    use approx::assert_relative_eq;
    use rand::rngs::SmallRng;
    use rand::{Rng, SeedableRng};

    /// Minimal 1-D double integrator used by the unit tests.
    struct Cart {
        dt: f64,
    }

    impl RobotModel for Cart {
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
            DVector::from_row_slice(&[
                x[0] + self.dt * x[1] + 0.5 * self.dt * self.dt * u[0],
                x[1] + self.dt * u[0],
            ])
        }
        fn jacobian(&self, _x: &DVector<f64>, _u: &DVector<f64>) -> DMatrix<f64> {
            DMatrix::from_row_slice(2, 3, &[1.0, self.dt, 0.5 * self.dt * self.dt, 0.0, 1.0, self.dt])
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

    /// goal-tracking quadratic cost on (position, velocity)
    struct CartCost {
        goal: f64,
        horizon: usize,
    }

    impl CostModel for CartCost {
        fn value(&self, states: &[DVector<f64>], _inputs: &[DVector<f64>]) -> f64 {
            states[1..]
                .iter()
                .map(|x| (x[0] - self.goal).powi(2) + x[1].powi(2))
                .sum()
        }
        fn gradient(&self, states: &[DVector<f64>], _inputs: &[DVector<f64>]) -> DVector<f64> {
            let layout = StackLayout {
                n_x: 2,
                n_u: 1,
                horizon: self.horizon,
            };
            let mut g = DVector::zeros(layout.xu_dim());
            for t in 1..=self.horizon {
                g[layout.x_offset(t)] = 2.0 * (states[t][0] - self.goal);
                g[layout.x_offset(t) + 1] = 2.0 * states[t][1];
            }
            g
            }
        fn hessian(&self, _states: &[DVector<f64>], _inputs: &[DVector<f64>]) -> DMatrix<f64> {
            let layout = StackLayout {
                n_x: 2,
                n_u: 1,
                horizon: self.horizon,
            };
            // half the true Hessian: identity on the state block
            let mut m = DMatrix::zeros(layout.xu_dim(), layout.xu_dim());
            for t in 1..=self.horizon {
                m[(layout.x_offset(t), layout.x_offset(t))] = 1.0;
                m[(layout.x_offset(t) + 1, layout.x_offset(t) + 1)] = 1.0;
            }
            for i in 0..layout.xu_dim() {
                m[(i, i)] += 1e-8;
            }
            m
        }
    }

    #[test]
    fn linear_dynamics_linearization_is_exact() {
        let model = Cart { dt: 0.5 };
        let iterate = PlanIterate {
            states: vec![
                DVector::from_row_slice(&[0.0, 0.0]),
                DVector::from_row_slice(&[1.0, 0.4]),
            ],
            inputs: vec![DVector::from_row_slice(&[0.3])],
            objective: 0.0,
            slack_total: 0.0,
        };
        let (c_dyn, d_dyn) = linearize_dynamics(&model, &iterate, 0);
        // C_dyn = [A B]^T
        assert_relative_eq!(
            c_dyn,
            DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.5, 1.0, 0.125, 0.5]),
            epsilon = 1e-15
        );
        assert_relative_eq!(d_dyn, DVector::zeros(2), epsilon = 1e-15);
    }

    #[test]
    fn taylor_identity_at_linearization_point() {
        // d_dyn reconstructs f exactly at the linearization point
        struct Pend;
        impl RobotModel for Pend {
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
                DVector::from_row_slice(&[x[0] + 0.1 * x[1], x[1] + 0.1 * (x[0].sin() + u[0])])
            }
            fn jacobian(&self, x: &DVector<f64>, _u: &DVector<f64>) -> DMatrix<f64> {
                DMatrix::from_row_slice(2, 3, &[1.0, 0.1, 0.0, 0.1 * x[0].cos(), 1.0, 0.1])
            }
            fn input_bounds(&self) -> (DVector<f64>, DVector<f64>) {
                (DVector::from_row_slice(&[-2.0]), DVector::from_row_slice(&[2.0]))
            }
            fn position_bounds(&self) -> (DVector<f64>, DVector<f64>) {
                (DVector::from_row_slice(&[-10.0]), DVector::from_row_slice(&[10.0]))
            }
        }
        let model = Pend;
        let x = DVector::from_row_slice(&[0.7, -0.2]);
        let u = DVector::from_row_slice(&[0.5]);
        let iterate = PlanIterate {
            states: vec![x.clone(), model.step(&x, &u)],
            inputs: vec![u.clone()],
            objective: 0.0,
            slack_total: 0.0,
        };
        let (c_dyn, d_dyn) = linearize_dynamics(&model, &iterate, 0);
        let mut xu = DVector::zeros(3);
        xu.rows_mut(0, 2).copy_from(&x);
        xu[2] = u[0];
        let recon = c_dyn.transpose() * xu + d_dyn;
        assert_relative_eq!(recon, model.step(&x, &u), epsilon = 1e-14);
        assert!(jacobian_fd_error(&model, &x, &u) < 1e-6);
    }

    #[test]
    fn keepout_halfspace_hand_example() {
        // unit disk at origin, linearized at (2, 0): -4 x1 <= -5, i.e. x1 >= 1.25
        let e = KeepOutEllipsoid::new(DVector::zeros(2), DMatrix::identity(2, 2), 0, 1).unwrap();
        let x = DVector::from_row_slice(&[2.0, 0.0]);
        let (c, d) = linearize_keepout(&e, &x).unwrap();
        assert_relative_eq!(c, DVector::from_row_slice(&[-4.0, 0.0]), epsilon = 1e-12);
        assert_relative_eq!(d, -5.0, epsilon = 1e-12);
        // excludes the unit disk: center violates, linearization point is feasible
        assert!(c.dot(&DVector::zeros(2)) > d);
        assert!(c.dot(&x) <= d + 1e-12);
    }

    #[test]
    fn keepout_halfspace_on_boundary_is_tangent() {
        let e = KeepOutEllipsoid::new(
            DVector::zeros(2),
            DMatrix::from_row_slice(2, 2, &[4.0, 0.0, 0.0, 1.0]),
            0,
            1,
        )
        .unwrap();
        let x = DVector::from_row_slice(&[2.0, 0.0]); // on the boundary
        let (c, d) = linearize_keepout(&e, &x).unwrap();
        // boundary point satisfies the row with zero margin
        assert_relative_eq!(c.dot(&x), d, epsilon = 1e-12);
    }

    #[test]
    fn keepout_halfspace_excludes_center_randomized() {
        let mut rng = SmallRng::seed_from_u64(17);
        for _ in 0..1000 {
            let n = rng.random_range(2..4usize);
            let r = DMatrix::from_fn(n, n, |_, _| rng.random::<f64>() - 0.5);
            let shape = &r * r.transpose() + 0.05 * DMatrix::identity(n, n);
            let center = DVector::from_fn(n, |_, _| 2.0 * rng.random::<f64>() - 1.0);
            let e = KeepOutEllipsoid::new(center.clone(), shape, 0, 1).unwrap();
            // a point strictly outside
            let mut x = DVector::from_fn(n, |_, _| 4.0 * (rng.random::<f64>() - 0.5));
            while crate::occupancy::constraint_value(&e, &x) <= 1.0 {
                x = &center + (&x - &center) * 1.5 + DVector::from_element(n, 0.1);
            }
            let (c, d) = linearize_keepout(&e, &x).unwrap();
            assert!(c.dot(&center) > d, "center not excluded");
            assert!(c.dot(&x) <= d + 1e-9, "linearization point infeasible");
        }
    }

    #[test]
    fn keepout_center_fallback_is_logged_halfspace() {
        let e = KeepOutEllipsoid::new(
            DVector::from_row_slice(&[1.0, 0.0]),
            DMatrix::from_row_slice(2, 2, &[4.0, 0.0, 0.0, 1.0]),
            0,
            1,
        )
        .unwrap();
        let (c, d) = linearize_keepout(&e, &e.center.clone()).unwrap();
        // a valid supporting half-space: touches the boundary, excludes the center
        assert!(c.dot(&e.center) > d - 1e-12);
        let boundary = DVector::from_row_slice(&[3.0, 0.0]); // center + 2 e1
        assert_relative_eq!(c.dot(&boundary), d, epsilon = 1e-9);
    }

    fn empty_grid(horizon: usize) -> KeepOutGrid<f64> {
        crate::occupancy::build_keepouts(
            &[],
            &crate::occupancy::RiskBudget::new(0.01, horizon, 0).unwrap(),
            &[],
            &crate::occupancy::L0Policy::LeadingEigenvector,
        )
        .unwrap()
    }

    #[test]
    fn obstacle_free_cart_matches_kkt_oracle_and_converges_fast() {
        let model = Cart { dt: 0.5 };
        let horizon = 4;
        let cost = CartCost {
            goal: 0.3,
            horizon,
        };
        let x0 = DVector::from_row_slice(&[0.0, 0.0]);
        let problem = PlanningProblem {
            model: &model,
            cost: &cost,
            x0: x0.clone(),
            horizon,
            settings: SqpSettings::default(),
        };
        let grid = empty_grid(horizon);
        let init = initial_iterate(&model, &x0, &DVector::from_row_slice(&[0.3]), horizon);
        let result = sqp_solve(&problem, &grid, &init).unwrap();
        assert_eq!(result.status, SqpStatus::Converged);
        assert!(result.iterations <= 3, "took {} iterations", result.iterations);

        // independent oracle: dense equality-KKT solve of the same QP
        // (inputs small enough that no box binds at this goal distance)
        let qp = &result.final_qp;
        let n = qp.num_vars();
        let me = qp.num_eq();
        let mut kkt = DMatrix::<f64>::zeros(n + me, n + me);
        kkt.view_mut((0, 0), (n, n)).copy_from(&qp.p);
        kkt.view_mut((n, 0), (me, n)).copy_from(&qp.a_eq);
        kkt.view_mut((0, n), (n, me)).copy_from(&qp.a_eq.transpose());
        let mut rhs = DVector::zeros(n + me);
        for i in 0..n {
            rhs[i] = -qp.q[i];
        }
        for i in 0..me {
            rhs[n + i] = qp.b_eq[i];
        }
        let sol = kkt.lu().solve(&rhs).unwrap();
        let stacked = result.iterate.stacked();
        for i in 0..n {
            assert_relative_eq!(stacked[i], sol[i], epsilon = 1e-5);
        }
    }

    #[test]
    fn at_goal_converges_immediately_with_zero_inputs() {
        let model = Cart { dt: 0.5 };
        let horizon = 5;
        let cost = CartCost {
            goal: 0.0,
            horizon,
        };
        let x0 = DVector::from_row_slice(&[0.0, 0.0]);
        let problem = PlanningProblem {
            model: &model,
            cost: &cost,
            x0: x0.clone(),
            horizon,
            settings: SqpSettings::default(),
        };
        let grid = empty_grid(horizon);
        let init = initial_iterate(&model, &x0, &DVector::zeros(1), horizon);
        let result = sqp_solve(&problem, &grid, &init).unwrap();
        assert_eq!(result.status, SqpStatus::Converged);
        assert!(result.iterate.objective < 1e-10);
        for u in &result.iterate.inputs {
            assert!(u.amax() < 1e-6);
        }
    }

    #[test]
    fn avoids_keepout_and_rolls_exactly() {
        // goal behind an ellipsoid blocking the straight line
        let model = Cart { dt: 0.5 };
        let horizon = 8;
        let cost = CartCost {
            goal: 2.0,
            horizon,
        };
        let x0 = DVector::from_row_slice(&[0.0, 0.0]);
        // keep-out interval around position 1.0 at steps 3..=5
        let beliefs = vec![];
        let _ = beliefs as Vec<Vec<crate::beliefs::GaussianBelief>>;
        let mut cells = Vec::new();
        for t in 1..=horizon {
            if (3..=5).contains(&t) {
                cells.push(
                    KeepOutEllipsoid::new(
                        DVector::from_row_slice(&[1.0]),
                        DMatrix::from_row_slice(1, 1, &[0.04]),
                        0,
                        t,
                    )
                    .unwrap(),
                );
            } else {
                cells.push(KeepOutEllipsoid::vacuous(1, 0, t));
            }
        }
        let grid = KeepOutGrid::from_cells_for_tests(cells, 1, horizon);
        let problem = PlanningProblem {
            model: &model,
            cost: &cost,
            x0: x0.clone(),
            horizon,
            settings: SqpSettings::default(),
        };
        let init = initial_iterate(&model, &x0, &DVector::from_row_slice(&[2.0]), horizon);
        let result = sqp_solve(&problem, &grid, &init).unwrap();
        assert_ne!(result.status, SqpStatus::InfeasibleSoft);
        assert!(result.min_constraint_value >= 1.0 - 1e-6);
        // re-rolled feasibility: states reproduce the rollout exactly
        let rolled = rollout(&model, &x0, &result.iterate.inputs);
        for (a, b) in result.iterate.states.iter().zip(&rolled) {
            assert_eq!(a, b);
        }
        // monotone merit along the accepted trace
        let w = problem.settings.slack_weight;
        let mut prev = f64::INFINITY;
        for tr in &result.trace {
            let merit = tr.objective + w * tr.true_violation;
            assert!(merit <= prev + 1e-9, "merit increased: {merit} > {prev}");
            prev = merit;
        }
    }

    #[test]
    fn qp_row_counts_match_grid() {
        let model = Cart { dt: 0.5 };
        let horizon = 6;
        let cost = CartCost {
            goal: 1.0,
            horizon,
        };
        let x0 = DVector::zeros(2);
        let mut cells = Vec::new();
        for t in 1..=horizon {
            if t <= 2 {
                cells.push(
                    KeepOutEllipsoid::new(
                        DVector::from_row_slice(&[0.5]),
                        DMatrix::from_row_slice(1, 1, &[0.01]),
                        0,
                        t,
                    )
                    .unwrap(),
                );
            } else {
                cells.push(KeepOutEllipsoid::vacuous(1, 0, t));
            }
        }
        let grid = KeepOutGrid::from_cells_for_tests(cells, 1, horizon);
        let init = initial_iterate(&model, &x0, &DVector::from_row_slice(&[1.0]), horizon);
        let qp = assemble_qp(&model, &grid, &init, &cost, 1e4).unwrap();
        // decision: 6*(2+1) + 2 slacks
        assert_eq!(qp.num_vars(), 20);
        assert_eq!(qp.num_eq(), 12);
        // 2 keepout + 2 slack nonneg + 2*6 input box + 2*6 position box
        assert_eq!(qp.num_in(), 28);
        let keepout_rows = qp
            .in_tags
            .iter()
            .filter(|t| matches!(t, ConstraintTag::KeepOut { .. }))
            .count();
        assert_eq!(keepout_rows, 2);
    }
}
