//! Concrete robot dynamics and cost models for the bundled scenarios.

use crate::sqp::{CostModel, RobotModel, StackLayout};
use crate::{cst, Error, Result, Scalar};
use nalgebra::{DMatrix, DVector};

/// Wrap an angle to `(-pi, pi]`.
pub fn wrap_angle<S: Scalar>(a: S) -> S {
    let pi = S::pi();
    let two_pi = S::two_pi();
    let mut w = a - two_pi * ((a + pi) / two_pi).floor();
    if w <= -pi {
        w += two_pi;
    }
    w
}

/// 3-D double integrator: `x = [p, v]`, acceleration input with an inf-norm
/// bound. Discretized exactly:
///
/// ```text
/// A = [I3 dt*I3; 0 I3],  B = [dt^2/2*I3; dt*I3]
/// ```
#[derive(Debug, Clone)]
pub struct DoubleIntegrator3D<S: Scalar = f64> {
    pub dt: S,
    pub u_max: S,
    pub pos_lo: DVector<S>,
    pub pos_hi: DVector<S>,
}

impl<S: Scalar> DoubleIntegrator3D<S> {
    pub fn new(dt: S, u_max: S, pos_lo: DVector<S>, pos_hi: DVector<S>) -> Result<Self> {
        if dt <= S::zero() || u_max <= S::zero() {
            return Err(Error::Config("dt and u_max must be positive".into()));
        }
        if pos_lo.len() != 3 || pos_hi.len() != 3 {
            return Err(Error::Config("safe box must be 3-D".into()));
        }
        Ok(Self {
            dt,
            u_max,
            pos_lo,
            pos_hi,
        })
    }

    pub fn a_matrix(&self) -> DMatrix<S> {
        let mut a = DMatrix::identity(6, 6);
        for i in 0..3 {
            a[(i, i + 3)] = self.dt;
        }
        a
    }

    pub fn b_matrix(&self) -> DMatrix<S> {
        let mut b = DMatrix::zeros(6, 3);
        let half_dt2 = self.dt * self.dt * cst::<S>(0.5);
        for i in 0..3 {
            b[(i, i)] = half_dt2;
            b[(i + 3, i)] = self.dt;
        }
        b
    }
}

impl<S: Scalar> RobotModel<S> for DoubleIntegrator3D<S> {
    fn state_dim(&self) -> usize {
        6
    }
    fn input_dim(&self) -> usize {
        3
    }
    fn position_dim(&self) -> usize {
        3
    }
    fn position_map(&self) -> DMatrix<S> {
        let mut m = DMatrix::zeros(3, 6);
        for i in 0..3 {
            m[(i, i)] = S::one();
        }
        m
    }
    fn step(&self, x: &DVector<S>, u: &DVector<S>) -> DVector<S> {
        self.a_matrix() * x + self.b_matrix() * u
    }
    fn jacobian(&self, _x: &DVector<S>, _u: &DVector<S>) -> DMatrix<S> {
        let mut j = DMatrix::zeros(6, 9);
        j.view_mut((0, 0), (6, 6)).copy_from(&self.a_matrix());
        j.view_mut((0, 6), (6, 3)).copy_from(&self.b_matrix());
        j
    }
    fn input_bounds(&self) -> (DVector<S>, DVector<S>) {
        (
            DVector::from_element(3, -self.u_max),
            DVector::from_element(3, self.u_max),
        )
    }
    fn position_bounds(&self) -> (DVector<S>, DVector<S>) {
        (self.pos_lo.clone(), self.pos_hi.clone())
    }
    fn is_linear(&self) -> bool {
        true
    }
    fn lift_position_path(&self, x0: &DVector<S>, path: &[DVector<S>]) -> Vec<DVector<S>> {
        // velocities from consecutive position differences
        let mut out = Vec::with_capacity(path.len());
        let mut prev = DVector::from_fn(3, |i, _| x0[i]);
        for p in path {
            let mut x = DVector::zeros(6);
            for i in 0..3 {
                x[i] = p[i];
                x[i + 3] = (p[i] - prev[i]) / self.dt;
            }
            prev = p.clone();
            out.push(x);
        }
        out
    }
}

/// Planar Dubins vehicle with state `(x1, x2, theta)` and inputs `(v, omega)`:
///
/// ```text
/// x[t+1]     = x[t] + dt [v cos(theta); v sin(theta)]
/// theta[t+1] = theta[t] + dt omega
/// ```
///
/// The trait's `step` leaves the heading unwrapped so the SQP sees smooth
/// Jacobians within a cycle; [`dubins_step`] wraps and is what execution
/// uses.
#[derive(Debug, Clone)]
pub struct DubinsVehicle<S: Scalar = f64> {
    pub dt: S,
    pub v_min: S,
    pub v_max: S,
    pub omega_min: S,
    pub omega_max: S,
    /// full camera viewing angle; visibility uses the half-angle
    pub theta_v: S,
    pub pos_lo: DVector<S>,
    pub pos_hi: DVector<S>,
}

impl<S: Scalar> DubinsVehicle<S> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        dt: S,
        v_min: S,
        v_max: S,
        omega_min: S,
        omega_max: S,
        theta_v: S,
        pos_lo: DVector<S>,
        pos_hi: DVector<S>,
    ) -> Result<Self> {
        if v_min <= S::zero() {
            return Err(Error::Config("v_min must be positive".into()));
        }
        if v_max < v_min || omega_max < omega_min {
            return Err(Error::Config("input boxes are empty".into()));
        }
        if dt <= S::zero() || theta_v <= S::zero() {
            return Err(Error::Config("dt and theta_v must be positive".into()));
        }
        if pos_lo.len() != 2 || pos_hi.len() != 2 {
            return Err(Error::Config("safe box must be 2-D".into()));
        }
        Ok(Self {
            dt,
            v_min,
            v_max,
            omega_min,
            omega_max,
            theta_v,
            pos_lo,
            pos_hi,
        })
    }
}

impl<S: Scalar> RobotModel<S> for DubinsVehicle<S> {
    fn state_dim(&self) -> usize {
        3
    }
    fn input_dim(&self) -> usize {
        2
    }
    fn position_dim(&self) -> usize {
        2
    }
    fn position_map(&self) -> DMatrix<S> {
        let mut m = DMatrix::zeros(2, 3);
        m[(0, 0)] = S::one();
        m[(1, 1)] = S::one();
        m
    }
    fn step(&self, x: &DVector<S>, u: &DVector<S>) -> DVector<S> {
        let (v, omega) = (u[0], u[1]);
        DVector::from_row_slice(&[
            x[0] + self.dt * v * x[2].cos(),
            x[1] + self.dt * v * x[2].sin(),
            x[2] + self.dt * omega,
        ])
    }
    fn jacobian(&self, x: &DVector<S>, u: &DVector<S>) -> DMatrix<S> {
        let (v, theta) = (u[0], x[2]);
        let (s, c) = (theta.sin(), theta.cos());
        let mut j = DMatrix::zeros(3, 5);
        j[(0, 0)] = S::one();
        j[(0, 2)] = -self.dt * v * s;
        j[(0, 3)] = self.dt * c;
        j[(1, 1)] = S::one();
        j[(1, 2)] = self.dt * v * c;
        j[(1, 3)] = self.dt * s;
        j[(2, 2)] = S::one();
        j[(2, 4)] = self.dt;
        j
    }
    fn input_bounds(&self) -> (DVector<S>, DVector<S>) {
        (
            DVector::from_row_slice(&[self.v_min, self.omega_min]),
            DVector::from_row_slice(&[self.v_max, self.omega_max]),
        )
    }
    fn position_bounds(&self) -> (DVector<S>, DVector<S>) {
        (self.pos_lo.clone(), self.pos_hi.clone())
    }
    fn lift_position_path(&self, x0: &DVector<S>, path: &[DVector<S>]) -> Vec<DVector<S>> {
        // heading follows the segment bearings
        let mut out = Vec::with_capacity(path.len());
        let mut prev = DVector::from_row_slice(&[x0[0], x0[1]]);
        let mut theta = x0[2];
        for p in path {
            let dx = p[0] - prev[0];
            let dy = p[1] - prev[1];
            if dx.abs() + dy.abs() > cst::<S>(1e-12) {
                theta = dy.atan2(dx);
            }
            out.push(DVector::from_row_slice(&[p[0], p[1], theta]));
            prev = p.clone();
        }
        out
    }
}

/// Exact Euler step of the Dubins dynamics with the heading wrapped to
/// `(-pi, pi]`; the form executed on the vehicle.
pub fn dubins_step<S: Scalar>(state: &DVector<S>, v: S, omega: S, dt: S) -> DVector<S> {
    DVector::from_row_slice(&[
        state[0] + dt * v * state[2].cos(),
        state[1] + dt * v * state[2].sin(),
        wrap_angle(state[2] + dt * omega),
    ])
}

/// `beta * gamma_hat^t * <target - pos, (cos theta, sin theta)>` and its
/// gradient with respect to `(pos_x, pos_y, theta)`.
pub fn attention_term<S: Scalar>(
    pos: &DVector<S>,
    theta: S,
    target: &DVector<S>,
    beta: S,
    gamma_hat: S,
    t: usize,
) -> (S, DVector<S>) {
    let w = beta * gamma_hat.powi(t as i32);
    let (s, c) = (theta.sin(), theta.cos());
    let dx = target[0] - pos[0];
    let dy = target[1] - pos[1];
    let value = w * (dx * c + dy * s);
    let grad = DVector::from_row_slice(&[-w * c, -w * s, w * (-dx * s + dy * c)]);
    (value, grad)
}

/// True iff the target lies within the forward cone of half-angle
/// `theta_v / 2` around the heading.
pub fn in_field_of_view<S: Scalar>(state: &DVector<S>, target_pos: &DVector<S>, theta_v: S) -> bool {
    let bearing = (target_pos[1] - state[1]).atan2(target_pos[0] - state[0]);
    wrap_angle(bearing - state[2]).abs() <= theta_v * cst::<S>(0.5)
}

/// Quadratic goal-tracking cost `sum_t (x[t] - x_ref)' W (x[t] - x_ref)`
/// over the decision knots `t = 1..=T`, with a diagonal weight selecting the
/// penalized coordinates.
#[derive(Debug, Clone)]
pub struct GoalCost<S: Scalar = f64> {
    pub x_ref: DVector<S>,
    /// per-coordinate weights; 0 leaves a coordinate (e.g. heading) free
    pub weights: DVector<S>,
    pub layout: StackLayout,
    /// diagonal regularization of the Hessian surrogate
    pub reg: S,
}

impl<S: Scalar> GoalCost<S> {
    /// Full-state goal for the double integrator: position target with zero
    /// target velocity, both penalized.
    pub fn for_integrator(goal_pos: &DVector<S>, horizon: usize) -> Self {
        let mut x_ref = DVector::zeros(6);
        for i in 0..3 {
            x_ref[i] = goal_pos[i];
        }
        Self {
            x_ref,
            weights: DVector::from_element(6, S::one()),
            layout: StackLayout {
                n_x: 6,
                n_u: 3,
                horizon,
            },
            reg: cst(1e-8),
        }
    }

    /// Position goal for the Dubins vehicle; the heading is unweighted.
    pub fn for_dubins(goal_pos: &DVector<S>, horizon: usize) -> Self {
        Self {
            x_ref: DVector::from_row_slice(&[goal_pos[0], goal_pos[1], S::zero()]),
            weights: DVector::from_row_slice(&[S::one(), S::one(), S::zero()]),
            layout: StackLayout {
                n_x: 3,
                n_u: 2,
                horizon,
            },
            reg: cst(1e-8),
        }
    }
}

impl<S: Scalar> CostModel<S> for GoalCost<S> {
    fn value(&self, states: &[DVector<S>], _inputs: &[DVector<S>]) -> S {
        let mut acc = S::zero();
        for x in &states[1..] {
            for i in 0..self.layout.n_x {
                let d = x[i] - self.x_ref[i];
                acc += self.weights[i] * d * d;
            }
        }
        acc
    }

    fn gradient(&self, states: &[DVector<S>], _inputs: &[DVector<S>]) -> DVector<S> {
        let mut g = DVector::zeros(self.layout.xu_dim());
        for t in 1..=self.layout.horizon {
            let off = self.layout.x_offset(t);
            for i in 0..self.layout.n_x {
                g[off + i] = cst::<S>(2.0) * self.weights[i] * (states[t][i] - self.x_ref[i]);
            }
        }
        g
    }

    fn hessian(&self, _states: &[DVector<S>], _inputs: &[DVector<S>]) -> DMatrix<S> {
        let d = self.layout.xu_dim();
        let mut m = DMatrix::zeros(d, d);
        for t in 1..=self.layout.horizon {
            let off = self.layout.x_offset(t);
            for i in 0..self.layout.n_x {
                m[(off + i, off + i)] = self.weights[i];
            }
        }
        for i in 0..d {
            m[(i, i)] += self.reg;
        }
        m
    }
}

/// Goal cost plus a discounted heading-alignment term toward the currently
/// most relevant obstacle (Dubins state layout `(x, y, theta)`):
///
/// `sum_t sign * beta * gamma_hat^t <mu_r[t] - p[t], u_theta[t]>`
///
/// Alignment is rewarded (`sign = -1`) by default; `reward_sign = false`
/// restores the additive form.
#[derive(Debug, Clone)]
pub struct AttentionCost<S: Scalar = f64> {
    pub base: GoalCost<S>,
    pub beta: S,
    pub gamma_hat: S,
    /// predicted target means, entry `t-1` for horizon step `t`
    pub target_means: Vec<DVector<S>>,
    pub active: bool,
    pub reward_sign: bool,
    /// extra Hessian regularization covering the bilinear term
    pub attention_reg: S,
}

impl<S: Scalar> AttentionCost<S> {
    pub fn inactive(base: GoalCost<S>, beta: S, gamma_hat: S) -> Self {
        Self {
            base,
            beta,
            gamma_hat,
            target_means: Vec::new(),
            active: false,
            reward_sign: true,
            attention_reg: cst(1e-6),
        }
    }

    pub fn with_target(mut self, target_means: Vec<DVector<S>>) -> Self {
        self.active = !target_means.is_empty();
        self.target_means = target_means;
        self
    }

    fn sign(&self) -> S {
        if self.reward_sign {
            -S::one()
        } else {
            S::one()
        }
    }
}

impl<S: Scalar> CostModel<S> for AttentionCost<S> {
    fn value(&self, states: &[DVector<S>], inputs: &[DVector<S>]) -> S {
        let mut acc = self.base.value(states, inputs);
        if self.active {
            let sign = self.sign();
            for t in 1..=self.base.layout.horizon {
                let x = &states[t];
                let pos = DVector::from_row_slice(&[x[0], x[1]]);
                let (term, _) = attention_term(
                    &pos,
                    x[2],
                    &self.target_means[t - 1],
                    self.beta,
                    self.gamma_hat,
                    t,
                );
                acc += sign * term;
            }
        }
        acc
    }

    fn gradient(&self, states: &[DVector<S>], inputs: &[DVector<S>]) -> DVector<S> {
        let mut g = self.base.gradient(states, inputs);
        if self.active {
            let sign = self.sign();
            for t in 1..=self.base.layout.horizon {
                let x = &states[t];
                let pos = DVector::from_row_slice(&[x[0], x[1]]);
                let (_, grad) = attention_term(
                    &pos,
                    x[2],
                    &self.target_means[t - 1],
                    self.beta,
                    self.gamma_hat,
                    t,
                );
                let off = self.base.layout.x_offset(t);
                for i in 0..3 {
                    g[off + i] += sign * grad[i];
                }
            }
        }
        g
    }

    fn hessian(&self, states: &[DVector<S>], inputs: &[DVector<S>]) -> DMatrix<S> {
        // Gauss-Newton surrogate of the bilinear term is zero; keep the goal
        // Hessian and regularize
        let mut m = self.base.hessian(states, inputs);
        if self.active {
            for i in 0..m.nrows() {
                m[(i, i)] += self.attention_reg;
            }
        }
        m
    }
}
