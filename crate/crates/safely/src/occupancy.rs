//! Risk-allocated keep-out ellipsoids.
//!
//! The joint chance constraint (collision probability over all obstacles and
//! horizon steps at most `alpha`) is enforced through a union bound: each
//! obstacle/time pair gets a risk slice `alpha/(T*N_O)`, and the set of robot
//! positions whose occupancy probability exceeds that slice is bounded by an
//! ellipsoid. Staying outside every ellipsoid is sufficient for the joint
//! bound. The construction is tight along a chosen unit direction `l0`.

use crate::beliefs::{GaussianBelief, ObstacleModel};
use crate::{as_f64, cst, Error, Result, Scalar};
use nalgebra::{DMatrix, DVector};

/// Covariance regularization used when a singular (e.g. zero) covariance is
/// supplied to [`q_matrix`].
const COV_REG: f64 = 1e-9;

/// Joint risk bound and its allocation over the constraint grid.
#[derive(Debug, Clone, Copy)]
pub struct RiskBudget<S: Scalar = f64> {
    pub alpha: S,
    pub horizon: usize,
    pub num_obstacles: usize,
}

impl<S: Scalar> RiskBudget<S> {
    pub fn new(alpha: S, horizon: usize, num_obstacles: usize) -> Result<Self> {
        if alpha <= S::zero() || alpha > S::one() {
            return Err(Error::Config("alpha must be in (0, 1]".into()));
        }
        if horizon == 0 {
            return Err(Error::Config("horizon must be positive".into()));
        }
        let budget = Self {
            alpha,
            horizon,
            num_obstacles,
        };
        if num_obstacles > 0 {
            let per = budget.per_constraint();
            if per <= S::zero() || per >= S::one() {
                return Err(Error::Config("per-constraint risk must be in (0, 1)".into()));
            }
        }
        Ok(budget)
    }

    /// Boole allocation `alpha / (T * N_O)`.
    pub fn per_constraint(&self) -> S {
        self.alpha / cst::<S>((self.horizon * self.num_obstacles) as f64)
    }
}

/// One keep-out ellipsoid: the robot position must satisfy
/// `(x - center)^T shape^-1 (x - center) >= 1`.
///
/// `vacuous` marks pairs whose allocated risk exceeds the peak occupancy, so
/// no constraint is needed there.
#[derive(Debug, Clone)]
pub struct KeepOutEllipsoid<S: Scalar = f64> {
    pub center: DVector<S>,
    /// `Q+`, symmetric positive definite when non-vacuous
    pub shape: DMatrix<S>,
    /// cached inverse of `shape` (zero matrix when vacuous)
    shape_inv: DMatrix<S>,
    pub obstacle_id: usize,
    pub time_index: usize,
    pub vacuous: bool,
}

impl<S: Scalar> KeepOutEllipsoid<S> {
    pub fn new(
        center: DVector<S>,
        shape: DMatrix<S>,
        obstacle_id: usize,
        time_index: usize,
    ) -> Result<Self> {
        let n = center.len();
        if shape.nrows() != n || shape.ncols() != n {
            return Err(Error::Config("ellipsoid shape/center dimensions differ".into()));
        }
        let shape_inv = shape.clone().cholesky().map(|c| c.inverse()).ok_or_else(|| {
            Error::Config("keep-out shape matrix must be positive definite".into())
        })?;
        Ok(Self {
            center,
            shape,
            shape_inv,
            obstacle_id,
            time_index,
            vacuous: false,
        })
    }

    pub fn vacuous(dim: usize, obstacle_id: usize, time_index: usize) -> Self {
        Self {
            center: DVector::zeros(dim),
            shape: DMatrix::zeros(dim, dim),
            shape_inv: DMatrix::zeros(dim, dim),
            obstacle_id,
            time_index,
            vacuous: true,
        }
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    /// `shape^-1 * v`
    pub fn inv_mul(&self, v: &DVector<S>) -> DVector<S> {
        &self.shape_inv * v
    }
}

/// Volume of the n-dimensional Euclidean ball of radius `r`:
/// `pi^(n/2) r^n / Gamma(n/2 + 1)`, evaluated in closed form.
pub fn unit_ball_volume(n: usize, r: f64) -> Result<f64> {
    if n == 0 {
        return Err(Error::Config("ball dimension must be at least 1".into()));
    }
    if r <= 0.0 {
        return Err(Error::Config("ball radius must be positive".into()));
    }
    let vol = if n % 2 == 0 {
        // pi^k r^n / k!
        let k = n / 2;
        let mut v = r.powi(n as i32);
        for i in 1..=k {
            v *= std::f64::consts::PI / i as f64;
        }
        v
    } else {
        // pi^((n-1)/2) r^n 2^m / (2m-1)!!  with m = (n+1)/2
        let m = (n + 1) / 2;
        let mut v = r.powi(n as i32) * 2f64.powi(m as i32);
        for _ in 1..m {
            v *= std::f64::consts::PI;
        }
        let mut dfact = 1.0;
        let mut i = 2 * m - 1;
        while i > 1 {
            dfact *= i as f64;
            i -= 2;
        }
        v / dfact
    };
    Ok(vol)
}

/// Gaussian superlevel-set shape matrix:
///
/// `Q = -2 log( risk * sqrt(det(2 pi Sigma)) / Vol(Ball(0, r_o)) ) * Sigma`
///
/// Returns `None` (vacuous) when the log argument is >= 1; then the
/// allocated risk exceeds the obstacle's peak occupancy and no constraint is
/// required. A singular covariance is regularized with `1e-9 * I` first.
pub fn q_matrix<S: Scalar>(
    belief: &GaussianBelief<S>,
    budget: &RiskBudget<S>,
    r_o: S,
) -> Result<Option<DMatrix<S>>> {
    let n = belief.dim();
    let mut sigma = belief.cov.clone();
    let chol = match sigma.clone().cholesky() {
        Some(c) => c,
        None => {
            for i in 0..n {
                sigma[(i, i)] += cst::<S>(COV_REG);
            }
            sigma.clone().cholesky().ok_or_else(|| {
                Error::Config("obstacle covariance is not positive semidefinite".into())
            })?
        }
    };
    // det(2 pi Sigma) = (2 pi)^n det(Sigma); det from the Cholesky diagonal
    let mut sqrt_det = S::one();
    for i in 0..n {
        sqrt_det *= chol.l()[(i, i)];
    }
    let two_pi_pow = cst::<S>((2.0 * std::f64::consts::PI).powi(n as i32)).sqrt();
    let volume = cst::<S>(unit_ball_volume(n, as_f64(r_o))?);
    let arg = budget.per_constraint() * two_pi_pow * sqrt_det / volume;
    if arg >= S::one() {
        return Ok(None);
    }
    let scale = -(cst::<S>(2.0)) * arg.ln();
    Ok(Some(sigma * scale))
}

/// Tight ellipsoidal cover of the Minkowski sum of the `Q`-ellipsoid and the
/// body ball of radius `r_o`, exact along the unit direction `l0`:
///
/// `Q+ = (sqrt(l0' Q l0) + r_o) (Q / sqrt(l0' Q l0) + r_o I)`
pub fn q_plus_matrix<S: Scalar>(q: &DMatrix<S>, r_o: S, l0: &DVector<S>) -> Result<DMatrix<S>> {
    let n = q.nrows();
    if l0.len() != n {
        return Err(Error::Config("l0 dimension does not match Q".into()));
    }
    if (l0.norm() - S::one()).abs() > cst::<S>(1e-6) {
        return Err(Error::Config("l0 must be a unit vector".into()));
    }
    let support = l0.dot(&(q * l0));
    if support <= S::zero() {
        return Err(Error::Config("Q must be positive definite along l0".into()));
    }
    let s = support.sqrt();
    let mut q_plus = q * ((s + r_o) / s);
    for i in 0..n {
        q_plus[(i, i)] += (s + r_o) * r_o;
    }
    crate::linalg::symmetrize(&mut q_plus);
    Ok(q_plus)
}

/// Rule for choosing the tightness direction `l0` of each ellipsoid.
#[derive(Debug, Clone)]
pub enum L0Policy<S: Scalar = f64> {
    /// Leading eigenvector of `Q` (the direction of maximum uncertainty),
    /// tight where the over-approximation would otherwise be loosest.
    LeadingEigenvector,
    /// Unit vector from the obstacle mean toward the robot's reference
    /// position at the matching horizon step (entry `t-1` of the vector).
    /// Falls back to the leading eigenvector for degenerate geometry.
    TowardRobot(Vec<DVector<S>>),
}

impl<S: Scalar> L0Policy<S> {
    fn direction(&self, sigma: &DMatrix<S>, center: &DVector<S>, t_index: usize) -> DVector<S> {
        if let L0Policy::TowardRobot(path) = self {
            if let Some(p) = path.get(t_index) {
                let dir = p - center;
                let norm = dir.norm();
                if norm > cst::<S>(1e-12) {
                    return dir / norm;
                }
            }
        }
        leading_eigenvector(sigma)
    }
}

/// Q is a positive multiple of Sigma, so Sigma's leading eigenvector works
/// for both. Sign-normalized for determinism.
fn leading_eigenvector<S: Scalar>(sigma: &DMatrix<S>) -> DVector<S> {
    let eig = sigma.clone().symmetric_eigen();
    let mut best = 0;
    for i in 1..eig.eigenvalues.len() {
        if eig.eigenvalues[i] > eig.eigenvalues[best] {
            best = i;
        }
    }
    let mut v: DVector<S> = eig.eigenvectors.column(best).into();
    let norm = v.norm();
    if norm <= S::zero() {
        let mut e = DVector::zeros(sigma.nrows());
        e[0] = S::one();
        return e;
    }
    v /= norm;
    for i in 0..v.len() {
        if v[i].abs() > cst::<S>(1e-9) {
            if v[i] < S::zero() {
                v = -v;
            }
            break;
        }
    }
    v
}

/// Dense `N_O x T` grid of keep-out ellipsoids for one planning cycle.
#[derive(Debug, Clone)]
pub struct KeepOutGrid<S: Scalar = f64> {
    cells: Vec<KeepOutEllipsoid<S>>,
    pub num_obstacles: usize,
    pub horizon: usize,
}

impl<S: Scalar> KeepOutGrid<S> {
    /// Assemble a grid from explicit cells (row-major over obstacles, then
    /// horizon steps). Cells must carry matching ids/time indices.
    pub fn from_cells(
        cells: Vec<KeepOutEllipsoid<S>>,
        num_obstacles: usize,
        horizon: usize,
    ) -> Result<Self> {
        if cells.len() != num_obstacles * horizon {
            return Err(Error::Config("keep-out cell count does not match grid shape".into()));
        }
        for (k, c) in cells.iter().enumerate() {
            if c.obstacle_id != k / horizon || c.time_index != k % horizon + 1 {
                return Err(Error::Config(format!("keep-out cell {} mislabeled", k)));
            }
        }
        Ok(Self {
            cells,
            num_obstacles,
            horizon,
        })
    }

    #[cfg(test)]
    pub(crate) fn from_cells_for_tests(
        cells: Vec<KeepOutEllipsoid<S>>,
        num_obstacles: usize,
        horizon: usize,
    ) -> Self {
        Self::from_cells(cells, num_obstacles, horizon).unwrap()
    }

    /// Ellipsoid for obstacle `o` at horizon step `t` (1-based, `1..=T`).
    pub fn at(&self, o: usize, t: usize) -> &KeepOutEllipsoid<S> {
        debug_assert!(t >= 1 && t <= self.horizon);
        &self.cells[o * self.horizon + (t - 1)]
    }

    pub fn iter(&self) -> impl Iterator<Item = &KeepOutEllipsoid<S>> {
        self.cells.iter()
    }

    pub fn num_nonvacuous(&self) -> usize {
        self.cells.iter().filter(|e| !e.vacuous).count()
    }
}

/// Build the keep-out grid from per-obstacle horizon beliefs.
///
/// `beliefs[o][j]` is the belief of obstacle `o` at horizon step `j+1`.
pub fn build_keepouts<S: Scalar>(
    beliefs: &[Vec<GaussianBelief<S>>],
    budget: &RiskBudget<S>,
    models: &[ObstacleModel<S>],
    l0_policy: &L0Policy<S>,
) -> Result<KeepOutGrid<S>> {
    if beliefs.len() != models.len() || beliefs.len() != budget.num_obstacles {
        return Err(Error::Config(format!(
            "obstacle counts disagree: {} belief rows, {} models, budget expects {}",
            beliefs.len(),
            models.len(),
            budget.num_obstacles
        )));
    }
    let horizon = budget.horizon;
    let mut cells = Vec::with_capacity(models.len() * horizon);
    for (o, (row, model)) in beliefs.iter().zip(models).enumerate() {
        if row.len() != horizon {
            return Err(Error::Config(format!(
                "obstacle {} has {} horizon beliefs, expected {}",
                o,
                row.len(),
                horizon
            )));
        }
        for (j, belief) in row.iter().enumerate() {
            let cell = match q_matrix(belief, budget, model.radius)? {
                None => KeepOutEllipsoid::vacuous(belief.dim(), o, j + 1),
                Some(q) => {
                    let l0 = l0_policy.direction(&belief.cov, &belief.mean, j);
                    let q_plus = q_plus_matrix(&q, model.radius, &l0)?;
                    KeepOutEllipsoid::new(belief.mean.clone(), q_plus, o, j + 1)?
                }
            };
            cells.push(cell);
        }
    }
    Ok(KeepOutGrid {
        cells,
        num_obstacles: models.len(),
        horizon,
    })
}

/// Quadratic form `(x - center)^T shape^-1 (x - center)`; values >= 1 are
/// safe. A vacuous ellipsoid is always safe (returns +infinity).
pub fn constraint_value<S: Scalar>(e: &KeepOutEllipsoid<S>, x_pos: &DVector<S>) -> S {
    if e.vacuous {
        return cst::<S>(f64::INFINITY);
    }
    let d = x_pos - &e.center;
    d.dot(&e.inv_mul(&d))
}
