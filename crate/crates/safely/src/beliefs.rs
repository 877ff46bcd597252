//! Gaussian obstacle beliefs: open-loop horizon propagation and Kalman
//! measurement updates.
//!
//! Each obstacle follows known stochastic linear dynamics
//! `x[t+1] = A x[t] + B w[t]`, `w ~ N(mu_w, Sigma_w)`. Between measurements
//! the belief propagates in closed form; a measurement through the linear
//! sensor model triggers the standard Kalman correction. All types are
//! immutable values and all operations are pure functions.

use crate::linalg::{min_eigenvalue, symmetrize};
use crate::{cst, Error, Result, Scalar};
use nalgebra::{DMatrix, DVector};

/// Eigenvalues of a covariance may dip this far below zero before the
/// matrix is rejected as indefinite.
const PSD_TOL: f64 = 1e-10;

/// Known stochastic linear dynamics of one obstacle.
#[derive(Debug, Clone)]
pub struct ObstacleModel<S: Scalar = f64> {
    /// n x n state transition
    pub a: DMatrix<S>,
    /// n x p disturbance input map
    pub b: DMatrix<S>,
    /// p-vector disturbance mean
    pub mu_w: DVector<S>,
    /// p x p disturbance covariance (symmetric PSD)
    pub sigma_w: DMatrix<S>,
    /// combined robot+obstacle body radius (meters); the keep-out padding
    pub radius: S,
    /// optional label used by the simulator's bookkeeping
    pub color_tag: Option<String>,
}

impl<S: Scalar> ObstacleModel<S> {
    pub fn new(
        a: DMatrix<S>,
        b: DMatrix<S>,
        mu_w: DVector<S>,
        sigma_w: DMatrix<S>,
        radius: S,
    ) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n {
            return Err(Error::Config(format!("A must be square, got {}x{}", n, a.ncols())));
        }
        if b.nrows() != n {
            return Err(Error::Config(format!(
                "B has {} rows but the state dimension is {}",
                b.nrows(),
                n
            )));
        }
        let p = b.ncols();
        if mu_w.len() != p || sigma_w.nrows() != p || sigma_w.ncols() != p {
            return Err(Error::Config(format!(
                "disturbance dimensions inconsistent: B is {}x{}, mu_w {}, Sigma_w {}x{}",
                n,
                p,
                mu_w.len(),
                sigma_w.nrows(),
                sigma_w.ncols()
            )));
        }
        let mut sigma_w = sigma_w;
        symmetrize(&mut sigma_w);
        if min_eigenvalue(&sigma_w) < cst::<S>(-PSD_TOL) {
            return Err(Error::Config("Sigma_w is not positive semidefinite".into()));
        }
        if radius <= S::zero() {
            return Err(Error::Config("obstacle radius must be positive".into()));
        }
        Ok(Self {
            a,
            b,
            mu_w,
            sigma_w,
            radius,
            color_tag: None,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    /// `B Sigma_w B^T`, the per-step covariance growth.
    pub fn process_noise(&self) -> DMatrix<S> {
        &self.b * &self.sigma_w * self.b.transpose()
    }
}

/// Mean/covariance pair describing one obstacle's state at one time.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianBelief<S: Scalar = f64> {
    pub mean: DVector<S>,
    pub cov: DMatrix<S>,
}

impl<S: Scalar> GaussianBelief<S> {
    /// Build a belief, symmetrizing the covariance and rejecting indefinite
    /// input (eigenvalues below -1e-10).
    pub fn new(mean: DVector<S>, cov: DMatrix<S>) -> Result<Self> {
        let n = mean.len();
        if cov.nrows() != n || cov.ncols() != n {
            return Err(Error::Config(format!(
                "covariance {}x{} does not match mean dimension {}",
                cov.nrows(),
                cov.ncols(),
                n
            )));
        }
        let mut cov = cov;
        symmetrize(&mut cov);
        if min_eigenvalue(&cov) < cst::<S>(-PSD_TOL) {
            return Err(Error::Config("covariance is not positive semidefinite".into()));
        }
        Ok(Self { mean, cov })
    }

    /// Point belief with zero covariance.
    pub fn dirac(mean: DVector<S>) -> Self {
        let n = mean.len();
        Self {
            mean,
            cov: DMatrix::zeros(n, n),
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Linear sensor model `z = H x + nu`, `nu ~ N(mu_nu, Sigma_nu)`.
#[derive(Debug, Clone)]
pub struct SensorModel<S: Scalar = f64> {
    pub h: DMatrix<S>,
    pub mu_nu: DVector<S>,
    pub sigma_nu: DMatrix<S>,
}

impl<S: Scalar> SensorModel<S> {
    /// `mu_nu` must be zero; use [`SensorModel::with_bias`] to override for
    /// testing.
    pub fn new(h: DMatrix<S>, sigma_nu: DMatrix<S>) -> Result<Self> {
        let mu_nu = DVector::zeros(h.nrows());
        Self::build(h, mu_nu, sigma_nu, false)
    }

    /// Sensor with a nonzero noise mean, for tests that need bias.
    pub fn with_bias(h: DMatrix<S>, mu_nu: DVector<S>, sigma_nu: DMatrix<S>) -> Result<Self> {
        Self::build(h, mu_nu, sigma_nu, true)
    }

    fn build(
        h: DMatrix<S>,
        mu_nu: DVector<S>,
        sigma_nu: DMatrix<S>,
        allow_bias: bool,
    ) -> Result<Self> {
        let q = h.nrows();
        if mu_nu.len() != q || sigma_nu.nrows() != q || sigma_nu.ncols() != q {
            return Err(Error::Config("sensor noise dimensions inconsistent with H".into()));
        }
        if !allow_bias && mu_nu.iter().any(|v| *v != S::zero()) {
            return Err(Error::Config("sensor noise mean must be zero".into()));
        }
        let mut sigma_nu = sigma_nu;
        symmetrize(&mut sigma_nu);
        if sigma_nu.clone().cholesky().is_none() {
            return Err(Error::Config("Sigma_nu must be positive definite".into()));
        }
        Ok(Self { h, mu_nu, sigma_nu })
    }

    pub fn obs_dim(&self) -> usize {
        self.h.nrows()
    }
}

/// One-step open-loop prediction:
/// `mean' = A mean + B mu_w`, `cov' = A cov A^T + B Sigma_w B^T`.
pub fn predict_step<S: Scalar>(
    belief: &GaussianBelief<S>,
    model: &ObstacleModel<S>,
) -> Result<GaussianBelief<S>> {
    if belief.dim() != model.state_dim() {
        return Err(Error::Config(format!(
            "belief dimension {} does not match obstacle state dimension {}",
            belief.dim(),
            model.state_dim()
        )));
    }
    let mean = &model.a * &belief.mean + &model.b * &model.mu_w;
    let mut cov = &model.a * &belief.cov * model.a.transpose() + model.process_noise();
    symmetrize(&mut cov);
    Ok(GaussianBelief { mean, cov })
}

/// Open-loop propagation over `horizon` steps; element `t` of the result is
/// the belief at time `t+1` (the first predicted step).
pub fn propagate_horizon<S: Scalar>(
    belief0: &GaussianBelief<S>,
    model: &ObstacleModel<S>,
    horizon: usize,
) -> Result<Vec<GaussianBelief<S>>> {
    if horizon == 0 {
        return Err(Error::Config("horizon must be at least 1".into()));
    }
    let mut out = Vec::with_capacity(horizon);
    let mut current = predict_step(belief0, model)?;
    for _ in 0..horizon {
        out.push(current.clone());
        current = predict_step(out.last().unwrap(), model)?;
    }
    Ok(out)
}

/// Kalman measurement update of a one-step-ahead prior `(x-, Sigma-)`:
///
/// ```text
/// K     = Sigma- H^T (H Sigma- H^T + Sigma_nu)^-1
/// mean' = x- + K (z - H x- - mu_nu)
/// cov'  = (I - K H) Sigma-
/// ```
pub fn kalman_update<S: Scalar>(
    predicted: &GaussianBelief<S>,
    sensor: &SensorModel<S>,
    z: &DVector<S>,
) -> Result<GaussianBelief<S>> {
    let n = predicted.dim();
    if sensor.h.ncols() != n {
        return Err(Error::Config(format!(
            "H has {} columns but the state dimension is {}",
            sensor.h.ncols(),
            n
        )));
    }
    if z.len() != sensor.obs_dim() {
        return Err(Error::Config("measurement dimension does not match H".into()));
    }
    let ht = sensor.h.transpose();
    let mut innov_cov = &sensor.h * &predicted.cov * &ht + &sensor.sigma_nu;
    symmetrize(&mut innov_cov);
    // gain K solves (H Sigma- H^T + Sigma_nu) K^T = H Sigma-
    let gain = match innov_cov.clone().cholesky() {
        Some(chol) => {
            let rhs = &sensor.h * &predicted.cov;
            chol.solve(&rhs).transpose()
        }
        None => {
            // Sigma_nu > 0 makes this unreachable in practice
            log::warn!("innovation covariance not PD; using pseudo-inverse gain");
            let pinv = innov_cov
                .clone()
                .svd(true, true)
                .pseudo_inverse(cst::<S>(1e-12))
                .map_err(|e| Error::Numerical(format!("innovation pseudo-inverse: {e}")))?;
            &predicted.cov * &ht * pinv
        }
    };
    let innovation = z - &sensor.h * &predicted.mean - &sensor.mu_nu;
    let mean = &predicted.mean + &gain * innovation;
    let n_eye = DMatrix::<S>::identity(n, n);
    let mut cov = (&n_eye - &gain * &sensor.h) * &predicted.cov;
    symmetrize(&mut cov);
    Ok(GaussianBelief { mean, cov })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn eye(n: usize) -> DMatrix<f64> {
        DMatrix::identity(n, n)
    }

    /// ex-2 obstacle O2: integrator dynamics at dt = 0.5
    fn integrator_model_2d() -> ObstacleModel {
        ObstacleModel::new(
            eye(2),
            0.5 * eye(2),
            DVector::from_row_slice(&[0.05, 0.15]),
            DMatrix::from_row_slice(2, 2, &[0.006, 0.0015, 0.0015, 0.008]),
            0.25,
        )
        .unwrap()
    }

    #[test]
    fn predict_from_point_belief() {
        let model = integrator_model_2d();
        let b0 = GaussianBelief::dirac(DVector::zeros(2));
        let b1 = predict_step(&b0, &model).unwrap();
        assert_relative_eq!(b1.mean, DVector::from_row_slice(&[0.025, 0.075]), epsilon = 1e-15);
        assert_relative_eq!(b1.cov, 0.25 * &model.sigma_w, epsilon = 1e-15);
    }

    #[test]
    fn predict_identity_is_noop() {
        let model = ObstacleModel::new(eye(3), eye(3), DVector::zeros(3), DMatrix::zeros(3, 3), 0.1)
            .unwrap();
        let b0 = GaussianBelief::new(
            DVector::from_row_slice(&[1.0, -2.0, 0.5]),
            0.3 * eye(3),
        )
        .unwrap();
        let b1 = predict_step(&b0, &model).unwrap();
        assert_eq!(b1.mean, b0.mean);
        assert_eq!(b1.cov, b0.cov);
    }

    #[test]
    fn repeated_prediction_matches_closed_form() {
        // A = I, B = 0.25 I, Sigma_w = 0.01 I: cov after t steps is t * 0.000625 I
        let model = ObstacleModel::new(
            eye(3),
            0.25 * eye(3),
            DVector::zeros(3),
            0.01 * eye(3),
            0.25,
        )
        .unwrap();
        let mut b = GaussianBelief::dirac(DVector::zeros(3));
        for t in 1..=12 {
            b = predict_step(&b, &model).unwrap();
            assert_relative_eq!(b.cov, (t as f64) * 0.000625 * eye(3), epsilon = 1e-14);
        }
    }

    #[test]
    fn horizon_matches_repeated_steps_and_grows() {
        let model = integrator_model_2d();
        let b0 = GaussianBelief::dirac(DVector::from_row_slice(&[-0.5, -2.0]));
        let horizon = propagate_horizon(&b0, &model, 25).unwrap();
        assert_eq!(horizon.len(), 25);
        let mut b = b0.clone();
        let mut prev_trace = 0.0;
        for (t, h) in horizon.iter().enumerate() {
            b = predict_step(&b, &model).unwrap();
            assert_eq!(h, &b, "mismatch at t={}", t + 1);
            let trace = h.cov.trace();
            assert!(trace > prev_trace, "trace not increasing at t={}", t + 1);
            prev_trace = trace;
            // cov at step t is t * dt^2 * Sigma_w for the integrator
            assert_relative_eq!(h.cov, ((t + 1) as f64) * 0.25 * &model.sigma_w, epsilon = 1e-13);
        }
    }

    #[test]
    fn horizon_of_one_is_single_step() {
        let model = integrator_model_2d();
        let b0 = GaussianBelief::dirac(DVector::zeros(2));
        let h = propagate_horizon(&b0, &model, 1).unwrap();
        assert_eq!(h.len(), 1);
        assert_eq!(h[0], predict_step(&b0, &model).unwrap());
    }

    #[test]
    fn horizon_is_deterministic() {
        let model = integrator_model_2d();
        let b0 = GaussianBelief::dirac(DVector::from_row_slice(&[1.0, 2.0]));
        let a = propagate_horizon(&b0, &model, 10).unwrap();
        let b = propagate_horizon(&b0, &model, 10).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.mean, y.mean);
            assert_eq!(x.cov, y.cov);
        }
    }

    #[test]
    fn kalman_equal_covariance_halves() {
        // the ex-1 sensor: H = I3, Sigma_nu = 0.05 I3
        let sensor = SensorModel::new(eye(3), 0.05 * eye(3)).unwrap();
        let prior = GaussianBelief::new(DVector::zeros(3), 0.05 * eye(3)).unwrap();
        let z = DVector::from_row_slice(&[1.0, 0.0, -1.0]);
        let post = kalman_update(&prior, &sensor, &z).unwrap();
        assert_relative_eq!(post.mean, 0.5 * &z, epsilon = 1e-12);
        assert_relative_eq!(post.cov, 0.025 * eye(3), epsilon = 1e-12);
    }

    #[test]
    fn kalman_uninformative_measurement() {
        let sensor = SensorModel::new(eye(2), 1e9 * eye(2)).unwrap();
        let prior = GaussianBelief::new(
            DVector::from_row_slice(&[1.0, 2.0]),
            DMatrix::from_row_slice(2, 2, &[0.5, 0.1, 0.1, 0.3]),
        )
        .unwrap();
        let z = DVector::from_row_slice(&[100.0, -100.0]);
        let post = kalman_update(&prior, &sensor, &z).unwrap();
        assert_relative_eq!(post.mean, prior.mean, epsilon = 1e-6);
        assert_relative_eq!(post.cov, prior.cov, epsilon = 1e-6);
    }

    #[test]
    fn kalman_hand_evaluated_example() {
        // frozen from an independent high-precision evaluation
        let sensor = SensorModel::new(eye(2), 0.05 * eye(2)).unwrap();
        let prior = GaussianBelief::new(
            DVector::from_row_slice(&[1.0, 1.0]),
            DMatrix::from_row_slice(2, 2, &[0.2, 0.0, 0.0, 0.05]),
        )
        .unwrap();
        let z = DVector::from_row_slice(&[1.5, 1.5]);
        let post = kalman_update(&prior, &sensor, &z).unwrap();
        assert_relative_eq!(post.mean, DVector::from_row_slice(&[1.4, 1.25]), epsilon = 1e-12);
        assert_relative_eq!(
            post.cov,
            DMatrix::from_row_slice(2, 2, &[0.04, 0.0, 0.0, 0.025]),
            epsilon = 1e-12
        );
    }

    #[test]
    fn kalman_joseph_form_agrees() {
        let sensor = SensorModel::new(
            DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 0.5, 0.0, 1.0, -0.25]),
            DMatrix::from_row_slice(2, 2, &[0.05, 0.01, 0.01, 0.08]),
        )
        .unwrap();
        let prior = GaussianBelief::new(
            DVector::from_row_slice(&[0.3, -0.7, 1.1]),
            DMatrix::from_row_slice(3, 3, &[0.4, 0.05, 0.0, 0.05, 0.3, 0.02, 0.0, 0.02, 0.2]),
        )
        .unwrap();
        let z = DVector::from_row_slice(&[0.5, -0.5]);
        let post = kalman_update(&prior, &sensor, &z).unwrap();

        // Joseph form: (I-KH) Sigma (I-KH)^T + K Sigma_nu K^T
        let innov = &sensor.h * &prior.cov * sensor.h.transpose() + &sensor.sigma_nu;
        let gain = &prior.cov * sensor.h.transpose() * innov.try_inverse().unwrap();
        let ikh = DMatrix::identity(3, 3) - &gain * &sensor.h;
        let joseph = &ikh * &prior.cov * ikh.transpose() + &gain * &sensor.sigma_nu * gain.transpose();
        assert_relative_eq!(post.cov, joseph, epsilon = 1e-9);
    }

    #[test]
    fn measurement_never_increases_uncertainty() {
        let sensor = SensorModel::new(eye(3), 0.05 * eye(3)).unwrap();
        let prior = GaussianBelief::new(
            DVector::zeros(3),
            DMatrix::from_row_slice(3, 3, &[0.5, 0.1, 0.0, 0.1, 0.4, 0.05, 0.0, 0.05, 0.9]),
        )
        .unwrap();
        let z = DVector::from_row_slice(&[0.2, -0.3, 0.5]);
        let post = kalman_update(&prior, &sensor, &z).unwrap();
        assert!(post.cov.trace() <= prior.cov.trace() + 1e-12);
        // Loewner order for H = I: Sigma- - cov' is PSD
        let diff = &prior.cov - &post.cov;
        assert!(crate::linalg::min_eigenvalue(&diff) >= -1e-10);
    }

    #[test]
    fn dimension_mismatch_is_config_error() {
        let model = integrator_model_2d();
        let b = GaussianBelief::dirac(DVector::zeros(3));
        assert!(matches!(predict_step(&b, &model), Err(Error::Config(_))));
    }

    #[test]
    fn sensor_rejects_hidden_bias() {
        let res = SensorModel::build(
            eye(2),
            DVector::from_row_slice(&[0.1, 0.0]),
            0.05 * eye(2),
            false,
        );
        assert!(res.is_err());
        assert!(SensorModel::with_bias(
            eye(2),
            DVector::from_row_slice(&[0.1, 0.0]),
            0.05 * eye(2)
        )
        .is_ok());
    }
}
