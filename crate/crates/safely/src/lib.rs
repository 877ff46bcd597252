//! Receding-horizon stochastic motion planning with duality-driven sensor
//! scheduling.
//!
//! A robot with known dynamics must reach a goal while avoiding dynamic
//! obstacles whose states are only known through Gaussian beliefs. Each
//! planning cycle:
//!
//! 1. propagates the obstacle beliefs over the horizon ([`beliefs`]),
//! 2. builds risk-allocated ellipsoidal keep-out sets whose avoidance bounds
//!    the joint collision probability by `alpha` ([`occupancy`]),
//! 3. plans a trajectory by sequential quadratic programming over the
//!    linearized keep-out constraints ([`sqp`], [`qpsolver`]),
//! 4. refines the plan against supporting hyperplanes at the projections of
//!    the trajectory onto the ellipsoids, and ranks obstacles by the
//!    discounted sum of the hyperplane dual variables to decide which of the
//!    `K` available sensor slots to spend where ([`refine`]),
//! 5. executes one step, measures the selected obstacles, and repeats
//!    ([`sim`]).
//!
//! Core math is generic over the scalar type (`f32`/`f64`); every public
//! type defaults its scalar parameter to `f64`, so downstream code that does
//! not care about the generic machinery can ignore it.

pub mod beliefs;
pub mod linalg;
pub mod models;
pub mod occupancy;
pub mod qpsolver;
pub mod refine;
pub mod scenario;
pub mod sim;
pub mod sqp;

use nalgebra::{DMatrix, DVector};

/// Scalar type the planner math is generic over: `f32` or `f64`.
pub trait Scalar:
    nalgebra::RealField + Copy + num_traits::FromPrimitive + num_traits::ToPrimitive
{
}

impl<T> Scalar for T where
    T: nalgebra::RealField + Copy + num_traits::FromPrimitive + num_traits::ToPrimitive
{
}

/// Dense matrix over the planner scalar.
pub type Mat<S = f64> = DMatrix<S>;
/// Dense column vector over the planner scalar.
pub type Vector<S = f64> = DVector<S>;

/// Shorthand for lifting an `f64` literal into the generic scalar.
#[inline]
pub(crate) fn cst<S: Scalar>(x: f64) -> S {
    S::from_f64(x).expect("literal not representable in scalar type")
}

/// Lossy view of a generic scalar as `f64`, for logging and reports.
#[inline]
pub(crate) fn as_f64<S: Scalar>(x: S) -> f64 {
    x.to_f64().expect("scalar not representable as f64")
}

#[derive(thiserror::Error, Debug)]
pub enum Error {
    /// Inconsistent dimensions, invalid parameters, malformed scenario files.
    #[error("configuration error: {0}")]
    Config(String),
    /// A numerical operation that should have succeeded did not.
    #[error("numerical error: {0}")]
    Numerical(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub use beliefs::{GaussianBelief, ObstacleModel, SensorModel};
pub use occupancy::{KeepOutEllipsoid, KeepOutGrid, L0Policy, RiskBudget};
pub use qpsolver::{QpSolution, QpSolver, QpStatus, QuadraticProgram, SolverSettings};
pub use refine::{RelevanceReport, SupportingHalfspaceSet};
pub use scenario::Scenario;
pub use sim::{Episode, Outcome, RunLog};
pub use sqp::{CostModel, PlanIterate, RobotModel, SqpSettings};
