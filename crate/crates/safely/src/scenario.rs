//! Scenario files: the full problem instance as a JSON document.
//!
//! Top-level keys: `robot`, `cost`, `obstacles`, `sensing`, `risk`,
//! `horizon`, `execution`, `seed` (plus `l0_policy`). Obstacle dynamics can
//! be given as dense `A`/`B` matrices or through the `integrator_dt`
//! shorthand (`A = I`, `B = dt I`). Scalars are accepted wherever an
//! isotropic matrix is meant (`sigma_w`, `cov0`).

use crate::beliefs::{GaussianBelief, ObstacleModel, SensorModel};
use crate::models::{DoubleIntegrator3D, DubinsVehicle};
use crate::sqp::{RobotModel, SqpSettings};
use crate::{cst, Error, Result, Scalar};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum NumOrMat {
    Scalar(f64),
    Matrix(Vec<Vec<f64>>),
}

impl NumOrMat {
    fn to_matrix(&self, dim: usize, what: &str) -> Result<DMatrix<f64>> {
        match self {
            NumOrMat::Scalar(s) => Ok(DMatrix::identity(dim, dim) * *s),
            NumOrMat::Matrix(rows) => {
                if rows.len() != dim || rows.iter().any(|r| r.len() != dim) {
                    return Err(Error::Config(format!("{what} must be {dim}x{dim}")));
                }
                Ok(DMatrix::from_fn(dim, dim, |i, j| rows[i][j]))
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", deny_unknown_fields)]
pub enum RawRobot {
    #[serde(rename = "double_integrator_3d")]
    DoubleIntegrator3d {
        dt: f64,
        u_max: f64,
        x0: Vec<f64>,
        safe_box: RawBox,
    },
    #[serde(rename = "dubins")]
    Dubins {
        dt: f64,
        /// [v_min, v_max]
        v: [f64; 2],
        /// [omega_min, omega_max]
        omega: [f64; 2],
        /// full camera viewing angle
        theta_v: f64,
        /// (x, y, theta)
        x0: Vec<f64>,
        safe_box: RawBox,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", deny_unknown_fields)]
pub enum RawCost {
    #[serde(rename = "goal")]
    Goal { x_g: Vec<f64> },
    #[serde(rename = "goal_attention")]
    GoalAttention {
        x_g: Vec<f64>,
        beta: f64,
        gamma_hat: f64,
        /// reward heading alignment (default true); false keeps the
        /// additive form
        #[serde(default = "default_true")]
        reward_sign: bool,
    },
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawObstacle {
    /// shorthand: A = I, B = integrator_dt * I
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub integrator_dt: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b: Option<Vec<Vec<f64>>>,
    pub mu_w: Vec<f64>,
    pub sigma_w: NumOrMat,
    /// combined body radius (meters)
    pub r: f64,
    pub mean0: Vec<f64>,
    pub cov0: NumOrMat,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub color: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawSensing {
    /// sensing budget: obstacles measurable per step
    pub k: usize,
    /// relevance discount in (0, 1]
    pub gamma: f64,
    pub sigma_nu: NumOrMat,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub h: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawRisk {
    pub alpha: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawHorizon {
    #[serde(rename = "T")]
    pub t: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecutionMode {
    /// jump to the refined plan's first knot
    Waypoint,
    /// apply the first input through the true dynamics
    VelocityInput,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawExecution {
    pub mode: ExecutionMode,
    pub goal_tolerance: f64,
    #[serde(default = "default_max_cycles")]
    pub max_cycles: usize,
}

fn default_max_cycles() -> usize {
    400
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum L0PolicyKind {
    /// leading eigenvector of Q (default)
    MaxUncertainty,
    /// unit vector from the obstacle mean to the robot's reference
    /// trajectory, recomputed each cycle
    TowardRobot,
}

impl Default for L0PolicyKind {
    fn default() -> Self {
        L0PolicyKind::MaxUncertainty
    }
}

/// The scenario document exactly as serialized.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawScenario {
    pub robot: RawRobot,
    pub cost: RawCost,
    pub obstacles: Vec<RawObstacle>,
    pub sensing: RawSensing,
    pub risk: RawRisk,
    pub horizon: RawHorizon,
    pub execution: RawExecution,
    #[serde(default)]
    pub l0_policy: L0PolicyKind,
    #[serde(default)]
    pub seed: u64,
}

/// Robot dispatch without trait objects in the scenario itself.
#[derive(Debug, Clone)]
pub enum RobotKind<S: Scalar = f64> {
    Integrator(DoubleIntegrator3D<S>),
    Dubins(DubinsVehicle<S>),
}

impl<S: Scalar> RobotKind<S> {
    pub fn as_model(&self) -> &dyn RobotModel<S> {
        match self {
            RobotKind::Integrator(m) => m,
            RobotKind::Dubins(m) => m,
        }
    }

    /// Step executed on the real vehicle: wraps the Dubins heading.
    pub fn exec_step(&self, x: &DVector<S>, u: &DVector<S>) -> DVector<S> {
        match self {
            RobotKind::Integrator(m) => m.step(x, u),
            RobotKind::Dubins(m) => crate::models::dubins_step(x, u[0], u[1], m.dt),
        }
    }

    /// Wrap executed state angles into canonical ranges.
    pub fn canonicalize(&self, x: &DVector<S>) -> DVector<S> {
        match self {
            RobotKind::Integrator(_) => x.clone(),
            RobotKind::Dubins(_) => {
                let mut w = x.clone();
                w[2] = crate::models::wrap_angle(w[2]);
                w
            }
        }
    }
}

#[derive(Debug, Clone)]
pub enum CostKind<S: Scalar = f64> {
    Goal,
    GoalAttention {
        beta: S,
        gamma_hat: S,
        reward_sign: bool,
    },
}

#[derive(Debug, Clone)]
pub struct ObstacleInstance<S: Scalar = f64> {
    pub model: ObstacleModel<S>,
    pub initial_belief: GaussianBelief<S>,
}

/// Validated, typed problem instance.
#[derive(Debug, Clone)]
pub struct Scenario<S: Scalar = f64> {
    pub robot: RobotKind<S>,
    pub cost: CostKind<S>,
    pub x0: DVector<S>,
    pub goal_pos: DVector<S>,
    pub goal_tolerance: S,
    pub horizon: usize,
    pub alpha: S,
    pub gamma: S,
    pub k_budget: usize,
    pub sensor: SensorModel<S>,
    pub obstacles: Vec<ObstacleInstance<S>>,
    pub l0_policy: L0PolicyKind,
    pub execution: ExecutionMode,
    pub max_cycles: usize,
    pub seed: u64,
    pub sqp: SqpSettings<S>,
}

impl<S: Scalar> Scenario<S> {
    pub fn from_json_str(text: &str) -> Result<Self> {
        let raw: RawScenario = serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("scenario parse: {e}")))?;
        Self::from_raw(&raw)
    }

    pub fn from_value(value: &serde_json::Value) -> Result<Self> {
        let raw: RawScenario = serde_json::from_value(value.clone())
            .map_err(|e| Error::Config(format!("scenario parse: {e}")))?;
        Self::from_raw(&raw)
    }

    pub fn from_raw(raw: &RawScenario) -> Result<Self> {
        let vec_s = |v: &[f64]| DVector::from_fn(v.len(), |i, _| cst::<S>(v[i]));
        let mat_s = |m: &DMatrix<f64>| {
            DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| cst::<S>(m[(i, j)]))
        };

        let (robot, x0) = match &raw.robot {
            RawRobot::DoubleIntegrator3d {
                dt,
                u_max,
                x0,
                safe_box,
            } => {
                if x0.len() != 6 {
                    return Err(Error::Config("double integrator x0 must be 6-D".into()));
                }
                let model = DoubleIntegrator3D::new(
                    cst(*dt),
                    cst(*u_max),
                    vec_s(&safe_box.lo),
                    vec_s(&safe_box.hi),
                )?;
                (RobotKind::Integrator(model), vec_s(x0))
            }
            RawRobot::Dubins {
                dt,
                v,
                omega,
                theta_v,
                x0,
                safe_box,
            } => {
                if x0.len() != 3 {
                    return Err(Error::Config("dubins x0 must be (x, y, theta)".into()));
                }
                let model = DubinsVehicle::new(
                    cst(*dt),
                    cst(v[0]),
                    cst(v[1]),
                    cst(omega[0]),
                    cst(omega[1]),
                    cst(*theta_v),
                    vec_s(&safe_box.lo),
                    vec_s(&safe_box.hi),
                )?;
                (RobotKind::Dubins(model), vec_s(x0))
            }
        };
        let n_pos = robot.as_model().position_dim();

        let (cost, goal) = match &raw.cost {
            RawCost::Goal { x_g } => (CostKind::Goal, x_g.clone()),
            RawCost::GoalAttention {
                x_g,
                beta,
                gamma_hat,
                reward_sign,
            } => {
                if !matches!(robot, RobotKind::Dubins(_)) {
                    return Err(Error::Config(
                        "the attention cost requires the dubins robot".into(),
                    ));
                }
                if *gamma_hat <= 0.0 || *gamma_hat > 1.0 {
                    return Err(Error::Config("gamma_hat must be in (0, 1]".into()));
                }
                (
                    CostKind::GoalAttention {
                        beta: cst(*beta),
                        gamma_hat: cst(*gamma_hat),
                        reward_sign: *reward_sign,
                    },
                    x_g.clone(),
                )
            }
        };
        if goal.len() != n_pos {
            return Err(Error::Config(format!(
                "x_g must have the position dimension {n_pos}"
            )));
        }

        let mut obstacles = Vec::with_capacity(raw.obstacles.len());
        for (idx, o) in raw.obstacles.iter().enumerate() {
            let n = o.mean0.len();
            if n != n_pos {
                return Err(Error::Config(format!(
                    "obstacle {idx} state dimension {n} does not match the robot position dimension {n_pos}"
                )));
            }
            let (a, b) = match (&o.integrator_dt, &o.a, &o.b) {
                (Some(dt), None, None) => {
                    (DMatrix::identity(n, n), DMatrix::identity(n, n) * *dt)
                }
                (None, Some(a), Some(b)) => {
                    let a = NumOrMat::Matrix(a.clone()).to_matrix(n, "A")?;
                    if b.len() != n {
                        return Err(Error::Config(format!("obstacle {idx}: B must have {n} rows")));
                    }
                    let p = b[0].len();
                    if b.iter().any(|r| r.len() != p) {
                        return Err(Error::Config(format!("obstacle {idx}: ragged B")));
                    }
                    (a, DMatrix::from_fn(n, p, |i, j| b[i][j]))
                }
                _ => {
                    return Err(Error::Config(format!(
                        "obstacle {idx}: give either integrator_dt or both A and B"
                    )))
                }
            };
            let p = b.ncols();
            if o.mu_w.len() != p {
                return Err(Error::Config(format!("obstacle {idx}: mu_w must be {p}-D")));
            }
            let sigma_w = o.sigma_w.to_matrix(p, "sigma_w")?;
            let model = ObstacleModel::new(
                mat_s(&a),
                mat_s(&b),
                vec_s(&o.mu_w),
                mat_s(&sigma_w),
                cst(o.r),
            )?;
            let mut model = model;
            model.color_tag = o.color.clone();
            let cov0 = o.cov0.to_matrix(n, "cov0")?;
            let initial_belief = GaussianBelief::new(vec_s(&o.mean0), mat_s(&cov0))?;
            obstacles.push(ObstacleInstance {
                model,
                initial_belief,
            });
        }

        let n_o = obstacles.len();
        if n_o > 0 && raw.sensing.k >= n_o {
            return Err(Error::Config(format!(
                "sensing budget K = {} must be smaller than the obstacle count {}",
                raw.sensing.k, n_o
            )));
        }
        if n_o == 0 && raw.sensing.k != 0 {
            return Err(Error::Config("K must be 0 without obstacles".into()));
        }
        if raw.sensing.gamma <= 0.0 || raw.sensing.gamma > 1.0 {
            return Err(Error::Config("gamma must be in (0, 1]".into()));
        }
        if raw.risk.alpha <= 0.0 || raw.risk.alpha > 1.0 {
            return Err(Error::Config("alpha must be in (0, 1]".into()));
        }
        if raw.execution.goal_tolerance <= 0.0 {
            return Err(Error::Config("goal tolerance must be positive".into()));
        }
        if raw.horizon.t == 0 {
            return Err(Error::Config("horizon must be at least 1".into()));
        }

        let h = match &raw.sensing.h {
            None => DMatrix::identity(n_pos, n_pos),
            Some(rows) => {
                let q = rows.len();
                if rows.iter().any(|r| r.len() != n_pos) {
                    return Err(Error::Config("H must have state-dimension columns".into()));
                }
                DMatrix::from_fn(q, n_pos, |i, j| rows[i][j])
            }
        };
        let sigma_nu = raw.sensing.sigma_nu.to_matrix(h.nrows(), "sigma_nu")?;
        let sensor = SensorModel::new(mat_s(&h), mat_s(&sigma_nu))?;

        Ok(Scenario {
            robot,
            cost,
            x0,
            goal_pos: vec_s(&goal),
            goal_tolerance: cst(raw.execution.goal_tolerance),
            horizon: raw.horizon.t,
            alpha: cst(raw.risk.alpha),
            gamma: cst(raw.sensing.gamma),
            k_budget: raw.sensing.k,
            sensor,
            obstacles,
            l0_policy: raw.l0_policy,
            execution: raw.execution.mode,
            max_cycles: raw.execution.max_cycles,
            seed: raw.seed,
            sqp: SqpSettings::default(),
        })
    }

    pub fn num_obstacles(&self) -> usize {
        self.obstacles.len()
    }
}

/// Apply a dotted-key override (`a.b.0.c=value`) to a scenario document.
/// The key path must already exist; the value parses as JSON when possible
/// and falls back to a string.
pub fn apply_override(doc: &mut serde_json::Value, key: &str, value: &str) -> Result<()> {
    let parsed: serde_json::Value = serde_json::from_str(value)
        .unwrap_or_else(|_| serde_json::Value::String(value.to_string()));
    let mut cursor = doc;
    let segments: Vec<&str> = key.split('.').collect();
    for (i, seg) in segments.iter().enumerate() {
        let last = i + 1 == segments.len();
        match cursor {
            serde_json::Value::Object(map) => {
                if !map.contains_key(*seg) {
                    return Err(Error::Config(format!("unknown override key: {key} (at '{seg}')")));
                }
                if last {
                    map.insert(seg.to_string(), parsed);
                    return Ok(());
                }
                cursor = map.get_mut(*seg).unwrap();
            }
            serde_json::Value::Array(arr) => {
                let idx: usize = seg
                    .parse()
                    .map_err(|_| Error::Config(format!("unknown override key: {key} (at '{seg}')")))?;
                if idx >= arr.len() {
                    return Err(Error::Config(format!(
                        "unknown override key: {key} (index {idx} out of range)"
                    )));
                }
                if last {
                    arr[idx] = parsed;
                    return Ok(());
                }
                cursor = &mut arr[idx];
            }
            _ => {
                return Err(Error::Config(format!(
                    "unknown override key: {key} ('{seg}' is not addressable)"
                )));
            }
        }
    }
    Err(Error::Config(format!("empty override key: {key}")))
}
