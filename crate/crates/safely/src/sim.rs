//! Closed-loop execution: ground-truth obstacle simulation, planning
//! cycles, sensing, receding-horizon reset, logging, and the Monte Carlo
//! collision-probability estimator.
//!
//! Randomness is counter-based: every draw comes from a ChaCha stream keyed
//! by `(seed, obstacle, purpose)` positioned at a fixed offset per step, so
//! observation decisions can never perturb the obstacle sample paths — an
//! A/B comparison of scheduling policies sees identical worlds.

use crate::beliefs::{kalman_update, predict_step, propagate_horizon, GaussianBelief, ObstacleModel};
use crate::linalg::psd_sqrt;
use crate::models::{in_field_of_view, AttentionCost, GoalCost};
use crate::occupancy::{build_keepouts, constraint_value, KeepOutGrid, L0Policy, RiskBudget};
use crate::refine::{build_supporting_halfspaces, solve_refined, RefinedSolution, SupportingHalfspaceSet};
use crate::scenario::{CostKind, ExecutionMode, L0PolicyKind, RobotKind, Scenario};
use crate::sqp::{initial_iterate, rollout, sqp_solve, CostModel, PlanIterate, PlanningProblem, SqpResult, SqpStatus};
use crate::{as_f64, cst, Error, Result, Scalar};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// Obstacles never selected below this relevance score.
const RELEVANCE_THRESHOLD: f64 = 1e-9;

/// Words reserved per step in each ChaCha stream; draws per step never come
/// close, so steps are independent regardless of how many draws each takes.
const WORDS_PER_STEP: u128 = 256;

fn stream_rng(seed: u64, stream: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.set_word_pos(WORDS_PER_STEP * step as u128);
    rng
}

fn standard_normals<S: Scalar>(rng: &mut ChaCha8Rng, k: usize) -> DVector<S>
where
    StandardNormal: Distribution<S>,
{
    DVector::from_fn(k, |_, _| rng.sample(StandardNormal))
}

/// `x' = A x + B mu_w + B L xi`, shared by the episode loop and
/// [`sample_ground_truth`] so both produce bitwise-identical paths.
fn advance_truth<S: Scalar>(
    model: &ObstacleModel<S>,
    chol_w: &DMatrix<S>,
    x: &DVector<S>,
    xi: &DVector<S>,
) -> DVector<S> {
    &model.a * x + &model.b * (&model.mu_w + chol_w * xi)
}

/// Per-obstacle true state sequences sampled from the obstacle dynamics.
#[derive(Debug, Clone)]
pub struct GroundTruthWorld<S: Scalar = f64> {
    /// `paths[o][step]`, step 0 being the (sampled) initial state
    pub paths: Vec<Vec<DVector<S>>>,
}

/// Sample `num_steps` steps of every obstacle's true trajectory. The draw
/// for obstacle `o` at step `s` depends only on `(seed, o, s)`.
pub fn sample_ground_truth<S: Scalar>(
    scenario: &Scenario<S>,
    num_steps: usize,
) -> Result<GroundTruthWorld<S>>
where
    StandardNormal: Distribution<S>,
{
    let mut paths = Vec::with_capacity(scenario.obstacles.len());
    for (o, ob) in scenario.obstacles.iter().enumerate() {
        let n = ob.model.state_dim();
        let p = ob.model.b.ncols();
        let chol_w = psd_sqrt(&ob.model.sigma_w);
        let chol0 = psd_sqrt(&ob.initial_belief.cov);
        let mut rng = stream_rng(scenario.seed, 2 * o as u64, 0);
        let xi0 = standard_normals::<S>(&mut rng, n);
        let mut path = Vec::with_capacity(num_steps + 1);
        path.push(&ob.initial_belief.mean + &chol0 * xi0);
        for step in 1..=num_steps {
            let mut rng = stream_rng(scenario.seed, 2 * o as u64, step as u64);
            let xi = standard_normals::<S>(&mut rng, p);
            path.push(advance_truth(&ob.model, &chol_w, path.last().unwrap(), &xi));
        }
        paths.push(path);
    }
    Ok(GroundTruthWorld { paths })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Outcome {
    Reached,
    MaxCycles,
    Collision,
    PlannerFailed,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ObservationAttempt {
    pub obstacle: usize,
    /// false when the field-of-view gate rejected the measurement
    pub success: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BeliefRecord {
    pub mean: Vec<f64>,
    pub cov: Vec<Vec<f64>>,
}

/// Everything logged about one planning cycle.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CycleRecord {
    pub cycle: usize,
    /// robot state after executing this cycle's step
    pub executed_state: Vec<f64>,
    /// refined plan states, `t = 0..=T`
    pub planned_states: Vec<Vec<f64>>,
    pub planned_inputs: Vec<Vec<f64>>,
    pub objective_sqp: f64,
    pub objective_refined: f64,
    pub slack_total: f64,
    pub sqp_status: String,
    /// planned keep-out margins `constraint_value - 1` per (o, t);
    /// `null` where the pair is vacuous
    pub margins: Vec<Vec<Option<f64>>>,
    /// margin of the executed position against this cycle's t = 1
    /// ellipsoids
    pub executed_margin: Option<f64>,
    pub lambda_grid: Vec<Vec<f64>>,
    pub lambda_scores: Vec<f64>,
    pub selected: Vec<usize>,
    pub observations: Vec<ObservationAttempt>,
    /// obstacle beliefs at plan time
    pub beliefs: Vec<BeliefRecord>,
    pub sqp_iterations: usize,
    pub solve_ms: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunLog {
    pub schema_version: u32,
    pub seed: u64,
    pub outcome: Outcome,
    pub scenario: serde_json::Value,
    pub records: Vec<CycleRecord>,
}

impl RunLog {
    /// JSON-lines stream: a header line followed by one line per cycle.
    pub fn write_jsonl<W: std::io::Write>(&self, w: &mut W) -> std::io::Result<()> {
        let header = serde_json::json!({
            "type": "header",
            "schema_version": self.schema_version,
            "seed": self.seed,
            "outcome": self.outcome,
            "scenario": self.scenario,
        });
        writeln!(w, "{}", serde_json::to_string(&header).unwrap())?;
        for r in &self.records {
            let mut line = serde_json::to_value(r).unwrap();
            line.as_object_mut()
                .unwrap()
                .insert("type".into(), serde_json::json!("cycle"));
            writeln!(w, "{}", serde_json::to_string(&line).unwrap())?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: std::io::BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        let header_line = lines
            .next()
            .ok_or_else(|| Error::Config("empty run log".into()))?
            .map_err(|e| Error::Config(format!("run log read: {e}")))?;
        let header: serde_json::Value = serde_json::from_str(&header_line)
            .map_err(|e| Error::Config(format!("run log header: {e}")))?;
        if header["type"] != "header" {
            return Err(Error::Config("run log does not start with a header line".into()));
        }
        let mut records = Vec::new();
        for line in lines {
            let line = line.map_err(|e| Error::Config(format!("run log read: {e}")))?;
            if line.trim().is_empty() {
                continue;
            }
            let record: CycleRecord = serde_json::from_str(&line)
                .map_err(|e| Error::Config(format!("run log record: {e}")))?;
            records.push(record);
        }
        Ok(RunLog {
            schema_version: header["schema_version"].as_u64().unwrap_or(0) as u32,
            seed: header["seed"].as_u64().unwrap_or(0),
            outcome: serde_json::from_value(header["outcome"].clone())
                .map_err(|e| Error::Config(format!("run log outcome: {e}")))?,
            scenario: header["scenario"].clone(),
            records,
        })
    }

    /// Flat CSV: cycle, executed state, first selected obstacle (or -1),
    /// relevance scores, solve time, minimum planned margin.
    pub fn write_csv<W: std::io::Write>(&self, w: &mut W) -> std::io::Result<()> {
        let n_state = self.records.first().map(|r| r.executed_state.len()).unwrap_or(0);
        let n_obs = self.records.first().map(|r| r.lambda_scores.len()).unwrap_or(0);
        let mut header = String::from("cycle");
        for i in 0..n_state {
            header.push_str(&format!(",state_{i}"));
        }
        header.push_str(",selected_obstacle");
        for i in 0..n_obs {
            header.push_str(&format!(",lambda_{i}"));
        }
        header.push_str(",solve_ms,margin_min");
        writeln!(w, "{header}")?;
        for r in &self.records {
            let mut line = format!("{}", r.cycle);
            for v in &r.executed_state {
                line.push_str(&format!(",{v:.9e}"));
            }
            let sel = r.selected.first().map(|&o| o as i64).unwrap_or(-1);
            line.push_str(&format!(",{sel}"));
            for v in &r.lambda_scores {
                line.push_str(&format!(",{v:.9e}"));
            }
            let margin_min = r
                .margins
                .iter()
                .flatten()
                .flatten()
                .fold(f64::INFINITY, |a, &b| a.min(b));
            line.push_str(&format!(",{:.3},{margin_min:.9e}", r.solve_ms));
            writeln!(w, "{line}")?;
        }
        Ok(())
    }

    /// Stable, versioned run summary.
    pub fn summary(&self) -> serde_json::Value {
        let n_obs = self
            .records
            .first()
            .map(|r| r.lambda_scores.len())
            .unwrap_or(0);
        let mut observation_counts = vec![0usize; n_obs];
        let mut selection_counts = vec![0usize; n_obs];
        for r in &self.records {
            for a in &r.observations {
                if a.success {
                    observation_counts[a.obstacle] += 1;
                }
            }
            for &o in &r.selected {
                selection_counts[o] += 1;
            }
        }
        let mean_solve_ms = if self.records.is_empty() {
            0.0
        } else {
            self.records.iter().map(|r| r.solve_ms).sum::<f64>() / self.records.len() as f64
        };
        let min_executed_margin = self
            .records
            .iter()
            .filter_map(|r| r.executed_margin)
            .fold(f64::INFINITY, f64::min);
        serde_json::json!({
            "schema_version": self.schema_version,
            "seed": self.seed,
            "outcome": self.outcome,
            "cycles": self.records.len(),
            "mean_solve_ms": mean_solve_ms,
            "observation_counts": observation_counts,
            "selection_counts": selection_counts,
            "min_executed_margin": if min_executed_margin.is_finite() { serde_json::json!(min_executed_margin) } else { serde_json::Value::Null },
            "final_state": self.records.last().map(|r| r.executed_state.clone()).unwrap_or_default(),
        })
    }
}

/// Output of one planning cycle, before execution.
pub struct CyclePlan<S: Scalar = f64> {
    pub keepouts: KeepOutGrid<S>,
    pub horizon_beliefs: Vec<Vec<GaussianBelief<S>>>,
    pub sqp: SqpResult<S>,
    pub halfspaces: SupportingHalfspaceSet<S>,
    pub refined: RefinedSolution<S>,
    pub beliefs_at_plan: Vec<GaussianBelief<S>>,
    pub solve_ms: f64,
}

/// One live closed-loop run.
pub struct Episode<S: Scalar = f64> {
    pub scenario: Scenario<S>,
    scenario_echo: serde_json::Value,
    pub beliefs: Vec<GaussianBelief<S>>,
    pub truth: Vec<DVector<S>>,
    pub state: DVector<S>,
    pub cycle: usize,
    prev_plan: Option<PlanIterate<S>>,
    attention_target: Option<usize>,
    infeasible_streak: usize,
    records: Vec<CycleRecord>,
}

impl<S: Scalar> Episode<S>
where
    StandardNormal: Distribution<S>,
{
    pub fn new(scenario: Scenario<S>, scenario_echo: serde_json::Value) -> Result<Self> {
        let mut truth = Vec::with_capacity(scenario.obstacles.len());
        for (o, ob) in scenario.obstacles.iter().enumerate() {
            let chol0 = psd_sqrt(&ob.initial_belief.cov);
            let mut rng = stream_rng(scenario.seed, 2 * o as u64, 0);
            let xi = standard_normals::<S>(&mut rng, ob.model.state_dim());
            truth.push(&ob.initial_belief.mean + &chol0 * xi);
        }
        let beliefs = scenario
            .obstacles
            .iter()
            .map(|o| o.initial_belief.clone())
            .collect();
        Ok(Self {
            state: scenario.x0.clone(),
            beliefs,
            truth,
            cycle: 0,
            prev_plan: None,
            attention_target: None,
            infeasible_streak: 0,
            records: Vec::new(),
            scenario_echo,
            scenario,
        })
    }

    pub fn at_goal(&self) -> bool {
        let pos = self.scenario.robot.as_model().position(&self.state);
        (&pos - &self.scenario.goal_pos).norm() <= self.scenario.goal_tolerance
    }

    fn warm_start(&self) -> PlanIterate<S> {
        let model = self.scenario.robot.as_model();
        match &self.prev_plan {
            Some(prev) => {
                // shift one step, repeat the last input
                let mut inputs: Vec<DVector<S>> = prev.inputs[1..].to_vec();
                inputs.push(prev.inputs.last().unwrap().clone());
                let states = rollout(model, &self.state, &inputs);
                PlanIterate {
                    states,
                    inputs,
                    objective: S::zero(),
                    slack_total: S::zero(),
                }
            }
            None => initial_iterate(model, &self.state, &self.scenario.goal_pos, self.scenario.horizon),
        }
    }

    fn build_cost(
        &self,
        horizon_beliefs: &[Vec<GaussianBelief<S>>],
    ) -> Box<dyn CostModel<S> + '_> {
        let t = self.scenario.horizon;
        match (&self.scenario.cost, &self.scenario.robot) {
            (CostKind::Goal, RobotKind::Integrator(_)) => {
                Box::new(GoalCost::for_integrator(&self.scenario.goal_pos, t))
            }
            (CostKind::Goal, RobotKind::Dubins(_)) => {
                Box::new(GoalCost::for_dubins(&self.scenario.goal_pos, t))
            }
            (
                CostKind::GoalAttention {
                    beta,
                    gamma_hat,
                    reward_sign,
                },
                _,
            ) => {
                let base = GoalCost::for_dubins(&self.scenario.goal_pos, t);
                let mut cost = AttentionCost::inactive(base, *beta, *gamma_hat);
                cost.reward_sign = *reward_sign;
                if let Some(target) = self.attention_target {
                    let means = horizon_beliefs[target]
                        .iter()
                        .map(|b| b.mean.clone())
                        .collect();
                    cost = cost.with_target(means);
                }
                Box::new(cost)
            }
        }
    }

    /// Propagate beliefs, build keep-outs, run the SQP and the refinement.
    pub fn plan_cycle(&mut self) -> Result<CyclePlan<S>> {
        let started = std::time::Instant::now();
        let scenario = &self.scenario;
        let model = scenario.robot.as_model();

        let mut horizon_beliefs = Vec::with_capacity(scenario.obstacles.len());
        for (belief, ob) in self.beliefs.iter().zip(&scenario.obstacles) {
            horizon_beliefs.push(propagate_horizon(belief, &ob.model, scenario.horizon)?);
        }

        let init = self.warm_start();
        let l0 = match scenario.l0_policy {
            L0PolicyKind::MaxUncertainty => L0Policy::LeadingEigenvector,
            L0PolicyKind::TowardRobot => L0Policy::TowardRobot(
                (1..=scenario.horizon)
                    .map(|t| model.position(&init.states[t]))
                    .collect(),
            ),
        };
        let budget = RiskBudget::new(scenario.alpha, scenario.horizon, scenario.obstacles.len())?;
        let models: Vec<ObstacleModel<S>> =
            scenario.obstacles.iter().map(|o| o.model.clone()).collect();
        let keepouts = build_keepouts(&horizon_beliefs, &budget, &models, &l0)?;

        let cost = self.build_cost(&horizon_beliefs);
        let problem = PlanningProblem {
            model,
            cost: cost.as_ref(),
            x0: self.state.clone(),
            horizon: scenario.horizon,
            settings: scenario.sqp,
        };
        let sqp = sqp_solve(&problem, &keepouts, &init)?;
        let halfspaces = build_supporting_halfspaces(&keepouts, model, &sqp.iterate)?;
        let refined = solve_refined(
            &problem,
            &halfspaces,
            &sqp.iterate,
            scenario.gamma,
            scenario.k_budget,
            cst(RELEVANCE_THRESHOLD),
        )?;

        Ok(CyclePlan {
            keepouts,
            horizon_beliefs,
            sqp,
            halfspaces,
            refined,
            beliefs_at_plan: self.beliefs.clone(),
            solve_ms: started.elapsed().as_secs_f64() * 1e3,
        })
    }

    /// Execute one planned step: move the robot, advance the world, attempt
    /// the scheduled observations, log. Returns a terminal outcome when the
    /// episode ends here.
    pub fn execute(&mut self, plan: &CyclePlan<S>) -> Result<Option<Outcome>> {
        let scenario = self.scenario.clone();
        let model = scenario.robot.as_model();
        let mut record = self.record_from_plan(plan);

        if plan.sqp.status == SqpStatus::InfeasibleSoft {
            self.infeasible_streak += 1;
            if self.infeasible_streak >= 3 {
                // halt at the last state
                record.executed_state = self.state.iter().map(|v| as_f64(*v)).collect();
                record.executed_margin = None;
                self.records.push(record);
                return Ok(Some(Outcome::PlannerFailed));
            }
        } else {
            self.infeasible_streak = 0;
        }

        let x_next = match scenario.execution {
            ExecutionMode::Waypoint => scenario.robot.canonicalize(&plan.refined.plan.states[1]),
            ExecutionMode::VelocityInput => scenario
                .robot
                .exec_step(&self.state, &plan.refined.plan.inputs[0]),
        };

        // margin of the executed position against this cycle's t=1 ellipsoids
        let pos_next = model.position(&x_next);
        let mut exec_margin = f64::INFINITY;
        for o in 0..scenario.obstacles.len() {
            let e = plan.keepouts.at(o, 1);
            if !e.vacuous {
                exec_margin = exec_margin.min(as_f64(constraint_value(e, &pos_next)) - 1.0);
            }
        }
        record.executed_margin = exec_margin.is_finite().then_some(exec_margin);
        record.executed_state = x_next.iter().map(|v| as_f64(*v)).collect();

        // world advances one step
        let step = (self.cycle + 1) as u64;
        for (o, ob) in scenario.obstacles.iter().enumerate() {
            let chol_w = psd_sqrt(&ob.model.sigma_w);
            let mut rng = stream_rng(scenario.seed, 2 * o as u64, step);
            let xi = standard_normals::<S>(&mut rng, ob.model.b.ncols());
            self.truth[o] = advance_truth(&ob.model, &chol_w, &self.truth[o], &xi);
        }

        // beliefs advance; scheduled observations correct them
        for (o, ob) in scenario.obstacles.iter().enumerate() {
            self.beliefs[o] = predict_step(&self.beliefs[o], &ob.model)?;
        }
        for &o in &plan.refined.report.selected {
            let visible = match &scenario.robot {
                RobotKind::Dubins(m) => {
                    in_field_of_view(&x_next, &self.beliefs[o].mean, m.theta_v)
                }
                RobotKind::Integrator(_) => true,
            };
            let mut attempt = ObservationAttempt {
                obstacle: o,
                success: visible,
            };
            if visible {
                let sensor = &scenario.sensor;
                let chol_nu = psd_sqrt(&sensor.sigma_nu);
                let mut rng = stream_rng(scenario.seed, 2 * o as u64 + 1, step);
                let nu = &chol_nu * standard_normals::<S>(&mut rng, sensor.obs_dim());
                let z = &sensor.h * &self.truth[o] + nu;
                match kalman_update(&self.beliefs[o], sensor, &z) {
                    Ok(updated) => self.beliefs[o] = updated,
                    Err(e) => {
                        log::warn!("kalman update failed for obstacle {o}: {e}");
                        attempt.success = false;
                    }
                }
            }
            record.observations.push(attempt);
        }

        // the attention target is the most relevant obstacle of this cycle
        self.attention_target = plan.refined.report.selected.first().copied();
        self.prev_plan = Some(plan.refined.plan.clone());
        self.state = x_next;
        self.cycle += 1;

        // true collision check at the new time
        let pos = model.position(&self.state);
        let collided = scenario
            .obstacles
            .iter()
            .zip(&self.truth)
            .any(|(ob, xt)| (&pos - xt).norm() <= ob.model.radius);
        self.records.push(record);
        if collided {
            return Ok(Some(Outcome::Collision));
        }
        Ok(None)
    }

    fn record_from_plan(&self, plan: &CyclePlan<S>) -> CycleRecord {
        let scenario = &self.scenario;
        let model = scenario.robot.as_model();
        let n_o = scenario.obstacles.len();
        let t_max = scenario.horizon;
        let mut margins = vec![vec![None; t_max]; n_o];
        for o in 0..n_o {
            for t in 1..=t_max {
                let e = plan.keepouts.at(o, t);
                if !e.vacuous {
                    let pos = model.position(&plan.refined.plan.states[t]);
                    margins[o][t - 1] = Some(as_f64(constraint_value(e, &pos)) - 1.0);
                }
            }
        }
        let lambda_grid = (0..n_o)
            .map(|o| {
                (0..t_max)
                    .map(|t| as_f64(plan.refined.report.lambda_grid[(o, t)]))
                    .collect()
            })
            .collect();
        CycleRecord {
            cycle: self.cycle,
            executed_state: Vec::new(),
            planned_states: plan
                .refined
                .plan
                .states
                .iter()
                .map(|x| x.iter().map(|v| as_f64(*v)).collect())
                .collect(),
            planned_inputs: plan
                .refined
                .plan
                .inputs
                .iter()
                .map(|u| u.iter().map(|v| as_f64(*v)).collect())
                .collect(),
            objective_sqp: as_f64(plan.sqp.iterate.objective),
            objective_refined: as_f64(plan.refined.plan.objective),
            slack_total: as_f64(plan.sqp.iterate.slack_total),
            sqp_status: format!("{:?}", plan.sqp.status),
            margins,
            executed_margin: None,
            lambda_grid,
            lambda_scores: plan
                .refined
                .report
                .scores
                .iter()
                .map(|v| as_f64(*v))
                .collect(),
            selected: plan.refined.report.selected.clone(),
            observations: Vec::new(),
            beliefs: plan
                .beliefs_at_plan
                .iter()
                .map(|b| BeliefRecord {
                    mean: b.mean.iter().map(|v| as_f64(*v)).collect(),
                    cov: (0..b.cov.nrows())
                        .map(|i| (0..b.cov.ncols()).map(|j| as_f64(b.cov[(i, j)])).collect())
                        .collect(),
                })
                .collect(),
            sqp_iterations: plan.sqp.iterations,
            solve_ms: plan.solve_ms,
        }
    }

    /// Terminal condition check: goal reached or the cycle budget spent.
    pub fn check_terminal(&self) -> Option<Outcome> {
        if self.at_goal() {
            Some(Outcome::Reached)
        } else if self.cycle >= self.scenario.max_cycles {
            Some(Outcome::MaxCycles)
        } else {
            None
        }
    }

    pub fn into_runlog(self, outcome: Outcome) -> RunLog {
        RunLog {
            schema_version: 1,
            seed: self.scenario.seed,
            outcome,
            scenario: self.scenario_echo,
            records: self.records,
        }
    }

    /// Run to termination.
    pub fn run(mut self) -> Result<(RunLog, Outcome)> {
        let outcome = loop {
            if let Some(outcome) = self.check_terminal() {
                break outcome;
            }
            let plan = self.plan_cycle()?;
            if let Some(outcome) = self.execute(&plan)? {
                break outcome;
            }
        };
        Ok((self.into_runlog(outcome), outcome))
    }
}

/// Convenience wrapper: parse, simulate, log.
pub fn run_episode<S: Scalar>(scenario_doc: &serde_json::Value) -> Result<(RunLog, Outcome)>
where
    StandardNormal: Distribution<S>,
{
    let scenario = Scenario::<S>::from_value(scenario_doc)?;
    Episode::new(scenario, scenario_doc.clone())?.run()
}

#[derive(Debug, Clone, Copy)]
pub struct CollideEstimate {
    pub probability: f64,
    pub std_error: f64,
    pub samples: usize,
}

/// Monte Carlo estimate of the probability that a planned trajectory
/// collides with any obstacle at any horizon step, sampling obstacle paths
/// from the plan-time beliefs.
///
/// `plan_positions[t-1]` is the planned robot position at step `t`. Pairs
/// whose collision probability is provably below ~1e-18 (chi-square tail
/// bound on the Gaussian deviation) are skipped, and each obstacle's path
/// is simulated only as far as its last non-negligible step; the chance
/// that this pruning flips even one of the `samples` indicators is
/// billions of times smaller than the estimator's own noise.
pub fn estimate_collide_pr<S: Scalar>(
    plan_positions: &[DVector<S>],
    beliefs: &[GaussianBelief<S>],
    models: &[ObstacleModel<S>],
    samples: usize,
    seed: u64,
) -> Result<CollideEstimate> {
    if samples < 10_000 {
        return Err(Error::Config("estimate_collide_pr needs at least 1e4 samples".into()));
    }
    if beliefs.len() != models.len() {
        return Err(Error::Config("belief/model counts differ".into()));
    }
    let t_max = plan_positions.len();
    const CHI2_BOUND: f64 = 100.0;

    struct Ob {
        n: usize,
        p: usize,
        a: Vec<f64>,
        a_identity: bool,
        bl: Vec<f64>,
        l0: Vec<f64>,
        l0_zero: bool,
        /// plan position minus predicted obstacle mean, flattened per step
        diff: Vec<f64>,
        active: Vec<bool>,
        t_sim: usize,
        r2: f64,
    }

    let mut obs: Vec<Ob> = Vec::new();
    for (belief, model) in beliefs.iter().zip(models) {
        let n = model.state_dim();
        let p = model.b.ncols();
        let a64 = DMatrix::from_fn(n, n, |i, j| as_f64(model.a[(i, j)]));
        let b64 = DMatrix::from_fn(n, p, |i, j| as_f64(model.b[(i, j)]));
        let sw64 = DMatrix::from_fn(p, p, |i, j| as_f64(model.sigma_w[(i, j)]));
        let cov0 = DMatrix::from_fn(n, n, |i, j| as_f64(belief.cov[(i, j)]));
        let bl = &b64 * psd_sqrt(&sw64);
        let l0 = psd_sqrt(&cov0);
        let a_identity = a64 == DMatrix::identity(n, n);
        let r = as_f64(model.radius);

        // propagate mean and covariance; mark non-negligible pairs
        let mut mean = DVector::from_fn(n, |i, _| as_f64(belief.mean[i]));
        let mut cov = cov0.clone();
        let drift = &b64 * DVector::from_fn(p, |i, _| as_f64(model.mu_w[i]));
        let noise = &b64 * &sw64 * b64.transpose();
        let mut diff = vec![0.0; t_max * n];
        let mut active = vec![false; t_max + 1];
        let mut t_sim = 0usize;
        for t in 1..=t_max {
            mean = &a64 * &mean + &drift;
            cov = &a64 * &cov * a64.transpose() + &noise;
            let lam_max = cov
                .clone()
                .symmetric_eigen()
                .eigenvalues
                .iter()
                .fold(0.0f64, |a, &b| a.max(b));
            let mut d2 = 0.0;
            for i in 0..n {
                let d = as_f64(plan_positions[t - 1][i]) - mean[i];
                diff[(t - 1) * n + i] = d;
                d2 += d * d;
            }
            let gap = d2.sqrt() - r;
            let reachable = gap <= 0.0 || gap * gap <= CHI2_BOUND * lam_max;
            active[t] = reachable;
            if reachable {
                t_sim = t;
            }
        }
        obs.push(Ob {
            n,
            p,
            a: a64.transpose().as_slice().to_vec(), // row-major
            a_identity,
            bl: bl.transpose().as_slice().to_vec(),
            l0: l0.transpose().as_slice().to_vec(),
            l0_zero: l0.amax() == 0.0,
            diff,
            active,
            t_sim,
            r2: r * r,
        });
    }

    let mut rng = rand::rngs::SmallRng::seed_from_u64(seed);
    let mut hits = 0usize;
    let mut e = [0.0f64; 16];
    let mut tmp = [0.0f64; 16];
    let mut xi = [0.0f64; 16];
    for _ in 0..samples {
        let mut hit = false;
        'obstacles: for ob in &obs {
            if ob.t_sim == 0 {
                continue;
            }
            let n = ob.n;
            // e = L0 xi
            if ob.l0_zero {
                e[..n].fill(0.0);
            } else {
                for x in xi[..n].iter_mut() {
                    *x = rng.sample::<f64, _>(StandardNormal);
                }
                for i in 0..n {
                    let mut acc = 0.0;
                    for j in 0..n {
                        acc += ob.l0[i * n + j] * xi[j];
                    }
                    e[i] = acc;
                }
            }
            for t in 1..=ob.t_sim {
                if !ob.a_identity {
                    for i in 0..n {
                        let mut acc = 0.0;
                        for j in 0..n {
                            acc += ob.a[i * n + j] * e[j];
                        }
                        tmp[i] = acc;
                    }
                    e[..n].copy_from_slice(&tmp[..n]);
                }
                for x in xi[..ob.p].iter_mut() {
                    *x = rng.sample::<f64, _>(StandardNormal);
                }
                for i in 0..n {
                    let mut acc = 0.0;
                    for j in 0..ob.p {
                        acc += ob.bl[i * ob.p + j] * xi[j];
                    }
                    e[i] += acc;
                }
                if ob.active[t] {
                    let base = (t - 1) * n;
                    let mut d2 = 0.0;
                    for i in 0..n {
                        let d = ob.diff[base + i] - e[i];
                        d2 += d * d;
                    }
                    if d2 <= ob.r2 {
                        hit = true;
                        break 'obstacles;
                    }
                }
            }
        }
        if hit {
            hits += 1;
        }
    }
    let p_hat = hits as f64 / samples as f64;
    Ok(CollideEstimate {
        probability: p_hat,
        std_error: (p_hat * (1.0 - p_hat) / samples as f64).sqrt(),
        samples,
    })
}

#[derive(Debug, Clone)]
pub struct AuditReport {
    pub alpha: f64,
    pub max_probability: f64,
    pub max_cycle: usize,
    pub max_std_error: f64,
    pub cycles_audited: usize,
    pub pass: bool,
    /// first cycle violating the bound, if any
    pub violating_cycle: Option<usize>,
}

/// Re-estimate the collision probability of every logged plan and check it
/// against `alpha + 3 SE`.
pub fn audit_runlog(log: &RunLog, samples: usize, seed: u64) -> Result<AuditReport> {
    let scenario = Scenario::<f64>::from_value(&log.scenario)?;
    if log.records.is_empty() {
        return Err(Error::Config("run log has no cycles to audit".into()));
    }
    let model = scenario.robot.as_model();
    let models: Vec<ObstacleModel<f64>> =
        scenario.obstacles.iter().map(|o| o.model.clone()).collect();
    let alpha = scenario.alpha;
    let mut max_probability = f64::NEG_INFINITY;
    let mut max_cycle = 0;
    let mut max_std_error = 0.0;
    let mut violating_cycle = None;
    for record in &log.records {
        let positions: Vec<DVector<f64>> = record.planned_states[1..]
            .iter()
            .map(|x| {
                let state = DVector::from_fn(x.len(), |i, _| x[i]);
                model.position(&state)
            })
            .collect();
        let beliefs: Vec<GaussianBelief<f64>> = record
            .beliefs
            .iter()
            .map(|b| {
                let n = b.mean.len();
                GaussianBelief::new(
                    DVector::from_fn(n, |i, _| b.mean[i]),
                    DMatrix::from_fn(n, n, |i, j| b.cov[i][j]),
                )
            })
            .collect::<Result<_>>()?;
        let est = estimate_collide_pr(
            &positions,
            &beliefs,
            &models,
            samples,
            seed ^ (record.cycle as u64).wrapping_mul(0x9e3779b97f4a7c15),
        )?;
        if est.probability > max_probability {
            max_probability = est.probability;
            max_cycle = record.cycle;
            max_std_error = est.std_error;
        }
        if est.probability > alpha + 3.0 * est.std_error && violating_cycle.is_none() {
            violating_cycle = Some(record.cycle);
        }
    }
    Ok(AuditReport {
        alpha,
        max_probability,
        max_cycle,
        max_std_error,
        cycles_audited: log.records.len(),
        pass: violating_cycle.is_none(),
        violating_cycle,
    })
}
