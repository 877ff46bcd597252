//! Command-line front end: run scenarios, batch seeds, audit logged plans
//! against the collision-probability bound, and check Slater's condition.

mod svg;

use clap::{Parser, Subcommand};
use safely::scenario::apply_override;
use safely::sim::{audit_runlog, Episode, Outcome, RunLog};
use safely::Scenario;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "safely", about = "Receding-horizon stochastic motion planner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario (or a batch of seeds) and write run artifacts.
    Run {
        /// scenario JSON file
        #[arg(long)]
        scenario: PathBuf,
        /// single seed override
        #[arg(long, conflicts_with = "seeds")]
        seed: Option<u64>,
        /// inclusive seed range A..B, one run directory per seed
        #[arg(long)]
        seeds: Option<String>,
        /// output directory (default: current directory)
        #[arg(long, default_value = ".")]
        out: PathBuf,
        /// dotted-key scenario overrides, e.g. --set risk.alpha=0.02
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// skip the SVG render (headless CI)
        #[arg(long)]
        data_only: bool,
        /// also stream the per-iteration SQP trace to sqp_trace.csv
        #[arg(short, long)]
        verbose: bool,
    },
    /// Recompute the Monte Carlo collision estimate of every logged plan
    /// and check it against alpha + 3 standard errors.
    Audit {
        /// runlog.jsonl produced by `run`
        #[arg(long)]
        log: PathBuf,
        /// Monte Carlo samples per plan
        #[arg(long, default_value_t = 100_000)]
        samples: usize,
        /// estimator seed
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run one planning cycle and report the Chebyshev radius of the
    /// refined problem's constraint polytope (positive radius = Slater
    /// holds).
    Slater {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
}

fn main() {
    env_logger::init();
    let cli = Cli::parse();
    let code = match cli.command {
        Command::Run {
            scenario,
            seed,
            seeds,
            out,
            overrides,
            data_only,
            verbose,
        } => cmd_run(&scenario, seed, seeds.as_deref(), &out, &overrides, data_only, verbose),
        Command::Audit { log, samples, seed } => cmd_audit(&log, samples, seed),
        Command::Slater {
            scenario,
            seed,
            overrides,
        } => cmd_slater(&scenario, seed, &overrides),
    };
    std::process::exit(code);
}

fn load_scenario_doc(
    path: &Path,
    seed: Option<u64>,
    overrides: &[String],
) -> Result<serde_json::Value, String> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| format!("cannot read {}: {e}", path.display()))?;
    let mut doc: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| format!("scenario parse: {e}"))?;
    for kv in overrides {
        let (key, value) = kv
            .split_once('=')
            .ok_or_else(|| format!("override '{kv}' is not KEY=VALUE"))?;
        apply_override(&mut doc, key, value).map_err(|e| e.to_string())?;
    }
    if let Some(s) = seed {
        apply_override(&mut doc, "seed", &s.to_string()).map_err(|e| e.to_string())?;
    }
    // validate before running
    Scenario::<f64>::from_value(&doc).map_err(|e| e.to_string())?;
    Ok(doc)
}

fn run_one(
    doc: &serde_json::Value,
    dir: &Path,
    data_only: bool,
    verbose: bool,
) -> Result<(RunLog, Outcome), String> {
    std::fs::create_dir_all(dir).map_err(|e| format!("cannot create {}: {e}", dir.display()))?;
    let scenario = Scenario::<f64>::from_value(doc).map_err(|e| e.to_string())?;
    let mut episode = Episode::new(scenario, doc.clone()).map_err(|e| e.to_string())?;

    let mut trace_file = if verbose {
        let f = std::fs::File::create(dir.join("sqp_trace.csv"))
            .map_err(|e| format!("sqp_trace.csv: {e}"))?;
        let mut w = BufWriter::new(f);
        writeln!(
            w,
            "cycle,iteration,objective,qp_slack_sum,true_violation,step_norm,halvings,qp_iterations"
        )
        .map_err(|e| e.to_string())?;
        Some(w)
    } else {
        None
    };

    let outcome = loop {
        if let Some(outcome) = episode.check_terminal() {
            break outcome;
        }
        let plan = episode.plan_cycle().map_err(|e| e.to_string())?;
        if let Some(w) = trace_file.as_mut() {
            for t in &plan.sqp.trace {
                writeln!(
                    w,
                    "{},{},{:.12e},{:.12e},{:.12e},{:.12e},{},{}",
                    episode.cycle,
                    t.iteration,
                    t.objective,
                    t.qp_slack_sum,
                    t.true_violation,
                    t.step_norm,
                    t.halvings,
                    t.qp_iterations
                )
                .map_err(|e| e.to_string())?;
            }
        }
        if let Some(outcome) = episode.execute(&plan).map_err(|e| e.to_string())? {
            break outcome;
        }
    };
    let log = episode.into_runlog(outcome);

    let f = std::fs::File::create(dir.join("runlog.jsonl")).map_err(|e| e.to_string())?;
    log.write_jsonl(&mut BufWriter::new(f)).map_err(|e| e.to_string())?;
    let f = std::fs::File::create(dir.join("trajectory.csv")).map_err(|e| e.to_string())?;
    log.write_csv(&mut BufWriter::new(f)).map_err(|e| e.to_string())?;
    std::fs::write(
        dir.join("summary.json"),
        serde_json::to_string_pretty(&log.summary()).unwrap(),
    )
    .map_err(|e| e.to_string())?;
    if !data_only {
        let rendered = svg::render_trajectory(&log).map_err(|e| e.to_string())?;
        std::fs::write(dir.join("trajectory.svg"), rendered).map_err(|e| e.to_string())?;
    }
    Ok((log, outcome))
}

fn outcome_code(outcome: Outcome) -> i32 {
    match outcome {
        Outcome::Reached | Outcome::MaxCycles => 0,
        Outcome::PlannerFailed => 2,
        Outcome::Collision => 3,
    }
}

fn cmd_run(
    scenario: &Path,
    seed: Option<u64>,
    seeds: Option<&str>,
    out: &Path,
    overrides: &[String],
    data_only: bool,
    verbose: bool,
) -> i32 {
    let base_doc = match load_scenario_doc(scenario, seed, overrides) {
        Ok(d) => d,
        Err(e) => {
            eprintln!("error: {e}");
            return 1;
        }
    };

    let Some(range) = seeds else {
        return match run_one(&base_doc, out, data_only, verbose) {
            Ok((log, outcome)) => {
                println!(
                    "outcome: {:?} after {} cycles (artifacts in {})",
                    outcome,
                    log.records.len(),
                    out.display()
                );
                outcome_code(outcome)
            }
            Err(e) => {
                eprintln!("error: {e}");
                1
            }
        };
    };

    // batch: inclusive seed range A..B
    let parsed: Option<(u64, u64)> = range
        .split_once("..")
        .and_then(|(a, b)| Some((a.trim().parse().ok()?, b.trim().parse().ok()?)));
    let Some((lo, hi)) = parsed else {
        eprintln!("error: --seeds expects A..B, got '{range}'");
        return 1;
    };
    if hi < lo {
        eprintln!("error: empty seed range {lo}..{hi}");
        return 1;
    }
    let seeds: Vec<u64> = (lo..=hi).collect();
    let threads = std::env::var("SAFELY_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .unwrap_or_else(|| {
            std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1)
        })
        .max(1)
        .min(seeds.len());

    let mut results: Vec<Option<Result<(RunLog, Outcome), String>>> = Vec::new();
    results.resize_with(seeds.len(), || None);
    {
        let next = std::sync::atomic::AtomicUsize::new(0);
        let results_cell = std::sync::Mutex::new(&mut results);
        std::thread::scope(|scope| {
            for _ in 0..threads {
                scope.spawn(|| loop {
                    let idx = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                    if idx >= seeds.len() {
                        break;
                    }
                    let s = seeds[idx];
                    let mut doc = base_doc.clone();
                    let result = apply_override(&mut doc, "seed", &s.to_string())
                        .map_err(|e| e.to_string())
                        .and_then(|_| {
                            run_one(&doc, &out.join(format!("seed_{s}")), data_only, verbose)
                        });
                    results_cell.lock().unwrap()[idx] = Some(result);
                });
            }
        });
    }

    let mut worst = 0;
    let mut rows = Vec::new();
    for (s, res) in seeds.iter().zip(results.into_iter()) {
        match res.expect("worker filled every slot") {
            Ok((log, outcome)) => {
                let summary = log.summary();
                println!("seed {s}: {:?} after {} cycles", outcome, log.records.len());
                rows.push((*s, summary));
                let code = outcome_code(outcome);
                if code > worst {
                    worst = code;
                }
            }
            Err(e) => {
                eprintln!("seed {s}: error: {e}");
                worst = worst.max(1);
            }
        }
    }

    // aggregate across seeds
    if let Some((_, first)) = rows.first() {
        let n_obs = first["observation_counts"].as_array().map(|a| a.len()).unwrap_or(0);
        let mut agg = String::from("seed,outcome,cycles,mean_solve_ms");
        for i in 0..n_obs {
            agg.push_str(&format!(",obs_{i}"));
        }
        agg.push_str(",min_executed_margin\n");
        for (s, summary) in &rows {
            agg.push_str(&format!(
                "{s},{},{},{:.3}",
                summary["outcome"].as_str().unwrap_or("?"),
                summary["cycles"],
                summary["mean_solve_ms"].as_f64().unwrap_or(0.0)
            ));
            for i in 0..n_obs {
                agg.push_str(&format!(",{}", summary["observation_counts"][i]));
            }
            let margin = summary["min_executed_margin"].as_f64();
            agg.push_str(&match margin {
                Some(m) => format!(",{m:.9e}\n"),
                None => ",\n".to_string(),
            });
        }
        if let Err(e) =
            std::fs::create_dir_all(out).and_then(|_| std::fs::write(out.join("aggregate.csv"), agg))
        {
            eprintln!("error writing aggregate.csv: {e}");
            worst = worst.max(1);
        }
    }
    worst
}

fn cmd_audit(log_path: &Path, samples: usize, seed: u64) -> i32 {
    let file = match std::fs::File::open(log_path) {
        Ok(f) => f,
        Err(e) => {
            eprintln!("error: cannot open {}: {e}", log_path.display());
            return 1;
        }
    };
    let log = match RunLog::read_jsonl(std::io::BufReader::new(file)) {
        Ok(l) => l,
        Err(e) => {
            eprintln!("error: {e}");
            return 1;
        }
    };
    if log.records.is_empty() {
        eprintln!("error: run log has no cycles to audit");
        return 1;
    }
    match audit_runlog(&log, samples, seed) {
        Ok(report) => {
            println!(
                "audited {} cycles with {} samples each: max estimate {:.6} (+/- {:.6}) at cycle {}, alpha = {}",
                report.cycles_audited,
                samples,
                report.max_probability,
                report.max_std_error,
                report.max_cycle,
                report.alpha
            );
            if report.pass {
                println!("PASS: all cycle estimates within alpha + 3 SE");
                0
            } else {
                eprintln!(
                    "FAIL: cycle {} exceeds alpha + 3 SE",
                    report.violating_cycle.unwrap()
                );
                4
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn cmd_slater(scenario: &Path, seed: Option<u64>, overrides: &[String]) -> i32 {
    let doc = match load_scenario_doc(scenario, seed, overrides) {
        Ok(d) => d,
        Err(e) => {
            eprintln!("error: {e}");
            return 1;
        }
    };
    let parsed = Scenario::<f64>::from_value(&doc).expect("validated above");
    let mut episode = match Episode::new(parsed, doc) {
        Ok(e) => e,
        Err(e) => {
            eprintln!("error: {e}");
            return 1;
        }
    };
    let plan = match episode.plan_cycle() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: {e}");
            return 1;
        }
    };
    let (lo, hi) = {
        use safely::sqp::RobotModel;
        episode.scenario.robot.as_model().position_bounds()
    };
    match safely::refine::chebyshev_radius(&plan.halfspaces, &lo, &hi, &safely::SolverSettings::default())
    {
        Ok(res) => {
            if res.unbounded {
                println!("chebyshev radius: unbounded (interior trivially nonempty)");
                return 0;
            }
            println!("chebyshev radius: {:.6}", res.radius);
            if res.radius > 0.0 {
                println!("Slater's condition holds for the refined problem");
                0
            } else {
                eprintln!("Slater's condition FAILS: radius <= 0");
                2
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
