use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use robust_harvest::io::{
    read_solution_csv, solution_from_table, sweep_plot_script, write_histogram_csv, write_paths_csv, write_solution_csv,
    write_sweep_csv,
};
use robust_harvest::statics::check_grid;
use robust_harvest::{
    estimate_payoff, monotonicity_report, solve_beta, sweep, verify_solution, AmbiguityProblem, HjbReport, Measure,
    SimConfig, ThresholdSolution,
};
use serde_json::{json, Value};

use crate::config::{MeasureKind, RunConfig};
use crate::exit::{CliError, ExitKind};

/// Outcome of a command: a JSON results block and an optional failure that
/// still lets the outputs be written.
pub struct Outcome {
    pub results: Value,
    pub failure: Option<CliError>,
}

fn harvest<T>(r: robust_harvest::Result<T>) -> Result<T, CliError> {
    r.map_err(CliError::from_harvest)
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path).map(BufWriter::new).map_err(|e| CliError::io(&format!("cannot create {}", path.display()), e))
}

fn write_with<F>(path: &Path, f: F) -> Result<(), CliError>
where
    F: FnOnce(&mut BufWriter<File>) -> std::io::Result<()>,
{
    let mut w = create(path)?;
    f(&mut w).and_then(|_| w.flush()).map_err(|e| CliError::io(&format!("cannot write {}", path.display()), e))
}

pub fn prepare_output_dir(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    let dir = cfg.output_dir().to_path_buf();
    fs::create_dir_all(&dir).map_err(|e| CliError::io(&format!("cannot create {}", dir.display()), e))?;
    Ok(dir)
}

pub fn write_resolved(dir: &Path, cfg: &RunConfig) -> Result<(), CliError> {
    let path = dir.join("config.resolved.toml");
    fs::write(&path, cfg.to_toml()).map_err(|e| CliError::io(&format!("cannot write {}", path.display()), e))
}

pub fn write_report(dir: &Path, command: &str, cfg: &RunConfig, results: &Value) -> Result<(), CliError> {
    let report = json!({
        "version": env!("CARGO_PKG_VERSION"),
        "command": command,
        "seed": cfg.sim.seed,
        "config": cfg,
        "results": results,
    });
    let text = serde_json::to_string_pretty(&report).map_err(|e| CliError::new(ExitKind::Internal, e.to_string()))?;
    let path = dir.join("report.json");
    fs::write(&path, text + "\n").map_err(|e| CliError::io(&format!("cannot write {}", path.display()), e))
}

fn assumptions_gate(problem: &AmbiguityProblem, cfg: &RunConfig) -> Result<Value, CliError> {
    let report = problem.check_assumptions();
    let value = json!(report);
    if cfg.solver.require_assumptions {
        if let Some(f) = report.first_failure() {
            return Err(assumption_error(f));
        }
    }
    Ok(value)
}

fn assumption_error(f: &robust_harvest::model::AssumptionCheck) -> CliError {
    CliError::new(ExitKind::Assumption, format!("{} violated: {}: {}", f.assumption, f.name, f.detail))
}

fn solution_summary(sol: &ThresholdSolution) -> Value {
    json!({
        "epsilon": sol.epsilon,
        "x_eps": sol.x_eps,
        "x_bar_eps": sol.x_bar_eps,
        "beta": sol.beta_eps,
        "ell": sol.ell_eps,
        "beta_tolerance": sol.beta_tolerance,
        "x_min": sol.x_min,
        "iterations": sol.iterations,
        "x_min_shift": sol.x_min_shift,
        "nodes": sol.v_grid.xs.len(),
    })
}

fn hjb_failure(h: &HjbReport) -> CliError {
    CliError::new(
        ExitKind::Numeric,
        format!(
            "HJB verification failed: left residual {:e}, right excess {:e}, pasting ({:e}, {:e})",
            h.max_abs_residual_left, h.max_excess_right, h.pasting_residuals.0, h.pasting_residuals.1
        ),
    )
}

pub fn check(cfg: &RunConfig) -> Result<Outcome, CliError> {
    let problem = cfg.problem()?;
    let report = problem.check_assumptions();
    print!("{report}");
    let failure = report.first_failure().map(assumption_error);
    Ok(Outcome { results: json!({ "assumptions": report }), failure })
}

pub fn solve(cfg: &RunConfig, dir: &Path) -> Result<Outcome, CliError> {
    let problem = cfg.problem()?;
    let assumptions = assumptions_gate(&problem, cfg)?;
    let sol = harvest(solve_beta(&problem, &cfg.solver.shooting()?))?;
    write_with(&dir.join("solution.csv"), |w| write_solution_csv(w, &sol.v_grid))?;
    let hjb = harvest(verify_solution(&problem, &sol))?;
    println!("beta = {}", sol.beta_eps);
    println!("ell = {}", sol.ell_eps);
    println!("hjb = {}", if hjb.pass { "pass" } else { "FAIL" });
    let failure = (!hjb.pass).then(|| hjb_failure(&hjb));
    Ok(Outcome { results: json!({ "assumptions": assumptions, "solution": solution_summary(&sol), "hjb": hjb }), failure })
}

fn load_solution(problem: &AmbiguityProblem, path: &Path) -> Result<ThresholdSolution, CliError> {
    let file = File::open(path)
        .map_err(|e| CliError::new(ExitKind::MissingInput, format!("solution required: cannot read {}: {e}", path.display())))?;
    let table = harvest(read_solution_csv(BufReader::new(file)))?;
    harvest(solution_from_table(problem, &table))
}

fn persisted_solution_path(cfg: &RunConfig, dir: &Path) -> PathBuf {
    cfg.solution.clone().unwrap_or_else(|| dir.join("solution.csv"))
}

pub fn verify(cfg: &RunConfig, dir: &Path) -> Result<Outcome, CliError> {
    let problem = cfg.problem()?;
    let path = persisted_solution_path(cfg, dir);
    let sol = load_solution(&problem, &path)?;
    let hjb = harvest(verify_solution(&problem, &sol))?;
    println!("beta = {}", sol.beta_eps);
    println!("hjb = {}", if hjb.pass { "pass" } else { "FAIL" });
    let failure = (!hjb.pass).then(|| hjb_failure(&hjb));
    Ok(Outcome { results: json!({ "solution_file": path, "solution": solution_summary(&sol), "hjb": hjb }), failure })
}

pub struct SimulateOptions {
    pub assert_value: bool,
    pub inline_solve: bool,
}

pub fn simulate(cfg: &RunConfig, dir: &Path, opts: &SimulateOptions) -> Result<Outcome, CliError> {
    let problem = cfg.problem()?;
    let sol = match (&cfg.solution, opts.inline_solve) {
        (Some(path), _) => load_solution(&problem, path)?,
        (None, false) => load_solution(&problem, &dir.join("solution.csv"))?,
        (None, true) => {
            assumptions_gate(&problem, cfg)?;
            let sol = harvest(solve_beta(&problem, &cfg.solver.shooting()?))?;
            write_with(&dir.join("solution.csv"), |w| write_solution_csv(w, &sol.v_grid))?;
            sol
        }
    };
    let measure = match cfg.sim.measure {
        MeasureKind::Reference => Measure::Reference,
        MeasureKind::WorstCase => Measure::WorstCase(Arc::new(sol.v_grid.clone())),
    };
    let s = &cfg.sim;
    let mut sim = SimConfig::new(problem.clone(), sol.beta_eps, measure, s.seed);
    sim.x0 = s.x0.unwrap_or(sol.beta_eps);
    sim.dt = s.dt;
    sim.horizon = s.horizon;
    sim.n_paths = s.n_paths;
    sim.burn_in = s.burn_in;
    sim.histogram_bins = s.histogram_bins;
    let est = harvest(estimate_payoff(&sim))?;
    write_with(&dir.join("paths.csv"), |w| write_paths_csv(w, &est.per_path))?;
    write_with(&dir.join("histogram.csv"), |w| write_histogram_csv(w, sol.beta_eps, &est.histogram))?;

    let ell = sol.ell_eps;
    let k = s.ci_multiple;
    // Under the reference law the threshold policy earns at least the robust value.
    let one_sided = cfg.sim.measure == MeasureKind::Reference && problem.epsilon > 0.0;
    let within = if one_sided {
        est.mean >= ell - k * est.std_error
    } else {
        (est.mean - ell).abs() <= k * est.std_error
    };
    println!("mean = {} +- {} (ell = {ell})", est.mean, est.std_error);
    let failure = if opts.assert_value && !within {
        Some(CliError::new(
            ExitKind::Numeric,
            format!(
                "value assertion failed: mean {} vs ell {ell} exceeds {k} standard errors ({}){}",
                est.mean,
                est.std_error,
                if one_sided { ", one-sided" } else { "" }
            ),
        ))
    } else {
        None
    };
    let results = json!({
        "solution": solution_summary(&sol),
        "simulation": {
            "measure": sim.measure.name(),
            "x0": sim.x0,
            "mean": est.mean,
            "std_error": est.std_error,
            "std_error_defined": est.std_error_defined,
            "ell": ell,
            "z": if est.std_error > 0.0 { (est.mean - ell) / est.std_error } else { f64::NAN },
            "check": if one_sided { "one_sided" } else { "two_sided" },
            "within_ci": within,
            "n_paths": est.n_paths,
            "aborted": est.aborted,
            "half_means": est.half_means,
            "split_consistent": est.split_consistent,
            "negative_clip_fraction": est.negative_clip_fraction,
            "below_floor_fraction": est.below_floor_fraction,
            "max_kernel_ratio": est.max_kernel_ratio,
        },
    });
    Ok(Outcome { results, failure })
}

pub fn sweep_cmd(cfg: &RunConfig, dir: &Path) -> Result<Outcome, CliError> {
    let grid = cfg.eps_grid();
    check_grid(&grid).map_err(|e| CliError::new(ExitKind::Usage, e.to_string()))?;
    let model = cfg.model.build()?;
    let rows = harvest(sweep(&model, &grid, cfg.solver.x_max, &cfg.solver.shooting()?))?;
    write_with(&dir.join("sweep.csv"), |w| write_sweep_csv(w, &rows))?;
    fs::write(dir.join("sweep.csv.gp"), sweep_plot_script("sweep.csv"))
        .map_err(|e| CliError::io("cannot write sweep.csv.gp", e))?;
    let mono = monotonicity_report(&rows);
    for r in &rows {
        match &r.error {
            None => println!("eps = {:<6} beta = {:.10} ell = {:.10}", r.epsilon, r.beta_eps, r.ell_eps),
            Some(e) => println!("eps = {:<6} error: {e}", r.epsilon),
        }
    }
    println!("monotonicity = {}", if mono.pass { "pass" } else { "FAIL" });
    let failure = if !mono.failed_rows.is_empty() {
        Some(CliError::new(ExitKind::Numeric, format!("solver failed for eps in {:?}", mono.failed_rows)))
    } else if !mono.pass {
        Some(CliError::new(ExitKind::Numeric, "beta or ell increases with eps beyond the slack"))
    } else {
        None
    };
    // wall_ms is left out so the report is reproducible.
    let table: Vec<Value> = rows
        .iter()
        .map(|r| {
            json!({
                "epsilon": r.epsilon, "x_eps": r.x_eps, "x_bar_eps": r.x_bar_eps, "beta": r.beta_eps,
                "ell": r.ell_eps, "iterations": r.iterations, "beta_tolerance": r.beta_tolerance, "error": r.error,
            })
        })
        .collect();
    Ok(Outcome { results: json!({ "sweep_csv": "sweep.csv", "rows": table, "monotonicity": mono }), failure })
}

