//! CSV interchange. Reals are written with 17 significant digits so that
//! every value round-trips exactly.

use std::io::{self, BufRead, Write};

use crate::error::{HarvestError, Result};
use crate::model::AmbiguityProblem;
use crate::sde_sim::PathStats;
use crate::shooting::{riccati_rhs, PotentialGrid, ThresholdSolution};
use crate::statics::SweepRow;

pub const SOLUTION_HEADER: &str = "x,v,vprime";
pub const PATHS_HEADER: &str = "path_id,harvest_total,kl_penalty,payoff_estimate,aborted_flag";
pub const HISTOGRAM_HEADER: &str = "bin_lo,bin_hi,count";
pub const SWEEP_HEADER: &str = "epsilon,x_eps,x_bar_eps,beta_eps,ell_eps,iterations,wall_ms";

/// Lossless text form of a real.
pub fn real(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn write_solution_csv<W: Write>(mut w: W, grid: &PotentialGrid) -> io::Result<()> {
    writeln!(w, "{SOLUTION_HEADER}")?;
    for i in 0..grid.xs.len() {
        writeln!(w, "{},{},{}", real(grid.xs[i]), real(grid.v[i]), real(grid.vprime[i]))?;
    }
    Ok(())
}

/// Parsed `x,v,vprime` columns.
#[derive(Debug, Clone, PartialEq)]
pub struct SolutionTable {
    pub xs: Vec<f64>,
    pub v: Vec<f64>,
    pub vprime: Vec<f64>,
}

pub fn read_solution_csv<R: BufRead>(r: R) -> Result<SolutionTable> {
    let mut lines = r.lines();
    let header = lines
        .next()
        .ok_or_else(|| HarvestError::InvalidInput("solution file is empty".into()))?
        .map_err(|e| HarvestError::InvalidInput(e.to_string()))?;
    if header.trim() != SOLUTION_HEADER {
        return Err(HarvestError::InvalidInput(format!("expected header '{SOLUTION_HEADER}', found '{header}'")));
    }
    let mut t = SolutionTable { xs: Vec::new(), v: Vec::new(), vprime: Vec::new() };
    for (n, line) in lines.enumerate() {
        let line = line.map_err(|e| HarvestError::InvalidInput(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        let parse = |s: &str| {
            s.trim()
                .parse::<f64>()
                .map_err(|e| HarvestError::InvalidInput(format!("solution line {}: {e}", n + 2)))
        };
        if cols.len() != 3 {
            return Err(HarvestError::InvalidInput(format!("solution line {}: expected 3 columns", n + 2)));
        }
        t.xs.push(parse(cols[0])?);
        t.v.push(parse(cols[1])?);
        t.vprime.push(parse(cols[2])?);
    }
    if t.xs.len() < 3 || t.xs.windows(2).any(|w| w[1] <= w[0]) {
        return Err(HarvestError::InvalidInput("solution x column must be strictly increasing with at least 3 rows".into()));
    }
    Ok(t)
}

/// Rebuilds a solution from its persisted table. The threshold is the node
/// where `v = 0`; `v''` is restored from the ODE identity.
pub fn solution_from_table(problem: &AmbiguityProblem, t: &SolutionTable) -> Result<ThresholdSolution> {
    let k = t
        .v
        .iter()
        .position(|&v| v == 0.0)
        .ok_or_else(|| HarvestError::InvalidInput("solution has no node with v = 0 to mark the threshold".into()))?;
    let beta = t.xs[k];
    if !(beta > problem.x_eps && beta <= problem.x_bar_eps) {
        return Err(HarvestError::InvalidInput(format!(
            "persisted threshold {beta} is outside ({}, {}] for this problem",
            problem.x_eps, problem.x_bar_eps
        )));
    }
    let ell = problem.lambda_eps(beta)?;
    let vsecond: Vec<f64> = t
        .xs
        .iter()
        .zip(&t.vprime)
        .map(|(&x, &g)| if x < beta { riccati_rhs(problem, ell, x, g) } else { 0.0 })
        .collect();
    let grid = PotentialGrid { xs: t.xs.clone(), v: t.v.clone(), vprime: t.vprime.clone(), vsecond, beta };
    Ok(ThresholdSolution {
        epsilon: problem.epsilon,
        x_eps: problem.x_eps,
        x_bar_eps: problem.x_bar_eps,
        beta_eps: beta,
        ell_eps: ell,
        beta_tolerance: f64::NAN,
        x_min: t.xs[0],
        v_grid: grid,
        bisection_trace: Vec::new(),
        iterations: 0,
        x_min_shift: None,
    })
}

pub fn write_paths_csv<W: Write>(mut w: W, paths: &[PathStats]) -> io::Result<()> {
    writeln!(w, "{PATHS_HEADER}")?;
    for p in paths {
        writeln!(
            w,
            "{},{},{},{},{}",
            p.path_id,
            real(p.harvest_total),
            real(p.kl_penalty),
            real(p.payoff_estimate),
            u8::from(p.aborted)
        )?;
    }
    Ok(())
}

pub fn write_histogram_csv<W: Write>(mut w: W, beta: f64, counts: &[u64]) -> io::Result<()> {
    writeln!(w, "{HISTOGRAM_HEADER}")?;
    let width = beta / counts.len() as f64;
    for (i, c) in counts.iter().enumerate() {
        let hi = if i + 1 == counts.len() { beta } else { (i + 1) as f64 * width };
        writeln!(w, "{},{},{c}", real(i as f64 * width), real(hi))?;
    }
    Ok(())
}

pub fn write_sweep_csv<W: Write>(mut w: W, rows: &[SweepRow]) -> io::Result<()> {
    writeln!(w, "{SWEEP_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            real(r.epsilon),
            real(r.x_eps),
            real(r.x_bar_eps),
            real(r.beta_eps),
            real(r.ell_eps),
            r.iterations,
            real(r.wall_ms)
        )?;
    }
    Ok(())
}

/// Gnuplot script plotting `beta_eps` and `ell_eps` against `eps` from `csv_name`.
pub fn sweep_plot_script(csv_name: &str) -> String {
    format!(
        "# gnuplot -p {csv_name}.gp\n\
         set datafile separator ','\n\
         set key autotitle columnhead\n\
         set xlabel 'epsilon'\n\
         set multiplot layout 1,2\n\
         set title 'threshold'\n\
         plot '{csv_name}' using 1:2 with lines dashtype 2 title 'x_eps', \\\n\
         \x20    '' using 1:3 with lines dashtype 2 title 'x_bar_eps', \\\n\
         \x20    '' using 1:4 with linespoints title 'beta_eps'\n\
         set title 'value'\n\
         plot '{csv_name}' using 1:5 with linespoints title 'ell_eps'\n\
         unset multiplot\n"
    )
}
