//! Comparative statics in the ambiguity level.

use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{HarvestError, Result};
use crate::model::{AmbiguityProblem, CoefficientModel};
use crate::shooting::{solve_beta, ShootingConfig};

/// Solver summary for one ambiguity level.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub epsilon: f64,
    pub x_eps: f64,
    pub x_bar_eps: f64,
    pub beta_eps: f64,
    pub ell_eps: f64,
    pub iterations: usize,
    pub wall_ms: f64,
    pub beta_tolerance: f64,
    /// Set when the solver failed for this level; the numeric fields are then NaN.
    pub error: Option<String>,
}

impl SweepRow {
    pub fn ok(&self) -> bool {
        self.error.is_none()
    }
}

pub fn check_grid(eps_grid: &[f64]) -> Result<()> {
    if eps_grid.is_empty() {
        return Err(HarvestError::InvalidInput("eps_grid must not be empty".into()));
    }
    if let Some(e) = eps_grid.iter().find(|e| !(**e >= 0.0 && e.is_finite())) {
        return Err(HarvestError::InvalidInput(format!("eps_grid entries must be finite and >= 0, got {e}")));
    }
    if eps_grid.windows(2).any(|w| w[1] < w[0]) {
        return Err(HarvestError::InvalidInput("eps_grid must be ascending".into()));
    }
    Ok(())
}

fn solve_row(model: &CoefficientModel, eps: f64, x_max: Option<f64>, cfg: &ShootingConfig) -> SweepRow {
    let start = Instant::now();
    let solved = AmbiguityProblem::new(model.clone(), eps)
        .and_then(|p| match x_max {
            Some(x) if x > p.x_bar_eps => p.with_x_max(x),
            _ => Ok(p),
        })
        .and_then(|p| solve_beta(&p, cfg).map(|s| (p, s)));
    let wall_ms = start.elapsed().as_secs_f64() * 1e3;
    match solved {
        Ok((p, s)) => SweepRow {
            epsilon: eps,
            x_eps: p.x_eps,
            x_bar_eps: p.x_bar_eps,
            beta_eps: s.beta_eps,
            ell_eps: s.ell_eps,
            iterations: s.iterations,
            wall_ms,
            beta_tolerance: s.beta_tolerance,
            error: None,
        },
        Err(e) => SweepRow {
            epsilon: eps,
            x_eps: f64::NAN,
            x_bar_eps: f64::NAN,
            beta_eps: f64::NAN,
            ell_eps: f64::NAN,
            iterations: 0,
            wall_ms,
            beta_tolerance: f64::NAN,
            error: Some(e.to_string()),
        },
    }
}

/// Solves every level of `eps_grid` independently; rows come back in grid order.
pub fn sweep(model: &CoefficientModel, eps_grid: &[f64], x_max: Option<f64>, cfg: &ShootingConfig) -> Result<Vec<SweepRow>> {
    check_grid(eps_grid)?;
    model.validate()?;
    cfg.validate()?;
    Ok(eps_grid.par_iter().map(|&eps| solve_row(model, eps, x_max, cfg)).collect())
}

/// Check of one adjacent pair of rows.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairCheck {
    pub eps_lo: f64,
    pub eps_hi: f64,
    /// `beta(eps_hi) <= beta(eps_lo) + slack`.
    pub beta_ok: bool,
    /// `ell(eps_hi) <= ell(eps_lo) + slack`.
    pub ell_ok: bool,
    pub slack: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MonotonicityReport {
    pub pairs: Vec<PairCheck>,
    /// Every `ell` is at most the `eps = 0` value (vacuous without such a row).
    pub bounded_by_risk_neutral: bool,
    pub failed_rows: Vec<f64>,
    pub pass: bool,
}

/// Non-increase of `beta_eps` and `ell_eps` across adjacent rows, with slack
/// `10 * beta_tolerance` of the pair.
pub fn monotonicity_report(rows: &[SweepRow]) -> MonotonicityReport {
    let failed_rows: Vec<f64> = rows.iter().filter(|r| !r.ok()).map(|r| r.epsilon).collect();
    let good: Vec<&SweepRow> = rows.iter().filter(|r| r.ok()).collect();
    let pairs: Vec<PairCheck> = good
        .windows(2)
        .map(|w| {
            let slack = 10.0 * w[0].beta_tolerance.max(w[1].beta_tolerance);
            PairCheck {
                eps_lo: w[0].epsilon,
                eps_hi: w[1].epsilon,
                beta_ok: w[1].beta_eps <= w[0].beta_eps + slack,
                ell_ok: w[1].ell_eps <= w[0].ell_eps + slack,
                slack,
            }
        })
        .collect();
    let bounded_by_risk_neutral = match good.iter().find(|r| r.epsilon == 0.0) {
        Some(zero) => {
            let slack = 10.0 * zero.beta_tolerance;
            good.iter().all(|r| r.ell_eps <= zero.ell_eps + slack)
        }
        None => true,
    };
    let pass = failed_rows.is_empty() && bounded_by_risk_neutral && pairs.iter().all(|p| p.beta_ok && p.ell_ok);
    MonotonicityReport { pairs, bounded_by_risk_neutral, failed_rows, pass }
}
