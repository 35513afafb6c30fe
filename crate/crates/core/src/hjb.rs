//! Verification of the free-boundary HJB characterisation and the
//! truncated-potential construction.
//!
//! ```text
//! L f(x) = inf_p { 1/2 sigma^2 f'' + (x mu + sigma p) f' + p^2 / (2 eps) }
//!        = 1/2 sigma^2 f'' + x mu f' - (eps/2) sigma^2 f'^2
//! ```
//!
//! A threshold solution must satisfy `L v = ell` with `v' >= 1` below the
//! threshold, `L v <= ell` with `v' = 1` above it, and pasting `v' = 1`,
//! `v'' = 0` at the threshold.

use serde::Serialize;

use crate::error::{HarvestError, Result};
use crate::model::AmbiguityProblem;
use crate::numerics::{geomspace, linspace};
use crate::shooting::{integrate_g, integrate_g_forward, riccati_rhs, ShootingConfig, ShootingGrid, ThresholdSolution};

/// `1/2 sigma^2 f'' + x mu f' - (eps/2) sigma^2 f'^2` at `x`.
#[inline]
pub fn operator_value(problem: &AmbiguityProblem, x: f64, fp: f64, fpp: f64) -> f64 {
    let m = &problem.model;
    let s = m.sigma(x);
    let s2 = s * s;
    0.5 * s2 * fpp + m.growth(x) * fp - 0.5 * problem.epsilon * s2 * fp * fp
}

/// [`operator_value`] with derivatives supplied as functions.
pub fn apply_operator<F, G>(problem: &AmbiguityProblem, vprime: F, vsecond: G, x: f64) -> f64
where
    F: Fn(f64) -> f64,
    G: Fn(f64) -> f64,
{
    operator_value(problem, x, vprime(x), vsecond(x))
}

/// The bracket of the infimum for a fixed kernel value `p` (`eps > 0`).
pub fn operator_for_kernel(problem: &AmbiguityProblem, x: f64, fp: f64, fpp: f64, p: f64) -> f64 {
    let m = &problem.model;
    let s = m.sigma(x);
    0.5 * s * s * fpp + (m.growth(x) + s * p) * fp + p * p / (2.0 * problem.epsilon)
}

/// Minimising kernel `p = -eps sigma(x) f'(x)`.
#[inline]
pub fn minimizing_kernel(problem: &AmbiguityProblem, x: f64, fp: f64) -> f64 {
    -problem.epsilon * problem.model.sigma(x) * fp
}

/// Pass/fail tolerances for [`verify_solution`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HjbTolerances {
    pub left_residual: f64,
    pub right_excess: f64,
    /// `min v'` on the left must be at least `1 - vprime_slack`.
    pub vprime_slack: f64,
    pub pasting_first: f64,
    pub pasting_second: f64,
    /// Relative agreement of finite-difference and ODE-identity `v''`.
    pub finite_difference: f64,
    /// Slack in `sigma(x) v'(x) <= sigma(beta)`.
    pub sigma_bound: f64,
}

impl Default for HjbTolerances {
    fn default() -> Self {
        Self {
            left_residual: 1e-6,
            right_excess: 1e-8,
            vprime_slack: 1e-8,
            pasting_first: 1e-10,
            pasting_second: 1e-6,
            finite_difference: 1e-4,
            sigma_bound: 1e-8,
        }
    }
}

/// Residuals of the HJB characterisation on dense grids.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HjbReport {
    /// `sup |L v - ell|` below the threshold, with `v'` and `v''` taken from
    /// the tabulated interpolant between its nodes.
    pub max_abs_residual_left: f64,
    /// `sup (L v - ell)_+` above the threshold.
    pub max_excess_right: f64,
    pub min_vprime_left: f64,
    /// `(|v'(beta) - 1|, |v''(beta)|)`.
    pub pasting_residuals: (f64, f64),
    /// Worst relative disagreement of central differences of `v'` with the
    /// ODE-identity `v''`.
    pub fd_max_rel_error: f64,
    /// `sup sigma(x) v'(x) - sigma(beta)` below the threshold.
    pub sigma_bound_excess: f64,
    pub left_points: usize,
    pub right_points: usize,
    /// Left grid points skipped because they fell outside the tabulated range.
    pub truncated_points: usize,
    pub tolerances: HjbTolerances,
    pub pass: bool,
}

/// Number of left residual points (log-spaced on `(x_min, beta]`).
pub const LEFT_POINTS: usize = 2000;
/// Number of right residual points (linear on `(beta, 2 x_bar_eps]`).
pub const RIGHT_POINTS: usize = 500;

/// Evaluates the HJB residuals of `sol` with default tolerances.
pub fn verify_solution(problem: &AmbiguityProblem, sol: &ThresholdSolution) -> Result<HjbReport> {
    verify_solution_with(problem, sol, &HjbTolerances::default())
}

pub fn verify_solution_with(problem: &AmbiguityProblem, sol: &ThresholdSolution, tol: &HjbTolerances) -> Result<HjbReport> {
    if (sol.epsilon - problem.epsilon).abs() > 0.0 {
        return Err(HarvestError::Precondition(format!(
            "solution computed for eps = {} but problem has eps = {}",
            sol.epsilon, problem.epsilon
        )));
    }
    let grid = &sol.v_grid;
    let beta = sol.beta_eps;
    let ell = sol.ell_eps;
    let m = &problem.model;

    // Geometric midpoints of a log grid, so no point coincides with a node
    // where v'' is the ODE identity by construction.
    let edges = geomspace(sol.x_min, beta, LEFT_POINTS + 1);
    let left: Vec<f64> = edges.windows(2).map(|w| (w[0] * w[1]).sqrt()).collect();
    let floor = grid.x_floor();
    let mut truncated = 0usize;
    let mut max_left: f64 = 0.0;
    let mut min_vp = f64::INFINITY;
    let mut fd_err: f64 = 0.0;
    let sigma_beta = m.sigma(beta);
    let mut sigma_excess = f64::NEG_INFINITY;
    for &x in &left {
        if x < floor {
            truncated += 1;
            continue;
        }
        let vp = grid.vprime_at(x);
        let vs = grid.vsecond_at(x);
        max_left = max_left.max((operator_value(problem, x, vp, vs) - ell).abs());
        min_vp = min_vp.min(vp);
        sigma_excess = sigma_excess.max(m.sigma(x) * vp - sigma_beta);

        let h = (1e-6 * beta).min(1e-3 * x);
        if x - h >= floor && x + h <= beta {
            let fd = (grid.vprime_at(x + h) - grid.vprime_at(x - h)) / (2.0 * h);
            let ode = riccati_rhs(problem, ell, x, vp);
            let scale = ode.abs().max(vp.abs() / x);
            fd_err = fd_err.max((fd - ode).abs() / scale);
        }
    }
    let at_beta = grid.vprime_at(beta);
    min_vp = min_vp.min(at_beta);

    let right = linspace(beta, 2.0 * problem.x_bar_eps, RIGHT_POINTS + 1);
    let mut max_right: f64 = 0.0;
    for &x in &right[1..] {
        let lv = operator_value(problem, x, grid.vprime_at(x), grid.vsecond_at(x));
        max_right = max_right.max(lv - ell);
    }

    let pasting = ((at_beta - 1.0).abs(), riccati_rhs(problem, ell, beta, 1.0).abs());
    let pass = max_left <= tol.left_residual
        && max_right <= tol.right_excess
        && min_vp >= 1.0 - tol.vprime_slack
        && pasting.0 <= tol.pasting_first
        && pasting.1 <= tol.pasting_second
        && fd_err <= tol.finite_difference
        && sigma_excess <= tol.sigma_bound;
    Ok(HjbReport {
        max_abs_residual_left: max_left,
        max_excess_right: max_right,
        min_vprime_left: min_vp,
        pasting_residuals: pasting,
        fd_max_rel_error: fd_err,
        sigma_bound_excess: sigma_excess,
        left_points: left.len() - truncated,
        right_points: right.len() - 1,
        truncated_points: truncated,
        tolerances: *tol,
        pass,
    })
}

/// Potential built from a sub-optimal threshold `b`, extended linearly below
/// the point `alpha_b` where `g_b` first drops below 1.
#[derive(Debug, Clone, PartialEq)]
pub struct TruncatedPotential {
    pub b: f64,
    pub alpha_b: f64,
    /// `g_b'(alpha_b) = 2 (lambda_eps(b) - lambda_eps(alpha_b)) / sigma^2(alpha_b)`.
    pub slope: f64,
    /// Smallest value of `v'_b`, attained as `x -> 0+`.
    pub min_vprime: f64,
    /// `v'_b < 1` somewhere, which happens whenever `slope > 0`.
    pub vprime_below_one: bool,
    backward: ShootingGrid,
    forward: ShootingGrid,
}

/// Integration floor for the truncated construction, as a multiple of `x_eps`.
/// `alpha_b` falls far below the solver floor as `b` approaches `beta`.
pub const TRUNCATION_FLOOR: f64 = 1e-12;

impl TruncatedPotential {
    /// `v'_b(x)`.
    pub fn vprime(&self, x: f64) -> f64 {
        if x <= self.alpha_b {
            return self.slope * (x - self.alpha_b) + 1.0;
        }
        let g = if x <= self.b { &self.backward } else { &self.forward };
        g.eval(x).unwrap_or(1.0)
    }

    /// `v''_b(x)` on the linear piece, where it is the constant slope.
    pub fn vsecond_linear(&self) -> f64 {
        self.slope
    }

    /// Largest `x` covered by the forward extension above `b`.
    pub fn x_max(&self) -> f64 {
        self.forward.x_end()
    }
}

/// Builds the truncated potential for `x_eps < b < beta_eps`.
pub fn build_truncated(problem: &AmbiguityProblem, b: f64, cfg: &ShootingConfig) -> Result<TruncatedPotential> {
    if !(b > problem.x_eps && b < problem.x_bar_eps) {
        return Err(HarvestError::Precondition(format!(
            "b = {b} outside (x_eps, x_bar_eps) = ({}, {})",
            problem.x_eps, problem.x_bar_eps
        )));
    }
    // Only non-finite values stop the run: near a member of B, g grows like
    // 1/x well past the solver's guard before it turns down.
    let run_cfg = ShootingConfig { overflow_guard: f64::MAX, ..*cfg };
    let backward = integrate_g(problem, b, 0.0, TRUNCATION_FLOOR * problem.x_eps, &run_cfg)?;
    let alpha_b = match (backward.terminated_early, backward.alpha_estimate) {
        (true, Some(a)) => a,
        _ => {
            return Err(HarvestError::Precondition(format!(
                "no dip of g_b found above x = {:e}; b = {b} is at or above beta_eps",
                backward.x_end()
            )))
        }
    };
    let slope = 2.0 * (problem.lambda(b) - problem.lambda(alpha_b)) / {
        let s = problem.model.sigma(alpha_b);
        s * s
    };
    let forward = integrate_g_forward(problem, b, 0.0, 2.0 * problem.x_bar_eps, &run_cfg)?;
    let min_vprime = 1.0 - slope * alpha_b;
    Ok(TruncatedPotential {
        b,
        alpha_b,
        slope,
        min_vprime: min_vprime.min(1.0),
        vprime_below_one: min_vprime < 1.0,
        backward,
        forward,
    })
}

/// Points of the log grid used by [`violation_delta`].
pub const DELTA_POINTS: usize = 2000;
/// Lower end of the [`violation_delta`] grid as a fraction of `alpha_b`.
pub const DELTA_FLOOR: f64 = 1e-6;

/// `sup (L v_b - ell)` over a log grid of `[DELTA_FLOOR alpha_b, alpha_b]`.
///
/// The linear piece, with its constant `v''`, is used up to and including
/// `alpha_b`: `L v_b` extends continuously there and the supremum over the
/// open interval is typically its limit at `alpha_b`.
pub fn violation_delta(problem: &AmbiguityProblem, tp: &TruncatedPotential, ell: f64) -> f64 {
    violation_delta_on(problem, tp, ell, DELTA_POINTS)
}

/// [`violation_delta`] on a grid of `n` points, for refinement diagnostics.
pub fn violation_delta_on(problem: &AmbiguityProblem, tp: &TruncatedPotential, ell: f64, n: usize) -> f64 {
    geomspace(DELTA_FLOOR * tp.alpha_b, tp.alpha_b, n)
        .iter()
        .map(|&x| operator_value(problem, x, tp.vprime(x), tp.slope) - ell)
        .fold(f64::NEG_INFINITY, f64::max)
}

/// `L v_b - ell` on `[alpha_b, b]`, where `v_b` solves the ODE with constant
/// `lambda_eps(b)`.
pub fn branch_excess(problem: &AmbiguityProblem, tp: &TruncatedPotential, ell: f64) -> f64 {
    problem.lambda(tp.b) - ell
}
