//! Monte Carlo estimation of the ergodic payoff of a threshold policy.
//!
//! The population follows `dX = [X mu(X) + sigma(X) psi(X)] dt + sigma(X) dW - dZ`
//! where `Z` is the minimal harvest keeping `X <= beta` and `psi` is the
//! adversary's Girsanov kernel. Each Euler step is followed by projection
//! onto `[0, beta]`; the overshoot above `beta` is the harvest increment.
//! The payoff of a path is the time-averaged harvest plus the
//! `psi^2 / (2 eps)` relative-entropy penalty over the retained window.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{HarvestError, Result};
use crate::model::AmbiguityProblem;
use crate::shooting::PotentialGrid;

/// Law under which paths are simulated.
#[derive(Debug, Clone, PartialEq)]
pub enum Measure {
    /// `psi = 0`, no penalty.
    Reference,
    /// `psi(x) = -eps sigma(x) v'(x)` with `v'` from a threshold solution.
    WorstCase(Arc<PotentialGrid>),
    /// Tabulated kernel `theta(x)`, linearly interpolated and held constant
    /// outside the table.
    CustomKernel { xs: Vec<f64>, theta: Vec<f64> },
}

impl Measure {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Reference => "reference",
            Self::WorstCase(_) => "worstcase",
            Self::CustomKernel { .. } => "custom",
        }
    }
}

/// Simulation parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub problem: AmbiguityProblem,
    pub beta: f64,
    pub x0: f64,
    pub dt: f64,
    pub horizon: f64,
    pub n_paths: usize,
    /// Fraction of the horizon discarded before averaging.
    pub burn_in: f64,
    pub measure: Measure,
    pub seed: u64,
    pub histogram_bins: usize,
}

impl SimConfig {
    /// Defaults: `dt = 1e-4`, `T = 200`, 256 paths, burn-in 0.1, 64 bins.
    pub fn new(problem: AmbiguityProblem, beta: f64, measure: Measure, seed: u64) -> Self {
        Self {
            problem,
            beta,
            x0: beta,
            dt: 1e-4,
            horizon: 200.0,
            n_paths: 256,
            burn_in: 0.1,
            measure,
            seed,
            histogram_bins: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(HarvestError::InvalidInput(msg));
        if !(self.dt > 0.0 && self.dt < self.horizon && self.horizon.is_finite()) {
            return bad(format!("need 0 < dt < horizon, got dt = {}, horizon = {}", self.dt, self.horizon));
        }
        if !(self.x0 > 0.0 && self.x0.is_finite()) {
            return bad(format!("x0 must be positive, got {}", self.x0));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return bad(format!("beta must be positive, got {}", self.beta));
        }
        if !(0.0..=0.5).contains(&self.burn_in) {
            return bad(format!("burn_in must lie in [0, 0.5], got {}", self.burn_in));
        }
        if self.n_paths == 0 || self.histogram_bins == 0 {
            return bad("n_paths and histogram_bins must be positive".into());
        }
        match &self.measure {
            Measure::Reference => {}
            Measure::WorstCase(grid) => {
                if self.problem.epsilon <= 0.0 {
                    // psi vanishes identically; allowed and equivalent to Reference.
                } else if (grid.beta - self.beta).abs() > 1e-12 * self.beta {
                    return bad(format!("worst-case kernel built for beta = {} but simulating beta = {}", grid.beta, self.beta));
                }
            }
            Measure::CustomKernel { xs, theta } => {
                if self.problem.epsilon <= 0.0 {
                    return bad("a custom kernel needs eps > 0 for a finite penalty".into());
                }
                if xs.is_empty() || xs.len() != theta.len() || xs.windows(2).any(|w| w[1] <= w[0]) {
                    return bad("custom kernel needs matching, strictly increasing xs and theta".into());
                }
            }
        }
        Ok(())
    }

    fn steps(&self) -> (usize, usize) {
        let n = (self.horizon / self.dt).round() as usize;
        let burn = (self.burn_in * n as f64).round() as usize;
        (n, burn)
    }
}

/// One step of the Skorokhod map on `[0, beta]`.
///
/// Returns `(x_next, dz, clipped)`; `clipped` flags a negative proposal that
/// was set to 0 without harvest.
#[inline]
pub fn reflect_step(x: f64, drift: f64, noise: f64, beta: f64) -> (f64, f64, bool) {
    let proposed = x + drift + noise;
    if proposed > beta {
        (beta, proposed - beta, false)
    } else if proposed < 0.0 {
        (0.0, 0.0, true)
    } else {
        (proposed, 0.0, false)
    }
}

/// Worst-case kernel `-eps sigma(x) v'(x)`; below the tabulated floor the floor value of `v'` is used.
pub fn worst_case_kernel(problem: &AmbiguityProblem, grid: &PotentialGrid, x: f64) -> f64 {
    -problem.epsilon * problem.model.sigma(x) * grid.vprime_at(x)
}

fn interp_clamped(xs: &[f64], ys: &[f64], x: f64) -> f64 {
    if x <= xs[0] {
        return ys[0];
    }
    let n = xs.len();
    if x >= xs[n - 1] {
        return ys[n - 1];
    }
    let i = xs.partition_point(|&p| p <= x);
    let t = (x - xs[i - 1]) / (xs[i] - xs[i - 1]);
    ys[i - 1] + t * (ys[i] - ys[i - 1])
}

/// Per-path results.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PathStats {
    pub path_id: u64,
    /// Harvest over the retained window.
    pub harvest_total: f64,
    /// `int psi^2 / (2 eps) dt` over the retained window.
    pub kl_penalty: f64,
    pub payoff_estimate: f64,
    /// Payoff over the first and second halves of the retained window.
    pub half_payoffs: (f64, f64),
    /// Harvest taken at time 0 when `x0 > beta`.
    pub initial_harvest: f64,
    pub occupation_histogram: Vec<u64>,
    pub max_x: f64,
    pub negative_clips: u64,
    /// Steps where the kernel was evaluated below the tabulated floor.
    pub below_floor_steps: u64,
    /// `max |psi| / (eps sigma(beta))` over all steps (0 without a kernel).
    pub max_kernel_ratio: f64,
    pub aborted: bool,
}

/// Simulates one path; `path_id` selects the RNG stream.
pub fn simulate_path(cfg: &SimConfig, path_id: u64) -> PathStats {
    let problem = &cfg.problem;
    let m = &problem.model;
    let eps = problem.epsilon;
    let beta = cfg.beta;
    let dt = cfg.dt;
    let sqrt_dt = dt.sqrt();
    let (n, burn) = cfg.steps();
    let retained = (n - burn) as f64 * dt;
    let half = burn + (n - burn) / 2;
    let bins = cfg.histogram_bins;
    let bin_width = beta / bins as f64;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(path_id);

    let penalised = eps > 0.0 && !matches!(cfg.measure, Measure::Reference);
    let (floor, kernel_scale) = match &cfg.measure {
        Measure::WorstCase(g) => (g.x_floor(), eps * m.sigma(beta)),
        Measure::CustomKernel { .. } => (0.0, eps * m.sigma(beta)),
        Measure::Reference => (0.0, 0.0),
    };
    let mut hint = 0usize;
    let mut kernel = |x: f64| -> f64 {
        match &cfg.measure {
            Measure::Reference => 0.0,
            Measure::WorstCase(g) => -eps * m.sigma(x) * g.vprime_near(x, &mut hint),
            Measure::CustomKernel { xs, theta } => interp_clamped(xs, theta, x),
        }
    };

    let mut stats = PathStats {
        path_id,
        harvest_total: 0.0,
        kl_penalty: 0.0,
        payoff_estimate: 0.0,
        half_payoffs: (0.0, 0.0),
        initial_harvest: 0.0,
        occupation_histogram: vec![0; bins],
        max_x: 0.0,
        negative_clips: 0,
        below_floor_steps: 0,
        max_kernel_ratio: 0.0,
        aborted: false,
    };

    let mut x = cfg.x0;
    if x > beta {
        stats.initial_harvest = x - beta;
        x = beta;
    }
    let mut halves = [0.0f64; 2];
    let mut max_psi: f64 = 0.0;
    for step in 0..n {
        let s = m.sigma(x);
        let psi = if penalised {
            if x < floor {
                stats.below_floor_steps += 1;
            }
            kernel(x)
        } else {
            0.0
        };
        max_psi = max_psi.max(psi.abs());
        let z: f64 = StandardNormal.sample(&mut rng);
        let drift = (m.growth(x) + s * psi) * dt;
        let (x_next, dz, clipped) = reflect_step(x, drift, s * sqrt_dt * z, beta);
        if !x_next.is_finite() || !dz.is_finite() {
            stats.aborted = true;
            return stats;
        }
        if clipped {
            stats.negative_clips += 1;
        }
        if step >= burn {
            let penalty = if penalised { psi * psi / (2.0 * eps) * dt } else { 0.0 };
            stats.harvest_total += dz;
            stats.kl_penalty += penalty;
            halves[usize::from(step >= half)] += dz + penalty;
            let bin = ((x_next / bin_width) as usize).min(bins - 1);
            stats.occupation_histogram[bin] += 1;
        }
        stats.max_x = stats.max_x.max(x_next);
        x = x_next;
    }
    stats.payoff_estimate = (stats.harvest_total + stats.kl_penalty) / retained;
    let first = (half - burn) as f64 * dt;
    let second = (n - half) as f64 * dt;
    stats.half_payoffs = (halves[0] / first, halves[1] / second);
    stats.max_kernel_ratio = if kernel_scale > 0.0 { max_psi / kernel_scale } else { 0.0 };
    if !stats.payoff_estimate.is_finite() {
        stats.aborted = true;
    }
    stats
}

/// Aggregate over all non-aborted paths.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PayoffEstimate {
    pub mean: f64,
    /// Standard error of the mean; 0 with `std_error_defined = false` for a single path.
    pub std_error: f64,
    pub std_error_defined: bool,
    pub n_paths: usize,
    pub aborted: usize,
    /// Means over the first and second halves of the retained window.
    pub half_means: (f64, f64),
    /// `|first - second| <= 3 * SE` of the paired differences.
    pub split_consistent: bool,
    pub histogram: Vec<u64>,
    pub negative_clip_fraction: f64,
    pub below_floor_fraction: f64,
    pub max_kernel_ratio: f64,
    pub per_path: Vec<PathStats>,
}

fn mean_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Runs `n_paths` independent paths (in parallel, reduced in path order).
pub fn estimate_payoff(cfg: &SimConfig) -> Result<PayoffEstimate> {
    cfg.validate()?;
    let per_path: Vec<PathStats> = (0..cfg.n_paths as u64).into_par_iter().map(|id| simulate_path(cfg, id)).collect();
    aggregate(cfg, per_path)
}

fn aggregate(cfg: &SimConfig, per_path: Vec<PathStats>) -> Result<PayoffEstimate> {
    let total = per_path.len();
    let aborted = per_path.iter().filter(|p| p.aborted).count();
    if aborted * 10 > total || aborted == total {
        return Err(HarvestError::TooManyAborted { aborted, total });
    }
    let good: Vec<&PathStats> = per_path.iter().filter(|p| !p.aborted).collect();
    let payoffs: Vec<f64> = good.iter().map(|p| p.payoff_estimate).collect();
    let (mean, std_error) = mean_se(&payoffs);
    let firsts: Vec<f64> = good.iter().map(|p| p.half_payoffs.0).collect();
    let seconds: Vec<f64> = good.iter().map(|p| p.half_payoffs.1).collect();
    let diffs: Vec<f64> = good.iter().map(|p| p.half_payoffs.0 - p.half_payoffs.1).collect();
    let (m1, _) = mean_se(&firsts);
    let (m2, _) = mean_se(&seconds);
    let (_, se_diff) = mean_se(&diffs);

    let mut histogram = vec![0u64; cfg.histogram_bins];
    let (mut clips, mut below, mut ratio) = (0u64, 0u64, 0.0f64);
    for p in &good {
        for (h, c) in histogram.iter_mut().zip(&p.occupation_histogram) {
            *h += c;
        }
        clips += p.negative_clips;
        below += p.below_floor_steps;
        ratio = ratio.max(p.max_kernel_ratio);
    }
    let steps = (cfg.steps().0 * good.len()) as f64;
    Ok(PayoffEstimate {
        mean,
        std_error,
        std_error_defined: good.len() > 1,
        n_paths: good.len(),
        aborted,
        half_means: (m1, m2),
        split_consistent: good.len() < 2 || (m1 - m2).abs() <= 3.0 * se_diff,
        histogram,
        negative_clip_fraction: clips as f64 / steps,
        below_floor_fraction: below as f64 / steps,
        max_kernel_ratio: ratio,
        per_path,
    })
}

/// Pairwise agreement of payoff estimates started from different `x0`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct X0Report {
    /// `(x0, mean, std_error)` per start.
    pub estimates: Vec<(f64, f64, f64)>,
    /// `(i, j, |mean_i - mean_j|, 3 sqrt(se_i^2 + se_j^2))`.
    pub pairs: Vec<(usize, usize, f64, f64)>,
    pub pass: bool,
}

/// Compares already-computed estimates pairwise within 3 combined standard errors.
pub fn compare_estimates(estimates: &[(f64, f64, f64)]) -> X0Report {
    let mut pairs = Vec::new();
    for i in 0..estimates.len() {
        for j in i + 1..estimates.len() {
            let (_, mi, si) = estimates[i];
            let (_, mj, sj) = estimates[j];
            pairs.push((i, j, (mi - mj).abs(), 3.0 * (si * si + sj * sj).sqrt()));
        }
    }
    let pass = pairs.iter().all(|&(_, _, d, tol)| d <= tol);
    X0Report { estimates: estimates.to_vec(), pairs, pass }
}

/// Runs `cfg` from each `x0` in the list and compares the estimates.
pub fn x0_independence_check(cfg: &SimConfig, x0_list: &[f64]) -> Result<X0Report> {
    let mut estimates = Vec::with_capacity(x0_list.len());
    for &x0 in x0_list {
        let run = SimConfig { x0, ..cfg.clone() };
        let est = estimate_payoff(&run)?;
        estimates.push((x0, est.mean, est.std_error));
    }
    Ok(compare_estimates(&estimates))
}
