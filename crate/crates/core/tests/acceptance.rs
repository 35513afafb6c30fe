//! End-to-end acceptance run. Prints one line per criterion and exits
//! nonzero if any fails.

use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, Instant};

use robust_harvest::hjb::{build_truncated, violation_delta};
use robust_harvest::io::{write_paths_csv, write_solution_csv};
use robust_harvest::sde_sim::compare_estimates;
use robust_harvest::shooting::{classify_b, cole_hopf_integrate, integrate_g, integrate_g_forward};
use robust_harvest::{
    estimate_payoff, monotonicity_report, solve_beta, sweep, verify_solution, AmbiguityProblem, CoefficientModel,
    Measure, ShootingConfig, SimConfig, ThresholdSolution,
};

const BETA0: f64 = 0.796_812_130_020_020_05;
const ELL0: f64 = 0.161_902_559_472_978_71;
/// Measured gap at eps = 1e-3 is 3.45e-4.
const SMALL_EPS_THRESHOLD: f64 = 5e-4;

type Outcome = Result<String, String>;

fn model() -> CoefficientModel {
    CoefficientModel::verhulst_pearl(1.0, 1.0, 1.0).unwrap()
}

fn vp(eps: f64) -> AmbiguityProblem {
    AmbiguityProblem::new(model(), eps).unwrap()
}

fn solve(eps: f64) -> Result<(AmbiguityProblem, ThresholdSolution), String> {
    let p = vp(eps);
    let sol = solve_beta(&p, &ShootingConfig::default()).map_err(|e| e.to_string())?;
    Ok((p, sol))
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn risk_neutral_threshold() -> Outcome {
    let (_, sol) = solve(0.0)?;
    let (db, dl) = ((sol.beta_eps - BETA0).abs(), (sol.ell_eps - ELL0).abs());
    ensure(db <= 1e-6, || format!("|beta - beta0| = {db:e}"))?;
    ensure(dl <= 1e-8, || format!("|ell - ell0| = {dl:e}"))?;
    let closed = (sol.ell_eps - sol.beta_eps * (1.0 - sol.beta_eps)).abs();
    ensure(closed <= 1e-8, || format!("ell differs from beta(1 - beta) by {closed:e}"))?;
    Ok(format!("beta = {:.12}, ell = {:.12}", sol.beta_eps, sol.ell_eps))
}

fn risk_neutral_potential() -> Outcome {
    let (_, sol) = solve(0.0)?;
    let g = &sol.v_grid;
    let exact = |x: f64| ELL0 * (2.0 * x).exp_m1() / (x * x);
    let mut worst = 0.0f64;
    let nodes = g.xs.iter().zip(&g.vprime).filter(|(&x, _)| (0.05..=BETA0.min(sol.beta_eps)).contains(&x));
    for (&x, &v) in nodes {
        worst = worst.max(((v - exact(x)) / exact(x)).abs());
    }
    for k in 0..=1000 {
        let x = 0.05 + (BETA0 - 0.05) * k as f64 / 1000.0;
        worst = worst.max(((g.vprime_at(x) - exact(x)) / exact(x)).abs());
    }
    ensure(worst <= 1e-6, || format!("worst relative error {worst:e}"))?;
    Ok(format!("max relative error {worst:.2e}"))
}

fn hjb_verification() -> Outcome {
    let mut detail = Vec::new();
    for eps in [0.0, 0.5, 1.0, 5.0] {
        let (p, sol) = solve(eps)?;
        let r = verify_solution(&p, &sol).map_err(|e| e.to_string())?;
        ensure(r.max_abs_residual_left <= 1e-6, || format!("eps {eps}: left residual {:e}", r.max_abs_residual_left))?;
        ensure(r.max_excess_right <= 1e-8, || format!("eps {eps}: right excess {:e}", r.max_excess_right))?;
        ensure(r.min_vprime_left >= 1.0 - 1e-8, || format!("eps {eps}: min v' {}", r.min_vprime_left))?;
        ensure(r.pasting_residuals.1 <= 1e-6, || format!("eps {eps}: |v''(beta)| = {:e}", r.pasting_residuals.1))?;
        ensure(r.pass, || format!("eps {eps}: report verdict failed: {r:?}"))?;
        detail.push(format!("eps {eps}: {:.1e}", r.max_abs_residual_left));
    }
    Ok(format!("left residuals {}", detail.join(", ")))
}

fn bracket_containment() -> Outcome {
    let grid = [0.0, 1e-3, 0.5, 1.0, 2.0, 5.0, 20.0, 100.0];
    for eps in grid {
        let (p, sol) = solve(eps)?;
        let x_eps = 1.0 / (2.0 + eps);
        ensure((p.x_eps - x_eps).abs() <= 1e-12, || format!("eps {eps}: x_eps {}", p.x_eps))?;
        ensure((p.x_bar_eps - 2.0 * x_eps).abs() <= 1e-12, || format!("eps {eps}: x_bar {}", p.x_bar_eps))?;
        ensure(p.x_eps < sol.beta_eps && sol.beta_eps < p.x_bar_eps, || {
            format!("eps {eps}: beta {} outside ({}, {})", sol.beta_eps, p.x_eps, p.x_bar_eps)
        })?;
    }
    Ok(format!("{} levels strictly inside (1/(2+eps), 2/(2+eps))", grid.len()))
}

fn comparative_statics() -> Outcome {
    let cfg = ShootingConfig::default();
    let rows = sweep(&model(), &[0.0, 0.5, 1.0, 2.0, 5.0, 20.0], None, &cfg).map_err(|e| e.to_string())?;
    let report = monotonicity_report(&rows);
    ensure(report.pass, || format!("monotonicity failed: {report:?}"))?;
    let (_, small) = solve(1e-3)?;
    let gap = (small.beta_eps - BETA0).abs();
    ensure(gap < SMALL_EPS_THRESHOLD, || format!("|beta(1e-3) - beta0| = {gap:e}"))?;
    let (_, large) = solve(100.0)?;
    ensure(large.beta_eps <= 2.0 / 102.0, || format!("beta(100) = {}", large.beta_eps))?;
    let betas: Vec<String> = rows.iter().map(|r| format!("{:.6}", r.beta_eps)).collect();
    Ok(format!("beta [{}], gap(1e-3) {gap:.2e}, beta(100) {:.6}", betas.join(", "), large.beta_eps))
}

fn gap_fix_construction() -> Outcome {
    let (p, sol) = solve(1.0)?;
    let cfg = ShootingConfig::default();
    let mut rows = Vec::new();
    for k in 3..=10 {
        let b = sol.beta_eps * (1.0 - 0.5f64.powi(k));
        let tp = build_truncated(&p, b, &cfg).map_err(|e| e.to_string())?;
        rows.push((k, tp.alpha_b, violation_delta(&p, &tp, sol.ell_eps)));
    }
    for w in rows.windows(2) {
        let ((k0, a0, d0), (k1, a1, d1)) = (w[0], w[1]);
        ensure(a1 < a0, || format!("alpha did not decrease from k={k0} ({a0:e}) to k={k1} ({a1:e})"))?;
        ensure(d1 <= d0 + 1e-6, || format!("delta rose from k={k0} ({d0:e}) to k={k1} ({d1:e})"))?;
    }
    for &(k, _, d) in &rows {
        ensure(d >= -1e-6, || format!("k={k}: delta {d:e} negative"))?;
    }
    let (_, a_last, d_last) = rows[rows.len() - 1];
    ensure(a_last < 1e-3 * rows[0].1, || format!("alpha only fell to {a_last:e}"))?;
    ensure(d_last < 1e-3, || format!("delta only fell to {d_last:e}"))?;
    Ok(format!("delta {:.2e} -> {:.2e}, alpha {:.2e} -> {:.2e}", rows[0].2, d_last, rows[0].1, a_last))
}

fn monte_carlo() -> Outcome {
    let (p0, sol0) = solve(0.0)?;
    let beta0 = sol0.beta_eps;
    let base = SimConfig::new(p0.clone(), beta0, Measure::Reference, 20240611);
    let run = |cfg: &SimConfig| estimate_payoff(cfg).map_err(|e| e.to_string());

    let at_beta = run(&base)?;
    let z0 = (at_beta.mean - sol0.ell_eps).abs() / at_beta.std_error;
    ensure(z0 <= 3.0, || format!("eps 0: mean {} vs ell {} ({z0:.2} SE)", at_beta.mean, sol0.ell_eps))?;
    ensure(at_beta.negative_clip_fraction < 1e-3, || format!("clip fraction {}", at_beta.negative_clip_fraction))?;

    let (p1, sol1) = solve(1.0)?;
    let worst = SimConfig::new(p1, sol1.beta_eps, Measure::WorstCase(Arc::new(sol1.v_grid.clone())), 20240612);
    let w = run(&worst)?;
    let z1 = (w.mean - sol1.ell_eps).abs() / w.std_error;
    ensure(z1 <= 3.0, || format!("eps 1: mean {} vs ell {} ({z1:.2} SE)", w.mean, sol1.ell_eps))?;
    ensure(w.max_kernel_ratio <= 1.0 + 1e-8, || format!("kernel ratio {}", w.max_kernel_ratio))?;

    let detuned = run(&SimConfig { beta: 0.5 * beta0, x0: 0.5 * beta0, ..base.clone() })?;
    let shortfall = sol0.ell_eps - detuned.mean;
    ensure(shortfall > 3.0 * detuned.std_error, || {
        format!("detuned mean {} only {shortfall:e} below ell (SE {})", detuned.mean, detuned.std_error)
    })?;

    let low = run(&SimConfig { x0: 0.1 * beta0, ..base.clone() })?;
    let high = run(&SimConfig { x0: 2.0 * beta0, ..base.clone() })?;
    let x0s = compare_estimates(&[
        (0.1 * beta0, low.mean, low.std_error),
        (beta0, at_beta.mean, at_beta.std_error),
        (2.0 * beta0, high.mean, high.std_error),
    ]);
    ensure(x0s.pass, || format!("x0 dependence: {:?}", x0s.pairs))?;

    Ok(format!(
        "eps 0: {:.5} +/- {:.5} (z {z0:.2}); eps 1: {:.5} +/- {:.5} (z {z1:.2}); detuned {:.5}",
        at_beta.mean, at_beta.std_error, w.mean, w.std_error, detuned.mean
    ))
}

fn solver_properties() -> Outcome {
    let cfg = ShootingConfig::default();
    let no_dip = ShootingConfig { dip_tolerance: 0.9, ..cfg };
    let grid_pts = |lo: f64, hi: f64, n: usize| (0..=n).map(move |k| (lo + (hi - lo) * k as f64 / n as f64).min(hi));

    // O(gamma) perturbation
    let p = vp(1.0);
    let base = integrate_g(&p, 0.6, 0.0, 0.3, &no_dip).map_err(|e| e.to_string())?;
    let mut ks = Vec::new();
    for gamma in [1e-2, 1e-3, 1e-4] {
        let pert = integrate_g(&p, 0.6, gamma, 0.3, &no_dip).map_err(|e| e.to_string())?;
        let sup = grid_pts(0.3, 0.6, 300).map(|x| (pert.eval(x).unwrap() - base.eval(x).unwrap()).abs()).fold(0.0, f64::max);
        ks.push(sup / gamma);
    }
    let (klo, khi) = ks.iter().fold((f64::MAX, 0.0f64), |(l, h), &k| (l.min(k), h.max(k)));
    ensure(khi / klo < 1.2, || format!("perturbation constants {ks:?}"))?;

    for eps in [0.0, 0.5, 1.0, 5.0] {
        let p = vp(eps);
        let sol = solve_beta(&p, &cfg).map_err(|e| e.to_string())?;
        let beta = sol.beta_eps;
        let top = 2.0 * p.x_bar_eps;
        let span = p.x_bar_eps - p.x_eps;
        let bs: Vec<f64> = (1..=8).map(|i| p.x_eps + span * i as f64 / 8.0).collect();

        // past-boundary
        for &b in &bs {
            let fwd = integrate_g_forward(&p, b, 0.0, top, &cfg).map_err(|e| e.to_string())?;
            let low = grid_pts(b, top, 200).filter_map(|x| fwd.eval(x)).fold(f64::MAX, f64::min);
            ensure(low >= 1.0 - 1e-9, || format!("eps {eps}, b {b}: forward g reached {low}"))?;
        }

        // comparison ordering
        let floor = 0.2 * p.x_eps;
        for w in bs.windows(2) {
            let (a, b) = (w[0], w[1]);
            let ga = integrate_g(&p, a, 0.0, floor, &cfg).map_err(|e| e.to_string())?;
            let gb = integrate_g(&p, b, 0.0, floor, &cfg).map_err(|e| e.to_string())?;
            for x in grid_pts(floor, a, 200) {
                if let (Some(u), Some(v)) = (ga.eval(x), gb.eval(x)) {
                    ensure(u <= v + 1e-9, || format!("eps {eps}: g_{a}({x}) = {u} > g_{b}({x}) = {v}"))?;
                }
            }
            let fa = integrate_g_forward(&p, a, 0.0, top, &cfg).map_err(|e| e.to_string())?;
            let fb = integrate_g_forward(&p, b, 0.0, top, &cfg).map_err(|e| e.to_string())?;
            for x in grid_pts(b, top, 200) {
                if let (Some(u), Some(v)) = (fa.eval(x), fb.eval(x)) {
                    ensure(u >= v - 1e-9, || format!("eps {eps}: g_{a}({x}) = {u} < g_{b}({x}) = {v}"))?;
                }
            }
        }

        // h = sigma g bound below the threshold
        let sb = p.model.sigma(beta);
        for i in 1..=8 {
            let b = p.x_eps + (beta - p.x_eps) * i as f64 / 8.0;
            let g = integrate_g(&p, b, 0.0, cfg.x_min(&p), &cfg).map_err(|e| e.to_string())?;
            let worst = g.xs.iter().zip(&g.gs).map(|(&x, &v)| p.model.sigma(x) * v).fold(f64::MIN, f64::max);
            ensure(worst <= sb + 1e-8, || format!("eps {eps}, b {b}: sigma g reached {worst} > {sb}"))?;
        }

        // Riccati vs Cole-Hopf
        if eps > 0.0 {
            let b = 0.5 * (beta + p.x_bar_eps);
            let lo = 0.3 * b;
            let ric = integrate_g(&p, b, 0.0, lo, &cfg).map_err(|e| e.to_string())?;
            let ch = cole_hopf_integrate(&p, b, 0.0, lo, &cfg).map_err(|e| e.to_string())?;
            for x in grid_pts(lo, b, 300) {
                let (u, v) = (ric.eval(x).unwrap(), ch.eval(x).unwrap());
                ensure(((u - v) / u).abs() <= 1e-7, || format!("eps {eps}: Riccati {u} vs Cole-Hopf {v} at {x}"))?;
            }
        }

        // bisection trace
        let lowest_in = sol.bisection_trace.iter().filter(|t| t.1.is_in_b()).map(|t| t.0).fold(f64::MAX, f64::min);
        let highest_out = sol.bisection_trace.iter().filter(|t| !t.1.is_in_b()).map(|t| t.0).fold(f64::MIN, f64::max);
        ensure(highest_out < lowest_in, || format!("eps {eps}: trace not monotone"))?;
        let x_min = cfg.x_min(&p);
        ensure(!classify_b(&p, highest_out.max(p.x_eps * (1.0 + 1e-9)), x_min, &cfg).map_err(|e| e.to_string())?.is_in_b(), || {
            format!("eps {eps}: lo end is in B")
        })?;
    }
    Ok(format!("perturbation constants {:.4}..{:.4}", klo, khi))
}

fn determinism() -> Outcome {
    let solve_csv = || -> Result<Vec<u8>, String> {
        let (_, sol) = solve(1.0)?;
        let mut buf = Vec::new();
        write_solution_csv(&mut buf, &sol.v_grid).map_err(|e| e.to_string())?;
        Ok(buf)
    };
    let (a, b) = (solve_csv()?, solve_csv()?);
    ensure(a == b, || "solution CSVs differ".into())?;

    let sim_csv = || -> Result<Vec<u8>, String> {
        let (p, sol) = solve(1.0)?;
        let beta = sol.beta_eps;
        let cfg = SimConfig {
            horizon: 5.0,
            n_paths: 16,
            ..SimConfig::new(p, beta, Measure::WorstCase(Arc::new(sol.v_grid)), 7)
        };
        let est = estimate_payoff(&cfg).map_err(|e| e.to_string())?;
        let mut buf = Vec::new();
        write_paths_csv(&mut buf, &est.per_path).map_err(|e| e.to_string())?;
        Ok(buf)
    };
    let (c, d) = (sim_csv()?, sim_csv()?);
    ensure(c == d, || "path CSVs differ".into())?;
    Ok(format!("{} + {} bytes identical", a.len(), c.len()))
}

fn main() -> ExitCode {
    let criteria: [(&str, Duration, fn() -> Outcome); 9] = [
        ("closed-form threshold", Duration::from_secs(1), risk_neutral_threshold),
        ("closed-form potential", Duration::from_secs(1), risk_neutral_potential),
        ("HJB verification", Duration::from_secs(5), hjb_verification),
        ("bracket containment", Duration::from_secs(10), bracket_containment),
        ("comparative statics", Duration::from_secs(10), comparative_statics),
        ("gap-fix construction", Duration::from_secs(10), gap_fix_construction),
        ("Monte Carlo value", Duration::from_secs(300), monte_carlo),
        ("solver properties", Duration::from_secs(30), solver_properties),
        ("determinism", Duration::from_secs(60), determinism),
    ];
    let mut failed = 0;
    for (i, (name, budget, run)) in criteria.into_iter().enumerate() {
        let start = Instant::now();
        let outcome = run();
        let took = start.elapsed();
        let outcome = outcome.and_then(|d| {
            if took <= budget {
                Ok(d)
            } else {
                Err(format!("{d}; took {:.2} s, budget {} s", took.as_secs_f64(), budget.as_secs()))
            }
        });
        match outcome {
            Ok(d) => println!("criterion {} {name}: PASS ({:.2} s) {d}", i + 1, took.as_secs_f64()),
            Err(e) => {
                failed += 1;
                println!("criterion {} {name}: FAIL ({:.2} s) {e}", i + 1, took.as_secs_f64());
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
