use std::sync::Arc;

use proptest::prelude::*;
use robust_harvest::hjb::{minimizing_kernel, operator_for_kernel, operator_value};
use robust_harvest::sde_sim::{reflect_step, simulate_path};
use robust_harvest::shooting::{cole_hopf_integrate, integrate_g, integrate_g_forward};
use robust_harvest::{
    bracket_points, estimate_payoff, solve_beta, sweep, verify_solution, AmbiguityProblem, CoefficientModel, Measure,
    ShootingConfig, SimConfig,
};

fn vp_model(mu: f64, gamma: f64, sigma: f64) -> CoefficientModel {
    CoefficientModel::verhulst_pearl(mu, gamma, sigma).unwrap()
}

fn vp(eps: f64) -> AmbiguityProblem {
    AmbiguityProblem::new(vp_model(1.0, 1.0, 1.0), eps).unwrap()
}

fn fast() -> ShootingConfig {
    ShootingConfig { sensitivity_check: false, ..Default::default() }
}

fn no_dip() -> ShootingConfig {
    ShootingConfig { dip_tolerance: 0.9, ..fast() }
}

fn cases(n: u32) -> ProptestConfig {
    ProptestConfig { cases: n, ..ProptestConfig::default() }
}

proptest! {
    #![proptest_config(cases(64))]

    #[test]
    fn bracket_matches_closed_form(
        mu in 0.2f64..3.0, gamma in 0.2f64..3.0, sigma in 0.1f64..2.0,
        eps in prop::sample::select(vec![0.0, 0.1, 1.0, 10.0]),
    ) {
        let m = vp_model(mu, gamma, sigma);
        let (x_eps, x_bar) = bracket_points(&m, eps).unwrap();
        let exact = mu / (2.0 * mu * gamma + eps * sigma * sigma);
        prop_assert!((x_eps - exact).abs() <= 1e-9 * exact);
        prop_assert!((x_bar - 2.0 * exact).abs() <= 1e-9 * exact);
        let scale = (0..=100).map(|k| m.lambda(eps, x_bar * k as f64 / 100.0).abs()).fold(0.0, f64::max);
        prop_assert!(m.lambda(eps, x_bar).abs() <= 1e-10 * scale.max(1.0));
    }

    #[test]
    fn lambda_non_increasing_in_eps(x in 0.01f64..2.0, e1 in 0.0f64..10.0, de in 0.0f64..10.0) {
        let m = vp_model(1.0, 1.0, 1.0);
        prop_assert!(m.lambda(e1 + de, x) <= m.lambda(e1, x));
    }

    #[test]
    fn scale_density_is_one_at_reference(c in 0.01f64..1.5, eps in 0.0f64..5.0) {
        prop_assert_eq!(vp(eps).scale_density(c, c).unwrap(), 1.0);
    }

    #[test]
    fn minimizer_identity(x in 0.01f64..1.0, fp in -5.0f64..20.0, fpp in -50.0f64..50.0, eps in 0.01f64..10.0, dp in -2.0f64..2.0) {
        let p = vp(eps);
        let k = minimizing_kernel(&p, x, fp);
        let at_min = operator_for_kernel(&p, x, fp, fpp, k);
        let direct = operator_value(&p, x, fp, fpp);
        let scale = 1.0 + at_min.abs().max(direct.abs());
        prop_assert!((at_min - direct).abs() <= 1e-10 * scale);
        prop_assert!(operator_for_kernel(&p, x, fp, fpp, k + dp) >= at_min - 1e-12 * scale);
    }

    #[test]
    fn reflection_is_a_projection(x in 0.0f64..1.0, drift in -0.1f64..0.1, noise in -0.5f64..0.5, beta in 0.1f64..1.0) {
        let x = x.min(beta);
        let proposal = x + drift + noise;
        let (next, dz, clipped) = reflect_step(x, drift, noise, beta);
        prop_assert!((0.0..=beta).contains(&next));
        prop_assert!(dz >= 0.0);
        prop_assert_eq!(dz > 0.0, proposal > beta);
        prop_assert_eq!(clipped, proposal < 0.0);
        if !clipped {
            prop_assert!((next + dz - proposal).abs() <= 1e-15);
        }
    }
}

proptest! {
    #![proptest_config(cases(32))]

    #[test]
    fn boundary_value_and_flat_start(eps in 0.0f64..5.0, t in 0.01f64..1.0) {
        let p = vp(eps);
        let b = p.x_eps + t * (p.x_bar_eps - p.x_eps);
        let grid = integrate_g(&p, b, 0.0, 0.5 * p.x_eps, &fast()).unwrap();
        prop_assert_eq!(grid.xs[0], b);
        prop_assert_eq!(grid.gs[0], 1.0);
        prop_assert_eq!(grid.eval(b), Some(1.0));
        prop_assert!(grid.xs.windows(2).all(|w| w[1] < w[0]));
        prop_assert!(grid.derivative(b).unwrap().abs() <= 1e-6);
        if grid.terminated_early {
            prop_assert!(grid.g_end() < 1.0 - fast().dip_tolerance);
        }
    }

    #[test]
    fn perturbation_slope_at_boundary(eps in 0.0f64..5.0, t in 0.01f64..1.0, gamma in -0.1f64..0.1) {
        prop_assume!(gamma.abs() > 1e-6);
        let p = vp(eps);
        let b = p.x_eps + t * (p.x_bar_eps - p.x_eps);
        let grid = integrate_g(&p, b, gamma, 0.9 * b, &no_dip()).unwrap();
        let s = p.model.sigma(b);
        let slope = 0.5 * s * s * grid.derivative(b).unwrap();
        prop_assert!((slope - gamma).abs() <= 1e-6 * gamma.abs(), "{} vs {}", slope, gamma);
    }

    #[test]
    fn past_boundary_stays_above_one(eps in 0.0f64..5.0, t in 0.0f64..1.0) {
        let p = vp(eps);
        let b = p.x_eps + t * (p.x_bar_eps - p.x_eps);
        let grid = integrate_g_forward(&p, b, 0.0, 2.0 * p.x_bar_eps, &fast()).unwrap();
        prop_assert!(grid.gs.iter().all(|&g| g >= 1.0 - 1e-9));
        for k in 0..=200 {
            let x = b + (2.0 * p.x_bar_eps - b) * k as f64 / 200.0;
            if let Some(g) = grid.eval(x) {
                prop_assert!(g >= 1.0 - 1e-9, "g({}) = {}", x, g);
            }
        }
    }

    #[test]
    fn comparison_ordering(eps in 0.0f64..5.0, s in 0.0f64..1.0, t in 0.0f64..1.0) {
        let p = vp(eps);
        let span = p.x_bar_eps - p.x_eps;
        let (a, b) = (p.x_eps + s.min(t) * span, p.x_eps + s.max(t) * span);
        prop_assume!(b - a > 1e-6 * span);
        let floor = 0.2 * p.x_eps;
        let (ga, gb) = (integrate_g(&p, a, 0.0, floor, &fast()).unwrap(), integrate_g(&p, b, 0.0, floor, &fast()).unwrap());
        for k in 0..=200 {
            let x = floor + (a - floor) * k as f64 / 200.0;
            if let (Some(u), Some(w)) = (ga.eval(x), gb.eval(x)) {
                prop_assert!(u <= w + 1e-9, "below a at {}: {} > {}", x, u, w);
            }
        }
        let top = 2.0 * p.x_bar_eps;
        let (fa, fb) = (integrate_g_forward(&p, a, 0.0, top, &fast()).unwrap(), integrate_g_forward(&p, b, 0.0, top, &fast()).unwrap());
        for k in 0..=200 {
            let x = b + (top - b) * k as f64 / 200.0;
            if let (Some(u), Some(w)) = (fa.eval(x), fb.eval(x)) {
                prop_assert!(u >= w - 1e-9, "above b at {}: {} < {}", x, u, w);
            }
        }
    }

    #[test]
    fn riccati_and_cole_hopf_agree(eps in 0.2f64..5.0, t in 0.05f64..1.0) {
        let p = vp(eps);
        let beta = solve_beta(&p, &fast()).unwrap().beta_eps;
        let b = beta + t * (p.x_bar_eps - beta);
        let lo = 0.3 * b;
        let ric = integrate_g(&p, b, 0.0, lo, &fast()).unwrap();
        let ch = cole_hopf_integrate(&p, b, 0.0, lo, &fast()).unwrap();
        for k in 0..=200 {
            let x = (lo + (b - lo) * k as f64 / 200.0).min(b);
            let (u, w) = (ric.eval(x).unwrap(), ch.eval(x).unwrap());
            prop_assert!(((u - w) / u).abs() <= 1e-7, "x = {}: {} vs {}", x, u, w);
        }
    }
}

proptest! {
    #![proptest_config(cases(16))]

    #[test]
    fn threshold_solution_invariants(
        mu in 0.5f64..2.0, gamma in 0.5f64..2.0, sigma in 0.3f64..1.5, eps in 0.0f64..5.0,
    ) {
        let p = AmbiguityProblem::new(vp_model(mu, gamma, sigma), eps).unwrap();
        let cfg = fast();
        let sol = solve_beta(&p, &cfg).unwrap();
        prop_assert!(p.x_eps < sol.beta_eps && sol.beta_eps < p.x_bar_eps);
        prop_assert_eq!(sol.ell_eps, p.lambda_eps(sol.beta_eps).unwrap());
        // every member lies above every non-member
        let lowest_in = sol.bisection_trace.iter().filter(|(_, c)| c.is_in_b()).map(|t| t.0).fold(f64::MAX, f64::min);
        let highest_out = sol.bisection_trace.iter().filter(|(_, c)| !c.is_in_b()).map(|t| t.0).fold(f64::MIN, f64::max);
        prop_assert!(highest_out < lowest_in);
        prop_assert_eq!(lowest_in, sol.beta_eps);
        let g = &sol.v_grid;
        let sb = p.model.sigma(sol.beta_eps);
        for (i, &x) in g.xs.iter().enumerate() {
            if x <= sol.beta_eps {
                prop_assert!(g.vprime[i] >= 1.0 - cfg.dip_tolerance);
                prop_assert!(p.model.sigma(x) * g.vprime[i] <= sb + 1e-8);
            } else {
                prop_assert_eq!(g.vprime[i], 1.0);
            }
        }
    }

    #[test]
    fn sub_threshold_h_bound(eps in prop::sample::select(vec![0.0, 0.5, 1.0, 5.0]), t in 0.0f64..1.0) {
        let p = vp(eps);
        let cfg = fast();
        let beta = solve_beta(&p, &cfg).unwrap().beta_eps;
        let b = p.x_eps + t * (beta - p.x_eps);
        prop_assume!(b > p.x_eps);
        let sb = p.model.sigma(beta);
        let grid = integrate_g(&p, b, 0.0, cfg.x_min(&p), &cfg).unwrap();
        for (&x, &g) in grid.xs.iter().zip(&grid.gs) {
            prop_assert!(p.model.sigma(x) * g <= sb + 1e-8, "x = {}: {}", x, p.model.sigma(x) * g);
        }
    }

    #[test]
    fn continuity_in_b(eps in 0.0f64..3.0, t in 0.1f64..0.9, y_frac in 0.3f64..0.9) {
        let p = vp(eps);
        let b = p.x_eps + t * (p.x_bar_eps - p.x_eps);
        let y = y_frac * b;
        let base = integrate_g(&p, b, 0.0, y, &no_dip()).unwrap().eval(y).unwrap();
        let cs: Vec<f64> = [1e-2, 1e-3, 1e-4]
            .iter()
            .map(|&d| {
                let moved = integrate_g(&p, b + d, 0.0, y, &no_dip()).unwrap().eval(y).unwrap();
                (moved - base).abs() / d
            })
            .collect();
        let c_max = cs.iter().cloned().fold(0.0, f64::max);
        let c_fine = cs[2];
        prop_assert!(c_max <= 2.0 * c_fine + 1e-6, "C = {:?}", cs);
    }

    #[test]
    fn hjb_bounds_hold(eps in 0.0f64..5.0) {
        let p = vp(eps);
        let sol = solve_beta(&p, &fast()).unwrap();
        let r = verify_solution(&p, &sol).unwrap();
        prop_assert!(r.pass, "{:?}", r);
        prop_assert!(r.min_vprime_left >= 1.0 - 1e-8);
        prop_assert!(r.sigma_bound_excess <= 1e-8);
    }
}

fn short_sim(eps: f64, seed: u64) -> SimConfig {
    let p = vp(eps);
    let sol = solve_beta(&p, &fast()).unwrap();
    let beta = sol.beta_eps;
    let measure = if eps > 0.0 { Measure::WorstCase(Arc::new(sol.v_grid)) } else { Measure::Reference };
    SimConfig { horizon: 2.0, dt: 1e-3, n_paths: 4, ..SimConfig::new(p, beta, measure, seed) }
}

proptest! {
    #![proptest_config(cases(12))]

    #[test]
    fn simulated_paths_respect_bounds(eps in 0.1f64..5.0, seed in any::<u64>(), x0_frac in 0.05f64..3.0) {
        let base = short_sim(eps, seed);
        let cfg = SimConfig { x0: x0_frac * base.beta, ..base };
        for id in 0..2 {
            let s = simulate_path(&cfg, id);
            prop_assert!(!s.aborted);
            prop_assert!(s.max_x <= cfg.beta);
            prop_assert!(s.harvest_total >= 0.0 && s.kl_penalty >= 0.0);
            prop_assert!(s.max_kernel_ratio <= 1.0 + 1e-8);
            prop_assert_eq!(s.initial_harvest, (cfg.x0 - cfg.beta).max(0.0));
        }
    }

    #[test]
    fn paths_are_reproducible(seed in any::<u64>(), id in 0u64..1000) {
        let cfg = short_sim(1.0, seed);
        prop_assert_eq!(simulate_path(&cfg, id), simulate_path(&cfg, id));
    }
}

#[test]
fn solver_is_deterministic() {
    let p = vp(1.0);
    let a = solve_beta(&p, &ShootingConfig::default()).unwrap();
    let b = solve_beta(&p, &ShootingConfig::default()).unwrap();
    assert_eq!(a, b);
}

#[test]
fn reversed_sweep_gives_identical_rows() {
    let model = vp_model(1.0, 1.0, 1.0);
    let grid = [0.0, 0.5, 1.0, 2.0];
    let fwd = sweep(&model, &grid, None, &fast()).unwrap();
    // a descending grid is rejected, so each level is re-solved alone in reverse order
    let mut rev: Vec<_> = grid.iter().rev().map(|&e| sweep(&model, &[e], None, &fast()).unwrap().remove(0)).collect();
    rev.reverse();
    for (a, b) in fwd.iter().zip(&rev) {
        assert_eq!((a.epsilon, a.beta_eps, a.ell_eps, a.iterations), (b.epsilon, b.beta_eps, b.ell_eps, b.iterations));
    }
}

#[test]
fn dt_refinement_is_consistent() {
    let p = vp(0.0);
    let beta = solve_beta(&p, &fast()).unwrap().beta_eps;
    let coarse = SimConfig { dt: 1e-3, horizon: 40.0, n_paths: 32, ..SimConfig::new(p, beta, Measure::Reference, 11) };
    let fine = SimConfig { dt: 5e-4, ..coarse.clone() };
    let (a, b) = (estimate_payoff(&coarse).unwrap(), estimate_payoff(&fine).unwrap());
    let tol = 3.0 * (a.std_error.powi(2) + b.std_error.powi(2)).sqrt();
    assert!((a.mean - b.mean).abs() < tol, "{} vs {} (tol {tol})", a.mean, b.mean);
    assert!(a.negative_clip_fraction < 1e-3 && b.negative_clip_fraction < 1e-3);
}
