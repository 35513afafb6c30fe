//! Shooting method for the optimal threshold.
//!
//! For a candidate boundary `b` the Riccati-type equation
//!
//! ```text
//! 1/2 sigma^2 g' + x mu g - (eps/2) sigma^2 g^2 = lambda_eps(b) + gamma,   g(b) = 1
//! ```
//!
//! is integrated backwards towards 0. `b` belongs to the set `B` when `g`
//! never drops below 1 on `(0, b]`. `B` is an up-set of the bracket
//! `(x_eps, x_bar_eps]`, so its infimum `beta_eps` is found by bisection.

use serde::Serialize;

use crate::error::{HarvestError, Result};
use crate::model::AmbiguityProblem;
use crate::numerics::{bisect, geomspace, linspace};
use crate::ode::{self, DenseStep, Flow, OdeOptions, OdeOutcome};

/// Solver tolerances.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ShootingConfig {
    pub rtol: f64,
    pub atol: f64,
    /// `g < 1 - dip_tolerance` counts as a dip below 1.
    pub dip_tolerance: f64,
    /// `g > overflow_guard` stops integration as a blow-up.
    pub overflow_guard: f64,
    /// Integration floor as a multiple of `x_eps`.
    pub dip_floor: f64,
    /// Bisection stops when the bracket is narrower than this times `x_bar_eps`.
    pub beta_tol_factor: f64,
    /// Hard minimum step as a multiple of `b`.
    pub min_step_factor: f64,
    /// Classify solutions that reach the floor by the sign structure of the
    /// frozen-coefficient equation for `h = sigma g` rather than by the
    /// absence of a dip alone.
    pub tail_test: bool,
    /// Re-solve with the floor divided by 10 and report the shift in beta.
    pub sensitivity_check: bool,
}

impl Default for ShootingConfig {
    fn default() -> Self {
        Self {
            rtol: 1e-10,
            atol: 1e-12,
            dip_tolerance: 1e-8,
            overflow_guard: 1e8,
            dip_floor: 1e-4,
            beta_tol_factor: 1e-8,
            min_step_factor: 1e-14,
            tail_test: true,
            sensitivity_check: true,
        }
    }
}

impl ShootingConfig {
    pub fn x_min(&self, problem: &AmbiguityProblem) -> f64 {
        self.dip_floor * problem.x_eps
    }

    pub fn beta_tolerance(&self, problem: &AmbiguityProblem) -> f64 {
        self.beta_tol_factor * problem.x_bar_eps
    }

    pub fn validate(&self) -> Result<()> {
        let checks = [
            ("rtol", self.rtol),
            ("atol", self.atol),
            ("dip_tolerance", self.dip_tolerance),
            ("overflow_guard", self.overflow_guard),
            ("dip_floor", self.dip_floor),
            ("beta_tol_factor", self.beta_tol_factor),
            ("min_step_factor", self.min_step_factor),
        ];
        for (name, v) in checks {
            if !(v > 0.0 && v.is_finite()) {
                return Err(HarvestError::InvalidInput(format!("solver.{name} must be positive, got {v}")));
            }
        }
        if self.dip_floor >= 1.0 {
            return Err(HarvestError::InvalidInput("solver.dip_floor must be below 1".into()));
        }
        Ok(())
    }

    fn ode_options(&self, b: f64) -> OdeOptions {
        OdeOptions { rtol: self.rtol, atol: self.atol, h_min: self.min_step_factor * b, h_max: 0.0 }
    }
}

/// Right-hand side `g' = 2 [c - x mu g + (eps/2) sigma^2 g^2] / sigma^2` with `c = lambda_eps(b) + gamma`.
#[inline]
pub fn riccati_rhs(problem: &AmbiguityProblem, c: f64, x: f64, g: f64) -> f64 {
    let m = &problem.model;
    let s2 = {
        let s = m.sigma(x);
        s * s
    };
    2.0 * (c - m.growth(x) * g) / s2 + problem.epsilon * g * g
}

#[derive(Debug, Clone, PartialEq)]
enum Segment {
    Riccati(DenseStep<1>),
    /// State `(phi, phi')`; `g = -phi' / (eps phi)`.
    ColeHopf(DenseStep<2>),
}

impl Segment {
    fn start(&self) -> f64 {
        match self {
            Self::Riccati(s) => s.x0,
            Self::ColeHopf(s) => s.x0,
        }
    }

    fn end(&self) -> f64 {
        match self {
            Self::Riccati(s) => s.x1(),
            Self::ColeHopf(s) => s.x1(),
        }
    }

    fn g(&self, x: f64, eps: f64) -> f64 {
        match self {
            Self::Riccati(s) => s.eval(x)[0],
            Self::ColeHopf(s) => {
                let [phi, dphi] = s.eval(x);
                -dphi / (eps * phi)
            }
        }
    }

    fn g_prime(&self, x: f64, eps: f64) -> f64 {
        match self {
            Self::Riccati(s) => s.eval_derivative(x)[0],
            Self::ColeHopf(s) => {
                let [phi, dphi] = s.eval(x);
                let ddphi = s.eval_derivative(x)[1];
                -(ddphi * phi - dphi * dphi) / (eps * phi * phi)
            }
        }
    }
}

/// Why an integration run ended before reaching its target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Termination {
    Reached,
    Dip,
    BlowUp,
}

/// `g_{b,gamma}` tabulated along the accepted integration steps, with dense
/// output in between.
#[derive(Debug, Clone, PartialEq)]
pub struct ShootingGrid {
    pub b: f64,
    pub gamma: f64,
    pub epsilon: f64,
    /// Step endpoints, starting at `b`; monotone in the integration direction.
    pub xs: Vec<f64>,
    pub gs: Vec<f64>,
    /// Stopped on a dip below `1 - dip_tolerance`.
    pub terminated_early: bool,
    /// Stopped because `g` exceeded the overflow guard.
    pub blew_up: bool,
    /// Largest `x` where `g` crosses below 1, when a dip occurred.
    pub alpha_estimate: Option<f64>,
    /// The quadratic form underflowed and the run continued on the linear form.
    pub switched_to_cole_hopf: bool,
    segments: Vec<Segment>,
}

impl ShootingGrid {
    fn new(b: f64, gamma: f64, epsilon: f64) -> Self {
        Self {
            b,
            gamma,
            epsilon,
            xs: vec![b],
            gs: vec![1.0],
            terminated_early: false,
            blew_up: false,
            alpha_estimate: None,
            switched_to_cole_hopf: false,
            segments: Vec::new(),
        }
    }

    pub fn x_end(&self) -> f64 {
        *self.xs.last().expect("grid always holds b")
    }

    pub fn g_end(&self) -> f64 {
        *self.gs.last().expect("grid always holds b")
    }

    pub fn termination(&self) -> Termination {
        if self.terminated_early {
            Termination::Dip
        } else if self.blew_up {
            Termination::BlowUp
        } else {
            Termination::Reached
        }
    }

    /// Dense-output value of `g` at `x`, or `None` outside the integrated range.
    pub fn eval(&self, x: f64) -> Option<f64> {
        if x == self.b {
            return Some(1.0);
        }
        let backward = self.x_end() < self.b;
        // Segments are ordered along the integration direction.
        let idx = if backward {
            self.segments.partition_point(|s| s.end() > x)
        } else {
            self.segments.partition_point(|s| s.end() < x)
        };
        let seg = self.segments.get(idx)?;
        let (lo, hi) = if backward { (seg.end(), seg.start()) } else { (seg.start(), seg.end()) };
        (x >= lo && x <= hi).then(|| seg.g(x, self.epsilon))
    }

    /// Derivative of the dense output at `x`.
    pub fn derivative(&self, x: f64) -> Option<f64> {
        let backward = self.x_end() < self.b;
        let idx = if x == self.b {
            0
        } else if backward {
            self.segments.partition_point(|s| s.end() > x)
        } else {
            self.segments.partition_point(|s| s.end() < x)
        };
        let seg = self.segments.get(idx)?;
        let (lo, hi) = if backward { (seg.end(), seg.start()) } else { (seg.start(), seg.end()) };
        (x >= lo && x <= hi).then(|| seg.g_prime(x, self.epsilon))
    }

    fn push(&mut self, seg: Segment) {
        let x = seg.end();
        let g = seg.g(x, self.epsilon);
        self.segments.push(seg);
        self.xs.push(x);
        self.gs.push(g);
    }

    /// Refines the last downward crossing of `g = 1` inside the final segments.
    fn refine_alpha(&self) -> Option<f64> {
        for seg in self.segments.iter().rev() {
            let (hi, lo) = (seg.start(), seg.end());
            let (g_hi, g_lo) = (seg.g(hi, self.epsilon), seg.g(lo, self.epsilon));
            if g_hi >= 1.0 && g_lo < 1.0 {
                return bisect(|x| seg.g(x, self.epsilon) - 1.0, lo, hi, 1e-15);
            }
        }
        None
    }
}

fn check_target(problem: &AmbiguityProblem, b: f64, x_target: f64) -> Result<()> {
    if !(b > 0.0 && b <= problem.x_max * (1.0 + 1e-12)) {
        return Err(HarvestError::Precondition(format!("b = {b} outside (0, x_max = {}]", problem.x_max)));
    }
    if !(x_target > 0.0 && x_target.is_finite()) {
        return Err(HarvestError::Precondition(format!("integration target {x_target} must be positive")));
    }
    Ok(())
}

/// Integrates `g_{b,gamma}` backwards from `b` to `x_min` (see module docs),
/// stopping early on a dip below `1 - dip_tolerance` or on blow-up.
///
/// When the step size underflows and `eps > 0`, integration continues on the
/// linear Cole-Hopf form from the last reliable point.
pub fn integrate_g(
    problem: &AmbiguityProblem,
    b: f64,
    gamma: f64,
    x_min: f64,
    cfg: &ShootingConfig,
) -> Result<ShootingGrid> {
    check_target(problem, b, x_min)?;
    if x_min >= b {
        return Err(HarvestError::Precondition(format!("x_min = {x_min} must be below b = {b}")));
    }
    run(problem, b, gamma, x_min, cfg, true)
}

/// Integrates `g_{b,gamma}` forwards from `b` to `x_end > b` (no dip stop).
pub fn integrate_g_forward(
    problem: &AmbiguityProblem,
    b: f64,
    gamma: f64,
    x_end: f64,
    cfg: &ShootingConfig,
) -> Result<ShootingGrid> {
    check_target(problem, b, x_end)?;
    if x_end <= b {
        return Err(HarvestError::Precondition(format!("x_end = {x_end} must exceed b = {b}")));
    }
    run(problem, b, gamma, x_end, cfg, false)
}

fn run(
    problem: &AmbiguityProblem,
    b: f64,
    gamma: f64,
    x_end: f64,
    cfg: &ShootingConfig,
    stop_on_dip: bool,
) -> Result<ShootingGrid> {
    let eps = problem.epsilon;
    let c = problem.lambda(b) + gamma;
    let opts = cfg.ode_options(b);
    let mut grid = ShootingGrid::new(b, gamma, eps);
    let dip_level = 1.0 - cfg.dip_tolerance;
    let mut stop = Termination::Reached;

    let verdict = |g: f64| {
        if stop_on_dip && g < dip_level {
            Some(Termination::Dip)
        } else if g > cfg.overflow_guard || !g.is_finite() {
            Some(Termination::BlowUp)
        } else {
            None
        }
    };

    let outcome = ode::integrate(
        |x, y: &[f64; 1]| [riccati_rhs(problem, c, x, y[0])],
        b,
        [1.0],
        x_end,
        &opts,
        |step| {
            grid.push(Segment::Riccati(*step));
            match verdict(step.y1[0]) {
                Some(t) => {
                    stop = t;
                    Flow::Stop
                }
                None => Flow::Continue,
            }
        },
    );

    if let OdeOutcome::Underflow { x, y, .. } = outcome {
        if eps <= 0.0 {
            return Err(HarvestError::SingularIntegration { last_x: x, last_value: y[0] });
        }
        grid.switched_to_cole_hopf = true;
        let phi0 = [1.0, -eps * y[0]];
        let outcome = ode::integrate(
            |x, s: &[f64; 2]| [s[1], cole_hopf_second(problem, c, x, s[0], s[1])],
            x,
            phi0,
            x_end,
            &opts,
            |step| {
                let seg = Segment::ColeHopf(*step);
                let g = seg.g(step.x1(), eps);
                grid.push(seg);
                if step.y1[0] <= 0.0 {
                    stop = if step.y1[1] > 0.0 { Termination::Dip } else { Termination::BlowUp };
                    return Flow::Stop;
                }
                match verdict(g) {
                    Some(t) => {
                        stop = t;
                        Flow::Stop
                    }
                    None => Flow::Continue,
                }
            },
        );
        if let OdeOutcome::Underflow { x, y, .. } = outcome {
            return Err(HarvestError::SingularIntegration { last_x: x, last_value: -y[1] / (eps * y[0]) });
        }
    }

    match stop {
        Termination::Dip => {
            grid.terminated_early = true;
            grid.alpha_estimate = grid.refine_alpha();
        }
        Termination::BlowUp => grid.blew_up = true,
        Termination::Reached => {}
    }
    Ok(grid)
}

#[inline]
fn cole_hopf_second(problem: &AmbiguityProblem, c: f64, x: f64, phi: f64, dphi: f64) -> f64 {
    let m = &problem.model;
    let s = m.sigma(x);
    -2.0 * (c * problem.epsilon * phi + m.growth(x) * dphi) / (s * s)
}

/// Integrates the linear form `1/2 sigma^2 phi'' + x mu phi' = -(lambda_eps(b) + gamma) eps phi`
/// backwards from `(phi, phi')(b) = (1, -eps)` and returns `g = -phi' / (eps phi)`.
///
/// Independent of [`integrate_g`]; used as a cross-check.
pub fn cole_hopf_integrate(
    problem: &AmbiguityProblem,
    b: f64,
    gamma: f64,
    x_min: f64,
    cfg: &ShootingConfig,
) -> Result<ShootingGrid> {
    let eps = problem.epsilon;
    if eps <= 0.0 {
        return Err(HarvestError::Precondition("the Cole-Hopf form needs eps > 0".into()));
    }
    check_target(problem, b, x_min)?;
    if x_min >= b {
        return Err(HarvestError::Precondition(format!("x_min = {x_min} must be below b = {b}")));
    }
    let c = problem.lambda(b) + gamma;
    let mut grid = ShootingGrid::new(b, gamma, eps);
    grid.switched_to_cole_hopf = true;
    let mut breakdown = None;
    let outcome = ode::integrate(
        |x, s: &[f64; 2]| [s[1], cole_hopf_second(problem, c, x, s[0], s[1])],
        b,
        [1.0, -eps],
        x_min,
        &cfg.ode_options(b),
        |step| {
            if step.y1[0] <= 0.0 {
                let x = bisect(|x| step.eval(x)[0], step.x1(), step.x0, 1e-15).unwrap_or(step.x1());
                breakdown = Some((x, step.eval(x)[1]));
                return Flow::Stop;
            }
            grid.push(Segment::ColeHopf(*step));
            Flow::Continue
        },
    );
    if let Some((x, phi_prime)) = breakdown {
        return Err(HarvestError::TransformBreakdown { x, phi_prime });
    }
    if let OdeOutcome::Underflow { x, y, .. } = outcome {
        return Err(HarvestError::SingularIntegration { last_x: x, last_value: -y[1] / (eps * y[0]) });
    }
    Ok(grid)
}

/// Membership of a candidate boundary in `B`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum Classification {
    /// `g >= 1 - dip_tolerance` down to the floor. `blow_up` flags a stop on
    /// the overflow guard, the expected behaviour of members near 0.
    InB { blow_up: bool },
    /// `g` dipped below 1; `alpha` is the refined crossing when available.
    NotInB { alpha: Option<f64> },
}

impl Classification {
    pub fn is_in_b(&self) -> bool {
        matches!(self, Self::InB { .. })
    }
}

/// Classifies `b` for `x_eps < b <= x_bar_eps` by integrating down to `x_min`.
pub fn classify_b(problem: &AmbiguityProblem, b: f64, x_min: f64, cfg: &ShootingConfig) -> Result<Classification> {
    if !(b > problem.x_eps && b <= problem.x_bar_eps * (1.0 + 1e-12)) {
        return Err(HarvestError::Precondition(format!(
            "b = {b} outside the bracket (x_eps, x_bar_eps] = ({}, {}]",
            problem.x_eps, problem.x_bar_eps
        )));
    }
    let grid = integrate_g(problem, b, 0.0, x_min, cfg)?;
    Ok(classify_grid(problem, &grid, cfg))
}

fn classify_grid(problem: &AmbiguityProblem, grid: &ShootingGrid, cfg: &ShootingConfig) -> Classification {
    match grid.termination() {
        Termination::Dip => Classification::NotInB { alpha: grid.alpha_estimate },
        t if !cfg.tail_test => Classification::InB { blow_up: t == Termination::BlowUp },
        t => match tail_verdict(problem, grid, cfg) {
            Some(false) => Classification::NotInB { alpha: None },
            _ => Classification::InB { blow_up: t == Termination::BlowUp },
        },
    }
}

/// How far below the last integrated point the tail is followed, as a factor of `x`.
const TAIL_DEPTH: f64 = 1e-6;

/// `F(h)` for `h = sigma g`: the equation reads `sigma h' = 2 F(h)`.
#[inline]
fn tail_coefficients(problem: &AmbiguityProblem, c: f64, x: f64) -> (f64, f64, f64) {
    let m = &problem.model;
    (0.5 * problem.epsilon, 0.5 * m.sigma_prime(x) - m.growth(x) / m.sigma(x), c)
}

/// Predicts whether `g` eventually dips below 1 on `(0, x_end)` for a run
/// that reached its floor (or the overflow guard) without dipping.
///
/// In `h = sigma g` the equation reads `sigma h' = 2 F(h)` with
/// `F(h) = (eps/2) h^2 + (sigma'/2 - x mu / sigma) h + c`. `h` is first
/// followed in `ln x` for six more decades, where no overflow guard is
/// needed, then the coefficients are frozen. Towards 0, `h` is pushed to
/// `-infinity` exactly when it lies below the smaller root of `F`, or when
/// `F` has no real root. Returns `None` when the frozen equation gives no
/// verdict.
fn tail_verdict(problem: &AmbiguityProblem, grid: &ShootingGrid, cfg: &ShootingConfig) -> Option<bool> {
    let m = &problem.model;
    let c = problem.lambda(grid.b) + grid.gamma;
    let x0 = grid.x_end();
    let h0 = m.sigma(x0) * grid.g_end();
    let (t0, t1) = (x0.ln(), (x0 * TAIL_DEPTH).ln());
    let limit = 1e12 * (1.0 + h0.abs());
    let opts = OdeOptions { rtol: cfg.rtol, atol: cfg.atol, h_min: 1e-12, h_max: 0.0 };
    let rhs = |t: f64, y: &[f64; 1]| {
        let x = t.exp();
        let (a, lin, c) = tail_coefficients(problem, c, x);
        let h = y[0];
        [2.0 * x / m.sigma(x) * ((a * h + lin) * h + c)]
    };
    let (x, h) = match ode::integrate(rhs, t0, [h0], t1, &opts, |step| {
        if step.y1[0].abs() > limit { Flow::Stop } else { Flow::Continue }
    }) {
        OdeOutcome::Completed { y, .. } => (x0 * TAIL_DEPTH, y[0]),
        OdeOutcome::Stopped { x, y, .. } | OdeOutcome::Underflow { x, y, .. } => {
            if y[0].abs() > limit || !y[0].is_finite() {
                return Some(y[0] > 0.0);
            }
            (x.exp(), y[0])
        }
    };
    match attracting_root(problem, c, x) {
        Some(lower) => Some(h >= lower),
        None if problem.epsilon > 0.0 => Some(false),
        None => None,
    }
}

/// Smaller root of the frozen-coefficient quadratic for `h = sigma g` at `x`.
/// It attracts solutions as `x` increases and repels them as `x` decreases.
fn attracting_root(problem: &AmbiguityProblem, c: f64, x: f64) -> Option<f64> {
    let (a, lin, c) = tail_coefficients(problem, c, x);
    if a > 0.0 {
        let disc = lin * lin - 4.0 * a * c;
        if disc < 0.0 {
            return None;
        }
        let sq = disc.sqrt();
        // cancellation-free form
        Some(if lin >= 0.0 { (-lin - sq) / (2.0 * a) } else { 2.0 * c / (-lin + sq) })
    } else if lin < 0.0 {
        Some(-c / lin)
    } else {
        None
    }
}

/// Cubic-Hermite tabulation of the potential: nodes `(x, v, v', v'')`,
/// ascending in `x`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PotentialGrid {
    pub xs: Vec<f64>,
    pub v: Vec<f64>,
    pub vprime: Vec<f64>,
    pub vsecond: Vec<f64>,
    /// Threshold; `v' = 1`, `v'' = 0` and `v = x - beta` above it.
    pub beta: f64,
}

impl PotentialGrid {
    pub fn x_floor(&self) -> f64 {
        self.xs[0]
    }

    pub fn x_max(&self) -> f64 {
        *self.xs.last().expect("non-empty grid")
    }

    /// Interval index `i` with `xs[i] <= x <= xs[i+1]`, clamped to the grid.
    fn interval(&self, x: f64) -> usize {
        let n = self.xs.len();
        self.xs.partition_point(|&p| p <= x).saturating_sub(1).min(n - 2)
    }

    /// `v'`, clamped to the floor value below the grid.
    pub fn vprime_at(&self, x: f64) -> f64 {
        if x >= self.beta {
            return 1.0;
        }
        if x <= self.xs[0] {
            return self.vprime[0];
        }
        self.hermite(self.interval(x), x)
    }

    /// [`Self::vprime_at`] with the interval search started from `hint`, which
    /// is updated. Cheap for slowly moving arguments such as a simulated path.
    pub fn vprime_near(&self, x: f64, hint: &mut usize) -> f64 {
        if x >= self.beta {
            return 1.0;
        }
        if x <= self.xs[0] {
            return self.vprime[0];
        }
        let last = self.xs.len() - 2;
        let mut i = (*hint).min(last);
        while i > 0 && x < self.xs[i] {
            i -= 1;
        }
        while i < last && x >= self.xs[i + 1] {
            i += 1;
        }
        *hint = i;
        self.hermite(i, x)
    }

    fn hermite(&self, i: usize, x: f64) -> f64 {
        let (x0, x1) = (self.xs[i], self.xs[i + 1]);
        let h = x1 - x0;
        let t = (x - x0) / h;
        let (t2, t3) = (t * t, t * t * t);
        let h00 = 2.0 * t3 - 3.0 * t2 + 1.0;
        let h10 = t3 - 2.0 * t2 + t;
        let h01 = -2.0 * t3 + 3.0 * t2;
        let h11 = t3 - t2;
        h00 * self.vprime[i] + h10 * h * self.vsecond[i] + h01 * self.vprime[i + 1] + h11 * h * self.vsecond[i + 1]
    }

    /// Derivative of the Hermite interpolant of `v'`.
    pub fn vsecond_at(&self, x: f64) -> f64 {
        if x >= self.beta {
            return 0.0;
        }
        if x <= self.xs[0] {
            return self.vsecond[0];
        }
        let i = self.interval(x);
        let (x0, x1) = (self.xs[i], self.xs[i + 1]);
        let h = x1 - x0;
        let t = (x - x0) / h;
        let t2 = t * t;
        let d00 = (6.0 * t2 - 6.0 * t) / h;
        let d10 = 3.0 * t2 - 4.0 * t + 1.0;
        let d01 = (-6.0 * t2 + 6.0 * t) / h;
        let d11 = 3.0 * t2 - 2.0 * t;
        d00 * self.vprime[i] + d10 * self.vsecond[i] + d01 * self.vprime[i + 1] + d11 * self.vsecond[i + 1]
    }

    /// `v`, exact integral of the Hermite interpolant of `v'`.
    pub fn v_at(&self, x: f64) -> f64 {
        if x >= self.beta {
            return x - self.beta;
        }
        let x = x.max(self.xs[0]);
        let i = self.interval(x);
        let (x0, x1) = (self.xs[i], self.xs[i + 1]);
        let h = x1 - x0;
        let t = (x - x0) / h;
        let (t2, t3, t4) = (t * t, t * t * t, t * t * t * t);
        // Antiderivatives of the Hermite basis in t.
        let i00 = 0.5 * t4 - t3 + t;
        let i10 = 0.25 * t4 - 2.0 / 3.0 * t3 + 0.5 * t2;
        let i01 = -0.5 * t4 + t3;
        let i11 = 0.25 * t4 - t3 / 3.0;
        self.v[i]
            + h * (i00 * self.vprime[i]
                + i10 * h * self.vsecond[i]
                + i01 * self.vprime[i + 1]
                + i11 * h * self.vsecond[i + 1])
    }
}

/// Output of [`solve_beta`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ThresholdSolution {
    pub epsilon: f64,
    pub x_eps: f64,
    pub x_bar_eps: f64,
    pub beta_eps: f64,
    pub ell_eps: f64,
    pub beta_tolerance: f64,
    pub x_min: f64,
    pub v_grid: PotentialGrid,
    pub bisection_trace: Vec<(f64, Classification)>,
    pub iterations: usize,
    /// `|beta(x_min / 10) - beta(x_min)|`, when the sensitivity check ran.
    pub x_min_shift: Option<f64>,
}

/// Number of log-spaced potential nodes on `[x_min, beta]`.
pub const LEFT_NODES: usize = 2000;
/// Number of linear potential nodes on `(beta, 2 x_bar_eps]`.
pub const RIGHT_NODES: usize = 500;

/// Bisects `(x_eps, x_bar_eps)` for `beta_eps` and builds the potential.
pub fn solve_beta(problem: &AmbiguityProblem, cfg: &ShootingConfig) -> Result<ThresholdSolution> {
    cfg.validate()?;
    let x_min = cfg.x_min(problem);
    let (trace, beta) = bisect_beta(problem, x_min, cfg)?;
    let x_min_shift = if cfg.sensitivity_check {
        let (_, beta_fine) = bisect_beta(problem, x_min / 10.0, cfg)?;
        Some((beta_fine - beta).abs())
    } else {
        None
    };
    let v_grid = build_potential(problem, beta, cfg)?;
    Ok(ThresholdSolution {
        epsilon: problem.epsilon,
        x_eps: problem.x_eps,
        x_bar_eps: problem.x_bar_eps,
        beta_eps: beta,
        ell_eps: problem.lambda(beta),
        beta_tolerance: cfg.beta_tolerance(problem),
        x_min,
        v_grid,
        iterations: trace.len(),
        bisection_trace: trace,
        x_min_shift,
    })
}

fn bisect_beta(problem: &AmbiguityProblem, x_min: f64, cfg: &ShootingConfig) -> Result<(Vec<(f64, Classification)>, f64)> {
    let tol = cfg.beta_tolerance(problem);
    let mut trace = Vec::new();
    let (mut lo, mut hi) = (problem.x_eps, problem.x_bar_eps);
    let top = classify_b(problem, hi, x_min, cfg)?;
    trace.push((hi, top));
    if !top.is_in_b() {
        return Err(HarvestError::Numeric(format!("x_bar_eps = {hi} classified outside B")));
    }
    while hi - lo >= tol {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let c = classify_b(problem, mid, x_min, cfg)?;
        trace.push((mid, c));
        if c.is_in_b() {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    check_trace_monotone(&trace)?;
    Ok((trace, hi))
}

/// Every member of `B` in the trace must lie above every non-member.
pub fn check_trace_monotone(trace: &[(f64, Classification)]) -> Result<()> {
    let lowest_in = trace.iter().filter(|(_, c)| c.is_in_b()).map(|t| t.0).fold(f64::INFINITY, f64::min);
    let highest_out = trace.iter().filter(|(_, c)| !c.is_in_b()).map(|t| t.0).fold(f64::NEG_INFINITY, f64::max);
    if lowest_in <= highest_out {
        return Err(HarvestError::MonotonicityViolation { in_b: lowest_in, not_in_b: highest_out });
    }
    Ok(())
}

/// Critical solution for `c`: `h = sigma g` integrated upwards in `ln x` from
/// `TAIL_DEPTH * x_min`, started on the attracting root of the frozen tail
/// equation. `None` when the root does not exist or the run fails.
fn forward_from_floor(problem: &AmbiguityProblem, c: f64, x_min: f64, beta: f64, cfg: &ShootingConfig) -> Option<Vec<DenseStep<1>>> {
    let m = &problem.model;
    let x0 = x_min * TAIL_DEPTH;
    let h0 = attracting_root(problem, c, x0)?;
    let limit = 1e12 * (1.0 + h0.abs());
    let opts = OdeOptions { rtol: cfg.rtol, atol: cfg.atol, h_min: 1e-12, h_max: 0.0 };
    let rhs = |t: f64, y: &[f64; 1]| {
        let x = t.exp();
        let (a, lin, c) = tail_coefficients(problem, c, x);
        [2.0 * x / m.sigma(x) * ((a * y[0] + lin) * y[0] + c)]
    };
    let mut steps = Vec::new();
    let outcome = ode::integrate(rhs, x0.ln(), [h0], beta.ln(), &opts, |step| {
        if step.y1[0].is_finite() && step.y1[0].abs() < limit {
            steps.push(*step);
            Flow::Continue
        } else {
            Flow::Stop
        }
    });
    matches!(outcome, OdeOutcome::Completed { .. }).then_some(steps)
}

fn eval_forward(problem: &AmbiguityProblem, steps: &[DenseStep<1>], x: f64) -> f64 {
    let t = x.ln();
    let i = steps.partition_point(|s| s.x1() < t).min(steps.len() - 1);
    steps[i].eval(t)[0] / problem.model.sigma(x)
}

pub fn build_potential(problem: &AmbiguityProblem, beta: f64, cfg: &ShootingConfig) -> Result<PotentialGrid> {
    let x_min = cfg.x_min(problem);
    let grid = integrate_g(problem, beta, 0.0, x_min, cfg)?;
    if grid.terminated_early {
        return Err(HarvestError::Precondition(format!("b = {beta} is not in B: g dips below 1")));
    }
    let c = problem.lambda(beta);
    let m = &problem.model;
    let bound = m.sigma(beta) * (1.0 + 1e-8);
    // Backward shooting amplifies the bisection error towards 0. Once that
    // shows (a blow-up above the floor, or h = sigma g above sigma(beta),
    // which the exact solution never exceeds) the lower part is replaced by
    // the critical solution integrated upwards, which damps the error.
    let departed = grid.x_end() > x_min || grid.xs.iter().zip(&grid.gs).any(|(&x, &g)| m.sigma(x) * g > bound);
    let stable = if departed { forward_from_floor(problem, c, x_min, beta, cfg) } else { None };
    let mut floor = if stable.is_some() { x_min } else { grid.x_end() };
    let mut left = geomspace(floor, beta, LEFT_NODES);
    let mut left_g: Vec<Option<f64>> = left.iter().map(|&x| if x == beta { Some(1.0) } else { grid.eval(x) }).collect();
    if let Some(steps) = &stable {
        let forward: Vec<f64> = left.iter().map(|&x| eval_forward(problem, steps, x)).collect();
        let best = (0..left.len() - 1)
            .filter_map(|i| left_g[i].map(|g| (i, ((g - forward[i]) / forward[i]).abs())))
            .min_by(|a, b| a.1.total_cmp(&b.1));
        match best {
            Some((split, d)) if d <= 1e-6 => {
                for i in 0..split {
                    left_g[i] = Some(forward[i]);
                }
            }
            _ => {
                floor = grid.x_end();
                left = geomspace(floor, beta, LEFT_NODES);
                left_g = left.iter().map(|&x| if x == beta { Some(1.0) } else { grid.eval(x) }).collect();
            }
        }
    }

    let right_top = 2.0 * problem.x_bar_eps;
    let right = if right_top > beta { linspace(beta, right_top, RIGHT_NODES + 1) } else { vec![beta] };

    let n = left.len() + right.len() - 1;
    let mut xs = Vec::with_capacity(n);
    let mut vp = Vec::with_capacity(n);
    let mut vs = Vec::with_capacity(n);
    for (&x, g) in left.iter().zip(&left_g) {
        let g = g.ok_or_else(|| HarvestError::Numeric(format!("no dense output at x = {x}")))?;
        xs.push(x);
        vp.push(g);
        vs.push(if x == beta { 0.0 } else { riccati_rhs(problem, c, x, g) });
    }
    for &x in &right[1..] {
        xs.push(x);
        vp.push(1.0);
        vs.push(0.0);
    }

    // Anchor v(beta) = 0 and integrate the Hermite interpolant node to node.
    let k = left.len() - 1;
    let mut v = vec![0.0; xs.len()];
    for i in (0..k).rev() {
        let h = xs[i + 1] - xs[i];
        let piece = 0.5 * h * (vp[i] + vp[i + 1]) + h * h / 12.0 * (vs[i] - vs[i + 1]);
        v[i] = v[i + 1] - piece;
    }
    for i in k + 1..xs.len() {
        v[i] = xs[i] - beta;
    }
    Ok(PotentialGrid { xs, v, vprime: vp, vsecond: vs, beta })
}
