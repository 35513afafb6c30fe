//! Coefficient families, the ambiguity-adjusted drift and the bracket points
//! that localise the optimal threshold.
//!
//! The population diffuses as `dX = X mu(X) dt + sigma(X) dW`. Ambiguity
//! enters through `lambda_eps(x) = x mu(x) - (eps / 2) sigma(x)^2`, whose
//! maximiser `x_eps` and subsequent zero `x_bar_eps` bracket the optimal
//! harvesting threshold.

use serde::Serialize;

use crate::error::{HarvestError, Result};
use crate::numerics::{bisect, geomspace, golden_section_max, integrate};

/// Piecewise-linear coefficient table for exploratory models.
///
/// Below the first node `sigma` is extended linearly through the origin and
/// `mu` is held constant, matching the near-zero shape the solver relies on.
/// Above the last node both are extended along the last segment.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TabulatedCoefficients {
    xs: Vec<f64>,
    mu: Vec<f64>,
    sigma: Vec<f64>,
}

impl TabulatedCoefficients {
    pub fn new(xs: Vec<f64>, mu: Vec<f64>, sigma: Vec<f64>) -> Result<Self> {
        if xs.len() < 2 || xs.len() != mu.len() || xs.len() != sigma.len() {
            return Err(HarvestError::InvalidInput(
                "tabulated model needs at least two nodes and equal-length x, mu, sigma columns".into(),
            ));
        }
        if xs[0] <= 0.0 || xs.windows(2).any(|w| w[1] <= w[0]) {
            return Err(HarvestError::InvalidInput("tabulated x nodes must be positive and strictly increasing".into()));
        }
        if xs.iter().chain(&mu).chain(&sigma).any(|v| !v.is_finite()) {
            return Err(HarvestError::InvalidInput("tabulated model contains non-finite values".into()));
        }
        Ok(Self { xs, mu, sigma })
    }

    pub fn xs(&self) -> &[f64] {
        &self.xs
    }

    fn interp(&self, values: &[f64], x: f64, through_origin: bool) -> f64 {
        let n = self.xs.len();
        if x <= self.xs[0] {
            return if through_origin { values[0] * x / self.xs[0] } else { values[0] };
        }
        let i = match self.xs.binary_search_by(|p| p.total_cmp(&x)) {
            Ok(i) => return values[i],
            Err(i) => i.min(n - 1),
        };
        let (x0, x1) = (self.xs[i - 1], self.xs[i]);
        let t = (x - x0) / (x1 - x0);
        values[i - 1] + t * (values[i] - values[i - 1])
    }
}

/// Parametric drift/volatility family.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "family")]
pub enum CoefficientModel {
    /// Logistic growth `mu(x) = mu_bar (1 - gamma_bar x)`, `sigma(x) = sigma_bar x`.
    VerhulstPearl { mu_bar: f64, gamma_bar: f64, sigma_bar: f64 },
    /// Theta-logistic growth `mu(x) = mu_bar (1 - (gamma_bar x)^theta)`,
    /// `sigma(x) = sigma_bar x`, with `theta >= 1`.
    GeneralLogistic { mu_bar: f64, gamma_bar: f64, sigma_bar: f64, theta: f64 },
    /// Tabulated coefficients with finite-difference derivatives.
    Tabulated(TabulatedCoefficients),
}

/// Constants `(sigma_bar, mu_bar, c)` of the near-zero bounds
/// `|sigma(x) - sigma_bar x| <= c x^2` and `|mu(x) - mu_bar| <= c x`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NearZeroBounds {
    pub sigma_bar: f64,
    pub mu_bar: f64,
    pub c: f64,
}

impl CoefficientModel {
    pub fn verhulst_pearl(mu_bar: f64, gamma_bar: f64, sigma_bar: f64) -> Result<Self> {
        let m = Self::VerhulstPearl { mu_bar, gamma_bar, sigma_bar };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(HarvestError::InvalidInput(format!("{name} must be positive and finite, got {v}")))
            }
        };
        match self {
            Self::VerhulstPearl { mu_bar, gamma_bar, sigma_bar } => {
                positive("mu_bar", *mu_bar)?;
                positive("gamma_bar", *gamma_bar)?;
                positive("sigma_bar", *sigma_bar)
            }
            Self::GeneralLogistic { mu_bar, gamma_bar, sigma_bar, theta } => {
                positive("mu_bar", *mu_bar)?;
                positive("gamma_bar", *gamma_bar)?;
                positive("sigma_bar", *sigma_bar)?;
                if *theta >= 1.0 && theta.is_finite() {
                    Ok(())
                } else {
                    Err(HarvestError::InvalidInput(format!("theta must be >= 1, got {theta}")))
                }
            }
            Self::Tabulated(_) => Ok(()),
        }
    }

    pub fn family_name(&self) -> &'static str {
        match self {
            Self::VerhulstPearl { .. } => "VerhulstPearl",
            Self::GeneralLogistic { .. } => "GeneralLogistic",
            Self::Tabulated(_) => "Tabulated",
        }
    }

    /// Parametric families carry analytic derivatives and verdicts.
    pub fn is_parametric(&self) -> bool {
        !matches!(self, Self::Tabulated(_))
    }

    /// Per-capita growth rate.
    #[inline]
    pub fn mu(&self, x: f64) -> f64 {
        match self {
            Self::VerhulstPearl { mu_bar, gamma_bar, .. } => mu_bar * (1.0 - gamma_bar * x),
            Self::GeneralLogistic { mu_bar, gamma_bar, theta, .. } => mu_bar * (1.0 - (gamma_bar * x).powf(*theta)),
            Self::Tabulated(t) => t.interp(&t.mu, x, false),
        }
    }

    pub fn mu_prime(&self, x: f64) -> f64 {
        match self {
            Self::VerhulstPearl { mu_bar, gamma_bar, .. } => -mu_bar * gamma_bar,
            Self::GeneralLogistic { mu_bar, gamma_bar, theta, .. } => {
                -mu_bar * theta * gamma_bar * (gamma_bar * x).powf(theta - 1.0)
            }
            Self::Tabulated(_) => central_difference(|y| self.mu(y), x),
        }
    }

    /// Volatility.
    #[inline]
    pub fn sigma(&self, x: f64) -> f64 {
        match self {
            Self::VerhulstPearl { sigma_bar, .. } | Self::GeneralLogistic { sigma_bar, .. } => sigma_bar * x,
            Self::Tabulated(t) => t.interp(&t.sigma, x, true),
        }
    }

    pub fn sigma_prime(&self, x: f64) -> f64 {
        match self {
            Self::VerhulstPearl { sigma_bar, .. } | Self::GeneralLogistic { sigma_bar, .. } => *sigma_bar,
            Self::Tabulated(_) => central_difference(|y| self.sigma(y), x),
        }
    }

    /// Absolute growth `x mu(x)`.
    #[inline]
    pub fn growth(&self, x: f64) -> f64 {
        x * self.mu(x)
    }

    /// `x mu(x) - (eps / 2) sigma(x)^2`, without domain checks.
    #[inline]
    pub fn lambda(&self, eps: f64, x: f64) -> f64 {
        let s = self.sigma(x);
        self.growth(x) - 0.5 * eps * s * s
    }

    /// Derivative of `lambda` in `x`.
    pub fn lambda_prime(&self, eps: f64, x: f64) -> f64 {
        self.mu(x) + x * self.mu_prime(x) - eps * self.sigma(x) * self.sigma_prime(x)
    }

    pub fn near_zero_bounds(&self) -> NearZeroBounds {
        match self {
            Self::VerhulstPearl { mu_bar, gamma_bar, sigma_bar }
            | Self::GeneralLogistic { mu_bar, gamma_bar, sigma_bar, .. } => {
                NearZeroBounds { sigma_bar: *sigma_bar, mu_bar: *mu_bar, c: mu_bar * gamma_bar }
            }
            Self::Tabulated(t) => {
                let (x0, s0, m0) = (t.xs[0], t.sigma[0], t.mu[0]);
                let sigma_bar = s0 / x0;
                let mut c: f64 = 0.0;
                for i in 1..t.xs.len().min(4) {
                    let x = t.xs[i];
                    c = c.max((t.sigma[i] - sigma_bar * x).abs() / (x * x));
                    c = c.max((t.mu[i] - m0).abs() / x);
                }
                NearZeroBounds { sigma_bar, mu_bar: m0, c }
            }
        }
    }

    /// Closed-form `(x_eps, x_bar_eps)` where the family admits one.
    fn closed_form_brackets(&self, eps: f64) -> Option<(f64, f64)> {
        match self {
            Self::VerhulstPearl { mu_bar, gamma_bar, sigma_bar } => {
                let x_eps = mu_bar / (2.0 * mu_bar * gamma_bar + eps * sigma_bar * sigma_bar);
                Some((x_eps, 2.0 * x_eps))
            }
            _ => None,
        }
    }

    /// Initial scale for bracket searches.
    fn natural_scale(&self) -> f64 {
        match self {
            Self::VerhulstPearl { gamma_bar, .. } | Self::GeneralLogistic { gamma_bar, .. } => 1.0 / gamma_bar,
            Self::Tabulated(t) => t.xs[t.xs.len() - 1],
        }
    }
}

fn central_difference<F: Fn(f64) -> f64>(f: F, x: f64) -> f64 {
    let h = 1e-6 * x.abs().max(1e-8);
    (f(x + h) - f(x - h)) / (2.0 * h)
}

/// Computes `(x_eps, x_bar_eps)` for the model at ambiguity level `eps`.
///
/// Closed forms are used where available; otherwise `x_eps` comes from
/// golden-section search (relative tolerance 1e-10) and `x_bar_eps` from
/// bisection on `lambda_eps` (relative tolerance 1e-12).
pub fn bracket_points(model: &CoefficientModel, eps: f64) -> Result<(f64, f64)> {
    if !(eps >= 0.0 && eps.is_finite()) {
        return Err(HarvestError::InvalidInput(format!("epsilon must be finite and >= 0, got {eps}")));
    }
    if let Some(b) = model.closed_form_brackets(eps) {
        return Ok(b);
    }
    let lam = |x: f64| model.lambda(eps, x);
    // First point right of the peak where lambda is negative.
    let mut upper = model.natural_scale();
    let cap = upper * 1e6;
    while lam(upper) >= 0.0 {
        upper *= 2.0;
        if upper > cap {
            return Err(HarvestError::AssumptionViolation {
                assumption: "A2".into(),
                detail: format!("lambda_eps has no sign change up to x = {cap:e}"),
            });
        }
    }
    // Root of lambda' where it brackets, golden section otherwise (kinked tables).
    let dlam = |x: f64| model.lambda_prime(eps, x);
    let x_eps = bisect(dlam, 1e-12 * upper, upper, 1e-14)
        .filter(|&x| x > 0.0)
        .unwrap_or_else(|| golden_section_max(lam, 0.0, upper, 1e-10));
    if lam(x_eps) <= 0.0 {
        return Err(HarvestError::AssumptionViolation {
            assumption: "A2".into(),
            detail: format!("lambda_eps is not positive at its maximiser x = {x_eps}"),
        });
    }
    let x_bar = bisect(lam, x_eps, upper, 1e-12).ok_or_else(|| HarvestError::AssumptionViolation {
        assumption: "A2".into(),
        detail: "no zero of lambda_eps right of x_eps".into(),
    })?;
    Ok((x_eps, x_bar))
}

/// A coefficient model together with an ambiguity level and its cached
/// bracket points.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AmbiguityProblem {
    pub model: CoefficientModel,
    pub epsilon: f64,
    pub x_eps: f64,
    pub x_bar_eps: f64,
    /// Right end of the working domain `(0, x_max]`.
    pub x_max: f64,
}

impl AmbiguityProblem {
    /// Builds the problem with the default working cap `x_max = 10 x_bar_eps`.
    pub fn new(model: CoefficientModel, epsilon: f64) -> Result<Self> {
        model.validate()?;
        let (x_eps, x_bar_eps) = bracket_points(&model, epsilon)?;
        Ok(Self { model, epsilon, x_eps, x_bar_eps, x_max: 10.0 * x_bar_eps })
    }

    pub fn with_x_max(mut self, x_max: f64) -> Result<Self> {
        if !(x_max > self.x_bar_eps) {
            return Err(HarvestError::InvalidInput(format!(
                "x_max = {x_max} must exceed x_bar_eps = {}",
                self.x_bar_eps
            )));
        }
        self.x_max = x_max;
        Ok(self)
    }

    /// Same model at another ambiguity level, keeping an explicit `x_max`
    /// only if it still covers the new bracket.
    pub fn with_epsilon(&self, epsilon: f64) -> Result<Self> {
        Self::new(self.model.clone(), epsilon)
    }

    fn check_domain(&self, x: f64) -> Result<()> {
        if x > 0.0 && x <= self.x_max {
            Ok(())
        } else {
            Err(HarvestError::InvalidInput(format!("x = {x} outside working domain (0, {}]", self.x_max)))
        }
    }

    /// `x mu(x) - (eps / 2) sigma(x)^2` on the working domain.
    pub fn lambda_eps(&self, x: f64) -> Result<f64> {
        self.check_domain(x)?;
        Ok(self.lambda(x))
    }

    #[inline]
    pub(crate) fn lambda(&self, x: f64) -> f64 {
        self.model.lambda(self.epsilon, x)
    }

    /// Scale density `exp(-int_c^x 2 mu(y) y / sigma(y)^2 dy)` by adaptive quadrature.
    pub fn scale_density(&self, x: f64, c: f64) -> Result<f64> {
        self.check_domain(x)?;
        self.check_domain(c)?;
        Ok(self.scale_exponent(c, x)?.exp())
    }

    fn scale_exponent(&self, from: f64, to: f64) -> Result<f64> {
        let m = &self.model;
        let integrand = |y: f64| {
            let s = m.sigma(y);
            2.0 * m.mu(y) * y / (s * s)
        };
        Ok(-integrate(integrand, from, to, 1e-13, 1e-11)?)
    }

    /// Runs the (A0)-(A2) checks; failures are report entries, never errors.
    pub fn check_assumptions(&self) -> AssumptionReport {
        let mut checks = Vec::new();
        let analytic = self.model.is_parametric();

        // (A1) grid checks.
        let grid = geomspace(1e-4 * self.x_eps, self.x_max, 400);
        let m = &self.model;
        let sig: Vec<f64> = grid.iter().map(|&x| m.sigma(x)).collect();
        let sigma_ok = sig.iter().all(|&s| s > 0.0) && sig.windows(2).all(|w| w[1] > w[0]);
        checks.push(AssumptionCheck::new(
            Assumption::A1,
            "sigma positive and strictly increasing",
            sigma_ok,
            false,
            format!("checked on {} points in [{:.3e}, {:.3e}]", grid.len(), grid[0], self.x_max),
        ));
        let sp: Vec<f64> = grid.iter().map(|&x| m.sigma_prime(x)).collect();
        let sp_max = sp.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sp_ok = sp.windows(2).all(|w| w[1] >= w[0] - 1e-9 * w[0].abs().max(1.0)) && sp_max.is_finite();
        checks.push(AssumptionCheck::new(
            Assumption::A1,
            "sigma' nondecreasing and bounded",
            sp_ok,
            false,
            format!("max sigma' on grid {sp_max:.6}"),
        ));
        let ratio: Vec<f64> = grid.iter().zip(&sig).map(|(&x, &s)| m.growth(x) / s).collect();
        let ratio_ok = ratio.iter().all(|r| r.is_finite())
            && ratio.windows(2).all(|w| w[1] <= w[0] + 1e-12 * w[0].abs().max(1.0));
        checks.push(AssumptionCheck::new(
            Assumption::A1,
            "x mu(x) / sigma(x) non-increasing",
            ratio_ok,
            false,
            format!("value at grid start {:.6}", ratio[0]),
        ));
        let nz = m.near_zero_bounds();
        let near = geomspace(1e-6 * self.x_eps, 1e-2 * self.x_eps, 50);
        let near_ok = near.iter().all(|&x| {
            (m.sigma(x) - nz.sigma_bar * x).abs() <= nz.c * x * x * (1.0 + 1e-9) + 1e-15
                && (m.mu(x) - nz.mu_bar).abs() <= nz.c * x * (1.0 + 1e-9) + 1e-15
        });
        checks.push(AssumptionCheck::new(
            Assumption::A1,
            "quadratic bounds near 0",
            near_ok,
            false,
            format!("sigma_bar = {}, mu_bar = {}, c = {}", nz.sigma_bar, nz.mu_bar, nz.c),
        ));

        // (A2): unimodal lambda_eps with its peak at x_eps and a finite zero.
        let lam: Vec<f64> = grid.iter().map(|&x| self.lambda(x)).collect();
        let unimodal = grid.windows(2).zip(lam.windows(2)).all(|(xw, lw)| {
            let tol = 1e-12 * lw[0].abs().max(1e-12);
            if xw[1] <= self.x_eps {
                lw[1] > lw[0] - tol
            } else if xw[0] >= self.x_eps {
                lw[1] < lw[0] + tol
            } else {
                true
            }
        });
        checks.push(AssumptionCheck::new(
            Assumption::A2,
            "lambda_eps increasing then decreasing",
            unimodal,
            false,
            format!("peak x_eps = {}", self.x_eps),
        ));
        let scale = lam.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let zero_residual = self.lambda(self.x_bar_eps).abs();
        let zero_ok = self.x_bar_eps.is_finite() && self.x_bar_eps >= self.x_eps && zero_residual <= 1e-10 * scale.max(1.0);
        checks.push(AssumptionCheck::new(
            Assumption::A2,
            "finite zero x_bar_eps right of x_eps",
            zero_ok,
            false,
            format!("x_bar_eps = {}, |lambda_eps(x_bar_eps)| = {zero_residual:e}", self.x_bar_eps),
        ));

        // (A0): both ends of the scale function must diverge. The heuristic
        // must give the same verdict for every reference point c.
        let cs = [0.5 * self.x_eps, self.x_eps, 2.0 * self.x_eps];
        let verdicts: Vec<(Divergence, Divergence)> =
            cs.iter().map(|&c| (self.scale_divergence_at_zero(c), self.scale_divergence_at_infinity(c))).collect();
        let c_stable = verdicts.windows(2).all(|w| w[0].0.diverges == w[1].0.diverges && w[0].1.diverges == w[1].1.diverges);
        let heuristic = &verdicts[1];
        let (zero_ok, zero_detail, inf_ok, inf_detail) = match self.analytic_a0() {
            Some((zero, inf, why)) => (
                zero,
                format!("{why}; heuristic growth ratio {:.3} (diverges: {})", heuristic.0.ratio, heuristic.0.diverges),
                inf,
                format!("analytic; heuristic growth ratio {:.3} (diverges: {})", heuristic.1.ratio, heuristic.1.diverges),
            ),
            None => (
                heuristic.0.diverges && c_stable,
                format!("heuristic growth ratio {:.3} over the last three halvings of y", heuristic.0.ratio),
                heuristic.1.diverges && c_stable,
                format!("heuristic growth ratio {:.3} over the last three doublings of y", heuristic.1.ratio),
            ),
        };
        checks.push(AssumptionCheck::new(Assumption::A0, "scale function diverges at 0+", zero_ok, analytic, zero_detail));
        checks.push(AssumptionCheck::new(Assumption::A0, "scale function diverges at infinity", inf_ok, analytic, inf_detail));


        AssumptionReport { checks, scale_reference: self.x_eps, c_stable, unverified: !analytic }
    }

    fn analytic_a0(&self) -> Option<(bool, bool, String)> {
        match &self.model {
            CoefficientModel::VerhulstPearl { mu_bar, sigma_bar, .. }
            | CoefficientModel::GeneralLogistic { mu_bar, sigma_bar, .. } => {
                let k = 2.0 * mu_bar / (sigma_bar * sigma_bar);
                Some((k >= 1.0, true, format!("analytic: S' ~ y^(-{k:.4}) near 0, diverges iff 2 mu_bar / sigma_bar^2 >= 1")))
            }
            CoefficientModel::Tabulated(_) => None,
        }
    }

    fn scale_divergence_at_zero(&self, c: f64) -> Divergence {
        self.scale_divergence(c, 0.5)
    }

    fn scale_divergence_at_infinity(&self, c: f64) -> Divergence {
        self.scale_divergence(c, 2.0)
    }

    /// Tracks `|int_c^y S'(x) dx|` along `y = c factor^k` and flags divergence
    /// when the magnitude at least doubles over the last three refinements.
    fn scale_divergence(&self, c: f64, factor: f64) -> Divergence {
        const REFINEMENTS: usize = 40;
        let mut magnitudes = Vec::with_capacity(REFINEMENTS + 1);
        let mut total = 0.0f64;
        let mut exponent_at_prev = 0.0f64;
        let mut prev = c;
        magnitudes.push(0.0);
        for _ in 0..REFINEMENTS {
            let next = prev * factor;
            let base = exponent_at_prev;
            let piece = integrate(
                |x| match self.scale_exponent(prev, x) {
                    Ok(e) => (base + e).exp(),
                    Err(_) => f64::INFINITY,
                },
                prev,
                next,
                1e-300,
                1e-6,
            );
            let piece = match piece {
                Ok(p) if p.is_finite() => p.abs(),
                _ => f64::INFINITY,
            };
            total += piece;
            magnitudes.push(total);
            if !total.is_finite() {
                return Divergence { diverges: true, ratio: f64::INFINITY };
            }
            exponent_at_prev = match self.scale_exponent(prev, next) {
                Ok(e) => base + e,
                Err(_) => return Divergence { diverges: true, ratio: f64::INFINITY },
            };
            prev = next;
        }
        let n = magnitudes.len();
        let ratio = magnitudes[n - 1] / magnitudes[n - 4];
        Divergence { diverges: ratio >= 2.0, ratio }
    }
}

#[derive(Debug, Clone, Copy)]
struct Divergence {
    diverges: bool,
    ratio: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Assumption {
    A0,
    A1,
    A2,
}

impl std::fmt::Display for Assumption {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Self::A0 => "(A0)",
            Self::A1 => "(A1)",
            Self::A2 => "(A2)",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AssumptionCheck {
    pub assumption: Assumption,
    pub name: &'static str,
    pub passed: bool,
    /// The verdict came from a closed-form argument rather than a grid.
    pub analytic: bool,
    pub detail: String,
}

impl AssumptionCheck {
    fn new(assumption: Assumption, name: &'static str, passed: bool, analytic: bool, detail: String) -> Self {
        Self { assumption, name, passed, analytic, detail }
    }
}

/// Per-assumption verdicts.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AssumptionReport {
    pub checks: Vec<AssumptionCheck>,
    /// Reference point `c` of the scale function used for the reported (A0) numbers.
    pub scale_reference: f64,
    /// The (A0) heuristic agreed for c in {x_eps / 2, x_eps, 2 x_eps}.
    pub c_stable: bool,
    /// Tabulated models: derivatives are finite differences, verdicts are evidence only.
    pub unverified: bool,
}

impl AssumptionReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn first_failure(&self) -> Option<&AssumptionCheck> {
        self.checks.iter().find(|c| !c.passed)
    }
}

impl std::fmt::Display for AssumptionReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for c in &self.checks {
            let tag = if c.passed { "pass" } else { "FAIL" };
            writeln!(f, "{} {:<42} {tag}  {}", c.assumption, c.name, c.detail)?;
        }
        writeln!(f, "scale reference c = {}; verdict stable in c: {}", self.scale_reference, self.c_stable)?;
        if self.unverified {
            writeln!(f, "note: tabulated coefficients, assumptions unverified")?;
        }
        Ok(())
    }
}
