//! Run configuration: a single TOML file, strict about unknown keys, with a
//! fully-resolved form written beside every run's outputs.

use std::fmt;
use std::path::{Path, PathBuf};

use robust_harvest::{AmbiguityProblem, CoefficientModel, ShootingConfig, TabulatedCoefficients};
use serde::{Deserialize, Serialize};

use crate::exit::{CliError, ExitKind};

pub const DEFAULT_EPS_GRID: [f64; 6] = [0.0, 0.5, 1.0, 2.0, 5.0, 20.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub epsilon: Option<f64>,
    #[serde(default)]
    pub eps_grid: Option<Vec<f64>>,
    /// Persisted `solution.csv` read by `simulate` and `verify`.
    #[serde(default)]
    pub solution: Option<PathBuf>,
    pub model: ModelConfig,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub sim: SimSection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    VerhulstPearl,
    GeneralLogistic,
    Tabulated,
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::VerhulstPearl => "verhulst_pearl",
            Self::GeneralLogistic => "general_logistic",
            Self::Tabulated => "tabulated",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub family: Family,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mu_bar: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma_bar: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_bar: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub xs: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mu: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub rtol: f64,
    pub atol: f64,
    pub dip_tolerance: f64,
    pub overflow_guard: f64,
    pub dip_floor: f64,
    pub beta_tol_factor: f64,
    pub min_step_factor: f64,
    pub tail_test: bool,
    pub sensitivity_check: bool,
    /// Refuse to solve when an assumption check fails.
    pub require_assumptions: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub x_max: Option<f64>,
}

impl Default for SolverConfig {
    fn default() -> Self {
        let d = ShootingConfig::default();
        Self {
            rtol: d.rtol,
            atol: d.atol,
            dip_tolerance: d.dip_tolerance,
            overflow_guard: d.overflow_guard,
            dip_floor: d.dip_floor,
            beta_tol_factor: d.beta_tol_factor,
            min_step_factor: d.min_step_factor,
            tail_test: d.tail_test,
            sensitivity_check: d.sensitivity_check,
            require_assumptions: true,
            x_max: None,
        }
    }
}

impl SolverConfig {
    pub fn shooting(&self) -> Result<ShootingConfig, CliError> {
        let cfg = ShootingConfig {
            rtol: self.rtol,
            atol: self.atol,
            dip_tolerance: self.dip_tolerance,
            overflow_guard: self.overflow_guard,
            dip_floor: self.dip_floor,
            beta_tol_factor: self.beta_tol_factor,
            min_step_factor: self.min_step_factor,
            tail_test: self.tail_test,
            sensitivity_check: self.sensitivity_check,
        };
        cfg.validate().map_err(|e| CliError::new(ExitKind::Usage, format!("solver: {e}")))?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum MeasureKind {
    Reference,
    #[value(name = "worstcase")]
    #[serde(rename = "worstcase")]
    WorstCase,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimSection {
    /// Start point; the threshold when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub x0: Option<f64>,
    pub dt: f64,
    pub horizon: f64,
    pub n_paths: usize,
    pub burn_in: f64,
    pub histogram_bins: usize,
    pub seed: u64,
    pub measure: MeasureKind,
    /// Allowed deviation from the value, in standard errors, for `--assert-value`.
    pub ci_multiple: f64,
}

impl Default for SimSection {
    fn default() -> Self {
        Self {
            x0: None,
            dt: 1e-4,
            horizon: 200.0,
            n_paths: 256,
            burn_in: 0.1,
            histogram_bins: 64,
            seed: 0,
            measure: MeasureKind::WorstCase,
            ci_multiple: 3.0,
        }
    }
}

fn require(v: Option<f64>, family: Family, key: &str) -> Result<f64, CliError> {
    v.ok_or_else(|| CliError::new(ExitKind::Usage, format!("model.{key} is required for family {family}")))
}

impl ModelConfig {
    pub fn build(&self) -> Result<CoefficientModel, CliError> {
        let f = self.family;
        let stray = |keys: &[(&str, bool)]| -> Result<(), CliError> {
            match keys.iter().find(|(_, set)| *set) {
                Some((k, _)) => Err(CliError::new(ExitKind::Usage, format!("model.{k} does not apply to family {f}"))),
                None => Ok(()),
            }
        };
        let model = match f {
            Family::VerhulstPearl | Family::GeneralLogistic => {
                stray(&[("xs", self.xs.is_some()), ("mu", self.mu.is_some()), ("sigma", self.sigma.is_some())])?;
                let (mu_bar, gamma_bar, sigma_bar) =
                    (require(self.mu_bar, f, "mu_bar")?, require(self.gamma_bar, f, "gamma_bar")?, require(self.sigma_bar, f, "sigma_bar")?);
                if f == Family::VerhulstPearl {
                    stray(&[("theta", self.theta.is_some())])?;
                    CoefficientModel::VerhulstPearl { mu_bar, gamma_bar, sigma_bar }
                } else {
                    CoefficientModel::GeneralLogistic { mu_bar, gamma_bar, sigma_bar, theta: require(self.theta, f, "theta")? }
                }
            }
            Family::Tabulated => {
                stray(&[
                    ("mu_bar", self.mu_bar.is_some()),
                    ("gamma_bar", self.gamma_bar.is_some()),
                    ("sigma_bar", self.sigma_bar.is_some()),
                    ("theta", self.theta.is_some()),
                ])?;
                let col = |v: &Option<Vec<f64>>, k: &str| {
                    v.clone().ok_or_else(|| CliError::new(ExitKind::Usage, format!("model.{k} is required for family {f}")))
                };
                let table = TabulatedCoefficients::new(col(&self.xs, "xs")?, col(&self.mu, "mu")?, col(&self.sigma, "sigma")?)
                    .map_err(|e| CliError::new(ExitKind::Usage, format!("model: {e}")))?;
                CoefficientModel::Tabulated(table)
            }
        };
        model.validate().map_err(|e| CliError::new(ExitKind::Usage, format!("model: {e}")))?;
        Ok(model)
    }
}

/// Command-line overrides; a flag wins over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub output_dir: Option<PathBuf>,
    pub seed: Option<u64>,
    pub eps: Option<f64>,
    pub measure: Option<MeasureKind>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::new(ExitKind::MissingInput, format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| CliError::new(ExitKind::Usage, format!("{}: {}", path.display(), e.message)))
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::new(ExitKind::Usage, e.to_string().trim_end().to_string()))
    }

    /// Applies overrides and checks the ambiguity settings.
    pub fn resolve(mut self, o: &Overrides) -> Result<Self, CliError> {
        if let Some(d) = &o.output_dir {
            self.output_dir = Some(d.clone());
        }
        if self.output_dir.is_none() {
            self.output_dir = Some(PathBuf::from("output"));
        }
        if let Some(s) = o.seed {
            self.sim.seed = s;
        }
        if let Some(m) = o.measure {
            self.sim.measure = m;
        }
        if let Some(e) = o.eps {
            self.epsilon = Some(e);
            self.eps_grid = Some(vec![e]);
        }
        self.epsilon = Some(self.epsilon());
        for e in self.epsilon.iter().chain(self.eps_grid.iter().flatten()) {
            if !(e.is_finite() && *e >= 0.0) {
                return Err(CliError::new(ExitKind::Usage, format!("epsilon must be finite and >= 0, got {e}")));
            }
        }
        Ok(self)
    }

    pub fn output_dir(&self) -> &Path {
        self.output_dir.as_deref().unwrap_or(Path::new("output"))
    }

    /// Single ambiguity level; the first grid entry when only a grid is given.
    pub fn epsilon(&self) -> f64 {
        self.epsilon.or_else(|| self.eps_grid.as_ref().and_then(|g| g.first().copied())).unwrap_or(0.0)
    }

    pub fn eps_grid(&self) -> Vec<f64> {
        self.eps_grid.clone().unwrap_or_else(|| DEFAULT_EPS_GRID.to_vec())
    }

    pub fn problem(&self) -> Result<AmbiguityProblem, CliError> {
        self.problem_at(self.epsilon())
    }

    pub fn problem_at(&self, eps: f64) -> Result<AmbiguityProblem, CliError> {
        let model = self.model.build()?;
        let p = AmbiguityProblem::new(model, eps).map_err(CliError::from_harvest)?;
        match self.solver.x_max {
            Some(x) => p.with_x_max(x).map_err(|e| CliError::new(ExitKind::Usage, format!("solver.x_max: {e}"))),
            None => Ok(p),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run configuration always serialises")
    }
}
