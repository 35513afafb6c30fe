//! Ergodic harvesting of a logistic-type population under model ambiguity.
//!
//! The optimal policy harvests whatever exceeds a threshold `beta_eps`. The
//! crate finds the threshold by shooting on a Riccati-type ODE, verifies the
//! HJB characterisation of the resulting potential, confirms the long-run
//! value by simulating the reflected diffusion, and sweeps the ambiguity level.
//!
//! ```
//! use robust_harvest::{AmbiguityProblem, CoefficientModel, ShootingConfig, solve_beta};
//!
//! let model = CoefficientModel::verhulst_pearl(1.0, 1.0, 1.0).unwrap();
//! let problem = AmbiguityProblem::new(model, 0.0).unwrap();
//! let sol = solve_beta(&problem, &ShootingConfig::default()).unwrap();
//! assert!((sol.beta_eps - 0.79681213).abs() < 1e-6);
//! ```

pub mod error;
pub mod hjb;
pub mod io;
pub mod model;
pub mod numerics;
pub mod ode;
pub mod sde_sim;
pub mod shooting;
pub mod statics;

pub use error::{HarvestError, Result};
pub use hjb::{build_truncated, verify_solution, violation_delta, HjbReport, TruncatedPotential};
pub use model::{bracket_points, AmbiguityProblem, AssumptionReport, CoefficientModel, TabulatedCoefficients};
pub use sde_sim::{estimate_payoff, Measure, PayoffEstimate, SimConfig};
pub use shooting::{classify_b, solve_beta, Classification, PotentialGrid, ShootingConfig, ThresholdSolution};
pub use statics::{monotonicity_report, sweep, SweepRow};
