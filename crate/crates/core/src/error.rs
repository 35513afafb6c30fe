use thiserror::Error;

/// Errors raised by the solver, the verifier and the simulator.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum HarvestError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("assumption {assumption} violated: {detail}")]
    AssumptionViolation { assumption: String, detail: String },

    #[error("quadrature did not converge on [{a}, {b}] (estimated error {error:e}, {evaluations} evaluations)")]
    Quadrature {
        a: f64,
        b: f64,
        error: f64,
        evaluations: usize,
    },

    #[error("step size underflow at x = {last_x} (last reliable state {last_value})")]
    SingularIntegration { last_x: f64, last_value: f64 },

    #[error("Cole-Hopf transform broke down at x = {x}: phi reached zero (phi' {phi_prime:+e})")]
    TransformBreakdown { x: f64, phi_prime: f64 },

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("membership classification is not monotone: b = {in_b} is in B but b = {not_in_b} above it is not")]
    MonotonicityViolation { in_b: f64, not_in_b: f64 },

    #[error("{aborted} of {total} paths aborted (limit 10%)")]
    TooManyAborted { aborted: usize, total: usize },

    #[error("numeric failure: {0}")]
    Numeric(String),
}

pub type Result<T> = std::result::Result<T, HarvestError>;
