use std::fmt;
use std::process::ExitCode;

use robust_harvest::HarvestError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitKind {
    Assumption,
    Usage,
    Numeric,
    MissingInput,
    Internal,
}

impl ExitKind {
    pub fn code(self) -> u8 {
        match self {
            Self::Assumption => 2,
            Self::Usage => 64,
            Self::Numeric => 65,
            Self::MissingInput => 66,
            Self::Internal => 70,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CliError {
    pub kind: ExitKind,
    pub message: String,
}

impl CliError {
    pub fn new(kind: ExitKind, message: impl Into<String>) -> Self {
        Self { kind, message: message.into() }
    }

    pub fn from_harvest(e: HarvestError) -> Self {
        let kind = match &e {
            HarvestError::InvalidInput(_) | HarvestError::Precondition(_) => ExitKind::Usage,
            HarvestError::AssumptionViolation { .. } => ExitKind::Assumption,
            _ => ExitKind::Numeric,
        };
        Self::new(kind, e.to_string())
    }

    pub fn io(what: &str, e: std::io::Error) -> Self {
        Self::new(ExitKind::Internal, format!("{what}: {e}"))
    }

    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(self.kind.code())
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}
