use thiserror::Error;

/// CLI failures, each mapped to a process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("solver failure: {0}")]
    Solver(String),

    #[error("{failed} of {total} sweep cells failed")]
    PartialSweep { failed: usize, total: usize },

    #[error("i/o error: {0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Solver(_) => 3,
            CliError::PartialSweep { .. } => 4,
            CliError::Io(_) => 5,
        }
    }
}

impl From<ctrace_core::Error> for CliError {
    fn from(e: ctrace_core::Error) -> Self {
        use ctrace_core::Error as E;
        match e {
            E::Config(_) | E::Dimension { .. } | E::Infeasible(_) => CliError::Config(e.to_string()),
            _ => CliError::Solver(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Io(e.to_string())
    }
}
