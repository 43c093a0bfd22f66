use std::fmt;

/// Schema problems exit with 2, everything else with 1.
#[derive(Debug)]
pub enum CliError {
    Schema(String),
    Runtime(String),
}

impl CliError {
    pub fn runtime(e: impl fmt::Display) -> Self {
        CliError::Runtime(e.to_string())
    }

    pub fn schema(e: impl fmt::Display) -> Self {
        CliError::Schema(e.to_string())
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Schema(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Schema(m) => write!(f, "config error: {m}"),
            CliError::Runtime(m) => write!(f, "error: {m}"),
        }
    }
}

impl From<fpf_core::Error> for CliError {
    fn from(e: fpf_core::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;
