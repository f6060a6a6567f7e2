use harmonize_core::Error as CoreError;
use thiserror::Error;

/// Failure of a CLI command, classified by exit code.
#[derive(Debug, Error)]
pub enum CliError {
    /// Bad or inconsistent configuration, including checkpoint/config
    /// mismatches.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Missing, malformed or unusable data.
    #[error("data error: {0}")]
    Data(String),

    #[error("numeric failure: {0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        if is_numeric(&e) {
            CliError::Numeric(e.to_string())
        } else {
            CliError::Data(e.to_string())
        }
    }
}

fn is_numeric(e: &CoreError) -> bool {
    match e {
        CoreError::NumericFailure(_) => true,
        CoreError::AtSlice { source, .. } => is_numeric(source),
        _ => false,
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Data(format!("json: {e}"))
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Attaches the path to an I/O failure.
pub(crate) fn io_at<T>(path: &std::path::Path, r: std::io::Result<T>) -> CliResult<T> {
    r.map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}
