use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Model(#[from] epiwave::Error),

    #[error("acceptance failed: {0}")]
    Acceptance(String),

    #[error("output error: {0}")]
    Output(#[from] std::io::Error),

    #[error("output error: {0}")]
    Json(#[from] serde_json::Error),
}

impl CliError {
    /// 2 for bad configuration or model input, 3 for numerical failures,
    /// 4 for acceptance failures, 1 for output errors.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Model(e) if e.is_numerical() => 3,
            CliError::Model(epiwave::Error::Io(_) | epiwave::Error::Csv(_)) => 1,
            CliError::Model(_) => 2,
            CliError::Acceptance(_) => 4,
            CliError::Output(_) | CliError::Json(_) => 1,
        }
    }
}
