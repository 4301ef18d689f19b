use qread_core::{baseline, dataset, dse, fxp, ip, metrics, mlp, physics};
use thiserror::Error;

/// Every failure the binary can report. `category` is the machine-parsable
/// token printed before the message.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Physics(#[from] physics::PhysicsError),
    #[error(transparent)]
    Dataset(#[from] dataset::DatasetError),
    #[error(transparent)]
    Metrics(#[from] metrics::MetricsError),
    #[error(transparent)]
    Baseline(#[from] baseline::BaselineError),
    #[error(transparent)]
    Mlp(#[from] mlp::MlpError),
    #[error(transparent)]
    Fxp(#[from] fxp::FxpError),
    #[error(transparent)]
    Ip(#[from] ip::IpError),
    #[error(transparent)]
    Dse(#[from] dse::DseError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}

impl CliError {
    pub fn category(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "UsageError",
            CliError::Physics(_) => "PhysicsError",
            CliError::Dataset(_) => "DatasetError",
            CliError::Metrics(_) => "MetricsError",
            CliError::Baseline(_) => "BaselineError",
            CliError::Mlp(_) => "MlpError",
            CliError::Fxp(_) => "FxpError",
            CliError::Ip(_) => "IpError",
            CliError::Dse(_) => "DseError",
            CliError::Io { .. } => "IoError",
            CliError::Json { .. } => "FormatError",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            _ => 1,
        }
    }

    pub fn io(path: impl std::fmt::Display, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_string(),
            source,
        }
    }

    pub fn json(path: impl std::fmt::Display, source: serde_json::Error) -> Self {
        CliError::Json {
            path: path.to_string(),
            source,
        }
    }

    /// One line, no embedded newlines: `error: <Category>: <message>`.
    pub fn render(&self) -> String {
        let msg = self.to_string().replace(['\n', '\r'], " ");
        format!("error: {}: {}", self.category(), msg.trim())
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
