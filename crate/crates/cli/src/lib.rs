//! Command-line entry points and the HTTP query service.

pub mod commands;
pub mod server;

use geoaqp::dataset::DatasetError;
use geoaqp::eval::EvalError;
use geoaqp::model::ModelError;
use geoaqp::query::QueryError;
use geoaqp::trainer::TrainError;

/// Errors surfaced by the binary, each tied to an exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
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

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        match e {
            DatasetError::Config(_) | DatasetError::Json(_) => CliError::Config(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Argument(_) => CliError::Config(e.to_string()),
            ModelError::Dataset(d) => d.into(),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) => CliError::Config(e.to_string()),
            TrainError::Data(_) => CliError::Data(e.to_string()),
            TrainError::NonFinite { .. } => CliError::Numeric(e.to_string()),
            TrainError::Model(m) => m.into(),
        }
    }
}

impl From<QueryError> for CliError {
    fn from(e: QueryError) -> Self {
        match e {
            QueryError::Model(m) => m.into(),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Config(_) | EvalError::Json(_) => CliError::Config(e.to_string()),
            EvalError::Query(q) => q.into(),
            _ => CliError::Data(e.to_string()),
        }
    }
}

/// Worker cap from `DEEPSPACE_THREADS`, if set.
pub fn thread_limit() -> Result<Option<usize>, CliError> {
    match std::env::var("DEEPSPACE_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(CliError::Config(format!("DEEPSPACE_THREADS must be a positive integer, got {v:?}"))),
        },
        Err(_) => Ok(None),
    }
}
