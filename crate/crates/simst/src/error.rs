//! Error classes that map onto process exit codes.

use simst_core::Error as CoreError;

#[derive(Debug, thiserror::Error)]
pub enum AppError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
}

pub fn config_err(msg: impl Into<String>) -> anyhow::Error {
    AppError::Config(msg.into()).into()
}

pub fn data_err(msg: impl Into<String>) -> anyhow::Error {
    AppError::Data(msg.into()).into()
}

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_DIVERGENCE: i32 = 4;
pub const EXIT_OTHER: i32 = 1;

/// Exit code for the first classified error in the chain.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if let Some(app) = cause.downcast_ref::<AppError>() {
            return match app {
                AppError::Config(_) => EXIT_CONFIG,
                AppError::Data(_) => EXIT_DATA,
            };
        }
        if let Some(core) = cause.downcast_ref::<CoreError>() {
            return match core {
                CoreError::Divergence { .. } => EXIT_DIVERGENCE,
                CoreError::Config(_) | CoreError::Contract(_) => EXIT_CONFIG,
                CoreError::Ingestion(_)
                | CoreError::DegenerateKernel
                | CoreError::DegenerateStd
                | CoreError::InsufficientData { .. }
                | CoreError::DegenerateEmbedding { .. }
                | CoreError::UndefinedMape { .. }
                | CoreError::Index { .. }
                | CoreError::Empty(_) => EXIT_DATA,
                _ => EXIT_OTHER,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() || cause.downcast_ref::<csv::Error>().is_some() {
            return EXIT_DATA;
        }
    }
    EXIT_OTHER
}
