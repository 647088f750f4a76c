// SPDX-License-Identifier: Apache-2.0

use thiserror::Error;

pub type Result<T, E = MelodyError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum MelodyError {
    #[error("entity {entity}: {message}")]
    Validation { entity: String, message: String },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("duplicate entity id {0:?}")]
    DuplicateEntity(String),

    #[error("featurizer init failed: {0}")]
    FeaturizerInit(String),

    #[error("observation at t={got} is not after the last step t={last}")]
    OutOfOrder { last: i64, got: i64 },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("feature schema mismatch: model expects {expected}, input has {got}")]
    SchemaMismatch { expected: String, got: String },

    #[error("feature {0:?} is absent in every training entity")]
    FeatureNeverPresent(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("insufficient data: {0}")]
    Data(String),

    #[error("model artifact: {0}")]
    Artifact(String),

    #[error("unknown session {0:?}")]
    UnknownSession(String),

    #[error("unknown series {service}/{metric}")]
    UnknownSeries { service: String, metric: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl MelodyError {
    pub(crate) fn validation(entity: impl Into<String>, message: impl Into<String>) -> Self {
        MelodyError::Validation {
            entity: entity.into(),
            message: message.into(),
        }
    }

    /// Short machine-readable code used in service error responses.
    pub fn code(&self) -> &'static str {
        match self {
            MelodyError::Validation { .. } => "validation",
            MelodyError::Parse { .. } => "parse",
            MelodyError::DuplicateEntity(_) => "duplicate_entity",
            MelodyError::FeaturizerInit(_) => "featurizer_init",
            MelodyError::OutOfOrder { .. } => "out_of_order",
            MelodyError::Dimension { .. } => "dimension",
            MelodyError::SchemaMismatch { .. } => "schema_mismatch",
            MelodyError::FeatureNeverPresent(_) => "feature_never_present",
            MelodyError::Config(_) => "config",
            MelodyError::Data(_) => "data",
            MelodyError::Artifact(_) => "artifact",
            MelodyError::UnknownSession(_) => "unknown_session",
            MelodyError::UnknownSeries { .. } => "unknown_series",
            MelodyError::Io(_) => "io",
            MelodyError::Json(_) => "json",
            MelodyError::Csv(_) => "csv",
        }
    }
}
