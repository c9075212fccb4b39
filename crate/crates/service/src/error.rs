use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use aqi_core::cohort::CohortError;
use aqi_core::qp::QpError;
use aqi_core::siamese::SiameseError;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorDetail {
    pub field: String,
    pub message: String,
}

/// Wire form of every error: machine code, human message, field path.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApiError {
    pub code: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub field: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub details: Vec<ErrorDetail>,
}

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("unknown cohort `{0}`")]
    UnknownCohort(String),
    #[error("unknown model `{0}`")]
    UnknownModel(String),
    #[error("unknown run `{0}`")]
    UnknownRun(String),
    #[error("{message}")]
    Invalid { field: Option<String>, message: String },
    #[error("{} invalid record(s)", .0.len())]
    InvalidRecords(Vec<ErrorDetail>),
    #[error("{0}")]
    Infeasible(String),
    #[error("no rankings to aggregate")]
    EmptyInput,
    #[error("{message}")]
    InvalidPermutation { field: String, message: String },
    #[error("a training job is already running for cohort `{0}`")]
    Busy(String),
    #[error("storage failure: {0}")]
    Storage(String),
    #[error("internal error: {0}")]
    Internal(String),
}

impl ServiceError {
    pub fn invalid(field: impl Into<String>, message: impl Into<String>) -> ServiceError {
        ServiceError::Invalid {
            field: Some(field.into()),
            message: message.into(),
        }
    }

    pub fn code(&self) -> &'static str {
        match self {
            ServiceError::UnknownCohort(_) => "unknown_cohort",
            ServiceError::UnknownModel(_) => "unknown_model",
            ServiceError::UnknownRun(_) => "unknown_run",
            ServiceError::Invalid { .. } => "invalid_request",
            ServiceError::InvalidRecords(_) => "invalid_record",
            ServiceError::Infeasible(_) => "infeasible_constraints",
            ServiceError::EmptyInput => "empty_input",
            ServiceError::InvalidPermutation { .. } => "invalid_permutation",
            ServiceError::Busy(_) => "training_in_progress",
            ServiceError::Storage(_) => "storage_error",
            ServiceError::Internal(_) => "internal_error",
        }
    }

    pub fn status(&self) -> StatusCode {
        match self {
            ServiceError::UnknownCohort(_) | ServiceError::UnknownModel(_) | ServiceError::UnknownRun(_) => {
                StatusCode::NOT_FOUND
            }
            ServiceError::Invalid { .. }
            | ServiceError::InvalidRecords(_)
            | ServiceError::Infeasible(_)
            | ServiceError::EmptyInput
            | ServiceError::InvalidPermutation { .. } => StatusCode::UNPROCESSABLE_ENTITY,
            ServiceError::Busy(_) => StatusCode::CONFLICT,
            ServiceError::Storage(_) | ServiceError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }

    pub fn to_api(&self) -> ApiError {
        let (field, details) = match self {
            ServiceError::UnknownCohort(_) => (Some("cohort_id".to_string()), Vec::new()),
            ServiceError::Invalid { field, .. } => (field.clone(), Vec::new()),
            ServiceError::InvalidRecords(d) => (d.first().map(|e| e.field.clone()), d.clone()),
            ServiceError::InvalidPermutation { field, .. } => (Some(field.clone()), Vec::new()),
            ServiceError::EmptyInput => (Some("rankings".to_string()), Vec::new()),
            _ => (None, Vec::new()),
        };
        ApiError {
            code: self.code().to_string(),
            message: self.to_string(),
            field,
            details,
        }
    }
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        (self.status(), Json(self.to_api())).into_response()
    }
}

impl From<QpError> for ServiceError {
    fn from(e: QpError) -> Self {
        match e {
            QpError::InfeasibleConstraints(_) => ServiceError::Infeasible(e.to_string()),
            QpError::EmptyClass(_) => ServiceError::invalid("cohort_id", e.to_string()),
            QpError::BadConfig(_) => ServiceError::invalid("optimizer", e.to_string()),
            QpError::Dimension { .. } => ServiceError::Internal(e.to_string()),
        }
    }
}

impl From<SiameseError> for ServiceError {
    fn from(e: SiameseError) -> Self {
        match e {
            SiameseError::BadConfig(_) | SiameseError::BadArchitecture(_) => ServiceError::invalid("siamese", e.to_string()),
            SiameseError::EmptyBatch => ServiceError::invalid("cohort_id", e.to_string()),
            SiameseError::Version(_) => ServiceError::Internal(e.to_string()),
        }
    }
}

/// Cohort construction errors, with `prefix` naming the request field.
pub fn cohort_error(prefix: &str, e: CohortError) -> ServiceError {
    match e {
        CohortError::InvalidRows(rows) => ServiceError::InvalidRecords(
            rows.into_iter()
                .map(|r| ErrorDetail {
                    field: format!("{prefix}.row[{}]", r.row),
                    message: r.message,
                })
                .collect(),
        ),
        CohortError::Io { .. } => ServiceError::Storage(e.to_string()),
        other => ServiceError::invalid(prefix, other.to_string()),
    }
}
