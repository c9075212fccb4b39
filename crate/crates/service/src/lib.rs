//! Persistence, training pipeline and HTTP API around `aqi-core`.

pub mod api;
pub mod error;
pub mod pipeline;
pub mod store;

pub use api::{handle_train, router, serve, AppState};
pub use error::{ApiError, ServiceError};
pub use pipeline::{artifact_bytes, score_records, train, TrainRequest, Trained};
pub use store::{ModelRegistryEntry, RunLog, RunStatus, Store};
