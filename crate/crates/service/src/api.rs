use std::collections::HashSet;
use std::net::SocketAddr;
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use aqi_core::cohort::{generate, import_csv, AcademicLevel, Cohort, CohortMeta, SyntheticSpec};
use aqi_core::features::{FeatureRanking, NormalizationCaps, RawAcademicRecord};
use aqi_core::model::TrainedKind;
use aqi_core::screening::{aggregate_rankings, apply_filter, FilterOutcome, FilterSpec, ScreeningError};

use crate::error::{cohort_error, ServiceError};
use crate::pipeline::{artifact_bytes, score_records, sha256_hex, train, training_size, TrainRequest};
use crate::store::{ModelRegistryEntry, RunLog, RunStatus, Store, TrainingMeta, STORE_FORMAT_VERSION};

/// Cohorts with more training samples than this train in the background.
pub const DEFAULT_SYNC_LIMIT: usize = 20_000;

struct Inner {
    store: Store,
    active: Mutex<HashSet<String>>,
    sync_limit: usize,
}

#[derive(Clone)]
pub struct AppState {
    inner: Arc<Inner>,
}

impl AppState {
    pub fn new(store: Store) -> AppState {
        AppState::with_sync_limit(store, DEFAULT_SYNC_LIMIT)
    }

    pub fn with_sync_limit(store: Store, sync_limit: usize) -> AppState {
        AppState {
            inner: Arc::new(Inner {
                store,
                active: Mutex::new(HashSet::new()),
                sync_limit,
            }),
        }
    }

    pub fn store(&self) -> &Store {
        &self.inner.store
    }

    fn claim(&self, cohort_id: &str) -> Result<JobGuard, ServiceError> {
        let mut active = self.inner.active.lock().expect("job table poisoned");
        if !active.insert(cohort_id.to_string()) {
            return Err(ServiceError::Busy(cohort_id.to_string()));
        }
        Ok(JobGuard {
            inner: self.inner.clone(),
            cohort_id: cohort_id.to_string(),
        })
    }
}

// Releases the per-cohort training slot when dropped.
struct JobGuard {
    inner: Arc<Inner>,
    cohort_id: String,
}

impl Drop for JobGuard {
    fn drop(&mut self) {
        if let Ok(mut active) = self.inner.active.lock() {
            active.remove(&self.cohort_id);
        }
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/cohorts", post(create_cohort))
        .route("/cohorts/{id}", get(get_cohort))
        .route("/train", post(train_model))
        .route("/models/{id}", get(get_model))
        .route("/models/{id}/score", post(score_model))
        .route("/filter", post(filter))
        .route("/rankings/aggregate", post(aggregate))
        .route("/runs/{id}", get(get_run))
        .with_state(state)
}

pub async fn serve(addr: SocketAddr, state: AppState) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state)).await
}

/// Parse a JSON body, reporting the path of the offending field.
fn parse<T: DeserializeOwned>(body: &[u8]) -> Result<T, ServiceError> {
    let de = &mut serde_json::Deserializer::from_slice(body);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        ServiceError::Invalid {
            field: (path != ".").then_some(path),
            message: e.into_inner().to_string(),
        }
    })
}

#[derive(Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
enum CohortRequest {
    Synthetic {
        #[serde(default)]
        spec: SyntheticSpec,
    },
    Document {
        document: Value,
    },
    Csv {
        csv: String,
        #[serde(default)]
        meta: CohortMeta,
        #[serde(default)]
        caps: Option<NormalizationCaps>,
    },
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CohortCreated {
    pub cohort_id: String,
    pub level: AcademicLevel,
    pub n_pos: usize,
    pub n_neg: usize,
}

async fn create_cohort(State(state): State<AppState>, body: Bytes) -> Result<Response, ServiceError> {
    let request: CohortRequest = parse(&body)?;
    let cohort: Cohort = match request {
        CohortRequest::Synthetic { spec } => generate(&spec).map_err(|e| cohort_error("spec", e))?,
        CohortRequest::Document { document } => {
            Cohort::from_json(&document.to_string()).map_err(|e| cohort_error("document", e))?
        }
        CohortRequest::Csv { csv, meta, caps } => {
            let caps = caps.unwrap_or_default();
            caps.validate().map_err(|e| ServiceError::invalid("caps", e.to_string()))?;
            import_csv(csv.as_bytes(), &caps, &meta).map_err(|e| cohort_error("csv", e))?
        }
    };
    let cohort_id = state.store().put_cohort(&cohort)?;
    let created = CohortCreated {
        cohort_id,
        level: cohort.level,
        n_pos: cohort.positives.len(),
        n_neg: cohort.negatives.len(),
    };
    Ok((StatusCode::CREATED, Json(created)).into_response())
}

async fn get_cohort(State(state): State<AppState>, Path(id): Path<String>) -> Result<Response, ServiceError> {
    let text = state.store().cohort_text(&id)?;
    let doc: Value = serde_json::from_str(&text).map_err(|e| ServiceError::Storage(e.to_string()))?;
    Ok(Json(doc).into_response())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TrainAccepted {
    pub model_id: String,
    pub run_id: String,
    pub kind: TrainedKind,
    pub status: RunStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checksum: Option<String>,
}

fn ids_for(cohort_text: &str, request: &TrainRequest) -> (String, String, String) {
    let cohort_hash = sha256_hex(cohort_text.as_bytes());
    let mut key = cohort_hash.clone().into_bytes();
    key.extend(serde_json::to_vec(request).expect("request serializes"));
    let h = sha256_hex(&key);
    (cohort_hash, format!("m-{}", &h[..16]), format!("r-{}", &h[..16]))
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339()
}

/// Train, then persist the registry entry and run log. Failures are
/// recorded in the run log before being returned.
pub fn handle_train(store: &Store, request: &TrainRequest) -> Result<ModelRegistryEntry, ServiceError> {
    let text = store.cohort_text(&request.cohort_id)?;
    let cohort = Cohort::from_json(&text).map_err(|e| ServiceError::Storage(e.to_string()))?;
    let (cohort_hash, model_id, run_id) = ids_for(&text, request);
    run_training(store, &cohort, request, cohort_hash, model_id, run_id)
}

fn run_training(
    store: &Store,
    cohort: &Cohort,
    request: &TrainRequest,
    cohort_hash: String,
    model_id: String,
    run_id: String,
) -> Result<ModelRegistryEntry, ServiceError> {
    let started_at = now();
    let mut log = RunLog {
        format_version: STORE_FORMAT_VERSION,
        run_id: run_id.clone(),
        model_id: model_id.clone(),
        cohort_id: request.cohort_id.clone(),
        kind: request.kind,
        status: RunStatus::Running,
        trace: Vec::new(),
        residuals: None,
        gamma: None,
        error: None,
    };
    let trained = match train(cohort, request) {
        Ok(t) => t,
        Err(e) => {
            log.status = RunStatus::Failed;
            log.error = Some(e.to_api());
            store.put_run(&log)?;
            return Err(e);
        }
    };
    let entry = ModelRegistryEntry {
        format_version: STORE_FORMAT_VERSION,
        model_id,
        kind: request.kind,
        checksum: sha256_hex(&artifact_bytes(&trained.model)),
        caps: trained.model.caps().clone(),
        model: trained.model,
        training: TrainingMeta {
            cohort_id: request.cohort_id.clone(),
            cohort_hash,
            level: cohort.level,
            request: request.clone(),
            seed: request.seed,
            run_id,
            started_at,
            finished_at: now(),
        },
    };
    store.put_model(&entry)?;
    log.status = RunStatus::Completed;
    log.trace = trained.run.trace;
    log.residuals = trained.run.residuals;
    log.gamma = trained.run.gamma;
    store.put_run(&log)?;
    Ok(entry)
}

async fn train_model(State(state): State<AppState>, body: Bytes) -> Result<Response, ServiceError> {
    let request: TrainRequest = parse(&body)?;
    let text = state.store().cohort_text(&request.cohort_id)?;
    let cohort = Cohort::from_json(&text).map_err(|e| ServiceError::Storage(e.to_string()))?;
    let (cohort_hash, model_id, run_id) = ids_for(&text, &request);
    let guard = state.claim(&request.cohort_id)?;
    let background = training_size(&cohort, request.kind) > state.inner.sync_limit;

    let accepted = TrainAccepted {
        model_id: model_id.clone(),
        run_id: run_id.clone(),
        kind: request.kind,
        status: RunStatus::Running,
        checksum: None,
    };
    if background {
        state.store().put_run(&RunLog {
            format_version: STORE_FORMAT_VERSION,
            run_id: run_id.clone(),
            model_id: model_id.clone(),
            cohort_id: request.cohort_id.clone(),
            kind: request.kind,
            status: RunStatus::Running,
            trace: Vec::new(),
            residuals: None,
            gamma: None,
            error: None,
        })?;
    }
    let st = state.clone();
    let job = tokio::task::spawn_blocking(move || {
        let _guard = guard;
        let res = run_training(st.store(), &cohort, &request, cohort_hash, model_id, run_id);
        if let Err(e) = &res {
            log::warn!("training failed: {e}");
        }
        res
    });
    if background {
        return Ok((StatusCode::ACCEPTED, Json(accepted)).into_response());
    }
    let entry = job.await.map_err(|e| ServiceError::Internal(e.to_string()))??;
    let done = TrainAccepted {
        status: RunStatus::Completed,
        checksum: Some(entry.checksum.clone()),
        ..accepted
    };
    Ok((StatusCode::CREATED, Json(done)).into_response())
}

async fn get_model(State(state): State<AppState>, Path(id): Path<String>) -> Result<Response, ServiceError> {
    Ok(Json(state.store().get_model(&id)?).into_response())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ScoreRequest {
    candidates: Vec<RawAcademicRecord>,
    /// Screening thresholds; those of the training cohort's level when
    /// absent.
    #[serde(default)]
    filter: Option<FilterSpec>,
    #[serde(default)]
    skip_filter: bool,
}

async fn score_model(
    State(state): State<AppState>,
    Path(id): Path<String>,
    body: Bytes,
) -> Result<Response, ServiceError> {
    let entry = state.store().get_model(&id)?;
    let request: ScoreRequest = parse(&body)?;
    let spec = match (request.skip_filter, request.filter) {
        (true, _) => None,
        (false, Some(spec)) => {
            spec.validate().map_err(|e| ServiceError::invalid("filter", e.to_string()))?;
            Some(spec)
        }
        (false, None) => Some(FilterSpec::for_level(entry.training.level)),
    };
    let report = score_records(&entry.model, &request.candidates, spec.as_ref())?;
    Ok(Json(report).into_response())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct FilterRequest {
    records: Vec<RawAcademicRecord>,
    #[serde(default)]
    level: Option<AcademicLevel>,
    #[serde(default)]
    spec: Option<FilterSpec>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct FilterResponse {
    pub outcomes: Vec<FilterOutcome>,
}

async fn filter(body: Bytes) -> Result<Response, ServiceError> {
    let request: FilterRequest = parse(&body)?;
    let spec = match (request.spec, request.level) {
        (Some(spec), _) => {
            spec.validate().map_err(|e| ServiceError::invalid("spec", e.to_string()))?;
            spec
        }
        (None, Some(level)) => FilterSpec::for_level(level),
        (None, None) => return Err(ServiceError::invalid("level", "either `level` or `spec` is required")),
    };
    let outcomes = request.records.iter().map(|r| apply_filter(r, &spec)).collect();
    Ok(Json(FilterResponse { outcomes }).into_response())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct AggregateRequest {
    rankings: Vec<Vec<u32>>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct AggregateResponse {
    pub ranking: Vec<u32>,
}

async fn aggregate(body: Bytes) -> Result<Response, ServiceError> {
    let request: AggregateRequest = parse(&body)?;
    let mut rankings = Vec::with_capacity(request.rankings.len());
    for (i, r) in request.rankings.into_iter().enumerate() {
        let ranking = FeatureRanking::new(r).map_err(|e| ServiceError::InvalidPermutation {
            field: format!("rankings[{i}]"),
            message: e.to_string(),
        })?;
        rankings.push(ranking);
    }
    let ranking = aggregate_rankings(&rankings).map_err(|e| match e {
        ScreeningError::EmptyInput => ServiceError::EmptyInput,
        other => ServiceError::invalid("rankings", other.to_string()),
    })?;
    Ok(Json(AggregateResponse {
        ranking: ranking.ranks().to_vec(),
    })
    .into_response())
}

async fn get_run(State(state): State<AppState>, Path(id): Path<String>) -> Result<Response, ServiceError> {
    Ok(Json(state.store().get_run(&id)?).into_response())
}
