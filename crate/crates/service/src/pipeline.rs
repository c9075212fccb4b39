//! Training and scoring shared by the CLI and the HTTP handlers.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use aqi_core::cohort::{make_pairs, make_triplets, AnchorSpec, Cohort};
use aqi_core::features::{featurize, FeatureRanking, FeatureVector, RawAcademicRecord, NUM_FEATURES};
use aqi_core::model::{TrainedKind, TrainedModel};
use aqi_core::qp::{fit, ConstraintResiduals, FitOptions, OptimizerConfig};
use aqi_core::regression::ModelKind;
use aqi_core::screening::{apply_filter, rank_candidates, AqiReport, FilterSpec};
use aqi_core::siamese::{train_contrastive, train_triplet, Activation, LossKind, SiameseModel, SiameseNet, TrainConfig};

use crate::error::{ErrorDetail, ServiceError};

/// Everything that determines a trained model besides the cohort.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainRequest {
    pub cohort_id: String,
    pub kind: TrainedKind,
    #[serde(default)]
    pub seed: u64,
    /// Optimizer only: weight on the cross-class term.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    /// Optimizer only: common `[lower, upper]` weight bounds.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bounds: Option<[f64; 2]>,
    /// M1 only: feature ranks for the ordering constraint.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ranking: Option<Vec<u32>>,
    #[serde(default)]
    pub no_ordering: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<OptimizerConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub siamese: Option<TrainConfig>,
    /// Triplet only: anchor profile; the positive-class 95th percentile
    /// when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anchor: Option<Vec<f64>>,
}

impl TrainRequest {
    pub fn new(cohort_id: impl Into<String>, kind: TrainedKind) -> TrainRequest {
        TrainRequest {
            cohort_id: cohort_id.into(),
            kind,
            seed: 0,
            gamma: None,
            bounds: None,
            ranking: None,
            no_ordering: false,
            optimizer: None,
            siamese: None,
            anchor: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub index: usize,
    pub value: f64,
}

/// Progress record of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunTrace {
    /// Objective per accepted iteration of the winning start, or mean loss
    /// per epoch.
    pub trace: Vec<TraceEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub residuals: Option<ConstraintResiduals>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    pub converged: bool,
}

#[derive(Debug, Clone)]
pub struct Trained {
    pub model: TrainedModel,
    pub run: RunTrace,
}

fn optimizer_options(request: &TrainRequest) -> Result<FitOptions, ServiceError> {
    let mut options = FitOptions::default();
    let mut cfg = request.optimizer.clone().unwrap_or_default();
    cfg.seed = request.seed;
    if request.gamma.is_some() {
        cfg.gamma = request.gamma;
    }
    if let Some(g) = cfg.gamma {
        if !(g.is_finite() && g >= 0.0) {
            return Err(ServiceError::invalid("gamma", "gamma must be a nonnegative number"));
        }
    }
    options.optimizer = cfg;
    if let Some([lo, hi]) = request.bounds {
        if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
            return Err(ServiceError::invalid("bounds", "bounds must satisfy 0 <= lower <= upper <= 1"));
        }
        options.lower = lo;
        options.upper = hi;
    }
    if let Some(r) = &request.ranking {
        if r.len() != NUM_FEATURES {
            return Err(ServiceError::invalid(
                "ranking",
                format!("ranking needs {NUM_FEATURES} entries, got {}", r.len()),
            ));
        }
        let ranking = FeatureRanking::new(r.clone()).map_err(|e| ServiceError::invalid("ranking", e.to_string()))?;
        options.ranking = Some(ranking);
    }
    options.no_ordering = request.no_ordering;
    Ok(options)
}

fn siamese_config(request: &TrainRequest) -> TrainConfig {
    let mut cfg = request.siamese.clone().unwrap_or_default();
    cfg.seed = request.seed;
    cfg
}

fn anchor_for(cohort: &Cohort, request: &TrainRequest) -> Result<AnchorSpec, ServiceError> {
    match &request.anchor {
        None => AnchorSpec::from_positives(cohort).map_err(|e| ServiceError::invalid("cohort_id", e.to_string())),
        Some(values) => {
            let arr: [f64; NUM_FEATURES] = values.as_slice().try_into().map_err(|_| {
                ServiceError::invalid("anchor", format!("anchor needs {NUM_FEATURES} entries, got {}", values.len()))
            })?;
            let fv = FeatureVector::new("anchor", arr).map_err(|e| ServiceError::invalid("anchor", e.to_string()))?;
            AnchorSpec::new(fv).map_err(|e| ServiceError::invalid("anchor", e.to_string()))
        }
    }
}

/// Number of training samples the request would use.
pub fn training_size(cohort: &Cohort, kind: TrainedKind) -> usize {
    let (p, n) = (cohort.positives.len(), cohort.negatives.len());
    match kind {
        TrainedKind::M1 | TrainedKind::M2 => p + n,
        TrainedKind::SiameseContrastive => p * p.saturating_sub(1) / 2 + p * n,
        TrainedKind::SiameseTriplet => p * n,
    }
}

/// Train the requested model on `cohort`. Deterministic in
/// `(cohort, request)`.
pub fn train(cohort: &Cohort, request: &TrainRequest) -> Result<Trained, ServiceError> {
    match request.kind {
        TrainedKind::M1 | TrainedKind::M2 => {
            let kind = if request.kind == TrainedKind::M1 { ModelKind::M1 } else { ModelKind::M2 };
            let options = optimizer_options(request)?;
            let outcome = fit(cohort, kind, &options)?;
            let best = &outcome.solve.starts[outcome.solve.start_index_of_best];
            let run = RunTrace {
                trace: best
                    .objective_trace
                    .iter()
                    .enumerate()
                    .map(|(index, &value)| TraceEntry { index, value })
                    .collect(),
                residuals: Some(outcome.solve.residuals),
                gamma: Some(outcome.gamma),
                converged: best.status == aqi_core::qp::SolveStatus::Converged,
            };
            Ok(Trained {
                model: outcome.model.into(),
                run,
            })
        }
        TrainedKind::SiameseContrastive | TrainedKind::SiameseTriplet => {
            let cfg = siamese_config(request);
            let net = SiameseNet::init(&cfg.layer_sizes(), Activation::Logistic, cfg.init_scale, cfg.seed)?;
            let (loss, outcome, anchor) = if request.kind == TrainedKind::SiameseContrastive {
                let pairs = make_pairs(cohort).map_err(|e| ServiceError::invalid("cohort_id", e.to_string()))?;
                (LossKind::Contrastive, train_contrastive(net, &pairs, &cfg)?, None)
            } else {
                let anchor = anchor_for(cohort, request)?;
                let triplets =
                    make_triplets(cohort, &anchor).map_err(|e| ServiceError::invalid("cohort_id", e.to_string()))?;
                (LossKind::Triplet, train_triplet(net, &triplets, &cfg)?, Some(anchor))
            };
            let run = RunTrace {
                trace: outcome
                    .loss_history
                    .iter()
                    .enumerate()
                    .map(|(index, &value)| TraceEntry { index, value })
                    .collect(),
                residuals: None,
                gamma: None,
                converged: true,
            };
            let model = SiameseModel::new(loss, outcome, cfg, cohort.caps.clone(), anchor);
            Ok(Trained {
                model: model.into(),
                run,
            })
        }
    }
}

/// Canonical serialized model artifact.
pub fn artifact_bytes(model: &TrainedModel) -> Vec<u8> {
    let mut bytes = serde_json::to_vec_pretty(model).expect("model serializes");
    bytes.push(b'\n');
    bytes
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Score raw records with the model's caps, screen them and rank them.
pub fn score_records(
    model: &TrainedModel,
    records: &[RawAcademicRecord],
    filter: Option<&FilterSpec>,
) -> Result<AqiReport, ServiceError> {
    let caps = model.caps();
    let mut vectors = Vec::with_capacity(records.len());
    let mut errors = Vec::new();
    for (i, r) in records.iter().enumerate() {
        match featurize(r, caps) {
            Ok(v) => vectors.push(v),
            Err(e) => errors.push(ErrorDetail {
                field: format!("candidates[{i}]"),
                message: e.to_string(),
            }),
        }
    }
    if !errors.is_empty() {
        return Err(ServiceError::InvalidRecords(errors));
    }
    let outcomes: Option<Vec<_>> = filter.map(|spec| records.iter().map(|r| apply_filter(r, spec)).collect());
    rank_candidates(model, caps, &vectors, outcomes.as_deref()).map_err(|e| ServiceError::Internal(e.to_string()))
}
