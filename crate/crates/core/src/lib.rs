//! Academic quality scoring: feature construction, constrained regression
//! fitted by quadratic programming, monotone Siamese networks, reference
//! cohorts and candidate screening.

pub mod cohort;
pub mod features;
pub mod model;
pub mod qp;
pub mod regression;
pub mod screening;
pub mod siamese;

pub use cohort::{
    generate, make_pairs, make_triplets, AcademicLevel, AnchorSpec, ClassLabel, Cohort, CohortError, CohortMeta,
    ResearchType, SyntheticSpec, TrainingPair, TrainingTriplet,
};
pub use features::{
    derive_features, featurize, normalize, validate_record, AbsentRankPolicy, Feature, FeatureRanking, FeatureVector,
    NormalizationCaps, RawAcademicRecord, RecordError, NUM_FEATURES,
};
pub use model::{TrainedKind, TrainedModel};
pub use qp::{fit, FitOptions, FitOutcome, OptimizerConfig, QpError};
pub use regression::{eval, to_aqi, ModelKind, ModelWeights, RegressionModel};
pub use screening::{aggregate_rankings, apply_filter, rank_candidates, AqiReport, FilterOutcome, FilterSpec};
pub use siamese::{LossKind, SiameseModel, SiameseNet, TrainConfig};
