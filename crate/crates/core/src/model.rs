//! A trained scorer of either family behind one interface.

use serde::{Deserialize, Serialize};

use crate::features::{FeatureVector, NormalizationCaps};
use crate::regression::{ModelKind, RegressionModel};
use crate::siamese::{LossKind, SiameseModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainedKind {
    M1,
    M2,
    SiameseContrastive,
    SiameseTriplet,
}

impl std::str::FromStr for TrainedKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "m1" => Ok(TrainedKind::M1),
            "m2" => Ok(TrainedKind::M2),
            "siamese_contrastive" => Ok(TrainedKind::SiameseContrastive),
            "siamese_triplet" => Ok(TrainedKind::SiameseTriplet),
            other => Err(format!("unknown model kind `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum TrainedModel {
    Regression(RegressionModel),
    Siamese(SiameseModel),
}

impl TrainedModel {
    pub fn kind(&self) -> TrainedKind {
        match self {
            TrainedModel::Regression(m) => match m.weights.kind() {
                ModelKind::M1 => TrainedKind::M1,
                ModelKind::M2 => TrainedKind::M2,
            },
            TrainedModel::Siamese(m) => match m.loss {
                LossKind::Contrastive => TrainedKind::SiameseContrastive,
                LossKind::Triplet => TrainedKind::SiameseTriplet,
            },
        }
    }

    pub fn caps(&self) -> &NormalizationCaps {
        match self {
            TrainedModel::Regression(m) => &m.caps,
            TrainedModel::Siamese(m) => &m.caps,
        }
    }

    /// Score in `[0, 1]`.
    pub fn score(&self, x: &FeatureVector) -> f64 {
        match self {
            TrainedModel::Regression(m) => m.score(x),
            TrainedModel::Siamese(m) => m.net.forward(x),
        }
    }

    pub fn aqi(&self, x: &FeatureVector) -> f64 {
        crate::regression::to_aqi(self.score(x))
    }
}

impl From<RegressionModel> for TrainedModel {
    fn from(m: RegressionModel) -> Self {
        TrainedModel::Regression(m)
    }
}

impl From<SiameseModel> for TrainedModel {
    fn from(m: SiameseModel) -> Self {
        TrainedModel::Siamese(m)
    }
}
