//! Linear (M1) and quadratic (M2) scorers over the normalized features, and
//! the mapping from score to AQI.
//!
//! Weight layout for M2 is `[alpha (21) | beta (21) | theta (210)]`, with
//! `theta` indexed by feature pairs `(i, j)`, `i < j`, in lexicographic
//! order. [`basis_manifest`] names every slot.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{Feature, FeatureVector, NormalizationCaps, NUM_FEATURES};

/// Number of unordered feature pairs.
pub const NUM_PAIRS: usize = NUM_FEATURES * (NUM_FEATURES - 1) / 2;

/// Tolerance on the simplex sum of stored weights.
pub const SIMPLEX_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModelKind {
    #[serde(rename = "m1")]
    M1,
    #[serde(rename = "m2")]
    M2,
}

impl ModelKind {
    /// Length of the flattened weight vector.
    pub fn num_weights(self) -> usize {
        match self {
            ModelKind::M1 => NUM_FEATURES,
            ModelKind::M2 => 2 * NUM_FEATURES + NUM_PAIRS,
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "m1" => Ok(ModelKind::M1),
            "m2" => Ok(ModelKind::M2),
            other => Err(format!("unknown regression model `{other}` (expected m1 or m2)")),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WeightsError {
    #[error("expected {expected} weights for {kind:?}, got {got}")]
    Length {
        kind: ModelKind,
        expected: usize,
        got: usize,
    },
    #[error("weight {index} = {value} outside [0, 1]")]
    OutOfRange { index: usize, value: f64 },
    #[error("weights sum to {0}, expected 1")]
    NotOnSimplex(f64),
}

/// Flattened model weights on the probability simplex.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "WeightsRepr", into = "WeightsRepr")]
pub struct ModelWeights {
    kind: ModelKind,
    w: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct WeightsRepr {
    kind: ModelKind,
    weights: Vec<f64>,
}

impl TryFrom<WeightsRepr> for ModelWeights {
    type Error = WeightsError;
    fn try_from(r: WeightsRepr) -> Result<Self, Self::Error> {
        ModelWeights::new(r.kind, r.weights)
    }
}

impl From<ModelWeights> for WeightsRepr {
    fn from(m: ModelWeights) -> Self {
        WeightsRepr {
            kind: m.kind,
            weights: m.w,
        }
    }
}

impl ModelWeights {
    pub fn new(kind: ModelKind, w: Vec<f64>) -> Result<ModelWeights, WeightsError> {
        let expected = kind.num_weights();
        if w.len() != expected {
            return Err(WeightsError::Length {
                kind,
                expected,
                got: w.len(),
            });
        }
        if let Some((index, &value)) = w
            .iter()
            .enumerate()
            .find(|(_, v)| !(0.0..=1.0).contains(*v))
        {
            return Err(WeightsError::OutOfRange { index, value });
        }
        let sum: f64 = w.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_TOL {
            return Err(WeightsError::NotOnSimplex(sum));
        }
        Ok(ModelWeights { kind, w })
    }

    /// Build from solver output that may sit a few ulps outside the box.
    pub(crate) fn from_solver(kind: ModelKind, mut w: Vec<f64>) -> Result<ModelWeights, WeightsError> {
        for v in &mut w {
            *v = v.clamp(0.0, 1.0);
        }
        ModelWeights::new(kind, w)
    }

    pub fn uniform(kind: ModelKind) -> ModelWeights {
        let n = kind.num_weights();
        ModelWeights {
            kind,
            w: vec![1.0 / n as f64; n],
        }
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.w
    }

    pub fn len(&self) -> usize {
        self.w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w.is_empty()
    }

    /// Linear-term weights.
    pub fn alpha(&self) -> &[f64] {
        &self.w[..NUM_FEATURES]
    }

    /// Square-term weights (M2 only).
    pub fn beta(&self) -> Option<&[f64]> {
        (self.kind == ModelKind::M2).then(|| &self.w[NUM_FEATURES..2 * NUM_FEATURES])
    }

    /// Cross-term weights in lexicographic pair order (M2 only).
    pub fn theta(&self) -> Option<&[f64]> {
        (self.kind == ModelKind::M2).then(|| &self.w[2 * NUM_FEATURES..])
    }
}

/// Index of the pair `(i, j)`, `i < j`, within the theta block.
pub fn pair_index(i: usize, j: usize) -> usize {
    debug_assert!(i < j && j < NUM_FEATURES);
    // pairs starting with a < i: sum_{a<i} (n - 1 - a)
    i * (2 * NUM_FEATURES - i - 1) / 2 + (j - i - 1)
}

/// Basis vector for a model kind: the features themselves for M1; features,
/// their squares and all pairwise products for M2.
pub fn basis(kind: ModelKind, x: &FeatureVector) -> Vec<f64> {
    basis_of(kind, &x.values)
}

pub(crate) fn basis_of(kind: ModelKind, x: &[f64; NUM_FEATURES]) -> Vec<f64> {
    let mut phi = Vec::with_capacity(kind.num_weights());
    phi.extend_from_slice(x);
    if kind == ModelKind::M2 {
        phi.extend(x.iter().map(|v| v * v));
        for i in 0..NUM_FEATURES {
            for j in (i + 1)..NUM_FEATURES {
                phi.push(x[i] * x[j]);
            }
        }
    }
    phi
}

/// Human-readable name for every weight slot, in storage order.
pub fn basis_manifest(kind: ModelKind) -> Vec<String> {
    let mut names: Vec<String> = Feature::ALL
        .iter()
        .map(|f| format!("alpha[{f}]"))
        .collect();
    if kind == ModelKind::M2 {
        names.extend(Feature::ALL.iter().map(|f| format!("beta[{f}]")));
        for i in 0..NUM_FEATURES {
            for j in (i + 1)..NUM_FEATURES {
                names.push(format!("theta[{},{}]", Feature::ALL[i], Feature::ALL[j]));
            }
        }
    }
    names
}

/// Score in `[0, 1]`.
pub fn eval(model: &ModelWeights, x: &FeatureVector) -> f64 {
    let phi = basis(model.kind, x);
    let f: f64 = model.w.iter().zip(&phi).map(|(w, p)| w * p).sum();
    debug_assert!(
        (-1e-9..=1.0 + 1e-9).contains(&f),
        "score {f} escaped [0, 1] for valid inputs"
    );
    f.clamp(0.0, 1.0)
}

/// Map a score in `[0, 1]` to the 0..100 index.
pub fn to_aqi(f: f64) -> f64 {
    100.0 * f
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AqiScore {
    pub candidate_id: String,
    pub f_value: f64,
    pub aqi: f64,
}

pub fn aqi(model: &ModelWeights, x: &FeatureVector) -> AqiScore {
    let f_value = eval(model, x);
    AqiScore {
        candidate_id: x.candidate_id.clone(),
        f_value,
        aqi: to_aqi(f_value),
    }
}

pub const REGRESSION_FORMAT_VERSION: u32 = 1;

/// Serialized regression model: weights, slot manifest and the caps used
/// to normalize the training cohort.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionModel {
    pub format_version: u32,
    pub weights: ModelWeights,
    pub basis_manifest: Vec<String>,
    pub caps: NormalizationCaps,
}

#[derive(Debug, Error)]
pub enum ModelDocError {
    #[error("unsupported regression model format version {0}")]
    Version(u32),
    #[error("basis manifest does not match the {0:?} layout")]
    Manifest(ModelKind),
}

impl RegressionModel {
    pub fn new(weights: ModelWeights, caps: NormalizationCaps) -> RegressionModel {
        RegressionModel {
            format_version: REGRESSION_FORMAT_VERSION,
            basis_manifest: basis_manifest(weights.kind()),
            weights,
            caps,
        }
    }

    pub fn check(&self) -> Result<(), ModelDocError> {
        if self.format_version != REGRESSION_FORMAT_VERSION {
            return Err(ModelDocError::Version(self.format_version));
        }
        if self.basis_manifest != basis_manifest(self.weights.kind()) {
            return Err(ModelDocError::Manifest(self.weights.kind()));
        }
        Ok(())
    }

    pub fn score(&self, x: &FeatureVector) -> f64 {
        eval(&self.weights, x)
    }
}
