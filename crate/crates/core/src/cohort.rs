//! Reference cohorts: a positive class of strong academics and a negative
//! class of average ones, plus the pair/triplet views used for training.

use std::collections::HashSet;
use std::fmt;
use std::io::Read;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{
    featurize, FeatureVector, NormalizationCaps, RawAcademicRecord, NUM_FEATURES,
};

pub const COHORT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AcademicLevel {
    #[default]
    AssistProf,
    AssocProf,
    Prof,
}

impl std::str::FromStr for AcademicLevel {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "assist_prof" | "assistant" => Ok(AcademicLevel::AssistProf),
            "assoc_prof" | "associate" => Ok(AcademicLevel::AssocProf),
            "prof" | "professor" => Ok(AcademicLevel::Prof),
            other => Err(format!("unknown academic level `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResearchType {
    Theoretical,
    #[default]
    Applied,
}

impl std::str::FromStr for ResearchType {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "theoretical" => Ok(ResearchType::Theoretical),
            "applied" => Ok(ResearchType::Applied),
            other => Err(format!("unknown research type `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassLabel {
    Positive,
    Negative,
}

impl fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ClassLabel::Positive => "positive",
            ClassLabel::Negative => "negative",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowError {
    pub row: u64,
    pub message: String,
}

impl fmt::Display for RowError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "row {}: {}", self.row, self.message)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CohortError {
    #[error("cohort class `{0}` is empty")]
    EmptyClass(ClassLabel),
    #[error("bad specification: {0}")]
    BadSpec(String),
    #[error("invalid rows: {}", .0.iter().map(|e| e.to_string()).collect::<Vec<_>>().join("; "))]
    InvalidRows(Vec<RowError>),
    #[error("duplicate candidate id `{0}`")]
    DuplicateId(String),
    #[error("io error on {path}: {message}")]
    Io { path: String, message: String },
    #[error("malformed cohort document: {0}")]
    Format(String),
}

/// Labeled reference data for one level, field and research type.
#[derive(Debug, Clone, PartialEq)]
pub struct Cohort {
    pub level: AcademicLevel,
    pub field_tag: String,
    pub research_type: ResearchType,
    /// Caps used to normalize the members; trained models inherit them.
    pub caps: NormalizationCaps,
    pub positives: Vec<FeatureVector>,
    pub negatives: Vec<FeatureVector>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CohortMember {
    id: String,
    class: ClassLabel,
    features: [f64; NUM_FEATURES],
}

/// On-disk cohort document.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct CohortDocument {
    format_version: u32,
    level: AcademicLevel,
    field_tag: String,
    research_type: ResearchType,
    caps: NormalizationCaps,
    feature_names: Vec<String>,
    members: Vec<CohortMember>,
}

impl Cohort {
    pub fn validate(&self) -> Result<(), CohortError> {
        if self.positives.is_empty() {
            return Err(CohortError::EmptyClass(ClassLabel::Positive));
        }
        if self.negatives.is_empty() {
            return Err(CohortError::EmptyClass(ClassLabel::Negative));
        }
        let mut seen = HashSet::new();
        for x in self.positives.iter().chain(&self.negatives) {
            if !x.is_valid() {
                return Err(CohortError::BadSpec(format!(
                    "member `{}` has features outside [0, 1]",
                    x.candidate_id
                )));
            }
            if !seen.insert(x.candidate_id.as_str()) {
                return Err(CohortError::DuplicateId(x.candidate_id.clone()));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.positives.len() + self.negatives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_json(&self) -> String {
        let members = self
            .positives
            .iter()
            .map(|x| (x, ClassLabel::Positive))
            .chain(self.negatives.iter().map(|x| (x, ClassLabel::Negative)))
            .map(|(x, class)| CohortMember {
                id: x.candidate_id.clone(),
                class,
                features: x.values,
            })
            .collect();
        let doc = CohortDocument {
            format_version: COHORT_FORMAT_VERSION,
            level: self.level,
            field_tag: self.field_tag.clone(),
            research_type: self.research_type,
            caps: self.caps.clone(),
            feature_names: crate::features::Feature::ALL
                .iter()
                .map(|f| f.name().to_string())
                .collect(),
            members,
        };
        serde_json::to_string_pretty(&doc).expect("cohort serializes")
    }

    pub fn from_json(text: &str) -> Result<Cohort, CohortError> {
        let doc: CohortDocument =
            serde_json::from_str(text).map_err(|e| CohortError::Format(e.to_string()))?;
        if doc.format_version != COHORT_FORMAT_VERSION {
            return Err(CohortError::Format(format!(
                "unsupported format version {}",
                doc.format_version
            )));
        }
        let expected: Vec<&str> = crate::features::Feature::ALL.iter().map(|f| f.name()).collect();
        if doc.feature_names != expected {
            return Err(CohortError::Format("feature_names do not match the feature layout".into()));
        }
        doc.caps
            .validate()
            .map_err(|e| CohortError::Format(e.to_string()))?;
        let mut positives = Vec::new();
        let mut negatives = Vec::new();
        let mut bad = Vec::new();
        for (i, m) in doc.members.into_iter().enumerate() {
            match FeatureVector::new(m.id, m.features) {
                Ok(x) => match m.class {
                    ClassLabel::Positive => positives.push(x),
                    ClassLabel::Negative => negatives.push(x),
                },
                Err(e) => bad.push(RowError {
                    row: i as u64 + 1,
                    message: e.to_string(),
                }),
            }
        }
        if !bad.is_empty() {
            return Err(CohortError::InvalidRows(bad));
        }
        let cohort = Cohort {
            level: doc.level,
            field_tag: doc.field_tag,
            research_type: doc.research_type,
            caps: doc.caps,
            positives,
            negatives,
        };
        cohort.validate()?;
        Ok(cohort)
    }

    pub fn write_json(&self, path: &Path) -> Result<(), CohortError> {
        std::fs::write(path, self.to_json()).map_err(|e| io_error(path, e))
    }
}

fn io_error(path: &Path, e: impl fmt::Display) -> CohortError {
    CohortError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

/// Parameters of a synthetic cohort.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_pos: usize,
    pub n_neg: usize,
    pub pos_location: Vec<f64>,
    pub neg_location: Vec<f64>,
    /// Standard deviation of the bell before truncation to `[0, 1]`.
    pub dispersion: f64,
    pub seed: u64,
    pub level: AcademicLevel,
    pub field_tag: String,
    pub research_type: ResearchType,
}

pub const DEFAULT_POS_LOCATION: f64 = 0.7;
pub const DEFAULT_NEG_LOCATION: f64 = 0.35;
pub const DEFAULT_DISPERSION: f64 = 0.12;

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_pos: 20,
            n_neg: 20,
            pos_location: vec![DEFAULT_POS_LOCATION; NUM_FEATURES],
            neg_location: vec![DEFAULT_NEG_LOCATION; NUM_FEATURES],
            dispersion: DEFAULT_DISPERSION,
            seed: 42,
            level: AcademicLevel::AssistProf,
            field_tag: "synthetic".into(),
            research_type: ResearchType::Applied,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), CohortError> {
        let bad = |m: String| Err(CohortError::BadSpec(m));
        if self.n_pos == 0 || self.n_neg == 0 {
            return bad("n_pos and n_neg must be at least 1".into());
        }
        for (name, loc) in [("pos_location", &self.pos_location), ("neg_location", &self.neg_location)] {
            if loc.len() != NUM_FEATURES {
                return bad(format!("{name} needs {NUM_FEATURES} entries, got {}", loc.len()));
            }
            if loc.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return bad(format!("{name} entries must lie in [0, 1]"));
            }
        }
        if let Some(k) = (0..NUM_FEATURES).find(|&k| self.pos_location[k] < self.neg_location[k]) {
            return bad(format!("positive location below negative location for feature {k}"));
        }
        if !(self.dispersion.is_finite() && self.dispersion >= 0.0) {
            return bad("dispersion must be finite and nonnegative".into());
        }
        Ok(())
    }
}

// Truncated normal on [0, 1] by rejection; falls back to clamping if the
// bell sits almost entirely outside the interval.
fn sample_truncated(rng: &mut ChaCha8Rng, loc: f64, dispersion: f64) -> f64 {
    if dispersion == 0.0 {
        return loc;
    }
    let normal = Normal::new(loc, dispersion).expect("dispersion is positive");
    for _ in 0..1000 {
        let v = normal.sample(rng);
        if (0.0..=1.0).contains(&v) {
            return v;
        }
    }
    normal.sample(rng).clamp(0.0, 1.0)
}

fn sample_class(
    rng: &mut ChaCha8Rng,
    n: usize,
    loc: &[f64],
    dispersion: f64,
    prefix: &str,
) -> Vec<FeatureVector> {
    (0..n)
        .map(|i| {
            let mut values = [0.0; NUM_FEATURES];
            for (v, &l) in values.iter_mut().zip(loc) {
                *v = sample_truncated(rng, l, dispersion);
            }
            FeatureVector {
                candidate_id: format!("{prefix}-{i:03}"),
                values,
            }
        })
        .collect()
}

fn class_mean(xs: &[FeatureVector]) -> [f64; NUM_FEATURES] {
    let mut m = [0.0; NUM_FEATURES];
    for x in xs {
        for (mk, v) in m.iter_mut().zip(x.values) {
            *mk += v;
        }
    }
    m.iter_mut().for_each(|v| *v /= xs.len() as f64);
    m
}

const MAX_REGENERATIONS: u64 = 32;

/// Sample a synthetic cohort. Deterministic in `spec.seed`.
pub fn generate(spec: &SyntheticSpec) -> Result<Cohort, CohortError> {
    spec.validate()?;
    for attempt in 0..MAX_REGENERATIONS {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(attempt));
        let positives = sample_class(&mut rng, spec.n_pos, &spec.pos_location, spec.dispersion, "pos");
        let negatives = sample_class(&mut rng, spec.n_neg, &spec.neg_location, spec.dispersion, "neg");
        let mp = class_mean(&positives);
        let mn = class_mean(&negatives);
        let inverted = (0..NUM_FEATURES)
            .filter(|&k| spec.pos_location[k] > spec.neg_location[k] && mp[k] < mn[k])
            .count();
        if inverted == 0 {
            return Ok(Cohort {
                level: spec.level,
                field_tag: spec.field_tag.clone(),
                research_type: spec.research_type,
                caps: NormalizationCaps::default(),
                positives,
                negatives,
            });
        }
        log::warn!(
            "synthetic cohort (seed {}, attempt {attempt}) has {inverted} features with mean(S_p) < mean(S_n); regenerating",
            spec.seed
        );
    }
    Err(CohortError::BadSpec(format!(
        "could not sample a cohort with ordered class means in {MAX_REGENERATIONS} attempts"
    )))
}

/// Metadata attached to imported cohorts.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CohortMeta {
    pub level: AcademicLevel,
    pub field_tag: String,
    pub research_type: ResearchType,
}

/// Read raw records from CSV. Rows that fail to parse are reported by line
/// number.
pub fn read_records_csv<R: Read>(reader: R) -> Result<Vec<(u64, RawAcademicRecord)>, CohortError> {
    let (rows, _) = read_csv_rows(reader, false)?;
    Ok(rows.into_iter().map(|(line, _, r)| (line, r)).collect())
}

type CsvRow = (u64, Option<ClassLabel>, RawAcademicRecord);

fn read_csv_rows<R: Read>(reader: R, with_class: bool) -> Result<(Vec<CsvRow>, Vec<RowError>), CohortError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| CohortError::Format(e.to_string()))?
        .clone();
    let class_col = headers.iter().position(|h| h == "class");
    if with_class && class_col.is_none() {
        return Err(CohortError::Format("missing `class` column".into()));
    }
    let record_headers: csv::StringRecord = headers
        .iter()
        .enumerate()
        .filter(|(i, _)| Some(*i) != class_col)
        .map(|(_, h)| h)
        .collect();

    let mut rows = Vec::new();
    let mut errors = Vec::new();
    for result in rdr.records() {
        let raw = match result {
            Ok(r) => r,
            Err(e) => {
                let row = e.position().map(|p| p.line()).unwrap_or(0);
                errors.push(RowError {
                    row,
                    message: e.to_string(),
                });
                continue;
            }
        };
        let line = raw.position().map(|p| p.line()).unwrap_or(0);
        let class = match class_col {
            Some(c) if with_class => match raw.get(c).unwrap_or("") {
                "positive" | "pos" => Some(ClassLabel::Positive),
                "negative" | "neg" => Some(ClassLabel::Negative),
                other => {
                    errors.push(RowError {
                        row: line,
                        message: format!("class must be `positive` or `negative`, got `{other}`"),
                    });
                    continue;
                }
            },
            _ => None,
        };
        let fields: csv::StringRecord = raw
            .iter()
            .enumerate()
            .filter(|(i, _)| Some(*i) != class_col)
            .map(|(_, v)| v)
            .collect();
        match fields.deserialize::<RawAcademicRecord>(Some(&record_headers)) {
            Ok(rec) => rows.push((line, class, rec)),
            Err(e) => errors.push(RowError {
                row: line,
                message: e.to_string(),
            }),
        }
    }
    if !with_class && !errors.is_empty() {
        return Err(CohortError::InvalidRows(errors));
    }
    Ok((rows, errors))
}

/// Import a cohort from a CSV of raw records with a `class` column, or from
/// a cohort JSON document (`.json`). CSV rows are validated, derived and
/// normalized with `caps`.
pub fn import(path: &Path, caps: &NormalizationCaps, meta: &CohortMeta) -> Result<Cohort, CohortError> {
    if path.extension().is_some_and(|e| e == "json") {
        let text = std::fs::read_to_string(path).map_err(|e| io_error(path, e))?;
        return Cohort::from_json(&text);
    }
    let file = std::fs::File::open(path).map_err(|e| io_error(path, e))?;
    import_csv(file, caps, meta)
}

pub fn import_csv<R: Read>(reader: R, caps: &NormalizationCaps, meta: &CohortMeta) -> Result<Cohort, CohortError> {
    caps.validate().map_err(|e| CohortError::BadSpec(e.to_string()))?;
    let (rows, mut errors) = read_csv_rows(reader, true)?;
    let mut positives = Vec::new();
    let mut negatives = Vec::new();
    for (line, class, record) in rows {
        match featurize(&record, caps) {
            Ok(x) => match class {
                Some(ClassLabel::Positive) => positives.push(x),
                _ => negatives.push(x),
            },
            Err(e) => errors.push(RowError {
                row: line,
                message: e.to_string(),
            }),
        }
    }
    if !errors.is_empty() {
        errors.sort_by_key(|e| e.row);
        return Err(CohortError::InvalidRows(errors));
    }
    let cohort = Cohort {
        level: meta.level,
        field_tag: meta.field_tag.clone(),
        research_type: meta.research_type,
        caps: caps.clone(),
        positives,
        negatives,
    };
    cohort.validate()?;
    Ok(cohort)
}

/// Pair of members with a similarity label (`1` similar, `0` dissimilar).
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair {
    pub first: FeatureVector,
    pub second: FeatureVector,
    pub label: u8,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingTriplet {
    pub anchor: FeatureVector,
    pub positive: FeatureVector,
    pub negative: FeatureVector,
}

/// All unordered positive pairs (label 1) followed by all positive x
/// negative pairs (label 0).
pub fn make_pairs(cohort: &Cohort) -> Result<Vec<TrainingPair>, CohortError> {
    non_empty(cohort)?;
    let p = &cohort.positives;
    if p.len() == 1 {
        log::warn!("positive class has a single member; no similar pairs");
    }
    let mut pairs = Vec::with_capacity(p.len() * (p.len().saturating_sub(1)) / 2 + p.len() * cohort.negatives.len());
    for i in 0..p.len() {
        for j in (i + 1)..p.len() {
            pairs.push(TrainingPair {
                first: p[i].clone(),
                second: p[j].clone(),
                label: 1,
            });
        }
    }
    for a in p {
        for b in &cohort.negatives {
            pairs.push(TrainingPair {
                first: a.clone(),
                second: b.clone(),
                label: 0,
            });
        }
    }
    Ok(pairs)
}

/// Reference "ideal but realistic" profile for triplet training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorSpec {
    pub anchor: FeatureVector,
}

impl AnchorSpec {
    pub fn new(anchor: FeatureVector) -> Result<AnchorSpec, CohortError> {
        if !anchor.is_valid() {
            return Err(CohortError::BadSpec("anchor must lie in [0, 1]^21".into()));
        }
        Ok(AnchorSpec { anchor })
    }

    /// Componentwise 95th percentile of the positive class (nearest rank),
    /// capped at 1.
    pub fn from_positives(cohort: &Cohort) -> Result<AnchorSpec, CohortError> {
        if cohort.positives.is_empty() {
            return Err(CohortError::EmptyClass(ClassLabel::Positive));
        }
        let n = cohort.positives.len();
        let rank = ((0.95 * n as f64).ceil() as usize).clamp(1, n) - 1;
        let mut values = [0.0; NUM_FEATURES];
        for (k, v) in values.iter_mut().enumerate() {
            let mut col: Vec<f64> = cohort.positives.iter().map(|x| x.values[k]).collect();
            col.sort_by(f64::total_cmp);
            *v = col[rank].min(1.0);
        }
        AnchorSpec::new(FeatureVector {
            candidate_id: "anchor".into(),
            values,
        })
    }
}

/// One triplet per (positive, negative) pair, all sharing the anchor.
pub fn make_triplets(cohort: &Cohort, anchor: &AnchorSpec) -> Result<Vec<TrainingTriplet>, CohortError> {
    non_empty(cohort)?;
    if !anchor.anchor.is_valid() {
        return Err(CohortError::BadSpec("anchor must lie in [0, 1]^21".into()));
    }
    let mut out = Vec::with_capacity(cohort.positives.len() * cohort.negatives.len());
    for p in &cohort.positives {
        for n in &cohort.negatives {
            out.push(TrainingTriplet {
                anchor: anchor.anchor.clone(),
                positive: p.clone(),
                negative: n.clone(),
            });
        }
    }
    Ok(out)
}

fn non_empty(cohort: &Cohort) -> Result<(), CohortError> {
    if cohort.positives.is_empty() {
        return Err(CohortError::EmptyClass(ClassLabel::Positive));
    }
    if cohort.negatives.is_empty() {
        return Err(CohortError::EmptyClass(ClassLabel::Negative));
    }
    Ok(())
}
