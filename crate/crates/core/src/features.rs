//! Feature construction: raw academic records to the 21 normalized
//! quality features.
//!
//! Raw inputs are first turned into per-year, per-author-share rates
//! ([`derive_features`]) and then squashed into `[0, 1]` with fixed
//! saturation caps ([`normalize`]). Every map is nondecreasing in the
//! "better" direction of its input, so a stronger record never yields a
//! smaller feature.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Number of academic-quality features.
pub const NUM_FEATURES: usize = 21;

/// Default GPA scale when none is declared.
pub const DEFAULT_GPA_SCALE: f64 = 4.0;

/// Default rank cap for university-ranking features.
pub const DEFAULT_RANK_CAP: u32 = 500;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FeatureError {
    #[error("research time t_res must be positive (got {0})")]
    ZeroResearchTime(f64),
    #[error("post-PhD research time t_res_prime is zero but the record lists supervised students")]
    ZeroPostPhdTime,
    #[error("invalid normalization caps: {0}")]
    BadCaps(String),
    #[error("feature vector component {index} = {value} outside [0, 1]")]
    OutOfRange { index: usize, value: f64 },
    #[error("failed to read caps document {path}: {message}")]
    CapsIo { path: String, message: String },
}

/// How a feature is mapped into `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureKind {
    /// Nonnegative rate, saturated at a cap.
    Ratio,
    /// University rank, smaller is better.
    Rank,
    /// Grade point average on a declared scale.
    Gpa,
}

/// The 21 features in their default importance order (index 0 is the most
/// important).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Feature {
    NQ1,
    HInd,
    NCit,
    I10Ind,
    NBook,
    NAward,
    RInatPhd,
    NPat,
    NPrj,
    NPhdStud,
    NQ2,
    RNatPhd,
    RInatBs,
    RNatBs,
    NMsStud,
    GpaG,
    GpaU,
    NQ3,
    NQ4,
    NBookChp,
    NConf,
}

impl Feature {
    pub const ALL: [Feature; NUM_FEATURES] = [
        Feature::NQ1,
        Feature::HInd,
        Feature::NCit,
        Feature::I10Ind,
        Feature::NBook,
        Feature::NAward,
        Feature::RInatPhd,
        Feature::NPat,
        Feature::NPrj,
        Feature::NPhdStud,
        Feature::NQ2,
        Feature::RNatPhd,
        Feature::RInatBs,
        Feature::RNatBs,
        Feature::NMsStud,
        Feature::GpaG,
        Feature::GpaU,
        Feature::NQ3,
        Feature::NQ4,
        Feature::NBookChp,
        Feature::NConf,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<Feature> {
        Feature::ALL.get(index).copied()
    }

    /// Default importance rank (1 = most important).
    pub fn default_rank(self) -> u32 {
        self.index() as u32 + 1
    }

    pub fn name(self) -> &'static str {
        match self {
            Feature::NQ1 => "n_q1",
            Feature::HInd => "h_ind",
            Feature::NCit => "n_cit",
            Feature::I10Ind => "i10_ind",
            Feature::NBook => "n_book",
            Feature::NAward => "n_award",
            Feature::RInatPhd => "r_inat_phd",
            Feature::NPat => "n_pat",
            Feature::NPrj => "n_prj",
            Feature::NPhdStud => "n_phd_stud",
            Feature::NQ2 => "n_q2",
            Feature::RNatPhd => "r_nat_phd",
            Feature::RInatBs => "r_inat_bs",
            Feature::RNatBs => "r_nat_bs",
            Feature::NMsStud => "n_ms_stud",
            Feature::GpaG => "gpa_g",
            Feature::GpaU => "gpa_u",
            Feature::NQ3 => "n_q3",
            Feature::NQ4 => "n_q4",
            Feature::NBookChp => "n_book_chp",
            Feature::NConf => "n_conf",
        }
    }

    pub fn kind(self) -> FeatureKind {
        match self {
            Feature::RInatPhd | Feature::RNatPhd | Feature::RInatBs | Feature::RNatBs => {
                FeatureKind::Rank
            }
            Feature::GpaG | Feature::GpaU => FeatureKind::Gpa,
            _ => FeatureKind::Ratio,
        }
    }

    /// Default saturation cap for ratio features, in units of the derived
    /// rate (per research year, per author share). `None` for rank and GPA
    /// features.
    pub fn default_cap(self) -> Option<f64> {
        let cap = match self {
            Feature::NQ1 => 2.0,
            Feature::HInd => 3.0,
            Feature::NCit => 1000.0,
            Feature::I10Ind => 8.0,
            Feature::NBook => 0.2,
            Feature::NAward => 1.0,
            Feature::NPat => 0.5,
            Feature::NPrj => 1.0,
            Feature::NPhdStud => 1.0,
            Feature::NQ2 => 1.5,
            Feature::NMsStud => 2.0,
            Feature::NQ3 => 1.0,
            Feature::NQ4 => 1.0,
            Feature::NBookChp => 0.5,
            Feature::NConf => 2.0,
            _ => return None,
        };
        Some(cap)
    }
}

impl fmt::Display for Feature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One candidate's raw inputs. Field names match the CSV header.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct RawAcademicRecord {
    pub candidate_id: String,
    pub n_q1: u32,
    pub n_q2: u32,
    pub n_q3: u32,
    pub n_q4: u32,
    pub n_q1_ave_auth: f64,
    pub n_q2_ave_auth: f64,
    pub n_q3_ave_auth: f64,
    pub n_q4_ave_auth: f64,
    pub n_q1_fa: u32,
    pub n_conf: u32,
    pub n_conf_ave_auth: f64,
    pub n_book: u32,
    pub n_book_ave_auth: f64,
    pub n_book_chp: u32,
    pub n_book_chp_ave_auth: f64,
    pub n_cit: u32,
    pub h_ind: u32,
    pub i10_ind: u32,
    pub n_pat: u32,
    pub n_pat_ave_auth: f64,
    pub n_prj: u32,
    pub n_award_recog_work: u32,
    pub n_ms_stud: u32,
    pub n_phd_stud: u32,
    pub t_res: f64,
    pub t_res_prime: f64,
    #[serde(default)]
    pub r_nat_bs: Option<u32>,
    #[serde(default)]
    pub r_nat_phd: Option<u32>,
    #[serde(default)]
    pub r_inat_bs: Option<u32>,
    #[serde(default)]
    pub r_inat_phd: Option<u32>,
    pub gpa_u: f64,
    pub gpa_g: f64,
    pub n_course_u: u32,
    pub n_course_g: u32,
}

impl RawAcademicRecord {
    /// Total number of SCI papers over all four quartiles.
    pub fn total_papers(&self) -> u32 {
        self.n_q1 + self.n_q2 + self.n_q3 + self.n_q4
    }

    fn author_pairs(&self) -> [(&'static str, u32, f64); 8] {
        [
            ("n_q1", self.n_q1, self.n_q1_ave_auth),
            ("n_q2", self.n_q2, self.n_q2_ave_auth),
            ("n_q3", self.n_q3, self.n_q3_ave_auth),
            ("n_q4", self.n_q4, self.n_q4_ave_auth),
            ("n_conf", self.n_conf, self.n_conf_ave_auth),
            ("n_book", self.n_book, self.n_book_ave_auth),
            ("n_book_chp", self.n_book_chp, self.n_book_chp_ave_auth),
            ("n_pat", self.n_pat, self.n_pat_ave_auth),
        ]
    }
}

/// List of violated record invariants; empty means valid.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<String>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn contains(&self, needle: &str) -> bool {
        self.violations.iter().any(|v| v.contains(needle))
    }
}

pub fn validate_record(raw: &RawAcademicRecord) -> ValidationReport {
    validate_record_with_scale(raw, DEFAULT_GPA_SCALE)
}

pub fn validate_record_with_scale(raw: &RawAcademicRecord, gpa_scale: f64) -> ValidationReport {
    let mut violations = Vec::new();

    if raw.candidate_id.trim().is_empty() {
        violations.push("candidate_id must not be empty".to_string());
    }
    for (name, count, ave) in raw.author_pairs() {
        if !ave.is_finite() || ave < 0.0 {
            violations.push(format!("{name}_ave_auth must be a finite nonnegative number"));
        } else if count > 0 && ave < 1.0 {
            violations.push(format!("{name}_ave_auth must be >= 1 when {name} > 0"));
        }
    }
    if !(raw.t_res.is_finite() && raw.t_res > 0.0) {
        violations.push("t_res must be positive".to_string());
    }
    if !(raw.t_res_prime.is_finite() && raw.t_res_prime >= 0.0) {
        violations.push("t_res_prime must be nonnegative".to_string());
    }
    if raw.t_res.is_finite() && raw.t_res_prime.is_finite() && raw.t_res_prime > raw.t_res {
        violations.push("t_res must be >= t_res_prime".to_string());
    }
    let ranks = [
        ("r_nat_bs", raw.r_nat_bs),
        ("r_nat_phd", raw.r_nat_phd),
        ("r_inat_bs", raw.r_inat_bs),
        ("r_inat_phd", raw.r_inat_phd),
    ];
    for (name, rank) in ranks {
        if rank == Some(0) {
            violations.push(format!("{name} must be >= 1 when present"));
        }
    }
    for (name, gpa) in [("gpa_u", raw.gpa_u), ("gpa_g", raw.gpa_g)] {
        if !(gpa.is_finite() && (0.0..=gpa_scale).contains(&gpa)) {
            violations.push(format!("{name} must lie in [0, {gpa_scale}] (got {gpa})"));
        }
    }

    ValidationReport { violations }
}

/// Raw-scale feature values in importance order. Rank features are `None`
/// when the rank does not apply.
#[derive(Debug, Clone, PartialEq)]
pub struct DerivedFeatures {
    pub candidate_id: String,
    pub values: [Option<f64>; NUM_FEATURES],
}

impl DerivedFeatures {
    pub fn get(&self, feature: Feature) -> Option<f64> {
        self.values[feature.index()]
    }
}

// count / (ave_auth * time); a zero count contributes zero regardless of the
// author average.
fn per_author_rate(count: u32, ave_auth: f64, time: f64) -> f64 {
    if count == 0 {
        0.0
    } else {
        f64::from(count) / (ave_auth * time)
    }
}

fn per_time(count: u32, time: f64) -> f64 {
    if count == 0 {
        0.0
    } else {
        f64::from(count) / time
    }
}

pub fn derive_features(raw: &RawAcademicRecord) -> Result<DerivedFeatures, FeatureError> {
    let t = raw.t_res;
    if !(t > 0.0) {
        return Err(FeatureError::ZeroResearchTime(t));
    }
    let t_post = raw.t_res_prime;
    let students = raw.n_ms_stud + raw.n_phd_stud;
    if students > 0 && !(t_post > 0.0) {
        return Err(FeatureError::ZeroPostPhdTime);
    }

    let rank = |r: Option<u32>| r.map(f64::from);
    let mut values = [None; NUM_FEATURES];
    for feature in Feature::ALL {
        values[feature.index()] = match feature {
            Feature::NQ1 => Some(per_author_rate(raw.n_q1, raw.n_q1_ave_auth, t)),
            Feature::NQ2 => Some(per_author_rate(raw.n_q2, raw.n_q2_ave_auth, t)),
            Feature::NQ3 => Some(per_author_rate(raw.n_q3, raw.n_q3_ave_auth, t)),
            Feature::NQ4 => Some(per_author_rate(raw.n_q4, raw.n_q4_ave_auth, t)),
            Feature::NConf => Some(per_author_rate(raw.n_conf, raw.n_conf_ave_auth, t)),
            Feature::NBook => Some(per_author_rate(raw.n_book, raw.n_book_ave_auth, t)),
            Feature::NBookChp => Some(per_author_rate(
                raw.n_book_chp,
                raw.n_book_chp_ave_auth,
                t,
            )),
            Feature::NPat => Some(per_author_rate(raw.n_pat, raw.n_pat_ave_auth, t)),
            Feature::NPrj => Some(per_time(raw.n_prj, t)),
            Feature::NCit => Some(per_time(raw.n_cit, t)),
            Feature::HInd => Some(per_time(raw.h_ind, t)),
            Feature::I10Ind => Some(per_time(raw.i10_ind, t)),
            Feature::NAward => Some(per_time(raw.n_award_recog_work, t)),
            Feature::NMsStud => Some(per_time(raw.n_ms_stud, t_post)),
            Feature::NPhdStud => Some(per_time(raw.n_phd_stud, t_post)),
            Feature::RInatPhd => rank(raw.r_inat_phd),
            Feature::RNatPhd => rank(raw.r_nat_phd),
            Feature::RInatBs => rank(raw.r_inat_bs),
            Feature::RNatBs => rank(raw.r_nat_bs),
            Feature::GpaG => Some(raw.gpa_g),
            Feature::GpaU => Some(raw.gpa_u),
        };
    }

    Ok(DerivedFeatures {
        candidate_id: raw.candidate_id.clone(),
        values,
    })
}

/// What an absent ("if applies") rank contributes after normalization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AbsentRankPolicy {
    /// Absent rank contributes 0.
    #[default]
    Zero,
    /// Absent rank saturates at the top of the scale (1.0).
    Cap,
}

/// Fixed normalization parameters. Stored with every trained model so new
/// candidates are preprocessed identically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormalizationCaps {
    /// Saturation caps for the ratio features, keyed by feature name.
    pub ratio_caps: BTreeMap<Feature, f64>,
    pub rank_cap: u32,
    pub gpa_scale: f64,
    #[serde(default)]
    pub absent_rank_policy: AbsentRankPolicy,
}

impl Default for NormalizationCaps {
    fn default() -> Self {
        let ratio_caps = Feature::ALL
            .iter()
            .filter_map(|f| f.default_cap().map(|c| (*f, c)))
            .collect();
        NormalizationCaps {
            ratio_caps,
            rank_cap: DEFAULT_RANK_CAP,
            gpa_scale: DEFAULT_GPA_SCALE,
            absent_rank_policy: AbsentRankPolicy::Zero,
        }
    }
}

impl NormalizationCaps {
    pub fn validate(&self) -> Result<(), FeatureError> {
        for feature in Feature::ALL {
            if feature.kind() != FeatureKind::Ratio {
                if self.ratio_caps.contains_key(&feature) {
                    return Err(FeatureError::BadCaps(format!(
                        "{feature} is not a ratio feature and takes no cap"
                    )));
                }
                continue;
            }
            match self.ratio_caps.get(&feature) {
                Some(cap) if cap.is_finite() && *cap > 0.0 => {}
                Some(cap) => {
                    return Err(FeatureError::BadCaps(format!(
                        "cap for {feature} must be positive (got {cap})"
                    )))
                }
                None => {
                    return Err(FeatureError::BadCaps(format!("missing cap for {feature}")));
                }
            }
        }
        if self.rank_cap < 2 {
            return Err(FeatureError::BadCaps(format!(
                "rank_cap must be >= 2 (got {})",
                self.rank_cap
            )));
        }
        if !(self.gpa_scale.is_finite() && self.gpa_scale > 0.0) {
            return Err(FeatureError::BadCaps(format!(
                "gpa_scale must be positive (got {})",
                self.gpa_scale
            )));
        }
        Ok(())
    }

    pub fn cap(&self, feature: Feature) -> Option<f64> {
        self.ratio_caps.get(&feature).copied()
    }

    /// Load a caps document. `.json` files are parsed as JSON, everything
    /// else as TOML. Missing ratio caps fall back to the defaults.
    pub fn from_path(path: &Path) -> Result<NormalizationCaps, FeatureError> {
        let io_err = |message: String| FeatureError::CapsIo {
            path: path.display().to_string(),
            message,
        };
        let text = std::fs::read_to_string(path).map_err(|e| io_err(e.to_string()))?;
        let partial: PartialCaps = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| io_err(e.to_string()))?
        } else {
            toml::from_str(&text).map_err(|e| io_err(e.to_string()))?
        };
        let caps = partial.into_caps();
        caps.validate()?;
        Ok(caps)
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PartialCaps {
    #[serde(default)]
    ratio_caps: BTreeMap<Feature, f64>,
    rank_cap: Option<u32>,
    gpa_scale: Option<f64>,
    absent_rank_policy: Option<AbsentRankPolicy>,
}

impl PartialCaps {
    fn into_caps(self) -> NormalizationCaps {
        let mut caps = NormalizationCaps::default();
        caps.ratio_caps.extend(self.ratio_caps);
        if let Some(r) = self.rank_cap {
            caps.rank_cap = r;
        }
        if let Some(g) = self.gpa_scale {
            caps.gpa_scale = g;
        }
        if let Some(p) = self.absent_rank_policy {
            caps.absent_rank_policy = p;
        }
        caps
    }
}

/// Normalized feature vector, every component in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub candidate_id: String,
    pub values: [f64; NUM_FEATURES],
}

impl FeatureVector {
    pub fn new(
        candidate_id: impl Into<String>,
        values: [f64; NUM_FEATURES],
    ) -> Result<FeatureVector, FeatureError> {
        if let Some((index, value)) = values
            .iter()
            .copied()
            .enumerate()
            .find(|(_, v)| !(0.0..=1.0).contains(v))
        {
            return Err(FeatureError::OutOfRange { index, value });
        }
        Ok(FeatureVector {
            candidate_id: candidate_id.into(),
            values,
        })
    }

    pub fn filled(candidate_id: impl Into<String>, value: f64) -> Result<FeatureVector, FeatureError> {
        FeatureVector::new(candidate_id, [value; NUM_FEATURES])
    }

    pub fn get(&self, feature: Feature) -> f64 {
        self.values[feature.index()]
    }

    pub fn is_valid(&self) -> bool {
        self.values.iter().all(|v| (0.0..=1.0).contains(v))
    }

    /// Componentwise `self <= other`.
    pub fn dominated_by(&self, other: &FeatureVector) -> bool {
        self.values
            .iter()
            .zip(other.values.iter())
            .all(|(a, b)| a <= b)
    }
}

fn normalize_rank(rank: u32, rank_cap: u32) -> f64 {
    let r = f64::from(rank.max(1));
    let span = f64::from(rank_cap - 1);
    (1.0 - (r - 1.0) / span).max(0.0)
}

/// Map derived features into `[0, 1]`. Caps are assumed valid
/// (see [`NormalizationCaps::validate`]).
pub fn normalize(d: &DerivedFeatures, caps: &NormalizationCaps) -> FeatureVector {
    let mut values = [0.0; NUM_FEATURES];
    for feature in Feature::ALL {
        let raw = d.values[feature.index()];
        let v = match feature.kind() {
            FeatureKind::Ratio => {
                let cap = caps
                    .cap(feature)
                    .or_else(|| feature.default_cap())
                    .expect("ratio feature has a cap");
                (raw.unwrap_or(0.0).max(0.0) / cap).min(1.0)
            }
            FeatureKind::Rank => match raw {
                Some(r) => normalize_rank(r as u32, caps.rank_cap),
                None => match caps.absent_rank_policy {
                    AbsentRankPolicy::Zero => 0.0,
                    AbsentRankPolicy::Cap => 1.0,
                },
            },
            FeatureKind::Gpa => (raw.unwrap_or(0.0) / caps.gpa_scale).clamp(0.0, 1.0),
        };
        values[feature.index()] = v;
    }
    FeatureVector {
        candidate_id: d.candidate_id.clone(),
        values,
    }
}

/// Validate, derive and normalize in one step.
pub fn featurize(
    raw: &RawAcademicRecord,
    caps: &NormalizationCaps,
) -> Result<FeatureVector, RecordError> {
    let report = validate_record_with_scale(raw, caps.gpa_scale);
    if !report.is_valid() {
        return Err(RecordError::Invalid(report));
    }
    let derived = derive_features(raw).map_err(RecordError::Derive)?;
    Ok(normalize(&derived, caps))
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RecordError {
    #[error("invalid record: {}", .0.violations.join("; "))]
    Invalid(ValidationReport),
    #[error(transparent)]
    Derive(FeatureError),
}

/// Importance ranking of features: `ranks[k]` is the rank of feature `k`,
/// and the ranks form a permutation of `1..=n`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<u32>", into = "Vec<u32>")]
pub struct FeatureRanking {
    ranks: Vec<u32>,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("ranks {0:?} are not a permutation of 1..=n")]
pub struct InvalidPermutation(pub Vec<u32>);

impl FeatureRanking {
    pub fn new(ranks: Vec<u32>) -> Result<FeatureRanking, InvalidPermutation> {
        let n = ranks.len();
        let mut seen = vec![false; n];
        for &r in &ranks {
            let idx = r as usize;
            if idx == 0 || idx > n || seen[idx - 1] {
                return Err(InvalidPermutation(ranks));
            }
            seen[idx - 1] = true;
        }
        if n == 0 {
            return Err(InvalidPermutation(ranks));
        }
        Ok(FeatureRanking { ranks })
    }

    /// The default ranking (feature index order).
    pub fn table_default() -> FeatureRanking {
        FeatureRanking::identity(NUM_FEATURES)
    }

    pub fn identity(n: usize) -> FeatureRanking {
        FeatureRanking {
            ranks: (1..=n as u32).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.ranks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ranks.is_empty()
    }

    pub fn rank(&self, feature: usize) -> u32 {
        self.ranks[feature]
    }

    pub fn ranks(&self) -> &[u32] {
        &self.ranks
    }

    /// Feature indices from best rank to worst.
    pub fn order(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.ranks.len()).collect();
        order.sort_by_key(|&k| self.ranks[k]);
        order
    }
}

impl TryFrom<Vec<u32>> for FeatureRanking {
    type Error = InvalidPermutation;
    fn try_from(ranks: Vec<u32>) -> Result<Self, Self::Error> {
        FeatureRanking::new(ranks)
    }
}

impl From<FeatureRanking> for Vec<u32> {
    fn from(r: FeatureRanking) -> Vec<u32> {
        r.ranks
    }
}
