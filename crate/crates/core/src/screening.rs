//! Minimum-requirement screening, committee rank aggregation and the final
//! AQI report.

use std::cmp::Ordering;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cohort::AcademicLevel;
use crate::features::{FeatureRanking, FeatureVector, InvalidPermutation, NormalizationCaps, RawAcademicRecord};
use crate::model::TrainedModel;

#[derive(Debug, Error)]
pub enum ScreeningError {
    #[error("no rankings to aggregate")]
    EmptyInput,
    #[error(transparent)]
    InvalidPermutation(#[from] InvalidPermutation),
    #[error("rankings have different lengths ({0} and {1})")]
    LengthMismatch(usize, usize),
    #[error("candidate normalization caps differ from the model snapshot")]
    CapsMismatch,
    #[error("{0} filter results for {1} candidates")]
    FilterCount(usize, usize),
    #[error("invalid filter spec: {0}")]
    BadSpec(String),
    #[error("report export failed: {0}")]
    Export(String),
}

/// Minimum requirements for one academic level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterSpec {
    pub level: AcademicLevel,
    pub k: u32,
    pub l: u32,
    pub min_q1_first_author: u32,
    pub min_total_papers: u32,
    pub max_national_rank: u32,
    pub max_international_rank: u32,
    pub min_gpa_g: f64,
}

impl FilterSpec {
    pub fn for_level(level: AcademicLevel) -> FilterSpec {
        let (k, l) = match level {
            AcademicLevel::AssistProf => (1, 1),
            AcademicLevel::AssocProf => (3, 5),
            AcademicLevel::Prof => (5, 8),
        };
        FilterSpec {
            level,
            k,
            l,
            min_q1_first_author: 2 * k,
            min_total_papers: 2 * l,
            max_national_rank: 10,
            max_international_rank: 100,
            min_gpa_g: 3.5,
        }
    }

    pub fn validate(&self) -> Result<(), ScreeningError> {
        let expected = FilterSpec::for_level(self.level);
        if self.k != expected.k || self.l != expected.l {
            return Err(ScreeningError::BadSpec(format!(
                "level {:?} requires K={} and L={}",
                self.level, expected.k, expected.l
            )));
        }
        if self.min_q1_first_author == 0
            || self.min_total_papers == 0
            || self.max_national_rank == 0
            || self.max_international_rank == 0
            || !(self.min_gpa_g > 0.0 && self.min_gpa_g.is_finite())
        {
            return Err(ScreeningError::BadSpec("thresholds must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterOutcome {
    pub candidate_id: String,
    pub passed: bool,
    pub reasons: Vec<String>,
}

/// Check every applicable threshold. Ranks only apply when present.
pub fn apply_filter(raw: &RawAcademicRecord, spec: &FilterSpec) -> FilterOutcome {
    let mut reasons = Vec::new();
    if raw.n_q1_fa < spec.min_q1_first_author {
        reasons.push(format!(
            "needs ≥ {} Q1 first-author papers (has {})",
            spec.min_q1_first_author, raw.n_q1_fa
        ));
    }
    let total = raw.total_papers();
    if total < spec.min_total_papers {
        reasons.push(format!(
            "needs ≥ {} SCI papers in Q1-Q4 (has {total})",
            spec.min_total_papers
        ));
    }
    let rank_checks = [
        ("national BSc", raw.r_nat_bs, spec.max_national_rank),
        ("national PhD", raw.r_nat_phd, spec.max_national_rank),
        ("international BSc", raw.r_inat_bs, spec.max_international_rank),
        ("international PhD", raw.r_inat_phd, spec.max_international_rank),
    ];
    for (label, rank, max) in rank_checks {
        if let Some(r) = rank {
            if r > max {
                reasons.push(format!("{label} university rank must be ≤ {max} (is {r})"));
            }
        }
    }
    if raw.gpa_g < spec.min_gpa_g {
        reasons.push(format!(
            "graduate GPA {:.2} below {:.2}/4.00",
            raw.gpa_g, spec.min_gpa_g
        ));
    }
    FilterOutcome {
        candidate_id: raw.candidate_id.clone(),
        passed: reasons.is_empty(),
        reasons,
    }
}

/// Average the ranks each feature received and re-rank by that average.
/// Ties go to the lower feature index.
pub fn aggregate_rankings(rankings: &[FeatureRanking]) -> Result<FeatureRanking, ScreeningError> {
    let first = rankings.first().ok_or(ScreeningError::EmptyInput)?;
    let n = first.len();
    // Sums order the same way as averages for a fixed count.
    let mut sums = vec![0u64; n];
    for r in rankings {
        if r.len() != n {
            return Err(ScreeningError::LengthMismatch(n, r.len()));
        }
        for (s, &rank) in sums.iter_mut().zip(r.ranks()) {
            *s += rank as u64;
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| sums[a].cmp(&sums[b]).then(a.cmp(&b)));
    let mut ranks = vec![0u32; n];
    for (pos, &k) in order.iter().enumerate() {
        ranks[k] = pos as u32 + 1;
    }
    Ok(FeatureRanking::new(ranks)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub rank: usize,
    pub candidate_id: String,
    pub aqi: f64,
    pub passed_filter: bool,
    pub reasons: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AqiReport {
    pub rows: Vec<ReportRow>,
}

impl AqiReport {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), ScreeningError> {
        let mut w = csv::Writer::from_writer(writer);
        let err = |e: csv::Error| ScreeningError::Export(e.to_string());
        w.write_record(["rank", "candidate_id", "aqi", "passed_filter", "reasons"])
            .map_err(err)?;
        for row in &self.rows {
            w.write_record([
                row.rank.to_string(),
                row.candidate_id.clone(),
                row.aqi.to_string(),
                row.passed_filter.to_string(),
                row.reasons.join("; "),
            ])
            .map_err(err)?;
        }
        w.flush().map_err(|e| ScreeningError::Export(e.to_string()))
    }
}

fn report_order(a: &ReportRow, b: &ReportRow) -> Ordering {
    b.aqi.total_cmp(&a.aqi).then_with(|| a.candidate_id.cmp(&b.candidate_id))
}

/// Score every candidate, including those that failed screening, and sort
/// by AQI descending then id ascending. `filters`, when given, is parallel
/// to `candidates`.
pub fn rank_candidates(
    model: &TrainedModel,
    caps: &NormalizationCaps,
    candidates: &[FeatureVector],
    filters: Option<&[FilterOutcome]>,
) -> Result<AqiReport, ScreeningError> {
    if caps != model.caps() {
        return Err(ScreeningError::CapsMismatch);
    }
    if let Some(f) = filters {
        if f.len() != candidates.len() {
            return Err(ScreeningError::FilterCount(f.len(), candidates.len()));
        }
    }
    let mut rows: Vec<ReportRow> = candidates
        .iter()
        .enumerate()
        .map(|(i, x)| {
            let outcome = filters.map(|f| &f[i]);
            ReportRow {
                rank: 0,
                candidate_id: x.candidate_id.clone(),
                aqi: model.aqi(x),
                passed_filter: outcome.is_none_or(|o| o.passed),
                reasons: outcome.map(|o| o.reasons.clone()).unwrap_or_default(),
            }
        })
        .collect();
    rows.sort_by(report_order);
    for (pos, row) in rows.iter_mut().enumerate() {
        row.rank = pos + 1;
    }
    Ok(AqiReport { rows })
}
