//! Core domain types: candidates, per-query records, datasets, thresholds,
//! and the result records produced by calibration and evaluation.
//!
//! Thresholds are cutoffs on the calibrated retriever score. A threshold `tau`
//! keeps `{d : calibrated_score(d) >= tau}`, so raising `tau` shrinks the kept
//! set. The set family is nested in `tau`; indexing it by `lambda = -tau`
//! gives the usual "larger index, larger set" convention. Every report in this
//! crate prints `tau`.

use std::cmp::Ordering;
use std::collections::{BTreeSet, HashSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{MinMax, PlattModel, Preparation};

/// Shared, cheaply clonable document identifier.
pub type DocId = Arc<str>;

/// One retrieved document for a query.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub doc_id: DocId,
    /// Raw first-stage score.
    pub retriever_score: f64,
    /// Platt-scaled first-stage score in `[0, 1]`.
    pub calibrated_score: f64,
    /// Second-stage score; `f64::NEG_INFINITY` when the reranker run has no
    /// entry for this document.
    pub reranker_score: f64,
    /// Fusion of calibrated and normalized reranker scores. Absent until
    /// fusion has run.
    pub fused_score: Option<f64>,
}

impl Candidate {
    /// Candidate with the default unit-logistic calibration and no fused score.
    pub fn new(doc_id: impl Into<DocId>, retriever_score: f64, reranker_score: f64) -> Self {
        Candidate {
            doc_id: doc_id.into(),
            retriever_score,
            calibrated_score: PlattModel::UNIT.predict(retriever_score),
            reranker_score,
            fused_score: None,
        }
    }

    pub fn reranker_missing(&self) -> bool {
        self.reranker_score == f64::NEG_INFINITY
    }
}

/// Candidate order used for the pool: calibrated score descending, then doc id.
pub fn pool_order(a: &Candidate, b: &Candidate) -> Ordering {
    b.calibrated_score
        .total_cmp(&a.calibrated_score)
        .then_with(|| a.doc_id.cmp(&b.doc_id))
}

/// Reranked order: fused score descending, then doc id. Callers ensure both
/// fused scores are present.
pub(crate) fn fused_order(a: &Candidate, b: &Candidate) -> Ordering {
    let fa = a.fused_score.unwrap_or(f64::NEG_INFINITY);
    let fb = b.fused_score.unwrap_or(f64::NEG_INFINITY);
    fb.total_cmp(&fa).then_with(|| a.doc_id.cmp(&b.doc_id))
}

/// A query, its candidate pool, and its judged gold set.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryRecord {
    query_id: String,
    candidates: Vec<Candidate>,
    gold_ids: BTreeSet<DocId>,
    gold_mask: Vec<bool>,
}

impl QueryRecord {
    /// Builds a record, sorting candidates into pool order.
    ///
    /// Rejects NaN scores, calibrated scores outside `[0, 1]`, and repeated
    /// document ids. Gold ids need not intersect the candidates.
    pub fn new(
        query_id: impl Into<String>,
        mut candidates: Vec<Candidate>,
        gold_ids: BTreeSet<DocId>,
    ) -> Result<Self> {
        let query_id = query_id.into();
        let mut seen = HashSet::with_capacity(candidates.len());
        for c in &candidates {
            if !seen.insert(c.doc_id.clone()) {
                return Err(Error::Duplicate {
                    query_id,
                    doc_id: c.doc_id.to_string(),
                });
            }
            if !(0.0..=1.0).contains(&c.calibrated_score) {
                return Err(Error::Config(format!(
                    "query {query_id}: calibrated score {} of {} outside [0, 1]",
                    c.calibrated_score, c.doc_id
                )));
            }
            if c.retriever_score.is_nan()
                || c.reranker_score.is_nan()
                || c.fused_score.is_some_and(f64::is_nan)
            {
                return Err(Error::Config(format!(
                    "query {query_id}: NaN score for {}",
                    c.doc_id
                )));
            }
        }
        candidates.sort_by(pool_order);
        let gold_mask = candidates
            .iter()
            .map(|c| gold_ids.contains(&c.doc_id))
            .collect();
        Ok(QueryRecord {
            query_id,
            candidates,
            gold_ids,
            gold_mask,
        })
    }

    pub fn query_id(&self) -> &str {
        &self.query_id
    }

    /// Candidates in pool order.
    pub fn candidates(&self) -> &[Candidate] {
        &self.candidates
    }

    pub fn gold_ids(&self) -> &BTreeSet<DocId> {
        &self.gold_ids
    }

    /// `gold_mask()[i]` tells whether `candidates()[i]` is gold.
    pub fn gold_mask(&self) -> &[bool] {
        &self.gold_mask
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    /// True when no gold document is in the pool, so every threshold
    /// yields the maximal loss.
    pub fn gold_unreachable(&self) -> bool {
        !self.gold_mask.iter().any(|&g| g)
    }

    pub fn missing_reranker_count(&self) -> usize {
        self.candidates.iter().filter(|c| c.reranker_missing()).count()
    }

    pub(crate) fn require_fused(&self) -> Result<()> {
        if self.candidates.iter().all(|c| c.fused_score.is_some()) {
            Ok(())
        } else {
            Err(Error::MissingFusedScore {
                query_id: self.query_id.clone(),
            })
        }
    }

    /// Copy with candidate scores rewritten, re-sorted into pool order.
    pub(crate) fn map_candidates(&self, mut f: impl FnMut(&mut Candidate)) -> QueryRecord {
        let mut candidates = self.candidates.clone();
        candidates.iter_mut().for_each(&mut f);
        candidates.sort_by(pool_order);
        let gold_mask = candidates
            .iter()
            .map(|c| self.gold_ids.contains(&c.doc_id))
            .collect();
        QueryRecord {
            query_id: self.query_id.clone(),
            candidates,
            gold_ids: self.gold_ids.clone(),
            gold_mask,
        }
    }
}

/// Dataset-level provenance.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub sources: Vec<String>,
    pub pool_size: usize,
    /// Platt model behind `calibrated_score`; `None` means the default
    /// unit-logistic map.
    pub platt: Option<PlattModel>,
    pub reranker_norm: Option<MinMax>,
    /// Fusion weight, once fused.
    pub beta: Option<f64>,
}

/// An ordered collection of query records with unique ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    records: Vec<QueryRecord>,
    pub meta: DatasetMeta,
}

impl Dataset {
    pub fn new(records: Vec<QueryRecord>, meta: DatasetMeta) -> Result<Self> {
        let mut seen = HashSet::with_capacity(records.len());
        for r in &records {
            if !seen.insert(r.query_id.as_str()) {
                return Err(Error::DuplicateQuery(r.query_id.clone()));
            }
        }
        Ok(Dataset { records, meta })
    }

    pub(crate) fn from_parts_unchecked(records: Vec<QueryRecord>, meta: DatasetMeta) -> Self {
        Dataset { records, meta }
    }

    pub fn records(&self) -> &[QueryRecord] {
        &self.records
    }

    /// Number of queries (the calibration sample count when used for calibration).
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Sub-dataset with the given record indices, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            records: indices.iter().map(|&i| self.records[i].clone()).collect(),
            meta: self.meta.clone(),
        }
    }

    pub fn require_fused(&self) -> Result<()> {
        self.records.iter().try_for_each(QueryRecord::require_fused)
    }

    pub fn unreachable_gold_count(&self) -> usize {
        self.records.iter().filter(|r| r.gold_unreachable()).count()
    }

    pub fn missing_reranker_count(&self) -> usize {
        self.records.iter().map(QueryRecord::missing_reranker_count).sum()
    }
}

/// A cutoff on the calibrated score, in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Threshold(f64);

impl Threshold {
    pub fn new(tau: f64) -> Result<Self> {
        if (0.0..=1.0).contains(&tau) {
            Ok(Threshold(tau))
        } else {
            Err(Error::invalid("threshold", tau, "must lie in [0, 1]"))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }

    /// The equivalent index in "larger index, larger set" convention.
    pub fn lambda(self) -> f64 {
        -self.0
    }
}

/// Keeps the candidates whose calibrated score reaches `tau`.
///
/// The result is always a prefix of the record's candidate list.
pub fn prune(record: &QueryRecord, tau: Threshold) -> &[Candidate] {
    let tau = tau.value();
    let n = record
        .candidates
        .partition_point(|c| c.calibrated_score >= tau);
    &record.candidates[..n]
}

/// Orders a pruned list by fused score (descending), ties by doc id.
pub fn rerank<'a>(query_id: &str, pruned: &'a [Candidate]) -> Result<Vec<&'a Candidate>> {
    if pruned.iter().any(|c| c.fused_score.is_none()) {
        return Err(Error::MissingFusedScore {
            query_id: query_id.to_string(),
        });
    }
    let mut out: Vec<&Candidate> = pruned.iter().collect();
    out.sort_by(|a, b| fused_order(a, b));
    Ok(out)
}

/// Counts surfaced alongside a risk curve.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CurveDiagnostics {
    pub queries: usize,
    /// Queries whose loss rises somewhere as the threshold drops.
    pub non_monotone_queries: usize,
    /// Queries with no gold document in the pool.
    pub unreachable_gold_queries: usize,
}

/// Empirical risk, upper confidence bound, and mean set size over a
/// descending threshold grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskCurve {
    pub thresholds: Vec<f64>,
    pub empirical_risk: Vec<f64>,
    pub ucb: Vec<f64>,
    pub mean_size: Vec<f64>,
    pub delta: f64,
    pub diagnostics: CurveDiagnostics,
}

impl RiskCurve {
    pub fn len(&self) -> usize {
        self.thresholds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.thresholds.is_empty()
    }

    /// Writes `threshold,empirical_risk,ucb,mean_size` rows.
    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["threshold", "empirical_risk", "ucb", "mean_size"])?;
        for i in 0..self.len() {
            w.write_record([
                self.thresholds[i].to_string(),
                self.empirical_risk[i].to_string(),
                self.ucb[i].to_string(),
                self.mean_size[i].to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Correction {
    None,
    Risk,
    Confidence,
}

/// The confidence-corrected alternative reported next to a risk correction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceAlternative {
    pub delta_effective: f64,
    pub threshold_hat: Threshold,
}

/// Outcome of calibration: the chosen threshold and the (possibly corrected)
/// risk level and significance it is certified for.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub threshold_hat: Threshold,
    pub alpha_requested: f64,
    pub alpha_effective: f64,
    pub delta_requested: f64,
    pub delta_effective: f64,
    pub correction: Correction,
    pub achievable: bool,
    /// Present when both corrections were requested.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alternative: Option<ConfidenceAlternative>,
    /// Score transforms fitted on the calibration data, needed to apply the
    /// threshold to fresh data.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preparation: Option<Preparation>,
}

impl CalibrationResult {
    pub fn confidence(&self) -> f64 {
        1.0 - self.delta_effective
    }
}

/// Outcome of applying a calibration to one test split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialReport {
    pub seed: u64,
    pub mrr_at_10: f64,
    /// Test risk under the calibration metric.
    pub test_risk: f64,
    pub mean_pruned_size: f64,
    pub constraint_satisfied: bool,
    pub calibration: CalibrationResult,
}
