//! Reading retrieval artifacts and turning raw scores into the calibrated
//! and fused scores the calibration machinery consumes.

mod fusion;
mod platt;
pub mod snapshot;
mod trec;

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

pub use fusion::{fuse, fuse_score, fuse_with, search_beta, search_beta_with, MinMax};
pub use platt::{fit_platt, PlattModel};
pub use trec::{gold_ids, parse_qrels, parse_run, Qrels, Run, RunEntry};

use crate::error::{Error, Result};
use crate::model::{Candidate, Dataset, DatasetMeta, DocId, QueryRecord};

pub const DEFAULT_POOL_SIZE: usize = 1000;
pub const DEFAULT_BETA_STEP: f64 = 0.01;

/// Joins a retriever run, a reranker run, and qrels into a dataset.
///
/// Each query keeps its top `pool_size` retriever entries. Candidates the
/// reranker run does not cover get the `-inf` sentinel. Queries absent from
/// the qrels get an empty gold set. Calibrated scores start at the unit
/// logistic of the raw score until [`Preparation`] refits them.
pub fn build_dataset(
    retriever_run: &Run,
    reranker_run: &Run,
    qrels: &Qrels,
    pool_size: usize,
) -> Result<Dataset> {
    if pool_size == 0 {
        return Err(Error::invalid("pool size", 0.0, "must be positive"));
    }
    for (qid, entries) in reranker_run {
        let known: Option<BTreeSet<&str>> = retriever_run
            .get(qid)
            .map(|es| es.iter().map(|e| e.doc_id.as_str()).collect());
        for e in entries {
            if !known.as_ref().is_some_and(|k| k.contains(e.doc_id.as_str())) {
                return Err(Error::UnknownCandidate {
                    query_id: qid.clone(),
                    doc_id: e.doc_id.clone(),
                });
            }
        }
    }
    let mut records = Vec::with_capacity(retriever_run.len());
    for (qid, entries) in retriever_run {
        let rerank: HashMap<&str, f64> = reranker_run
            .get(qid)
            .map(|es| es.iter().map(|e| (e.doc_id.as_str(), e.score)).collect())
            .unwrap_or_default();
        let candidates = entries
            .iter()
            .take(pool_size)
            .map(|e| {
                let rer = rerank
                    .get(e.doc_id.as_str())
                    .copied()
                    .unwrap_or(f64::NEG_INFINITY);
                Candidate::new(e.doc_id.as_str(), e.score, rer)
            })
            .collect();
        let gold: BTreeSet<DocId> = gold_ids(qrels, qid).map(DocId::from).collect();
        records.push(QueryRecord::new(qid.clone(), candidates, gold)?);
    }
    Dataset::new(
        records,
        DatasetMeta {
            pool_size,
            ..DatasetMeta::default()
        },
    )
}

/// Re-derives calibrated scores from raw scores with `model`.
pub fn apply_platt(dataset: &Dataset, model: &PlattModel) -> Dataset {
    let records = dataset
        .records()
        .iter()
        .map(|r| {
            r.map_candidates(|c| {
                c.calibrated_score = model.predict(c.retriever_score);
                c.fused_score = None;
            })
        })
        .collect();
    let meta = DatasetMeta {
        platt: Some(*model),
        beta: None,
        ..dataset.meta.clone()
    };
    Dataset::from_parts_unchecked(records, meta)
}

/// Fits Platt scaling on every candidate of `dataset`, labelled by gold
/// membership.
pub fn fit_platt_on(dataset: &Dataset) -> Result<PlattModel> {
    let n: usize = dataset.records().iter().map(|r| r.len()).sum();
    let mut scores = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for r in dataset.records() {
        for (c, &g) in r.candidates().iter().zip(r.gold_mask()) {
            scores.push(c.retriever_score);
            labels.push(g);
        }
    }
    fit_platt(&scores, &labels)
}

/// Score transforms fitted on calibration data: Platt model, reranker
/// normalization, and fusion weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Preparation {
    pub platt: PlattModel,
    /// True when the labels were one-class and the unit logistic was used.
    pub platt_fallback: bool,
    pub reranker_norm: MinMax,
    pub beta: f64,
    /// Full-list MRR@k on the calibration data at `beta`.
    pub calibration_mrr: f64,
}

/// How [`Preparation::fit`] chooses the fusion weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BetaChoice {
    Search { step: f64 },
    Fixed(f64),
}

impl Default for BetaChoice {
    fn default() -> Self {
        BetaChoice::Search {
            step: DEFAULT_BETA_STEP,
        }
    }
}

impl Preparation {
    /// Fits every transform on `calib` only.
    pub fn fit(calib: &Dataset, beta: BetaChoice, k: usize) -> Result<Preparation> {
        let (platt, platt_fallback) = match fit_platt_on(calib) {
            Ok(m) => (m, false),
            Err(Error::OneClassLabels) => (PlattModel::UNIT, true),
            Err(e) => return Err(e),
        };
        let scaled = apply_platt(calib, &platt);
        let reranker_norm = MinMax::fit(&scaled);
        let (beta, calibration_mrr) = match beta {
            BetaChoice::Search { step } => search_beta_with(&scaled, step, k, &reranker_norm)?,
            BetaChoice::Fixed(b) => {
                let fused = fuse_with(&scaled, b, &reranker_norm)?;
                (b, crate::metrics::full_mrr(&fused, k)?)
            }
        };
        Ok(Preparation {
            platt,
            platt_fallback,
            reranker_norm,
            beta,
            calibration_mrr,
        })
    }

    /// Recalibrates, re-sorts, and fuses `dataset` with these transforms.
    pub fn apply(&self, dataset: &Dataset) -> Result<Dataset> {
        fuse_with(&apply_platt(dataset, &self.platt), self.beta, &self.reranker_norm)
    }
}
