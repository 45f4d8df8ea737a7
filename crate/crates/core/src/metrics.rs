//! Truncated reciprocal-rank losses and their exact step functions over
//! thresholds.

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{fused_order, prune, rerank, Dataset, DocId, QueryRecord, Threshold};

pub const DEFAULT_K: usize = 10;

/// Loss applied to a pruned, reranked list.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    /// `1 - RR@k`.
    Mrr { k: usize },
    /// `1 - [some gold document kept]`; ignores the reranker.
    Recall,
}

impl Default for Metric {
    fn default() -> Self {
        Metric::Mrr { k: DEFAULT_K }
    }
}

impl Metric {
    fn needs_fusion(self) -> bool {
        matches!(self, Metric::Mrr { .. })
    }

    /// Loss given the 1-based rank of the best gold document, if any was kept.
    fn loss_at_rank(self, rank: Option<usize>) -> f64 {
        match self {
            Metric::Mrr { k } => 1.0 - rr_of_rank(rank, k),
            Metric::Recall => {
                if rank.is_some() {
                    0.0
                } else {
                    1.0
                }
            }
        }
    }
}

fn rr_of_rank(rank: Option<usize>, k: usize) -> f64 {
    match rank {
        Some(r) if r <= k => 1.0 / r as f64,
        _ => 0.0,
    }
}

/// Sum in the given order divided by the length; 0 for an empty slice.
pub fn mean_in_order(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

/// `1 / r` for the best-ranked gold document, or 0 if none is in the top `k`.
pub fn reciprocal_rank_at_k<'a, I>(ranked: I, gold: &BTreeSet<DocId>, k: usize) -> f64
where
    I: IntoIterator<Item = &'a DocId>,
{
    let rank = ranked
        .into_iter()
        .take(k)
        .position(|d| gold.contains(d))
        .map(|p| p + 1);
    rr_of_rank(rank, k)
}

/// Mean reciprocal rank over the dataset, given one ranked list per query.
pub fn mrr_at_k(dataset: &Dataset, orderings: &[Vec<DocId>], k: usize) -> Result<f64> {
    if orderings.len() != dataset.len() {
        return Err(Error::Config(format!(
            "{} orderings for {} queries",
            orderings.len(),
            dataset.len()
        )));
    }
    let rr: Vec<f64> = dataset
        .records()
        .iter()
        .zip(orderings)
        .map(|(r, o)| reciprocal_rank_at_k(o, r.gold_ids(), k))
        .collect();
    Ok(mean_in_order(&rr))
}

/// MRR@k of every full candidate list after reranking.
pub fn full_mrr(dataset: &Dataset, k: usize) -> Result<f64> {
    let rr = dataset
        .records()
        .iter()
        .map(|r| {
            let ranked = rerank(r.query_id(), r.candidates())?;
            Ok(reciprocal_rank_at_k(ranked.iter().map(|c| &c.doc_id), r.gold_ids(), k))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(mean_in_order(&rr))
}

/// Loss of one query after pruning at `tau` and reranking what is left.
pub fn pruned_loss(record: &QueryRecord, tau: Threshold, metric: Metric) -> Result<f64> {
    let kept = prune(record, tau);
    match metric {
        Metric::Mrr { k } => {
            let ranked = rerank(record.query_id(), kept)?;
            let rr = reciprocal_rank_at_k(ranked.iter().map(|c| &c.doc_id), record.gold_ids(), k);
            Ok(1.0 - rr)
        }
        Metric::Recall => Ok(metric.loss_at_rank(
            kept.iter().position(|c| record.gold_ids().contains(&c.doc_id)),
        )),
    }
}

/// Per-query losses at one threshold, in dataset order.
#[derive(Debug, Clone, PartialEq)]
pub struct LossVector(pub Vec<f64>);

impl LossVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn mean(&self) -> f64 {
        mean_in_order(&self.0)
    }
}

pub fn loss_vector(dataset: &Dataset, tau: Threshold, metric: Metric) -> Result<LossVector> {
    dataset
        .records()
        .iter()
        .map(|r| pruned_loss(r, tau, metric))
        .collect::<Result<Vec<_>>>()
        .map(LossVector)
}

/// Binary indexed tree counting inserted positions.
struct Fenwick(Vec<u32>);

impl Fenwick {
    fn new(n: usize) -> Self {
        Fenwick(vec![0; n + 1])
    }

    fn insert(&mut self, pos: usize) {
        let mut i = pos + 1;
        while i < self.0.len() {
            self.0[i] += 1;
            i += i & i.wrapping_neg();
        }
    }

    /// Number of inserted positions strictly below `pos`.
    fn count_below(&self, pos: usize) -> usize {
        let mut i = pos;
        let mut s = 0usize;
        while i > 0 {
            s += self.0[i] as usize;
            i -= i & i.wrapping_neg();
        }
        s
    }
}

/// Loss after keeping the first `p` pool candidates, for `p = 0..=n`.
///
/// One incremental pass: track the best included gold document in reranked
/// order and how many included candidates outrank it.
pub fn loss_by_prefix(record: &QueryRecord, metric: Metric) -> Result<Vec<f64>> {
    let n = record.len();
    let gold = record.gold_mask();
    let mut out = Vec::with_capacity(n + 1);
    out.push(metric.loss_at_rank(None));
    if !metric.needs_fusion() {
        let mut seen = false;
        for &g in gold {
            seen |= g;
            out.push(metric.loss_at_rank(seen.then_some(1)));
        }
        return Ok(out);
    }
    record.require_fused()?;
    let cands = record.candidates();
    let mut by_fused: Vec<usize> = (0..n).collect();
    by_fused.sort_by(|&a, &b| fused_order(&cands[a], &cands[b]));
    let mut pos = vec![0usize; n];
    for (p, &i) in by_fused.iter().enumerate() {
        pos[i] = p;
    }
    let mut tree = Fenwick::new(n);
    let mut best: Option<usize> = None;
    let mut above = 0usize;
    for i in 0..n {
        let p = pos[i];
        match best {
            Some(b) if p < b => {
                if gold[i] {
                    best = Some(p);
                    above = tree.count_below(p);
                } else {
                    above += 1;
                }
            }
            None if gold[i] => {
                best = Some(p);
                above = tree.count_below(p);
            }
            _ => {}
        }
        tree.insert(p);
        out.push(metric.loss_at_rank(best.map(|_| above + 1)));
    }
    Ok(out)
}

/// Per-query loss as a right-continuous step function of the threshold.
///
/// `steps` holds `(tau, loss)` pairs with strictly descending `tau`; the loss
/// applies from `tau` down to (but excluding) the next step's `tau`. Above
/// the first step the kept set is empty and the loss is 1. Only points where
/// the loss changes are stored.
#[derive(Debug, Clone, PartialEq)]
pub struct LossCurve {
    steps: Vec<(f64, f64)>,
    monotone: bool,
}

impl LossCurve {
    pub fn steps(&self) -> &[(f64, f64)] {
        &self.steps
    }

    pub fn evaluate(&self, tau: f64) -> f64 {
        let n = self.steps.partition_point(|&(t, _)| t >= tau);
        if n == 0 {
            1.0
        } else {
            self.steps[n - 1].1
        }
    }

    /// True when the loss never rises as the threshold drops.
    pub fn is_monotone(&self) -> bool {
        self.monotone
    }
}

pub fn loss_curve(record: &QueryRecord, metric: Metric) -> Result<LossCurve> {
    let by_prefix = loss_by_prefix(record, metric)?;
    let cands = record.candidates();
    let mut steps = Vec::new();
    let mut last = 1.0;
    let mut monotone = true;
    for j in 0..cands.len() {
        let group_end = j + 1 == cands.len()
            || cands[j + 1].calibrated_score != cands[j].calibrated_score;
        if !group_end {
            continue;
        }
        let loss = by_prefix[j + 1];
        if loss != last {
            monotone &= loss < last;
            steps.push((cands[j].calibrated_score, loss));
            last = loss;
        }
    }
    Ok(LossCurve { steps, monotone })
}

/// Loss curves for every query, in dataset order.
pub fn loss_curves(dataset: &Dataset, metric: Metric) -> Result<Vec<LossCurve>> {
    dataset
        .records()
        .par_iter()
        .map(|r| loss_curve(r, metric))
        .collect()
}

/// Fraction of queries whose loss curve is not monotone.
pub fn monotonicity_violation_rate(curves: &[LossCurve]) -> f64 {
    if curves.is_empty() {
        return 0.0;
    }
    curves.iter().filter(|c| !c.is_monotone()).count() as f64 / curves.len() as f64
}
