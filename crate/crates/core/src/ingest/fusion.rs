//! Evidence fusion of calibrated retriever scores and normalized reranker
//! scores, and the calibration-set search for the fusion weight.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::mean_in_order;
use crate::model::{Dataset, DatasetMeta, QueryRecord};

/// Min-max normalization of reranker scores, fitted on one dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MinMax {
    pub min: f64,
    pub max: f64,
}

impl MinMax {
    /// Fits over every finite reranker score. Missing scores are ignored.
    pub fn fit(dataset: &Dataset) -> MinMax {
        let (mut min, mut max) = (f64::INFINITY, f64::NEG_INFINITY);
        for c in dataset.records().iter().flat_map(|r| r.candidates()) {
            if c.reranker_score.is_finite() {
                min = min.min(c.reranker_score);
                max = max.max(c.reranker_score);
            }
        }
        if min > max {
            MinMax { min: 0.0, max: 0.0 }
        } else {
            MinMax { min, max }
        }
    }

    /// Maps into `[0, 1]` on the fitted range; missing scores stay at -inf.
    /// Scores outside the fitted range map outside `[0, 1]`.
    pub fn apply(&self, score: f64) -> f64 {
        if !score.is_finite() {
            f64::NEG_INFINITY
        } else if self.max > self.min {
            (score - self.min) / (self.max - self.min)
        } else {
            0.0
        }
    }
}

/// `beta * calibrated + (1 - beta) * normalized`. A missing reranker score
/// ranks the candidate last unless `beta == 1`.
pub fn fuse_score(beta: f64, calibrated: f64, normalized: f64) -> f64 {
    if normalized == f64::NEG_INFINITY {
        return if beta == 1.0 { calibrated } else { f64::NEG_INFINITY };
    }
    beta * calibrated + (1.0 - beta) * normalized
}

fn check_beta(beta: f64) -> Result<()> {
    if (0.0..=1.0).contains(&beta) {
        Ok(())
    } else {
        Err(Error::invalid("beta", beta, "must lie in [0, 1]"))
    }
}

/// Fuses with a normalizer fitted on `dataset` itself.
pub fn fuse(dataset: &Dataset, beta: f64) -> Result<Dataset> {
    fuse_with(dataset, beta, &MinMax::fit(dataset))
}

/// Fuses with a given normalizer (e.g. one fitted on calibration data).
pub fn fuse_with(dataset: &Dataset, beta: f64, norm: &MinMax) -> Result<Dataset> {
    check_beta(beta)?;
    let records = dataset
        .records()
        .iter()
        .map(|r| fuse_record(r, beta, norm))
        .collect();
    let meta = DatasetMeta {
        beta: Some(beta),
        reranker_norm: Some(*norm),
        ..dataset.meta.clone()
    };
    Ok(Dataset::from_parts_unchecked(records, meta))
}

fn fuse_record(record: &QueryRecord, beta: f64, norm: &MinMax) -> QueryRecord {
    // Fusion leaves calibrated scores alone, so pool order is unchanged.
    record.map_candidates(|c| {
        c.fused_score = Some(fuse_score(beta, c.calibrated_score, norm.apply(c.reranker_score)))
    })
}

/// Reciprocal rank at `k` of the full candidate list of `record`, reranked
/// under fusion weight `beta`, without materializing the ordering.
fn full_rr(record: &QueryRecord, norm_scores: &[f64], beta: f64, k: usize) -> f64 {
    let cands = record.candidates();
    let fused: Vec<f64> = cands
        .iter()
        .zip(norm_scores)
        .map(|(c, &n)| fuse_score(beta, c.calibrated_score, n))
        .collect();
    let better = |i: usize, j: usize| {
        fused[i] > fused[j] || (fused[i] == fused[j] && cands[i].doc_id < cands[j].doc_id)
    };
    let mut best: Option<usize> = None;
    for (i, &g) in record.gold_mask().iter().enumerate() {
        if g && best.is_none_or(|b| better(i, b)) {
            best = Some(i);
        }
    }
    let Some(best) = best else { return 0.0 };
    let rank = 1 + (0..cands.len()).filter(|&i| better(i, best)).count();
    if rank <= k {
        1.0 / rank as f64
    } else {
        0.0
    }
}

/// Grid search of the fusion weight maximizing full-list MRR@k on `calib`.
///
/// The grid is `{0, step, ..., 1}`; ties go to the smaller weight. Returns
/// `(beta, mrr_at_best)`.
pub fn search_beta(calib: &Dataset, grid_step: f64, k: usize) -> Result<(f64, f64)> {
    search_beta_with(calib, grid_step, k, &MinMax::fit(calib))
}

pub fn search_beta_with(
    calib: &Dataset,
    grid_step: f64,
    k: usize,
    norm: &MinMax,
) -> Result<(f64, f64)> {
    if calib.is_empty() {
        return Err(Error::Empty("calibration set"));
    }
    if !(grid_step > 0.0 && grid_step <= 1.0) {
        return Err(Error::invalid("beta grid step", grid_step, "must lie in (0, 1]"));
    }
    let steps = (1.0 / grid_step).round().max(1.0) as usize;
    let normalized: Vec<Vec<f64>> = calib
        .records()
        .iter()
        .map(|r| r.candidates().iter().map(|c| norm.apply(c.reranker_score)).collect())
        .collect();
    let mut best = (0.0, f64::NEG_INFINITY);
    for j in 0..=steps {
        let beta = j as f64 / steps as f64;
        let rr: Vec<f64> = calib
            .records()
            .par_iter()
            .zip(normalized.par_iter())
            .map(|(r, n)| full_rr(r, n, beta, k))
            .collect();
        let mrr = mean_in_order(&rr);
        if mrr > best.1 {
            best = (beta, mrr);
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fuse_score_arithmetic() {
        assert_eq!(fuse_score(1.0, 0.3, 0.9), 0.3);
        assert_eq!(fuse_score(0.0, 0.3, 0.9), 0.9);
        assert!((fuse_score(0.5, 0.4, 0.8) - 0.6).abs() < 1e-12);
        assert_eq!(fuse_score(1.0, 0.3, f64::NEG_INFINITY), 0.3);
        assert_eq!(fuse_score(0.5, 0.3, f64::NEG_INFINITY), f64::NEG_INFINITY);
    }

    #[test]
    fn min_max_maps_range() {
        let n = MinMax { min: 2.0, max: 6.0 };
        assert_eq!(n.apply(2.0), 0.0);
        assert_eq!(n.apply(6.0), 1.0);
        assert_eq!(n.apply(4.0), 0.5);
        assert_eq!(n.apply(f64::NEG_INFINITY), f64::NEG_INFINITY);
        assert_eq!(MinMax { min: 1.0, max: 1.0 }.apply(1.0), 0.0);
    }

    #[test]
    fn beta_out_of_range() {
        let ds = Dataset::new(vec![], DatasetMeta::default()).unwrap();
        assert!(fuse(&ds, 1.5).is_err());
        assert!(fuse(&ds, -0.1).is_err());
        assert!(search_beta(&ds, 0.01, 10).is_err());
    }
}
