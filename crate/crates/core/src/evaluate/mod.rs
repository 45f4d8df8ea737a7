//! Applying calibrations to held-out data, repeated calibration/test trials,
//! empirical baselines, and the sweeps built on top of them.

use std::collections::HashSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibrate::{CalibrationConfig, Calibrator, CorrectionMode, GridSpec};
use crate::error::{Error, Result};
use crate::ingest::{BetaChoice, Preparation};
use crate::metrics::{loss_by_prefix, mean_in_order, reciprocal_rank_at_k, Metric, DEFAULT_K};
use crate::model::{prune, rerank, CalibrationResult, Dataset, QueryRecord, Threshold, TrialReport};

/// Slack when comparing an achieved MRR against a required one, absorbing
/// the rounding of `1 - mean(1 - rr)` versus `mean(rr)`.
pub const MRR_TOL: f64 = 1e-12;

/// Test-side statistics of one pruning rule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TestStats {
    pub mrr_at_10: f64,
    /// Mean loss under the requested metric.
    pub risk: f64,
    pub mean_size: f64,
}

fn record_stats(record: &QueryRecord, kept: usize, metric: Metric) -> Result<(f64, f64)> {
    let kept = &record.candidates()[..kept];
    let ranked = rerank(record.query_id(), kept)?;
    let rr = reciprocal_rank_at_k(ranked.iter().map(|c| &c.doc_id), record.gold_ids(), DEFAULT_K);
    let loss = match metric {
        Metric::Mrr { k } if k == DEFAULT_K => 1.0 - rr,
        Metric::Mrr { k } => {
            1.0 - reciprocal_rank_at_k(ranked.iter().map(|c| &c.doc_id), record.gold_ids(), k)
        }
        Metric::Recall => {
            if kept.iter().any(|c| record.gold_ids().contains(&c.doc_id)) {
                0.0
            } else {
                1.0
            }
        }
    };
    Ok((rr, loss))
}

fn test_stats(test: &Dataset, metric: Metric, kept: impl Fn(&QueryRecord) -> usize + Sync) -> Result<TestStats> {
    test.require_fused()?;
    if test.is_empty() {
        return Err(Error::Empty("test set"));
    }
    let rows = test
        .records()
        .par_iter()
        .map(|r| {
            let n = kept(r);
            record_stats(r, n, metric).map(|(rr, loss)| (rr, loss, n as f64))
        })
        .collect::<Result<Vec<_>>>()?;
    let pick = |f: fn(&(f64, f64, f64)) -> f64| mean_in_order(&rows.iter().map(f).collect::<Vec<_>>());
    Ok(TestStats {
        mrr_at_10: pick(|r| r.0),
        risk: pick(|r| r.1),
        mean_size: pick(|r| r.2),
    })
}

/// Prunes every query of a fused dataset at `tau` and reranks.
pub fn threshold_stats(test: &Dataset, tau: Threshold, metric: Metric) -> Result<TestStats> {
    test_stats(test, metric, |r| prune(r, tau).len())
}

/// Keeps the top `cutoff` candidates of every query and reranks.
pub fn rank_cutoff_stats(test: &Dataset, cutoff: usize, metric: Metric) -> Result<TestStats> {
    test_stats(test, metric, |r| cutoff.min(r.len()))
}

fn report(seed: u64, stats: TestStats, calibration: CalibrationResult) -> TrialReport {
    TrialReport {
        seed,
        mrr_at_10: stats.mrr_at_10,
        test_risk: stats.risk,
        mean_pruned_size: stats.mean_size,
        constraint_satisfied: stats.risk <= calibration.alpha_effective,
        calibration,
    }
}

/// Applies a calibration to test data under the MRR@10 loss.
///
/// When the result carries fitted score transforms they are applied to
/// `test` first; otherwise `test` must already be fused.
pub fn evaluate_test(test: &Dataset, result: &CalibrationResult) -> Result<TrialReport> {
    evaluate_test_with(test, result, Metric::default())
}

pub fn evaluate_test_with(test: &Dataset, result: &CalibrationResult, metric: Metric) -> Result<TrialReport> {
    let stats = match &result.preparation {
        Some(p) => threshold_stats(&p.apply(test)?, result.threshold_hat, metric)?,
        None => threshold_stats(test, result.threshold_hat, metric)?,
    };
    Ok(report(0, stats, result.clone()))
}

/// Largest threshold at which calibration MRR@k reaches `required_mrr`,
/// searched over the exact loss breakpoints. `None` when even the full
/// candidate lists fall short.
pub fn est_calibrate(calib: &Dataset, required_mrr: f64, k: usize) -> Result<Option<Threshold>> {
    let config = CalibrationConfig {
        grid: GridSpec::Exact,
        metric: Metric::Mrr { k },
        ..CalibrationConfig::default()
    };
    let cal = Calibrator::new(calib, &config)?;
    let risk = cal.empirical_risk();
    Ok(risk
        .iter()
        .position(|&r| 1.0 - r + MRR_TOL >= required_mrr)
        .map(|g| Threshold::new(cal.grid()[g]).expect("grid in [0,1]")))
}

/// Smallest rank cutoff at which calibration MRR@k reaches `required_mrr`.
pub fn ert_calibrate(calib: &Dataset, required_mrr: f64, k: usize) -> Result<Option<usize>> {
    if calib.is_empty() {
        return Err(Error::Empty("calibration set"));
    }
    let metric = Metric::Mrr { k };
    let prefix: Vec<Vec<f64>> = calib
        .records()
        .par_iter()
        .map(|r| loss_by_prefix(r, metric))
        .collect::<Result<_>>()?;
    let longest = calib.records().iter().map(|r| r.len()).max().unwrap_or(0);
    let mut losses = vec![0.0; prefix.len()];
    for cutoff in 1..=longest.max(1) {
        for (l, p) in losses.iter_mut().zip(&prefix) {
            *l = p[cutoff.min(p.len() - 1)];
        }
        if 1.0 - mean_in_order(&losses) + MRR_TOL >= required_mrr {
            return Ok(Some(cutoff));
        }
    }
    Ok(None)
}

/// Which empirical baseline to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaselineMethod {
    /// Score threshold tuned on calibration data.
    Est,
    /// Rank threshold tuned on calibration data.
    Ert,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Cutoff {
    Score(f64),
    Rank(usize),
}

/// Outcome of one baseline trial. Unachievable targets fall back to the
/// full candidate lists.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineReport {
    pub seed: u64,
    pub method: BaselineMethod,
    pub required_mrr: f64,
    pub cutoff: Cutoff,
    pub achievable: bool,
    pub mrr_at_10: f64,
    pub mean_pruned_size: f64,
    pub constraint_satisfied: bool,
}

/// Splitting and calibration settings shared by every trial.
#[derive(Debug, Clone)]
pub struct TrialConfig {
    pub n_trials: usize,
    pub calib_size: usize,
    pub test_size: usize,
    pub delta: f64,
    pub mode: CorrectionMode,
    pub master_seed: u64,
    pub calibration: CalibrationConfig,
    pub beta: BetaChoice,
    /// Worker threads; `None` uses the global pool. Results do not depend
    /// on this.
    pub workers: Option<usize>,
}

impl Default for TrialConfig {
    fn default() -> Self {
        TrialConfig {
            n_trials: 100,
            calib_size: 5000,
            test_size: 6980,
            delta: 0.1,
            mode: CorrectionMode::Risk,
            master_seed: 0,
            calibration: CalibrationConfig::default(),
            beta: BetaChoice::default(),
            workers: None,
        }
    }
}

impl TrialConfig {
    fn k(&self) -> usize {
        match self.calibration.metric {
            Metric::Mrr { k } => k,
            Metric::Recall => DEFAULT_K,
        }
    }
}

/// Seed of trial `index`: the SplitMix64 output at counter
/// `master + index + 1`, so trials can be generated in any order.
pub fn trial_seed(master: u64, index: usize) -> u64 {
    let mut z = master
        .wrapping_add((index as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Disjoint calibration and test index sets drawn without replacement.
pub fn split_indices(pool_len: usize, calib_size: usize, test_size: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut drawn = rand::seq::index::sample(&mut rng, pool_len, calib_size + test_size).into_vec();
    let test = drawn.split_off(calib_size);
    (drawn, test)
}

/// One calibration/test split with transforms fitted on its calibration
/// half and applied to both halves.
pub struct PreparedSplit {
    pub index: usize,
    pub seed: u64,
    pub preparation: Preparation,
    pub calib: Dataset,
    pub test: Dataset,
    metric: Metric,
    k: usize,
    delta: f64,
    mode: CorrectionMode,
    calibrator: Calibrator,
}

impl PreparedSplit {
    pub fn new(pool: &Dataset, config: &TrialConfig, index: usize) -> Result<Self> {
        let seed = trial_seed(config.master_seed, index);
        let (ci, ti) = split_indices(pool.len(), config.calib_size, config.test_size, seed);
        let calib = pool.subset(&ci);
        let test = pool.subset(&ti);
        let calib_ids: HashSet<&str> = calib.records().iter().map(|r| r.query_id()).collect();
        assert!(
            test.records().iter().all(|r| !calib_ids.contains(r.query_id())),
            "calibration and test splits share a query"
        );
        let preparation = Preparation::fit(&calib, config.beta, config.k())?;
        let calib = preparation.apply(&calib)?;
        let test = preparation.apply(&test)?;
        let calibrator = Calibrator::new(&calib, &config.calibration)?;
        Ok(PreparedSplit {
            index,
            seed,
            preparation,
            calib,
            test,
            metric: config.calibration.metric,
            k: config.k(),
            delta: config.delta,
            mode: config.mode,
            calibrator,
        })
    }

    pub fn calibrator(&mut self) -> &mut Calibrator {
        &mut self.calibrator
    }

    /// Calibrates at `alpha` with the configured significance and mode.
    pub fn calibrate(&mut self, alpha: f64) -> Result<CalibrationResult> {
        self.calibrate_with(alpha, self.delta, self.mode)
    }

    pub fn calibrate_with(&mut self, alpha: f64, delta: f64, mode: CorrectionMode) -> Result<CalibrationResult> {
        let mut result = self.calibrator.calibrate(alpha, delta, mode)?;
        result.preparation = Some(self.preparation);
        Ok(result)
    }

    pub fn evaluate(&self, result: CalibrationResult) -> Result<TrialReport> {
        let stats = threshold_stats(&self.test, result.threshold_hat, self.metric)?;
        Ok(report(self.seed, stats, result))
    }

    /// Calibrates at `alpha` and evaluates on the test half.
    pub fn run(&mut self, alpha: f64) -> Result<TrialReport> {
        let result = self.calibrate(alpha)?;
        self.evaluate(result)
    }

    pub fn run_with(&mut self, alpha: f64, delta: f64, mode: CorrectionMode) -> Result<TrialReport> {
        let result = self.calibrate_with(alpha, delta, mode)?;
        self.evaluate(result)
    }

    pub fn baseline(&self, method: BaselineMethod, required_mrr: f64) -> Result<BaselineReport> {
        let metric = Metric::Mrr { k: self.k };
        let (cutoff, achievable, stats) = match method {
            BaselineMethod::Est => {
                let found = est_calibrate(&self.calib, required_mrr, self.k)?;
                let tau = found.unwrap_or(Threshold::new(0.0)?);
                (Cutoff::Score(tau.value()), found.is_some(), threshold_stats(&self.test, tau, metric)?)
            }
            BaselineMethod::Ert => {
                let found = ert_calibrate(&self.calib, required_mrr, self.k)?;
                let r = found.unwrap_or(usize::MAX);
                let longest = self.test.records().iter().map(|q| q.len()).max().unwrap_or(0);
                (
                    Cutoff::Rank(r.min(longest)),
                    found.is_some(),
                    rank_cutoff_stats(&self.test, r, metric)?,
                )
            }
        };
        Ok(BaselineReport {
            seed: self.seed,
            method,
            required_mrr,
            cutoff,
            achievable,
            mrr_at_10: stats.mrr_at_10,
            mean_pruned_size: stats.mean_size,
            constraint_satisfied: 1.0 - stats.risk + MRR_TOL >= required_mrr,
        })
    }
}

fn check_sizes(pool: &Dataset, config: &TrialConfig) -> Result<()> {
    if config.n_trials == 0 {
        return Err(Error::Config("at least one trial is required".into()));
    }
    if config.calib_size == 0 || config.test_size == 0 {
        return Err(Error::Config("calibration and test sizes must be positive".into()));
    }
    if config.calib_size + config.test_size > pool.len() {
        return Err(Error::Config(format!(
            "calibration size {} plus test size {} exceeds pool of {} queries",
            config.calib_size,
            config.test_size,
            pool.len()
        )));
    }
    Ok(())
}

/// Prepares every split and hands it to `f`, collecting results by trial
/// index.
pub fn run_trials_with<R, F>(pool: &Dataset, config: &TrialConfig, f: F) -> Result<Vec<R>>
where
    R: Send,
    F: Fn(&mut PreparedSplit) -> Result<R> + Sync,
{
    check_sizes(pool, config)?;
    let work = || {
        (0..config.n_trials)
            .into_par_iter()
            .map(|i| {
                let mut split = PreparedSplit::new(pool, config, i)?;
                f(&mut split)
            })
            .collect::<Result<Vec<R>>>()
    };
    match config.workers {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .map_err(|e| Error::Config(e.to_string()))?
            .install(work),
        None => work(),
    }
}

/// Aggregate of a batch of trials at one requested risk level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialSummary {
    pub trials: usize,
    pub alpha: f64,
    pub delta: f64,
    pub mean_mrr: f64,
    /// Mean of `1 - delta_effective`.
    pub mean_confidence: f64,
    pub coverage: f64,
    pub mean_size: f64,
    pub mean_alpha_effective: f64,
    pub pool_size: usize,
    /// `pool_size / mean_size`, the reduction in reranking cost.
    pub speedup: f64,
}

fn speedup(pool_size: usize, mean_size: f64) -> f64 {
    if mean_size > 0.0 {
        pool_size as f64 / mean_size
    } else {
        f64::INFINITY
    }
}

fn mean_of<T>(items: &[T], f: impl Fn(&T) -> f64) -> f64 {
    mean_in_order(&items.iter().map(f).collect::<Vec<_>>())
}

fn fraction<T>(items: &[T], f: impl Fn(&T) -> bool) -> f64 {
    mean_of(items, |x| if f(x) { 1.0 } else { 0.0 })
}

pub fn summarize(reports: &[TrialReport], pool_size: usize) -> TrialSummary {
    let mean_size = mean_of(reports, |r| r.mean_pruned_size);
    let first = reports.first().map(|r| &r.calibration);
    TrialSummary {
        trials: reports.len(),
        alpha: first.map_or(f64::NAN, |c| c.alpha_requested),
        delta: first.map_or(f64::NAN, |c| c.delta_requested),
        mean_mrr: mean_of(reports, |r| r.mrr_at_10),
        mean_confidence: mean_of(reports, |r| r.calibration.confidence()),
        coverage: fraction(reports, |r| r.constraint_satisfied),
        mean_size,
        mean_alpha_effective: mean_of(reports, |r| r.calibration.alpha_effective),
        pool_size,
        speedup: speedup(pool_size, mean_size),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineSummary {
    pub method: BaselineMethod,
    pub required_mrr: f64,
    pub trials: usize,
    pub coverage: f64,
    pub mean_mrr: f64,
    pub mean_size: f64,
    pub achievable_rate: f64,
    pub pool_size: usize,
    pub speedup: f64,
}

pub fn summarize_baseline(reports: &[BaselineReport], pool_size: usize) -> BaselineSummary {
    let mean_size = mean_of(reports, |r| r.mean_pruned_size);
    BaselineSummary {
        method: reports.first().map_or(BaselineMethod::Est, |r| r.method),
        required_mrr: reports.first().map_or(f64::NAN, |r| r.required_mrr),
        trials: reports.len(),
        coverage: fraction(reports, |r| r.constraint_satisfied),
        mean_mrr: mean_of(reports, |r| r.mrr_at_10),
        mean_size,
        achievable_rate: fraction(reports, |r| r.achievable),
        pool_size,
        speedup: speedup(pool_size, mean_size),
    }
}

/// Largest candidate list in the pool.
pub fn pool_size_of(pool: &Dataset) -> usize {
    pool.records().iter().map(|r| r.len()).max().unwrap_or(0)
}

/// Trials at one risk level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialsOutcome {
    pub summary: TrialSummary,
    pub reports: Vec<TrialReport>,
}

pub fn run_trials(pool: &Dataset, alpha: f64, config: &TrialConfig) -> Result<TrialsOutcome> {
    let reports = run_trials_with(pool, config, |s| s.run(alpha))?;
    Ok(TrialsOutcome {
        summary: summarize(&reports, pool_size_of(pool)),
        reports,
    })
}

pub fn run_baseline(
    pool: &Dataset,
    method: BaselineMethod,
    required_mrr: f64,
    config: &TrialConfig,
) -> Result<(BaselineSummary, Vec<BaselineReport>)> {
    let reports = run_trials_with(pool, config, |s| s.baseline(method, required_mrr))?;
    Ok((summarize_baseline(&reports, pool_size_of(pool)), reports))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TradeoffRow {
    pub alpha: f64,
    pub mean_mrr: f64,
    pub mean_size: f64,
    pub coverage: f64,
    pub mean_confidence: f64,
}

/// Rows of per-alpha summaries from per-split report lists, sorted by alpha.
pub fn tradeoff_rows(per_split: &[Vec<TrialReport>], alphas: &[f64], pool_size: usize) -> Vec<TradeoffRow> {
    let mut rows: Vec<TradeoffRow> = alphas
        .iter()
        .enumerate()
        .map(|(j, &alpha)| {
            let reports: Vec<TrialReport> = per_split.iter().map(|s| s[j].clone()).collect();
            let s = summarize(&reports, pool_size);
            TradeoffRow {
                alpha,
                mean_mrr: s.mean_mrr,
                mean_size: s.mean_size,
                coverage: s.coverage,
                mean_confidence: s.mean_confidence,
            }
        })
        .collect();
    rows.sort_by(|a, b| a.alpha.total_cmp(&b.alpha));
    rows
}

/// Trials at each risk level, sharing splits across levels.
pub fn tradeoff(pool: &Dataset, alphas: &[f64], config: &TrialConfig) -> Result<Vec<TradeoffRow>> {
    let per_split = run_trials_with(pool, config, |s| {
        alphas.iter().map(|&a| s.run(a)).collect::<Result<Vec<_>>>()
    })?;
    Ok(tradeoff_rows(&per_split, alphas, pool_size_of(pool)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub alpha: f64,
    /// Mean of `1 - delta_effective` across trials.
    pub corrected_confidence: f64,
    pub empirical_coverage: f64,
}

pub fn sweep_rows(per_split: &[Vec<TrialReport>], alphas: &[f64]) -> Vec<SweepRow> {
    alphas
        .iter()
        .enumerate()
        .map(|(j, &alpha)| {
            let reports: Vec<&TrialReport> = per_split.iter().map(|s| &s[j]).collect();
            SweepRow {
                alpha,
                corrected_confidence: mean_of(&reports, |r| r.calibration.confidence()),
                empirical_coverage: fraction(&reports, |r| r.constraint_satisfied),
            }
        })
        .collect()
}

/// Confidence-corrected trials along `alphas`, in the order given.
pub fn confidence_sweep(pool: &Dataset, alphas: &[f64], config: &TrialConfig) -> Result<Vec<SweepRow>> {
    let per_split = run_trials_with(pool, config, |s| {
        alphas
            .iter()
            .map(|&a| s.run_with(a, config.delta, CorrectionMode::Confidence))
            .collect::<Result<Vec<_>>>()
    })?;
    Ok(sweep_rows(&per_split, alphas))
}
