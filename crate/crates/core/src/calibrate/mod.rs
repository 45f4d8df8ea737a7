//! Threshold calibration with certified error control.
//!
//! For each grid threshold the calibration losses give an empirical risk and
//! an upper confidence bound. The selected threshold is the largest one
//! whose bound, and the bound of every smaller threshold, sits strictly
//! below the requested risk level. When even the full candidate set cannot
//! meet the request, either the risk level is raised to the smallest bound
//! on the grid, or the significance is raised in steps of 0.01 until the
//! request becomes feasible.
//!
//! Per-query losses come from exact step functions merged into one sweep,
//! so thresholds are never re-pruned query by query.

mod sweep;

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bounds::{check_delta, Bound};
use crate::error::{Error, Result};
use crate::metrics::{mean_in_order, Metric};
use crate::model::{
    CalibrationResult, ConfidenceAlternative, Correction, Dataset, RiskCurve, Threshold,
};

use sweep::{GridBuilder, LossSweep};

pub const DEFAULT_GRID_STEP: f64 = 1e-4;
/// Increment of the significance during confidence correction.
pub const DELTA_STEP: f64 = 0.01;
/// Tolerance when locating grid points that attain the minimal bound.
pub const MIN_UCB_TOL: f64 = 1e-12;

/// Threshold grid used for calibration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GridSpec {
    /// `{1, 1 - step, ..., 0}`.
    Step(f64),
    /// Every point where some query's loss changes, plus 1 and 0.
    Exact,
    /// A caller-supplied strictly descending grid within `[0, 1]`.
    Explicit(Vec<f64>),
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec::Step(DEFAULT_GRID_STEP)
    }
}

/// Descending grid `{1, 1 - step, ..., 0}`.
pub fn step_grid(step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0 && step <= 1.0) {
        return Err(Error::invalid("grid step", step, "must lie in (0, 1]"));
    }
    let n = (1.0 / step).round().max(1.0) as usize;
    Ok((0..=n).rev().map(|j| j as f64 / n as f64).collect())
}

fn check_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::Empty("threshold grid"));
    }
    if grid.iter().any(|t| !(0.0..=1.0).contains(t)) {
        return Err(Error::Config("grid points must lie in [0, 1]".into()));
    }
    if grid.windows(2).any(|w| w[0] <= w[1]) {
        return Err(Error::Config("grid must be strictly descending".into()));
    }
    Ok(())
}

impl GridSpec {
    fn builder(&self) -> Result<GridBuilder> {
        match self {
            GridSpec::Step(s) => Ok(GridBuilder::Fixed(step_grid(*s)?)),
            GridSpec::Exact => Ok(GridBuilder::Breakpoints),
            GridSpec::Explicit(g) => {
                check_grid(g)?;
                Ok(GridBuilder::Fixed(g.clone()))
            }
        }
    }
}

/// What to do when the requested risk level cannot be certified.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorrectionMode {
    #[default]
    Risk,
    Confidence,
    /// Risk correction, with the confidence correction reported alongside.
    Both,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationConfig {
    pub grid: GridSpec,
    pub metric: Metric,
    pub bound: Bound,
    /// Seed for a one-off permutation of the loss order fed to the bound.
    pub wsr_shuffle: Option<u64>,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        CalibrationConfig {
            grid: GridSpec::default(),
            metric: Metric::default(),
            bound: Bound::default(),
            wsr_shuffle: None,
        }
    }
}

/// Outcome of the selection rule on one curve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Selection {
    Selected(Threshold),
    NotAchievable,
}

/// Index of the largest threshold such that it and every smaller grid
/// threshold have `ucb < alpha`.
fn suffix_index(ucb: &[f64], alpha: f64) -> Option<usize> {
    let mut chosen = None;
    for g in (0..ucb.len()).rev() {
        if ucb[g] < alpha {
            chosen = Some(g);
        } else {
            break;
        }
    }
    chosen
}

/// Index of the smallest threshold whose bound is within `MIN_UCB_TOL` of
/// the minimum.
fn min_index(ucb: &[f64]) -> usize {
    let min = ucb.iter().copied().fold(f64::INFINITY, f64::min);
    (0..ucb.len())
        .rev()
        .find(|&g| ucb[g] <= min + MIN_UCB_TOL)
        .unwrap_or(ucb.len() - 1)
}

/// Selection rule applied to a precomputed curve.
pub fn select_threshold(curve: &RiskCurve, alpha: f64) -> Selection {
    match suffix_index(&curve.ucb, alpha) {
        Some(g) => Selection::Selected(Threshold::new(curve.thresholds[g]).expect("grid in [0,1]")),
        None => Selection::NotAchievable,
    }
}

/// Risk correction: the smallest bound on the grid (never below `alpha`)
/// and the largest-set threshold attaining it.
pub fn correct_risk(curve: &RiskCurve, alpha: f64) -> (f64, Threshold) {
    let g = min_index(&curve.ucb);
    (
        curve.ucb[g].max(alpha),
        Threshold::new(curve.thresholds[g]).expect("grid in [0,1]"),
    )
}

/// Builds the risk curve of `calib` over `grid` at significance `delta`.
pub fn risk_curve(calib: &Dataset, grid: &[f64], delta: f64, config: &CalibrationConfig) -> Result<RiskCurve> {
    let config = CalibrationConfig {
        grid: GridSpec::Explicit(grid.to_vec()),
        ..config.clone()
    };
    Calibrator::new(calib, &config)?.curve(delta)
}

/// Confidence correction for a request that failed at `delta`.
pub fn correct_confidence(
    calib: &Dataset,
    grid: &[f64],
    alpha: f64,
    delta: f64,
    config: &CalibrationConfig,
) -> Result<(f64, Threshold)> {
    let config = CalibrationConfig {
        grid: GridSpec::Explicit(grid.to_vec()),
        ..config.clone()
    };
    Calibrator::new(calib, &config)?.correct_confidence(alpha, delta)
}

/// Full calibration: select a threshold, correcting per `mode` when the
/// request is not achievable.
pub fn calibrate(
    calib: &Dataset,
    alpha: f64,
    delta: f64,
    mode: CorrectionMode,
    config: &CalibrationConfig,
) -> Result<CalibrationResult> {
    Calibrator::new(calib, config)?.calibrate(alpha, delta, mode)
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid("alpha", alpha, "must be positive"))
    }
}

/// Calibration state for one dataset: the loss sweep plus memoized bounds,
/// reusable across risk levels and significances.
pub struct Calibrator {
    sweep: LossSweep,
    bound: Bound,
    order: Option<Vec<usize>>,
    ucb_memo: HashMap<(u32, u64), f64>,
    full_ucb: HashMap<u64, Vec<f64>>,
}

impl Calibrator {
    pub fn new(calib: &Dataset, config: &CalibrationConfig) -> Result<Self> {
        if calib.is_empty() {
            return Err(Error::Empty("calibration set"));
        }
        if matches!(config.metric, Metric::Mrr { .. }) {
            calib.require_fused()?;
        }
        if let Metric::Mrr { k: 0 } = config.metric {
            return Err(Error::invalid("k", 0.0, "must be at least 1"));
        }
        let sweep = LossSweep::build(calib, config.metric, config.grid.builder()?)?;
        let order = config.wsr_shuffle.map(|seed| {
            let mut idx: Vec<usize> = (0..calib.len()).collect();
            idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            idx
        });
        Ok(Calibrator {
            sweep,
            bound: config.bound,
            order,
            ucb_memo: HashMap::new(),
            full_ucb: HashMap::new(),
        })
    }

    pub fn grid(&self) -> &[f64] {
        self.sweep.grid()
    }

    /// Distinct thresholds at which some calibration loss changes, descending.
    pub fn breakpoints(&self) -> &[f64] {
        self.sweep.breakpoints()
    }

    fn threshold(&self, g: usize) -> Threshold {
        Threshold::new(self.sweep.grid()[g]).expect("grid in [0,1]")
    }

    fn bound_of(
        bound: Bound,
        order: &Option<Vec<usize>>,
        memo: &mut HashMap<(u32, u64), f64>,
        version: u32,
        losses: &[f64],
        delta: f64,
    ) -> Result<f64> {
        let key = (version, delta.to_bits());
        if let Some(&u) = memo.get(&key) {
            return Ok(u);
        }
        let u = match order {
            Some(idx) => {
                let permuted: Vec<f64> = idx.iter().map(|&i| losses[i]).collect();
                bound.ucb(&permuted, delta)?
            }
            None => bound.ucb(losses, delta)?,
        };
        memo.insert(key, u);
        Ok(u)
    }

    /// Bound at every grid point.
    fn ucb_all(&mut self, delta: f64) -> Result<&[f64]> {
        check_delta(delta)?;
        let key = delta.to_bits();
        if !self.full_ucb.contains_key(&key) {
            let mut out = Vec::with_capacity(self.sweep.len());
            let mut err = None;
            let (bound, order, memo, sweep) = (self.bound, &self.order, &mut self.ucb_memo, &self.sweep);
            sweep.walk_down(|g, losses| {
                if err.is_some() {
                    return;
                }
                match Self::bound_of(bound, order, memo, sweep.version(g), losses, delta) {
                    Ok(u) => out.push(u),
                    Err(e) => err = Some(e),
                }
            });
            if let Some(e) = err {
                return Err(e);
            }
            self.full_ucb.insert(key, out);
        }
        Ok(&self.full_ucb[&key])
    }

    /// The bound at the smallest threshold (the largest sets).
    fn ucb_bottom(&mut self, delta: f64) -> Result<f64> {
        let g = self.sweep.len() - 1;
        let v = self.sweep.version(g);
        Self::bound_of(self.bound, &self.order, &mut self.ucb_memo, v, self.sweep.bottom(), delta)
    }

    /// Suffix scan from the smallest threshold, evaluating bounds lazily.
    fn suffix_select(&mut self, alpha: f64, delta: f64) -> Result<Option<usize>> {
        check_delta(delta)?;
        if let Some(full) = self.full_ucb.get(&delta.to_bits()) {
            return Ok(suffix_index(full, alpha));
        }
        let mut chosen = None;
        let mut err = None;
        let (bound, order, memo, sweep) = (self.bound, &self.order, &mut self.ucb_memo, &self.sweep);
        sweep.walk_up(|g, losses| {
            match Self::bound_of(bound, order, memo, sweep.version(g), losses, delta) {
                Ok(u) if u < alpha => {
                    chosen = Some(g);
                    true
                }
                Ok(_) => false,
                Err(e) => {
                    err = Some(e);
                    false
                }
            }
        });
        match err {
            Some(e) => Err(e),
            None => Ok(chosen),
        }
    }

    /// Empirical risk at every grid point.
    pub fn empirical_risk(&self) -> Vec<f64> {
        let mut empirical_risk = Vec::with_capacity(self.sweep.len());
        let mut last: Option<(u32, f64)> = None;
        let sweep = &self.sweep;
        sweep.walk_down(|g, losses| {
            let v = sweep.version(g);
            let r = match last {
                Some((lv, r)) if lv == v => r,
                _ => mean_in_order(losses),
            };
            last = Some((v, r));
            empirical_risk.push(r);
        });
        empirical_risk
    }

    /// Full risk curve at significance `delta`.
    pub fn curve(&mut self, delta: f64) -> Result<RiskCurve> {
        let ucb = self.ucb_all(delta)?.to_vec();
        Ok(RiskCurve {
            empirical_risk: self.empirical_risk(),
            thresholds: self.sweep.grid().to_vec(),
            ucb,
            mean_size: self.sweep.mean_size().to_vec(),
            delta,
            diagnostics: self.sweep.diagnostics().clone(),
        })
    }

    pub fn select(&mut self, alpha: f64, delta: f64) -> Result<Selection> {
        Ok(match self.suffix_select(alpha, delta)? {
            Some(g) => Selection::Selected(self.threshold(g)),
            None => Selection::NotAchievable,
        })
    }

    /// `(alpha_c, threshold)` per the risk correction.
    pub fn correct_risk(&mut self, alpha: f64, delta: f64) -> Result<(f64, Threshold)> {
        let ucb = self.ucb_all(delta)?;
        let g = min_index(ucb);
        let a = ucb[g].max(alpha);
        Ok((a, self.threshold(g)))
    }

    /// Raises `delta` in steps of [`DELTA_STEP`] until the selection rule
    /// succeeds at `alpha`. Falls back to `delta = 1` with the minimal-bound
    /// threshold at the requested `delta`.
    pub fn correct_confidence(&mut self, alpha: f64, delta: f64) -> Result<(f64, Threshold)> {
        check_delta(delta)?;
        for j in 1.. {
            let d = ((delta + j as f64 * DELTA_STEP) * 1e10).round() / 1e10;
            if d >= 1.0 - 1e-9 {
                break;
            }
            if self.ucb_bottom(d)? < alpha {
                let g = self
                    .suffix_select(alpha, d)?
                    .expect("bottom point satisfies the suffix condition");
                return Ok((d, self.threshold(g)));
            }
        }
        let (_, t) = self.correct_risk(alpha, delta)?;
        Ok((1.0, t))
    }

    pub fn calibrate(&mut self, alpha: f64, delta: f64, mode: CorrectionMode) -> Result<CalibrationResult> {
        check_alpha(alpha)?;
        check_delta(delta)?;
        let base = CalibrationResult {
            threshold_hat: Threshold::new(0.0)?,
            alpha_requested: alpha,
            alpha_effective: alpha,
            delta_requested: delta,
            delta_effective: delta,
            correction: Correction::None,
            achievable: true,
            alternative: None,
            preparation: None,
        };
        if let Some(g) = self.suffix_select(alpha, delta)? {
            return Ok(CalibrationResult {
                threshold_hat: self.threshold(g),
                ..base
            });
        }
        let unachievable = CalibrationResult {
            achievable: false,
            ..base
        };
        match mode {
            CorrectionMode::Risk => {
                let (a, t) = self.correct_risk(alpha, delta)?;
                Ok(CalibrationResult {
                    threshold_hat: t,
                    alpha_effective: a,
                    correction: Correction::Risk,
                    ..unachievable
                })
            }
            CorrectionMode::Confidence => {
                let (d, t) = self.correct_confidence(alpha, delta)?;
                Ok(CalibrationResult {
                    threshold_hat: t,
                    delta_effective: d,
                    correction: Correction::Confidence,
                    ..unachievable
                })
            }
            CorrectionMode::Both => {
                let (a, t) = self.correct_risk(alpha, delta)?;
                let (d, td) = self.correct_confidence(alpha, delta)?;
                Ok(CalibrationResult {
                    threshold_hat: t,
                    alpha_effective: a,
                    correction: Correction::Risk,
                    alternative: Some(ConfidenceAlternative {
                        delta_effective: d,
                        threshold_hat: td,
                    }),
                    ..unachievable
                })
            }
        }
    }
}
