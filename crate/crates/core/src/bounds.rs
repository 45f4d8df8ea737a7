//! Pointwise upper confidence bounds on the mean of losses in `[0, 1]`.
//!
//! The main bound is the one-sided Waudby-Smith–Ramdas betting bound. For
//! losses `L_1..L_m` and a candidate mean `R`, the capital process is
//!
//! ```text
//! K_i(R) = prod_{j <= i} (1 - nu_j (L_j - R))
//! ```
//!
//! and the bound is the smallest `R` at which `max_i K_i(R)` exceeds `1/delta`.
//! Every factor is increasing in `R`, so the crossing point is found by
//! bisection on `[0, 1]`.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::mean_in_order;

/// Absolute precision of the bisection.
pub const BISECTION_TOL: f64 = 1e-6;

// The capital is tracked as `k * exp(log_scale)`; `k` is rescaled whenever it
// leaves this band.
const RESCALE_LOW: f64 = 1e-150;
const RESCALE_HIGH: f64 = 1e150;

/// How betting fractions are formed.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WsrVariant {
    /// `nu_i` uses the variance estimate through step `i - 1`, and the
    /// variance accumulates deviations from the running means `mu_j`.
    #[default]
    Predictable,
    /// `nu_i` uses the variance through step `i`, with deviations taken from
    /// the current mean `mu_i`. Not predictable; kept for comparison.
    Printed,
}

pub(crate) fn check_delta(delta: f64) -> Result<()> {
    if delta > 0.0 && delta <= 1.0 {
        Ok(())
    } else {
        Err(Error::invalid("delta", delta, "must lie in (0, 1]"))
    }
}

pub(crate) fn check_losses(losses: &[f64]) -> Result<()> {
    if losses.is_empty() {
        return Err(Error::Empty("loss vector"));
    }
    match losses.iter().position(|l| !(0.0..=1.0).contains(l)) {
        Some(index) => Err(Error::LossOutOfRange {
            index,
            value: losses[index],
        }),
        None => Ok(()),
    }
}

/// Running statistics and betting fractions of the WSR bound for one loss
/// sequence and one `delta`.
#[derive(Debug, Clone)]
pub struct WsrState {
    /// Smoothed running means `mu_i`, `i = 1..m`.
    pub mu: Vec<f64>,
    /// Smoothed running variances `sigma_i^2`.
    pub sigma2: Vec<f64>,
    /// Betting fractions `nu_i` in `(0, 1]`.
    pub nu: Vec<f64>,
    /// `1 - nu_j L_j`, so each capital factor is `offset_j + nu_j R`.
    offset: Vec<f64>,
    log_threshold: f64,
    mean: f64,
    delta: f64,
}

impl WsrState {
    pub fn new(losses: &[f64], delta: f64, variant: WsrVariant) -> Result<Self> {
        check_losses(losses)?;
        check_delta(delta)?;
        let m = losses.len();
        let log_threshold = (1.0 / delta).ln();
        let mut mu = Vec::with_capacity(m);
        let mut sigma2 = Vec::with_capacity(m);
        let (mut sum, mut sum_sq, mut dev_sq) = (0.0, 0.0, 0.0);
        for (i, &l) in losses.iter().enumerate() {
            let count = (i + 1) as f64;
            sum += l;
            sum_sq += l * l;
            let mu_i = (0.5 + sum) / (1.0 + count);
            let spread = match variant {
                WsrVariant::Predictable => {
                    dev_sq += (l - mu_i).powi(2);
                    dev_sq
                }
                WsrVariant::Printed => {
                    (sum_sq - 2.0 * mu_i * sum + count * mu_i * mu_i).max(0.0)
                }
            };
            mu.push(mu_i);
            sigma2.push((0.25 + spread) / (1.0 + count));
        }
        let bet = |s2: f64| (2.0 * log_threshold / (m as f64 * s2)).sqrt().min(1.0);
        let nu: Vec<f64> = match variant {
            WsrVariant::Predictable => std::iter::once(0.25)
                .chain(sigma2[..m - 1].iter().copied())
                .map(bet)
                .collect(),
            WsrVariant::Printed => sigma2.iter().copied().map(bet).collect(),
        };
        let offset = nu.iter().zip(losses).map(|(n, l)| 1.0 - n * l).collect();
        Ok(WsrState {
            mu,
            sigma2,
            nu,
            offset,
            log_threshold,
            mean: mean_in_order(losses),
            delta,
        })
    }

    /// `log K_i(R)` for `i = 1..m`.
    pub fn log_capital(&self, r: f64) -> Vec<f64> {
        let mut acc = 0.0;
        self.offset
            .iter()
            .zip(&self.nu)
            .map(|(o, n)| {
                acc += (o + n * r).ln();
                acc
            })
            .collect()
    }

    /// Whether `max_i K_i(R) > 1/delta`.
    pub fn rejects(&self, r: f64) -> bool {
        let mut k = 1.0f64;
        let mut log_scale = 0.0f64;
        let mut threshold = self.log_threshold.exp();
        for (o, n) in self.offset.iter().zip(&self.nu) {
            k *= o + n * r;
            if k > threshold {
                return true;
            }
            if !(RESCALE_LOW..=RESCALE_HIGH).contains(&k) {
                if k == 0.0 {
                    return false;
                }
                log_scale += k.ln();
                k = 1.0;
                threshold = (self.log_threshold - log_scale).exp();
            }
        }
        false
    }

    /// Bisection value before clamping or flooring; `None` when no
    /// `R <= 1` is rejected.
    pub fn raw_crossing(&self) -> Option<f64> {
        if self.rejects(0.0) {
            return Some(0.0);
        }
        if !self.rejects(1.0) {
            return None;
        }
        let (mut lo, mut hi) = (0.0, 1.0);
        while hi - lo > BISECTION_TOL {
            let mid = 0.5 * (lo + hi);
            if self.rejects(mid) {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        Some(hi)
    }

    /// The upper confidence bound, in `[sample mean, 1]`.
    ///
    /// `delta = 1` asks for no confidence at all and yields 0.
    pub fn ucb(&self) -> f64 {
        if self.delta == 1.0 {
            return 0.0;
        }
        self.raw_crossing().unwrap_or(1.0).max(self.mean)
    }
}

/// WSR upper confidence bound with predictable betting fractions.
pub fn wsr_ucb(losses: &[f64], delta: f64) -> Result<f64> {
    wsr_ucb_with(losses, delta, WsrVariant::Predictable)
}

pub fn wsr_ucb_with(losses: &[f64], delta: f64, variant: WsrVariant) -> Result<f64> {
    Ok(WsrState::new(losses, delta, variant)?.ucb())
}

/// `mean + sqrt(log(1/delta) / (2m))`, clamped to 1.
pub fn hoeffding_ucb(losses: &[f64], delta: f64) -> Result<f64> {
    check_losses(losses)?;
    check_delta(delta)?;
    let m = losses.len() as f64;
    Ok((mean_in_order(losses) + ((1.0 / delta).ln() / (2.0 * m)).sqrt()).min(1.0))
}

/// Choice of concentration bound for calibration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Bound {
    Wsr(WsrVariant),
    Hoeffding,
}

impl Default for Bound {
    fn default() -> Self {
        Bound::Wsr(WsrVariant::Predictable)
    }
}

impl Bound {
    pub fn ucb(&self, losses: &[f64], delta: f64) -> Result<f64> {
        match *self {
            Bound::Wsr(v) => wsr_ucb_with(losses, delta, v),
            Bound::Hoeffding => hoeffding_ucb(losses, delta),
        }
    }
}

/// Range of WSR bounds over `shuffles` seeded permutations of `losses`.
///
/// WSR depends on sample order; this reports how much.
pub fn wsr_order_sensitivity(
    losses: &[f64],
    delta: f64,
    variant: WsrVariant,
    shuffles: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut buf = losses.to_vec();
    let base = wsr_ucb_with(&buf, delta, variant)?;
    let (mut lo, mut hi) = (base, base);
    for _ in 0..shuffles {
        buf.shuffle(&mut rng);
        let u = wsr_ucb_with(&buf, delta, variant)?;
        lo = lo.min(u);
        hi = hi.max(u);
    }
    Ok((lo, hi))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Smallest grid point `R` (step 1e-4) where the capital process,
    /// evaluated directly in log space, exceeds `1/delta`.
    fn grid_oracle(losses: &[f64], delta: f64) -> Option<f64> {
        let st = WsrState::new(losses, delta, WsrVariant::Predictable).unwrap();
        let target = (1.0 / delta).ln();
        (0..=10_000).map(|i| i as f64 * 1e-4).find(|&r| {
            st.log_capital(r)
                .into_iter()
                .fold(f64::NEG_INFINITY, f64::max)
                > target
        })
    }

    #[test]
    fn all_zero_losses_give_tiny_bound() {
        let losses = vec![0.0; 1000];
        let oracle = grid_oracle(&losses, 0.1).unwrap();
        let u = wsr_ucb(&losses, 0.1).unwrap();
        assert!(u <= 0.01, "{u}");
        assert!(u <= oracle + BISECTION_TOL && u >= oracle - 1e-4 - BISECTION_TOL, "{u} vs {oracle}");
    }

    #[test]
    fn smaller_delta_gives_larger_bound() {
        let losses = vec![0.0; 1000];
        assert!(wsr_ucb(&losses, 0.05).unwrap() >= wsr_ucb(&losses, 0.1).unwrap());
    }

    #[test]
    fn vacuous_bound_clamps_to_one() {
        let losses = vec![0.5; 3];
        assert_eq!(grid_oracle(&losses, 0.1), None);
        assert_eq!(wsr_ucb(&losses, 0.1).unwrap(), 1.0);
    }

    #[test]
    fn matches_grid_oracle_on_mixed_losses() {
        let losses: Vec<f64> = (0..400).map(|i| ((i * 37) % 11) as f64 / 10.0).collect();
        let oracle = grid_oracle(&losses, 0.1).unwrap();
        let st = WsrState::new(&losses, 0.1, WsrVariant::Predictable).unwrap();
        let raw = st.raw_crossing().unwrap();
        assert!(raw <= oracle + BISECTION_TOL && raw >= oracle - 1e-4 - BISECTION_TOL);
    }

    #[test]
    fn betting_fractions_are_predictable() {
        let losses = [1.0, 0.0, 1.0, 0.0];
        let st = WsrState::new(&losses, 0.1, WsrVariant::Predictable).unwrap();
        let first = (2.0 * 10f64.ln() / (4.0 * 0.25)).sqrt().min(1.0);
        assert_eq!(st.nu[0], first);
        assert!(st.nu.iter().all(|&n| n > 0.0 && n <= 1.0));
        assert!(st.mu.iter().all(|&m| (0.0..=1.0).contains(&m)));
        assert!(st.log_capital(0.3).iter().all(|k| k.is_finite()));
    }

    #[test]
    fn printed_variant_differs_but_is_sane() {
        let losses: Vec<f64> = (0..200).map(|i| (i % 3) as f64 / 2.0).collect();
        let a = wsr_ucb_with(&losses, 0.1, WsrVariant::Predictable).unwrap();
        let b = wsr_ucb_with(&losses, 0.1, WsrVariant::Printed).unwrap();
        let mean = mean_in_order(&losses);
        assert!(a >= mean && b >= mean && a <= 1.0 && b <= 1.0);
    }

    #[test]
    fn hoeffding_closed_form() {
        let losses: Vec<f64> = (0..5000).map(|i| if i % 10 < 3 { 1.0 } else { 0.0 }).collect();
        let u = hoeffding_ucb(&losses, 0.1).unwrap();
        let expect = 0.3 + (10f64.ln() / 10_000.0).sqrt();
        assert!((u - expect).abs() < 1e-12);
        let big = vec![0.3; 10_000_000];
        assert!(hoeffding_ucb(&big, 0.1).unwrap() - 0.3 < 1e-3);
    }

    #[test]
    fn invalid_inputs() {
        assert!(wsr_ucb(&[0.1, 1.2], 0.1).is_err());
        assert!(wsr_ucb(&[0.1], 0.0).is_err());
        assert!(wsr_ucb(&[], 0.1).is_err());
        assert!(hoeffding_ucb(&[0.1], 1.5).is_err());
        assert!(wsr_ucb(&[f64::NAN], 0.1).is_err());
    }

    #[test]
    fn zero_confidence_is_degenerate() {
        assert_eq!(wsr_ucb(&[0.7; 50], 1.0).unwrap(), 0.0);
        assert!(wsr_ucb(&[0.7; 50], 0.99).unwrap() >= 0.7);
    }

    #[test]
    fn rescaling_handles_long_sequences() {
        // Capital shrinks far below f64 range before recovering.
        let mut losses = vec![1.0; 3000];
        losses.extend(std::iter::repeat_n(0.0, 3000));
        let st = WsrState::new(&losses, 0.1, WsrVariant::Predictable).unwrap();
        for r in [0.2, 0.5, 0.8] {
            let direct = st.log_capital(r).into_iter().fold(f64::NEG_INFINITY, f64::max)
                > (10f64).ln();
            assert_eq!(st.rejects(r), direct, "R = {r}");
        }
    }
}
