//! Platt scaling of first-stage scores.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MAX_ITER: usize = 100;
const PARAM_TOL: f64 = 1e-8;
const MIN_STEP: f64 = 1e-10;
const RIDGE: f64 = 1e-12;

/// `p(s) = 1 / (1 + exp(a * s + b))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlattModel {
    pub a: f64,
    pub b: f64,
}

impl PlattModel {
    /// The standard logistic function, used before any fit.
    pub const UNIT: PlattModel = PlattModel { a: -1.0, b: 0.0 };

    pub fn predict(&self, score: f64) -> f64 {
        sigmoid_neg(self.a * score + self.b)
    }
}

/// `1 / (1 + exp(z))`, evaluated without overflow.
fn sigmoid_neg(z: f64) -> f64 {
    if z >= 0.0 {
        let e = (-z).exp();
        e / (1.0 + e)
    } else {
        1.0 / (1.0 + z.exp())
    }
}

/// `log(1 + exp(z))`, stable for large |z|.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Negative log-likelihood of labels under `p = sigmoid_neg(a x + b)`.
fn nll(x: &[f64], y: &[bool], a: f64, b: f64) -> f64 {
    x.iter()
        .zip(y)
        .map(|(&xi, &yi)| {
            let z = a * xi + b;
            // -log p = softplus(z); -log(1 - p) = softplus(-z)
            if yi {
                softplus(z)
            } else {
                softplus(-z)
            }
        })
        .sum()
}

/// Maximum-likelihood Platt fit by damped Newton iterations.
///
/// Scores are standardized internally. Constant scores fall back to the
/// intercept-only model, whose probability is the positive rate.
pub fn fit_platt(scores: &[f64], labels: &[bool]) -> Result<PlattModel> {
    if scores.len() != labels.len() {
        return Err(Error::Config(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Config("non-finite score in Platt fit".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n = labels.len();
    if n_pos == 0 || n_pos == n {
        return Err(Error::OneClassLabels);
    }
    let rate = n_pos as f64 / n as f64;
    let intercept_only = PlattModel {
        a: 0.0,
        b: ((1.0 - rate) / rate).ln(),
    };

    let mean = scores.iter().sum::<f64>() / n as f64;
    let var = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n as f64;
    let sd = var.sqrt();
    if !(sd > 0.0) || !sd.is_finite() {
        return Ok(intercept_only);
    }
    let x: Vec<f64> = scores.iter().map(|s| (s - mean) / sd).collect();

    let (mut a, mut b) = (0.0, intercept_only.b);
    let mut fval = nll(&x, labels, a, b);
    for _ in 0..MAX_ITER {
        let (mut h11, mut h22, mut h21) = (RIDGE, RIDGE, 0.0);
        let (mut g1, mut g2) = (0.0, 0.0);
        for (&xi, &yi) in x.iter().zip(labels) {
            let p = sigmoid_neg(a * xi + b);
            let w = p * (1.0 - p);
            h11 += xi * xi * w;
            h22 += w;
            h21 += xi * w;
            // derivative of the per-sample loss in z
            let d = if yi { 1.0 - p } else { -p };
            g1 += xi * d;
            g2 += d;
        }
        let det = h11 * h22 - h21 * h21;
        if !(det > 0.0) {
            break;
        }
        let da = -(h22 * g1 - h21 * g2) / det;
        let db = -(-h21 * g1 + h11 * g2) / det;
        let slope = g1 * da + g2 * db;

        let mut step = 1.0;
        let mut moved = false;
        while step >= MIN_STEP {
            let (na, nb) = (a + step * da, b + step * db);
            let nf = nll(&x, labels, na, nb);
            if nf < fval + 1e-4 * step * slope {
                a = na;
                b = nb;
                fval = nf;
                moved = true;
                break;
            }
            step /= 2.0;
        }
        if !moved || (step * da).abs().max((step * db).abs()) < PARAM_TOL {
            break;
        }
    }

    Ok(PlattModel {
        a: a / sd,
        b: b - a * mean / sd,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn separated_scores_saturate() {
        let scores: Vec<f64> = (0..50).map(|i| i as f64).chain((0..50).map(|i| 100.0 + i as f64)).collect();
        let labels: Vec<bool> = (0..100).map(|i| i >= 50).collect();
        let m = fit_platt(&scores, &labels).unwrap();
        for (s, l) in scores.iter().zip(&labels) {
            let p = m.predict(*s);
            if *l {
                assert!(p > 0.99, "{s} -> {p}");
            } else {
                assert!(p < 0.01, "{s} -> {p}");
            }
        }
        assert!(m.a < 0.0);
    }

    #[test]
    fn recovers_known_logistic_model() {
        // Labels drawn from p(s) = 1 / (1 + exp(-2 s + 1)).
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let truth = PlattModel { a: -2.0, b: 1.0 };
        let mut scores = Vec::new();
        let mut labels = Vec::new();
        for _ in 0..10_000 {
            let s: f64 = rng.random_range(-3.0..3.0);
            scores.push(s);
            labels.push(rng.random::<f64>() < truth.predict(s));
        }
        let m = fit_platt(&scores, &labels).unwrap();
        assert!((m.a - truth.a).abs() < 0.1, "{m:?}");
        assert!((m.b - truth.b).abs() < 0.1, "{m:?}");
    }

    #[test]
    fn constant_scores_give_positive_rate() {
        let scores = vec![3.0; 10];
        let labels: Vec<bool> = (0..10).map(|i| i < 3).collect();
        let m = fit_platt(&scores, &labels).unwrap();
        assert_eq!(m.a, 0.0);
        for s in [-100.0, 0.0, 3.0, 1e6] {
            assert!((m.predict(s) - 0.3).abs() < 1e-12);
        }
    }

    #[test]
    fn one_class_is_rejected() {
        let err = fit_platt(&[1.0, 2.0], &[true, true]).unwrap_err();
        assert!(matches!(err, Error::OneClassLabels));
        assert!(err.to_string().contains("skip calibration"));
    }

    #[test]
    fn prediction_is_bounded_and_stable() {
        let m = PlattModel { a: -1.0, b: 0.0 };
        assert_eq!(m.predict(1e6), 1.0);
        assert_eq!(m.predict(-1e6), 0.0);
        assert!((m.predict(0.0) - 0.5).abs() < 1e-15);
    }
}
