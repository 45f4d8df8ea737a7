//! Synthetic two-stage ranking systems with controllable difficulty.
//!
//! Distractor retriever scores are standard logistic draws scaled by
//! `retriever_noise`; gold scores are shifted by `retriever_gap`. In
//! embedding mode scores are dot products of unit vectors instead. Every
//! query draws from its own random stream, so generation is deterministic
//! and independent of evaluation order.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Open01, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::Preparation;
use crate::metrics::{pruned_loss, Metric};
use crate::model::{Candidate, Dataset, DatasetMeta, DocId, QueryRecord, Threshold};

/// How reranker scores relate to retriever scores.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum RerankerMode {
    /// Reranker score equals the retriever score, so reranking never
    /// reorders and every per-query loss curve is monotone.
    Consistent,
    /// Independent scores: gold shifted by `gap`, logistic noise of scale
    /// `noise`.
    Noisy { gap: f64, noise: f64 },
    /// As `Noisy`, plus one distractor per query with the lowest retriever
    /// score and the highest reranker score.
    Adversarial { gap: f64, noise: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_queries: usize,
    pub pool_size: usize,
    /// Gold documents per query, uniform on `gold_min..=gold_max`.
    pub gold_min: usize,
    pub gold_max: usize,
    pub retriever_gap: f64,
    pub retriever_noise: f64,
    pub reranker: RerankerMode,
    /// Dimension of query/document unit vectors; `None` draws scores
    /// directly.
    pub embedding_dim: Option<usize>,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_queries: 1000,
            pool_size: 200,
            gold_min: 1,
            gold_max: 1,
            retriever_gap: 3.0,
            retriever_noise: 1.0,
            reranker: RerankerMode::Consistent,
            embedding_dim: None,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: usize| {
            if v == 0 {
                Err(Error::Config(format!("{name} must be positive")))
            } else {
                Ok(())
            }
        };
        positive("n_queries", self.n_queries)?;
        positive("pool_size", self.pool_size)?;
        positive("gold_min", self.gold_min)?;
        if self.gold_max < self.gold_min || self.gold_max > self.pool_size {
            return Err(Error::Config(
                "gold_max must lie between gold_min and pool_size".into(),
            ));
        }
        if let Some(d) = self.embedding_dim {
            positive("embedding_dim", d)?;
        }
        let finite_nonneg = |name: &'static str, v: f64| {
            if v.is_finite() && v >= 0.0 {
                Ok(())
            } else {
                Err(Error::invalid(name, v, "must be finite and non-negative"))
            }
        };
        finite_nonneg("retriever_noise", self.retriever_noise)?;
        if !self.retriever_gap.is_finite() {
            return Err(Error::invalid("retriever_gap", self.retriever_gap, "must be finite"));
        }
        if let RerankerMode::Noisy { gap, noise } | RerankerMode::Adversarial { gap, noise } =
            self.reranker
        {
            finite_nonneg("reranker noise", noise)?;
            if !gap.is_finite() {
                return Err(Error::invalid("reranker gap", gap, "must be finite"));
            }
        }
        Ok(())
    }
}

fn logistic(rng: &mut impl Rng, scale: f64) -> f64 {
    let u: f64 = Open01.sample(rng);
    scale * (u / (1.0 - u)).ln()
}

fn unit_vector(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn doc_name(i: usize) -> String {
    format!("d{i:04}")
}

/// Generates query `stream` of the model described by `config`.
fn generate_query(config: &SynthConfig, stream: u64) -> QueryRecord {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(stream);
    let n = config.pool_size;
    let n_gold = rng.random_range(config.gold_min..=config.gold_max);
    let gold_pos: BTreeSet<usize> = rand::seq::index::sample(&mut rng, n, n_gold).into_iter().collect();

    let retriever: Vec<f64> = match config.embedding_dim {
        None => (0..n)
            .map(|i| {
                let shift = if gold_pos.contains(&i) { config.retriever_gap } else { 0.0 };
                shift + logistic(&mut rng, config.retriever_noise)
            })
            .collect(),
        Some(dim) => {
            let q = unit_vector(&mut rng, dim);
            (0..n)
                .map(|i| {
                    let shift = if gold_pos.contains(&i) { config.retriever_gap } else { 0.0 };
                    let mut v: Vec<f64> = q
                        .iter()
                        .map(|&x| {
                            let z: f64 = StandardNormal.sample(&mut rng);
                            shift * x + config.retriever_noise * z
                        })
                        .collect();
                    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                    if norm > 0.0 {
                        v.iter_mut().for_each(|x| *x /= norm);
                    }
                    v.iter().zip(&q).map(|(a, b)| a * b).sum()
                })
                .collect()
        }
    };

    let mut reranker: Vec<f64> = match config.reranker {
        RerankerMode::Consistent => retriever.clone(),
        RerankerMode::Noisy { gap, noise } | RerankerMode::Adversarial { gap, noise } => (0..n)
            .map(|i| {
                let shift = if gold_pos.contains(&i) { gap } else { 0.0 };
                shift + logistic(&mut rng, noise)
            })
            .collect(),
    };
    if let RerankerMode::Adversarial { .. } = config.reranker {
        let planted = (0..n)
            .filter(|i| !gold_pos.contains(i))
            .min_by(|&a, &b| retriever[a].total_cmp(&retriever[b]));
        if let Some(p) = planted {
            let top = reranker.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            reranker[p] = top + 1.0;
        }
    }

    let candidates = (0..n)
        .map(|i| Candidate::new(doc_name(i), retriever[i], reranker[i]))
        .collect();
    let gold = gold_pos.iter().map(|&i| DocId::from(doc_name(i))).collect();
    QueryRecord::new(format!("q{stream:06}"), candidates, gold).expect("generated query is valid")
}

fn generate_range(config: &SynthConfig, first: u64, count: usize) -> Vec<QueryRecord> {
    (0..count as u64)
        .into_par_iter()
        .map(|i| generate_query(config, first + i))
        .collect()
}

/// A reproducible dataset with raw scores; calibration transforms are left
/// to [`Preparation`].
pub fn generate(config: &SynthConfig) -> Result<Dataset> {
    config.validate()?;
    Dataset::new(
        generate_range(config, 0, config.n_queries),
        DatasetMeta {
            sources: vec!["synthetic".into()],
            pool_size: config.pool_size,
            ..DatasetMeta::default()
        },
    )
}

// Fresh draws for risk estimation use streams disjoint from any dataset.
const FRESH_STREAM_BASE: u64 = 1 << 40;

/// Monte-Carlo estimate of the population risk of pruning at `tau`, with
/// its standard error, using `n_monte_carlo` fresh queries transformed by
/// `preparation`.
pub fn true_risk(
    config: &SynthConfig,
    preparation: &Preparation,
    tau: Threshold,
    n_monte_carlo: usize,
    metric: Metric,
) -> Result<(f64, f64)> {
    config.validate()?;
    if n_monte_carlo < 2 {
        return Err(Error::Config("at least two Monte-Carlo draws are required".into()));
    }
    let mut losses = Vec::with_capacity(n_monte_carlo);
    const CHUNK: usize = 1_000;
    let mut done = 0;
    while done < n_monte_carlo {
        let count = CHUNK.min(n_monte_carlo - done);
        let batch = Dataset::from_parts_unchecked(
            generate_range(config, FRESH_STREAM_BASE + done as u64, count),
            DatasetMeta::default(),
        );
        let batch = preparation.apply(&batch)?;
        let part: Vec<f64> = batch
            .records()
            .par_iter()
            .map(|r| pruned_loss(r, tau, metric))
            .collect::<Result<_>>()?;
        losses.extend(part);
        done += count;
    }
    let n = losses.len() as f64;
    let mean = losses.iter().sum::<f64>() / n;
    let var = losses.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok((mean, (var / n).sqrt()))
}
