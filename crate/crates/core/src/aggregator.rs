//! Confident noisy-argmax aggregation of teacher votes.
//!
//! A query is answered only when the top vote count, perturbed by
//! `N(0, σ₁²)`, clears the threshold; the answer is then the argmax of the
//! votes perturbed by independent `N(0, σ₂²)` noise. Noise for query `i` comes
//! from a stream keyed by `i`, and every query consumes exactly `1 + K` draws.

use std::io::Write;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::accountant::PrivacyLedger;
use crate::seed::derive_rng;

#[derive(Debug, Error)]
pub enum AggregatorError {
    #[error("prediction {index} is out of range for {num_classes} classes")]
    ClassIndexOutOfRange { index: usize, num_classes: usize },
    #[error("no predictions to tally")]
    EmptyPredictions,
    #[error("a vote histogram needs at least 2 classes, got {0}")]
    TooFewClasses(usize),
    #[error("teacher ensemble is empty")]
    EmptyEnsemble,
    #[error("query budget {max_queries} exceeds pool size {pool_size}")]
    QueryBudgetExceedsPool { max_queries: usize, pool_size: usize },
    #[error("pool has {pool} examples but {truth} ground-truth labels")]
    GroundTruthLength { pool: usize, truth: usize },
    #[error("writing audit record: {0}")]
    Audit(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, AggregatorError>;

/// Per-class teacher vote counts for one query.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VoteHistogram {
    counts: Vec<u32>,
}

impl VoteHistogram {
    pub fn new(counts: Vec<u32>) -> Result<Self> {
        if counts.len() < 2 {
            return Err(AggregatorError::TooFewClasses(counts.len()));
        }
        Ok(Self { counts })
    }

    pub fn counts(&self) -> &[u32] {
        &self.counts
    }

    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().map(|&c| u64::from(c)).sum()
    }

    pub fn max_votes(&self) -> u32 {
        self.counts.iter().copied().max().unwrap_or(0)
    }
}

/// Counts how many teachers predicted each class.
pub fn tally(predictions: &[usize], num_classes: usize) -> Result<VoteHistogram> {
    if predictions.is_empty() {
        return Err(AggregatorError::EmptyPredictions);
    }
    let mut counts = vec![0u32; num_classes];
    for &p in predictions {
        *counts
            .get_mut(p)
            .ok_or(AggregatorError::ClassIndexOutOfRange {
                index: p,
                num_classes,
            })? += 1;
    }
    VoteHistogram::new(counts)
}

/// Threshold (in votes) and the two noise scales.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GnMaxParams {
    pub threshold: f64,
    pub sigma1: f64,
    pub sigma2: f64,
}

impl Default for GnMaxParams {
    fn default() -> Self {
        Self {
            threshold: 60.0,
            sigma1: 20.0,
            sigma2: 5.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregateOutcome {
    Answered(usize),
    Abstained,
}

impl AggregateOutcome {
    pub fn label(self) -> Option<usize> {
        match self {
            AggregateOutcome::Answered(k) => Some(k),
            AggregateOutcome::Abstained => None,
        }
    }
}

/// One confident-GNMax decision. Draws `1 + K` standard normals from `noise`
/// whatever the outcome; ties in the noisy argmax go to the lowest index.
pub fn confident_gnmax<R: Rng + ?Sized>(
    hist: &VoteHistogram,
    params: &GnMaxParams,
    noise: &mut R,
) -> AggregateOutcome {
    let gate_draw: f64 = noise.sample(StandardNormal);
    let mut best = 0usize;
    let mut best_value = f64::NEG_INFINITY;
    for (j, &count) in hist.counts.iter().enumerate() {
        let draw: f64 = noise.sample(StandardNormal);
        let value = f64::from(count) + draw * params.sigma2;
        if value > best_value {
            best = j;
            best_value = value;
        }
    }
    if f64::from(hist.max_votes()) + gate_draw * params.sigma1 >= params.threshold {
        AggregateOutcome::Answered(best)
    } else {
        AggregateOutcome::Abstained
    }
}

/// A collection of voters over an indexed pool of queries.
pub trait Ensemble: Sync {
    fn num_teachers(&self) -> usize;

    fn num_classes(&self) -> usize;

    /// Labels predicted by `teacher` for pool items `0..count`.
    fn predict_prefix(&self, teacher: usize, count: usize) -> Vec<usize>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QueryMetrics {
    pub queries: usize,
    pub answered_queries: usize,
    /// Fraction of answered queries whose noisy label matches ground truth.
    pub answer_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledQueries {
    /// `(pool index, noisy label)` for every answered query, ascending.
    pub answered: Vec<(usize, usize)>,
    pub metrics: QueryMetrics,
}

#[derive(Serialize)]
struct AuditRecord {
    query: usize,
    outcome: &'static str,
    label: Option<usize>,
}

/// Privately labels the first `max_queries` pool items.
///
/// Teacher predictions fan out over the current rayon pool; tallying, the
/// noisy decision, and the ledger update run sequentially in query order.
/// `truth` is consulted only for the reported answer accuracy. When `audit` is
/// given, one JSON line per query is written carrying only the released
/// outcome.
#[allow(clippy::too_many_arguments)]
pub fn label_query_pool<E: Ensemble + ?Sized>(
    pool_size: usize,
    truth: &[usize],
    ensemble: &E,
    params: &GnMaxParams,
    max_queries: usize,
    ledger: &mut PrivacyLedger,
    noise_seed: u64,
    mut audit: Option<&mut dyn Write>,
) -> Result<LabeledQueries> {
    if ensemble.num_teachers() == 0 {
        return Err(AggregatorError::EmptyEnsemble);
    }
    if max_queries > pool_size {
        return Err(AggregatorError::QueryBudgetExceedsPool {
            max_queries,
            pool_size,
        });
    }
    if truth.len() != pool_size {
        return Err(AggregatorError::GroundTruthLength {
            pool: pool_size,
            truth: truth.len(),
        });
    }
    let num_classes = ensemble.num_classes();
    let by_teacher: Vec<Vec<usize>> = (0..ensemble.num_teachers())
        .into_par_iter()
        .map(|t| ensemble.predict_prefix(t, max_queries))
        .collect();

    let mut answered = Vec::new();
    let mut correct = 0usize;
    let mut votes = Vec::with_capacity(by_teacher.len());
    for q in 0..max_queries {
        votes.clear();
        votes.extend(by_teacher.iter().map(|preds| preds[q]));
        let hist = tally(&votes, num_classes)?;
        let mut noise = derive_rng(noise_seed, "gnmax", q as u64);
        let outcome = confident_gnmax(&hist, params, &mut noise);
        ledger.record(outcome.label().is_some());
        if let Some(label) = outcome.label() {
            answered.push((q, label));
            if label == truth[q] {
                correct += 1;
            }
        }
        if let Some(out) = audit.as_deref_mut() {
            let record = AuditRecord {
                query: q,
                outcome: if outcome.label().is_some() {
                    "answered"
                } else {
                    "abstained"
                },
                label: outcome.label(),
            };
            serde_json::to_writer(&mut *out, &record).map_err(std::io::Error::from)?;
            out.write_all(b"\n")?;
        }
    }
    let answer_accuracy = if answered.is_empty() {
        0.0
    } else {
        correct as f64 / answered.len() as f64
    };
    Ok(LabeledQueries {
        metrics: QueryMetrics {
            queries: max_queries,
            answered_queries: answered.len(),
            answer_accuracy,
        },
        answered,
    })
}
