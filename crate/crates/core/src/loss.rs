//! InfoNCE and its relevance-weighted variants.
//!
//! Relevance weights come from the model's own similarity between the query
//! and each positive, clamped at a small floor and normalized either within a
//! document's group of positives or across the whole batch.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossMode {
    /// Plain mean of InfoNCE over all `m * n` pairs.
    Uniform,
    /// Weights normalized over the `n` positives of one document.
    RelevanceDoc,
    /// Weights normalized over every pair in the batch.
    RelevanceBatch,
}

impl LossMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            LossMode::Uniform => "uniform",
            LossMode::RelevanceDoc => "relevance_doc",
            LossMode::RelevanceBatch => "relevance_batch",
        }
    }
}

impl fmt::Display for LossMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(LossMode::Uniform),
            "relevance_doc" => Ok(LossMode::RelevanceDoc),
            "relevance_batch" => Ok(LossMode::RelevanceBatch),
            other => Err(Error::Config(format!("unknown loss mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub tau: f64,
    pub mode: LossMode,
    pub weight_floor: f64,
    /// When false, gradients also flow through the relevance weights.
    pub detach_weights: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau: 0.05,
            mode: LossMode::RelevanceDoc,
            weight_floor: 1e-6,
            detach_weights: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if !(self.weight_floor > 0.0 && self.weight_floor <= 1e-3) {
            return Err(Error::Config(format!(
                "weight_floor must lie in (0, 1e-3], got {}",
                self.weight_floor
            )));
        }
        Ok(())
    }
}

/// Scores of one document's positive pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredGroup {
    /// `s(q, d+_j)` for each positive.
    pub pos_scores: Vec<f64>,
    /// `s(q, d-_i)` for each positive; every row has the same length.
    pub neg_scores: Vec<Vec<f64>>,
    /// Similarities used only for weighting.
    pub weight_scores: Vec<f64>,
}

impl ScoredGroup {
    pub fn n(&self) -> usize {
        self.pos_scores.len()
    }

    fn validate(&self) -> Result<()> {
        let n = self.pos_scores.len();
        if n == 0 || self.neg_scores.len() != n || self.weight_scores.len() != n {
            return Err(Error::InvalidArgument(
                "scored group needs matching positive, negative and weight rows".into(),
            ));
        }
        let d = self.neg_scores[0].len();
        if self.neg_scores.iter().any(|row| row.len() != d) {
            return Err(Error::InvalidArgument(
                "negative pools within a group must share one size".into(),
            ));
        }
        Ok(())
    }
}

/// One scored pair, as consumed by the batch-normalized variant.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredPair {
    pub pos_score: f64,
    pub neg_scores: Vec<f64>,
    pub weight_score: f64,
}

/// Log-sum-exp of `pos / tau` together with `negs / tau`.
pub(crate) fn log_partition(pos: f64, negs: &[f64], tau: f64) -> f64 {
    let max = negs.iter().fold(pos, |m, &s| m.max(s)) / tau;
    let sum: f64 = std::iter::once(pos)
        .chain(negs.iter().copied())
        .map(|s| (s / tau - max).exp())
        .sum();
    max + sum.ln()
}

pub fn info_nce(pos: f64, negs: &[f64], tau: f64) -> Result<f64> {
    if tau.is_nan() || tau <= 0.0 {
        return Err(Error::Config(format!("tau must be positive, got {tau}")));
    }
    if !pos.is_finite() || negs.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("InfoNCE scores"));
    }
    // exact zero for an empty pool; rounding could otherwise leave -0 or 1e-17
    Ok((log_partition(pos, negs, tau) - pos / tau).max(0.0))
}

/// Clamps each score at `floor` and normalizes to sum 1.
pub fn relevance_weights(weight_scores: &[f64], floor: f64) -> Vec<f64> {
    let clamped: Vec<f64> = weight_scores.iter().map(|&s| s.max(floor)).collect();
    let total: f64 = clamped.iter().sum();
    clamped.into_iter().map(|c| c / total).collect()
}

/// `(1 / (m n)) * sum_ij InfoNCE_ij`.
pub fn uniform_loss(groups: &[ScoredGroup], tau: f64) -> Result<f64> {
    if groups.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut total = 0.0;
    let mut pairs = 0usize;
    for g in groups {
        g.validate()?;
        for (pos, negs) in g.pos_scores.iter().zip(&g.neg_scores) {
            total += info_nce(*pos, negs, tau)?;
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}

/// `(1 / m) * sum_i sum_j w_ij * InfoNCE_ij` with `w_i.` normalized per group.
pub fn relevance_loss(groups: &[ScoredGroup], cfg: &LossConfig) -> Result<f64> {
    let Some(first) = groups.first() else {
        return Err(Error::EmptyBatch);
    };
    let n = first.n();
    let mut total = 0.0;
    for g in groups {
        g.validate()?;
        if g.n() != n {
            return Err(Error::InvalidArgument(format!(
                "all groups must have the same number of positives ({} vs {n})",
                g.n()
            )));
        }
        let weights = relevance_weights(&g.weight_scores, cfg.weight_floor);
        for ((pos, negs), w) in g.pos_scores.iter().zip(&g.neg_scores).zip(weights) {
            total += w * info_nce(*pos, negs, cfg.tau)?;
        }
    }
    Ok(total / groups.len() as f64)
}

/// `sum_i w_i * InfoNCE_i` with weights normalized over the whole batch.
pub fn batch_relevance_loss(pairs: &[ScoredPair], cfg: &LossConfig) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let scores: Vec<f64> = pairs.iter().map(|p| p.weight_score).collect();
    let weights = relevance_weights(&scores, cfg.weight_floor);
    pairs.iter().zip(weights).try_fold(0.0, |acc, (p, w)| {
        Ok(acc + w * info_nce(p.pos_score, &p.neg_scores, cfg.tau)?)
    })
}

pub fn flatten_pairs(groups: &[ScoredGroup]) -> Vec<ScoredPair> {
    groups
        .iter()
        .flat_map(|g| {
            g.pos_scores
                .iter()
                .zip(&g.neg_scores)
                .zip(&g.weight_scores)
                .map(|((&pos_score, negs), &weight_score)| ScoredPair {
                    pos_score,
                    neg_scores: negs.clone(),
                    weight_score,
                })
        })
        .collect()
}

/// Batch loss under `cfg.mode`.
pub fn batch_loss(groups: &[ScoredGroup], cfg: &LossConfig) -> Result<f64> {
    match cfg.mode {
        LossMode::Uniform => uniform_loss(groups, cfg.tau),
        LossMode::RelevanceDoc => relevance_loss(groups, cfg),
        LossMode::RelevanceBatch => {
            for g in groups {
                g.validate()?;
            }
            batch_relevance_loss(&flatten_pairs(groups), cfg)
        }
    }
}
