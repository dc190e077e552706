use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::objective::{ContrastiveProblem, NegativeSource, SparseGrad};
use super::EncoderParams;
use crate::augment::PositiveGroup;
use crate::error::{Error, Result};
use crate::loss::{LossConfig, LossMode};

/// Random entries sampled on top of the touched rows.
const SAMPLED_ENTRIES: usize = 200;
/// Every entry of every touched row is checked when there are at most this many.
const EXHAUSTIVE_LIMIT: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub entries_checked: usize,
}

/// Central finite differences against the analytic gradient of one batch.
///
/// Detached relevance weights are held at their unperturbed values while the
/// table is perturbed, matching what the analytic pass differentiates.
pub struct GradientCheck<'a> {
    problem: ContrastiveProblem,
    params: &'a EncoderParams,
    cfg: LossConfig,
    frozen: Option<Vec<Vec<f64>>>,
}

impl<'a> GradientCheck<'a> {
    pub fn new(
        params: &'a EncoderParams,
        batch: &[PositiveGroup],
        cfg: &LossConfig,
        source: NegativeSource<'_>,
    ) -> Result<Self> {
        let problem = ContrastiveProblem::from_batch(params, batch, source)?;
        Self::from_problem(problem, params, cfg)
    }

    pub fn from_problem(problem: ContrastiveProblem, params: &'a EncoderParams, cfg: &LossConfig) -> Result<Self> {
        let fwd = problem.forward(params, cfg)?;
        let frozen = (cfg.detach_weights && cfg.mode != LossMode::Uniform)
            .then(|| fwd.scored.iter().map(|g| g.weight_scores.clone()).collect());
        Ok(Self {
            problem,
            params,
            cfg: *cfg,
            frozen,
        })
    }

    pub fn analytic(&self) -> Result<SparseGrad> {
        let fwd = self.problem.forward(self.params, &self.cfg)?;
        self.problem.backward(self.params, &self.cfg, &fwd)
    }

    fn entries(&self, seed: u64) -> Vec<(u32, usize)> {
        let dim = self.params.dim();
        let vocab = self.params.vocab();
        let touched: BTreeSet<u32> = self
            .problem
            .live_sequences()
            .iter()
            .flat_map(|s| s.tokens().iter().copied())
            .collect();
        let mut entries = BTreeSet::new();
        if touched.len() * dim <= EXHAUSTIVE_LIMIT {
            for &t in &touched {
                entries.extend((0..dim).map(|c| (t, c)));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sampled = SAMPLED_ENTRIES.min(vocab * dim);
        let mut added = 0;
        while added < sampled {
            let e = (rng.gen_range(0..vocab) as u32, rng.gen_range(0..dim));
            if entries.insert(e) || entries.len() >= vocab * dim {
                added += 1;
            }
        }
        entries.into_iter().collect()
    }

    /// Maximum of `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
    pub fn compare(&self, analytic: &SparseGrad, eps: f64, seed: u64) -> Result<GradCheckReport> {
        if !(1e-7..=1e-4).contains(&eps) {
            return Err(Error::InvalidArgument(format!("eps must lie in [1e-7, 1e-4], got {eps}")));
        }
        let mut probe = self.params.clone();
        let frozen = self.frozen.as_deref();
        let loss_at = |token: u32, col: usize, delta: f64, probe: &mut EncoderParams| -> Result<f64> {
            let original = probe.table.row(token)[col];
            probe.table.row_mut(token)[col] = original + delta;
            let l = self
                .problem
                .forward_with_weight_scores(probe, &self.cfg, frozen)
                .map(|f| f.loss);
            probe.table.row_mut(token)[col] = original;
            l
        };
        let entries = self.entries(seed);
        let mut worst: f64 = 0.0;
        for &(t, c) in &entries {
            let plus = loss_at(t, c, eps, &mut probe)?;
            let minus = loss_at(t, c, -eps, &mut probe)?;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.get(t, c);
            if !numeric.is_finite() || !a.is_finite() {
                return Err(Error::NonFinite("gradient check"));
            }
            let rel = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            worst = worst.max(rel);
        }
        Ok(GradCheckReport {
            max_rel_error: worst,
            entries_checked: entries.len(),
        })
    }

    pub fn run(&self, eps: f64, seed: u64) -> Result<GradCheckReport> {
        let analytic = self.analytic()?;
        self.compare(&analytic, eps, seed)
    }
}

pub fn check_gradients(
    params: &EncoderParams,
    batch: &[PositiveGroup],
    cfg: &LossConfig,
    source: NegativeSource<'_>,
    eps: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    GradientCheck::new(params, batch, cfg, source)?.run(eps, seed)
}

pub fn compare_gradients(
    params: &EncoderParams,
    batch: &[PositiveGroup],
    cfg: &LossConfig,
    source: NegativeSource<'_>,
    analytic: &SparseGrad,
    eps: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    GradientCheck::new(params, batch, cfg, source)?.compare(analytic, eps, seed)
}
