//! Contrastive objective over a batch of positive groups, with a hand-derived
//! reverse pass through similarity, L2 normalization and mean pooling.

use std::collections::BTreeMap;

use rayon::prelude::*;

use super::{dot, pool, EncoderParams, Pooled, Table};
use crate::augment::PositiveGroup;
use crate::corpus::TokenSeq;
use crate::error::{Error, Result};
use crate::loss::{self, log_partition, LossConfig, LossMode, ScoredGroup};
use crate::negatives::{negative_slots, NegativeQueue, NegativeSlot};

/// One value per (group, positive).
type PerPair = Vec<Vec<f64>>;

/// Where negatives come from when a batch is turned into a problem.
#[derive(Debug, Clone, Copy)]
pub enum NegativeSource<'a> {
    /// Positives of the other documents in the batch, live on both sides.
    InBatch,
    /// Documents encoded by the momentum table, negatives from the queue.
    Moco {
        momentum: &'a Table,
        queue: &'a NegativeQueue,
    },
}

/// A vector in the objective: either encoded by the live table (and therefore
/// differentiated) or a constant.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Node {
    Live(usize),
    Fixed(usize),
}

#[derive(Debug, Clone)]
pub struct ProblemGroup {
    pub doc_id: String,
    pub query: Node,
    pub positives: Vec<Node>,
    /// One pool shared by every positive of the group.
    pub negatives: Vec<Node>,
}

#[derive(Debug, Clone, Default)]
pub struct ContrastiveProblem {
    live: Vec<TokenSeq>,
    fixed: Vec<Vec<f64>>,
    groups: Vec<ProblemGroup>,
}

/// Row-sparse gradient with respect to the encoder table.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseGrad {
    dim: usize,
    rows: BTreeMap<u32, Vec<f64>>,
}

impl SparseGrad {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            rows: BTreeMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, token: u32) -> Option<&[f64]> {
        self.rows.get(&token).map(Vec::as_slice)
    }

    pub fn get(&self, token: u32, col: usize) -> f64 {
        self.rows.get(&token).map_or(0.0, |r| r[col])
    }

    pub fn row_mut(&mut self, token: u32) -> &mut [f64] {
        let dim = self.dim;
        self.rows.entry(token).or_insert_with(|| vec![0.0; dim])
    }

    /// Rows in ascending token order.
    pub fn rows(&self) -> impl Iterator<Item = (u32, &[f64])> {
        self.rows.iter().map(|(&t, r)| (t, r.as_slice()))
    }

    pub fn max_abs(&self) -> f64 {
        self.rows
            .values()
            .flatten()
            .fold(0.0, |m: f64, x| m.max(x.abs()))
    }

    pub fn to_dense(&self, vocab: usize) -> Table {
        let mut table = Table::zeros(vocab, self.dim);
        for (&t, r) in &self.rows {
            table.row_mut(t).copy_from_slice(r);
        }
        table
    }
}

#[derive(Debug, Clone)]
pub struct Forward {
    live: Vec<Pooled>,
    pub scored: Vec<ScoredGroup>,
    pub loss: f64,
}

struct GroupGrad {
    query: Vec<f64>,
    pos: Vec<f64>,
    neg: Vec<f64>,
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

impl ContrastiveProblem {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_live(&mut self, seq: TokenSeq) -> Node {
        self.live.push(seq);
        Node::Live(self.live.len() - 1)
    }

    pub fn add_fixed(&mut self, vec: Vec<f64>) -> Node {
        self.fixed.push(vec);
        Node::Fixed(self.fixed.len() - 1)
    }

    pub fn add_group(&mut self, group: ProblemGroup) {
        self.groups.push(group);
    }

    pub fn groups(&self) -> &[ProblemGroup] {
        &self.groups
    }

    pub fn live_sequences(&self) -> &[TokenSeq] {
        &self.live
    }

    /// Queries always run through the live table; documents do too in
    /// in-batch mode and through the momentum table in moco mode.
    pub fn from_batch(
        params: &EncoderParams,
        batch: &[PositiveGroup],
        source: NegativeSource<'_>,
    ) -> Result<Self> {
        if batch.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let mut problem = Self::new();
        let queries: Vec<Node> = batch.iter().map(|g| problem.add_live(g.query.clone())).collect();
        let mut positives: Vec<Vec<Node>> = Vec::with_capacity(batch.len());
        let mut queue_nodes = Vec::new();
        match source {
            NegativeSource::InBatch => {
                for g in batch {
                    positives.push(g.positives.iter().map(|p| problem.add_live(p.clone())).collect());
                }
            }
            NegativeSource::Moco { momentum, queue } => {
                if !momentum.same_shape(&params.table) {
                    return Err(Error::DimensionMismatch {
                        expected: params.vocab() * params.dim(),
                        found: momentum.vocab() * momentum.dim(),
                    });
                }
                if queue.dim() != params.dim() {
                    return Err(Error::DimensionMismatch {
                        expected: params.dim(),
                        found: queue.dim(),
                    });
                }
                for g in batch {
                    let mut nodes = Vec::with_capacity(g.positives.len());
                    for p in &g.positives {
                        let emb = pool(momentum, params.normalize, p)?;
                        nodes.push(problem.add_fixed(emb.out));
                    }
                    positives.push(nodes);
                }
                queue_nodes = queue.iter().map(|e| problem.add_fixed(e.0.clone())).collect();
            }
        }
        let mode = match source {
            NegativeSource::InBatch => crate::negatives::NegativesMode::InBatch,
            NegativeSource::Moco { .. } => crate::negatives::NegativesMode::Moco,
        };
        let shape: Vec<(&str, usize)> = batch
            .iter()
            .map(|g| (g.doc_id.as_str(), g.positives.len()))
            .collect();
        for (i, g) in batch.iter().enumerate() {
            let negatives = negative_slots(mode, queue_nodes.len(), &shape, i)?
                .into_iter()
                .map(|slot| match slot {
                    NegativeSlot::Queue(k) => queue_nodes[k],
                    NegativeSlot::Batch { group, positive } => positives[group][positive],
                })
                .collect();
            problem.add_group(ProblemGroup {
                doc_id: g.doc_id.clone(),
                query: queries[i],
                positives: positives[i].clone(),
                negatives,
            });
        }
        Ok(problem)
    }

    fn vector<'a>(&'a self, live: &'a [Pooled], node: Node) -> &'a [f64] {
        match node {
            Node::Live(i) => &live[i].out,
            Node::Fixed(i) => &self.fixed[i],
        }
    }

    /// Value of `node` in a forward pass of this problem.
    pub fn node_value<'a>(&'a self, fwd: &'a Forward, node: Node) -> &'a [f64] {
        self.vector(&fwd.live, node)
    }

    pub fn forward(&self, params: &EncoderParams, cfg: &LossConfig) -> Result<Forward> {
        self.forward_with_weight_scores(params, cfg, None)
    }

    /// Forward pass; `weight_scores`, when given, replaces the model's own
    /// relevance estimates (used to hold detached weights fixed).
    pub fn forward_with_weight_scores(
        &self,
        params: &EncoderParams,
        cfg: &LossConfig,
        weight_scores: Option<&[Vec<f64>]>,
    ) -> Result<Forward> {
        cfg.validate()?;
        if self.groups.is_empty() {
            return Err(Error::EmptyBatch);
        }
        if let Some(ws) = weight_scores {
            if ws.len() != self.groups.len() {
                return Err(Error::InvalidArgument("weight score rows must match groups".into()));
            }
        }
        let live: Vec<Pooled> = self
            .live
            .par_iter()
            .map(|seq| pool(&params.table, params.normalize, seq))
            .collect::<Result<_>>()?;
        let scored: Vec<ScoredGroup> = self
            .groups
            .par_iter()
            .enumerate()
            .map(|(i, g)| {
                let q = self.vector(&live, g.query);
                let pos_scores: Vec<f64> = g
                    .positives
                    .iter()
                    .map(|&p| dot(q, self.vector(&live, p)))
                    .collect();
                let negs: Vec<f64> = g
                    .negatives
                    .iter()
                    .map(|&n| dot(q, self.vector(&live, n)))
                    .collect();
                let weight_scores = match weight_scores {
                    Some(ws) => ws[i].clone(),
                    None => pos_scores.clone(),
                };
                ScoredGroup {
                    neg_scores: vec![negs; pos_scores.len()],
                    pos_scores,
                    weight_scores,
                }
            })
            .collect();
        let loss = loss::batch_loss(&scored, cfg)?;
        Ok(Forward { live, scored, loss })
    }

    /// Per-pair loss coefficients `dL / dInfoNCE_ij` and, when weights are not
    /// detached, the extra gradient on each positive score through its weight.
    fn pair_coefficients(&self, fwd: &Forward, cfg: &LossConfig) -> Result<(PerPair, PerPair)> {
        let m = fwd.scored.len() as f64;
        let total_pairs: usize = fwd.scored.iter().map(ScoredGroup::n).sum();
        let zeros: Vec<Vec<f64>> = fwd.scored.iter().map(|g| vec![0.0; g.n()]).collect();
        let weights: Vec<Vec<f64>> = match cfg.mode {
            LossMode::Uniform => {
                let c = 1.0 / total_pairs as f64;
                return Ok((fwd.scored.iter().map(|g| vec![c; g.n()]).collect(), zeros));
            }
            LossMode::RelevanceDoc => fwd
                .scored
                .iter()
                .map(|g| loss::relevance_weights(&g.weight_scores, cfg.weight_floor))
                .collect(),
            LossMode::RelevanceBatch => {
                let flat: Vec<f64> = fwd.scored.iter().flat_map(|g| g.weight_scores.clone()).collect();
                let w = loss::relevance_weights(&flat, cfg.weight_floor);
                let mut it = w.into_iter();
                fwd.scored
                    .iter()
                    .map(|g| it.by_ref().take(g.n()).collect())
                    .collect()
            }
        };
        let scale = if cfg.mode == LossMode::RelevanceDoc { 1.0 / m } else { 1.0 };
        let coef: Vec<Vec<f64>> = weights
            .iter()
            .map(|w| w.iter().map(|x| x * scale).collect())
            .collect();
        if cfg.detach_weights {
            return Ok((coef, zeros));
        }

        // d w_j / d s_k = (delta_jk - w_j) / S for unclamped s_k, where S is
        // the clamped sum over the normalization set.
        let mut dl_dw: Vec<Vec<f64>> = Vec::with_capacity(fwd.scored.len());
        for g in &fwd.scored {
            let row = g
                .pos_scores
                .iter()
                .zip(&g.neg_scores)
                .map(|(p, negs)| loss::info_nce(*p, negs, cfg.tau).map(|l| l * scale))
                .collect::<Result<Vec<f64>>>()?;
            dl_dw.push(row);
        }
        let clamped_sum = |scores: &[f64]| scores.iter().map(|s| s.max(cfg.weight_floor)).sum::<f64>();
        let mut extra = zeros;
        match cfg.mode {
            LossMode::RelevanceDoc => {
                for (i, g) in fwd.scored.iter().enumerate() {
                    let s = clamped_sum(&g.weight_scores);
                    let mean: f64 = weights[i].iter().zip(&dl_dw[i]).map(|(w, d)| w * d).sum();
                    for j in 0..g.n() {
                        if g.weight_scores[j] > cfg.weight_floor {
                            extra[i][j] = (dl_dw[i][j] - mean) / s;
                        }
                    }
                }
            }
            LossMode::RelevanceBatch => {
                let all: Vec<f64> = fwd.scored.iter().flat_map(|g| g.weight_scores.clone()).collect();
                let s = clamped_sum(&all);
                let mean: f64 = weights
                    .iter()
                    .flatten()
                    .zip(dl_dw.iter().flatten())
                    .map(|(w, d)| w * d)
                    .sum();
                for (i, g) in fwd.scored.iter().enumerate() {
                    for j in 0..g.n() {
                        if g.weight_scores[j] > cfg.weight_floor {
                            extra[i][j] = (dl_dw[i][j] - mean) / s;
                        }
                    }
                }
            }
            LossMode::Uniform => unreachable!(),
        }
        Ok((coef, extra))
    }

    pub fn backward(&self, params: &EncoderParams, cfg: &LossConfig, fwd: &Forward) -> Result<SparseGrad> {
        let tau = cfg.tau;
        let (coef, extra) = self.pair_coefficients(fwd, cfg)?;
        let live = &fwd.live;

        let group_grads: Vec<GroupGrad> = self
            .groups
            .par_iter()
            .zip(&fwd.scored)
            .enumerate()
            .map(|(i, (g, sg))| {
                let dim = params.dim();
                let negs = &sg.neg_scores[0];
                let mut neg = vec![0.0; g.negatives.len()];
                let mut pos = vec![0.0; g.positives.len()];
                for j in 0..g.positives.len() {
                    let p = sg.pos_scores[j];
                    let lse = log_partition(p, negs, tau);
                    let c = coef[i][j];
                    pos[j] = c * ((p / tau - lse).exp() - 1.0) / tau + extra[i][j];
                    for (gk, &s) in neg.iter_mut().zip(negs) {
                        *gk += c * (s / tau - lse).exp() / tau;
                    }
                }
                let mut query = vec![0.0; dim];
                for (&node, &gp) in g.positives.iter().zip(&pos) {
                    axpy(gp, self.vector(live, node), &mut query);
                }
                for (&node, &gn) in g.negatives.iter().zip(&neg) {
                    axpy(gn, self.vector(live, node), &mut query);
                }
                GroupGrad { query, pos, neg }
            })
            .collect();

        // Fixed-order accumulation keeps the result independent of threading.
        let mut node_grads: Vec<Option<Vec<f64>>> = vec![None; self.live.len()];
        let mut add = |node: Node, alpha: f64, x: &[f64]| {
            if let Node::Live(k) = node {
                let slot = node_grads[k].get_or_insert_with(|| vec![0.0; x.len()]);
                axpy(alpha, x, slot);
            }
        };
        for (g, gg) in self.groups.iter().zip(&group_grads) {
            add(g.query, 1.0, &gg.query);
            let q = self.vector(live, g.query);
            for (&node, &gp) in g.positives.iter().zip(&gg.pos) {
                add(node, gp, q);
            }
            for (&node, &gn) in g.negatives.iter().zip(&gg.neg) {
                add(node, gn, q);
            }
        }

        let mut grad = SparseGrad::new(params.dim());
        for (k, g_out) in node_grads.into_iter().enumerate() {
            let Some(g_out) = g_out else { continue };
            let pooled = &live[k];
            let g_pool: Vec<f64> = if params.normalize {
                if pooled.pooled_norm == 0.0 {
                    continue;
                }
                let e = &pooled.out;
                let proj = dot(e, &g_out);
                g_out
                    .iter()
                    .zip(e)
                    .map(|(g, x)| (g - x * proj) / pooled.pooled_norm)
                    .collect()
            } else {
                g_out
            };
            let seq = &self.live[k];
            let inv = 1.0 / seq.len() as f64;
            for &t in seq.tokens() {
                axpy(inv, &g_pool, grad.row_mut(t));
            }
        }
        Ok(grad)
    }
}

pub fn forward_loss(
    params: &EncoderParams,
    batch: &[PositiveGroup],
    cfg: &LossConfig,
    source: NegativeSource<'_>,
) -> Result<f64> {
    let problem = ContrastiveProblem::from_batch(params, batch, source)?;
    Ok(problem.forward(params, cfg)?.loss)
}

/// Batch loss and its gradient with respect to the live table.
pub fn backward(
    params: &EncoderParams,
    batch: &[PositiveGroup],
    cfg: &LossConfig,
    source: NegativeSource<'_>,
) -> Result<(f64, SparseGrad)> {
    let problem = ContrastiveProblem::from_batch(params, batch, source)?;
    let fwd = problem.forward(params, cfg)?;
    let grad = problem.backward(params, cfg, &fwd)?;
    Ok((fwd.loss, grad))
}
