//! Pre-training, continued pre-training and few-shot fine-tuning.
//!
//! Every random draw is a pure function of the run seed and the step index
//! (batch order from `(seed, epoch)`, crops from `(seed, step, doc_id)`), so
//! a [`TrainState`] plus the config is all a resumed run needs.

mod config;
mod fewshot;

use std::collections::BTreeSet;

use log::{debug, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::augment::{doc_rng, make_group, CropConfig, PositiveGroup};
use crate::corpus::{tokenize, Document, Labels, TokenSeq};
use crate::encoder::{encode, ContrastiveProblem, EncoderParams, Embedding, NegativeSource, SparseGrad, Table};
use crate::error::{Error, Result};
use crate::loss::relevance_weights;
use crate::negatives::{MomentumState, NegativeQueue, NegativesMode};

pub use config::{AdamConfig, FewshotConfig, FewshotExample, OptimizerKind, TrainConfig};
pub use fewshot::{fewshot_finetune, mine_fewshot_negatives};

/// Linear warmup from 0 to `peak_lr`, then linear decay towards 0.
pub fn lr_at(step: u64, cfg: &TrainConfig) -> Result<f64> {
    if step >= cfg.total_steps {
        return Err(Error::InvalidArgument(format!(
            "step {step} outside schedule of {} steps",
            cfg.total_steps
        )));
    }
    let (s, w, t) = (step as f64, cfg.warmup_steps as f64, cfg.total_steps as f64);
    if step < cfg.warmup_steps {
        Ok(cfg.peak_lr * s / w)
    } else {
        Ok(cfg.peak_lr * (t - s) / (t - w))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    /// Optimizer steps taken, used for bias correction.
    pub t: u64,
    pub m: Table,
    pub v: Table,
}

#[derive(Debug, Clone, PartialEq)]
pub enum OptimizerState {
    Sgd,
    Adam(AdamState),
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, vocab: usize, dim: usize) -> Self {
        match kind {
            OptimizerKind::Sgd => OptimizerState::Sgd,
            OptimizerKind::Adam => OptimizerState::Adam(AdamState {
                t: 0,
                m: Table::zeros(vocab, dim),
                v: Table::zeros(vocab, dim),
            }),
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        match self {
            OptimizerState::Sgd => OptimizerKind::Sgd,
            OptimizerState::Adam(_) => OptimizerKind::Adam,
        }
    }

    /// Applies one update to the rows present in `grad`.
    pub fn apply(&mut self, params: &mut EncoderParams, grad: &SparseGrad, lr: f64, adam: &AdamConfig) {
        match self {
            OptimizerState::Sgd => {
                for (t, g) in grad.rows() {
                    for (p, g) in params.table.row_mut(t).iter_mut().zip(g) {
                        *p -= lr * g;
                    }
                }
            }
            OptimizerState::Adam(state) => {
                state.t += 1;
                let c1 = 1.0 - adam.beta1.powf(state.t as f64);
                let c2 = 1.0 - adam.beta2.powf(state.t as f64);
                for (t, g) in grad.rows() {
                    let p = params.table.row_mut(t);
                    let m = state.m.row_mut(t);
                    let v = state.v.row_mut(t);
                    for k in 0..g.len() {
                        m[k] = adam.beta1 * m[k] + (1.0 - adam.beta1) * g[k];
                        v[k] = adam.beta2 * v[k] + (1.0 - adam.beta2) * g[k] * g[k];
                        p[k] -= lr * (m[k] / c1) / ((v[k] / c2).sqrt() + adam.eps);
                    }
                }
            }
        }
    }
}

/// Everything that evolves during training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: EncoderParams,
    /// Present in moco mode.
    pub momentum: Option<MomentumState>,
    pub queue: Option<NegativeQueue>,
    pub optimizer: OptimizerState,
    /// Steps completed.
    pub step: u64,
    /// Rows the optimizer has ever moved. The momentum copy of any other row
    /// still equals the live row, so only these need the momentum update.
    pub touched: BTreeSet<u32>,
}

impl TrainState {
    pub fn init(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let params = EncoderParams::init(cfg.vocab_size, cfg.dim, cfg.normalize, cfg.init_scale, cfg.seed)?;
        Self::from_params(params, cfg)
    }

    /// Fresh optimizer, momentum copy and queue around existing parameters.
    pub fn from_params(params: EncoderParams, cfg: &TrainConfig) -> Result<Self> {
        let (momentum, queue) = match cfg.negatives {
            NegativesMode::Moco => (
                Some(MomentumState::from_params(&params, cfg.mu)?),
                Some(NegativeQueue::new(cfg.queue_capacity, params.dim())?),
            ),
            NegativesMode::InBatch => (None, None),
        };
        Ok(Self {
            optimizer: OptimizerState::new(cfg.optimizer, params.vocab(), params.dim()),
            params,
            momentum,
            queue,
            step: 0,
            touched: BTreeSet::new(),
        })
    }

    /// Bare parameters with no training state attached.
    pub fn params_only(params: EncoderParams) -> Self {
        Self {
            params,
            momentum: None,
            queue: None,
            optimizer: OptimizerState::Sgd,
            step: 0,
            touched: BTreeSet::new(),
        }
    }

    fn check_against(&self, cfg: &TrainConfig) -> Result<()> {
        if self.params.vocab() != cfg.vocab_size || self.params.dim() != cfg.dim {
            return Err(Error::Config(format!(
                "state has a {}x{} table but the config asks for {}x{}",
                self.params.vocab(),
                self.params.dim(),
                cfg.vocab_size,
                cfg.dim
            )));
        }
        if self.params.normalize != cfg.normalize {
            return Err(Error::Config("normalize differs between state and config".into()));
        }
        let moco = cfg.negatives == NegativesMode::Moco;
        if moco != (self.momentum.is_some() && self.queue.is_some()) {
            return Err(Error::Config("state does not match the configured negatives mode".into()));
        }
        if self.optimizer.kind() != cfg.optimizer {
            return Err(Error::Config("state does not match the configured optimizer".into()));
        }
        Ok(())
    }
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepMetrics {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    /// Statistics of the per-group normalized relevance weights.
    pub w_mean: f64,
    pub w_min: f64,
    pub w_max: f64,
    /// Mean weight of pairs whose query and positive spans are mostly from
    /// different topics; needs labels.
    pub w_cross_topic: Option<f64>,
    pub w_same_topic: Option<f64>,
    #[serde(skip)]
    pub groups: usize,
    #[serde(skip)]
    pub grad_max_abs: f64,
}

/// Running means of pair weights split by topic agreement.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct TopicWeights {
    pub cross_sum: f64,
    pub cross_pairs: usize,
    pub same_sum: f64,
    pub same_pairs: usize,
}

impl TopicWeights {
    fn add(&mut self, labels: &Labels, group: &PositiveGroup, weights: &[f64]) {
        let Some(label) = labels.get(&group.doc_id) else { return };
        let (qs, qe) = group.span_offsets[0];
        let q_topic = label.majority_topic(qs, qe);
        for (&(s, e), &w) in group.span_offsets[1..].iter().zip(weights) {
            if label.majority_topic(s, e) == q_topic {
                self.same_sum += w;
                self.same_pairs += 1;
            } else {
                self.cross_sum += w;
                self.cross_pairs += 1;
            }
        }
    }

    pub fn cross_mean(&self) -> Option<f64> {
        (self.cross_pairs > 0).then(|| self.cross_sum / self.cross_pairs as f64)
    }

    pub fn same_mean(&self) -> Option<f64> {
        (self.same_pairs > 0).then(|| self.same_sum / self.same_pairs as f64)
    }
}

fn groups_for(batch: &[(&str, &TokenSeq)], crop: &CropConfig, seed: u64, step: u64) -> Vec<PositiveGroup> {
    let made: Vec<Option<PositiveGroup>> = batch
        .par_iter()
        .map(|&(id, seq)| make_group(id, seq, crop, &mut doc_rng(seed, step, id)).ok())
        .collect();
    let mut groups = Vec::with_capacity(made.len());
    for (g, (id, seq)) in made.into_iter().zip(batch) {
        match g {
            Some(g) => groups.push(g),
            None => debug!("step {step}: skipping {id:?} ({} tokens, too short to crop)", seq.len()),
        }
    }
    groups
}

/// One optimizer step on `batch`.
pub fn train_step(
    state: &mut TrainState,
    batch: &[(&str, &TokenSeq)],
    cfg: &TrainConfig,
    labels: Option<&Labels>,
) -> Result<StepMetrics> {
    let step = state.step;
    let lr = lr_at(step, cfg)?;
    let groups = groups_for(batch, &cfg.crop, cfg.seed, step);
    if groups.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if cfg.negatives == NegativesMode::InBatch && groups.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "step {step}: in-batch negatives need at least two croppable documents"
        )));
    }
    let source = match (&state.momentum, &state.queue) {
        (Some(momentum), Some(queue)) if cfg.negatives == NegativesMode::Moco => NegativeSource::Moco {
            momentum: &momentum.table,
            queue,
        },
        _ if cfg.negatives == NegativesMode::InBatch => NegativeSource::InBatch,
        _ => return Err(Error::Config("moco training needs a momentum table and a queue".into())),
    };
    let problem = ContrastiveProblem::from_batch(&state.params, &groups, source)?;
    let fwd = problem.forward(&state.params, &cfg.loss)?;
    if !fwd.loss.is_finite() {
        return Err(Error::NonFinite("training loss"));
    }
    let grad = problem.backward(&state.params, &cfg.loss, &fwd)?;

    let mut w_sum = 0.0;
    let mut w_count = 0usize;
    let mut w_min = f64::INFINITY;
    let mut w_max = f64::NEG_INFINITY;
    let mut topics = TopicWeights::default();
    for (g, sg) in groups.iter().zip(&fwd.scored) {
        let w = relevance_weights(&sg.weight_scores, cfg.loss.weight_floor);
        for &x in &w {
            w_sum += x;
            w_min = w_min.min(x);
            w_max = w_max.max(x);
        }
        w_count += w.len();
        if let Some(labels) = labels {
            topics.add(labels, g, &w);
        }
    }

    // Keys for the queue come from the momentum table as it was in the forward pass.
    let keys: Vec<Embedding> = match cfg.negatives {
        NegativesMode::Moco => problem
            .groups()
            .iter()
            .flat_map(|g| g.positives.iter())
            .map(|&node| Embedding(problem.node_value(&fwd, node).to_vec()))
            .collect(),
        NegativesMode::InBatch => Vec::new(),
    };

    state.optimizer.apply(&mut state.params, &grad, lr, &cfg.adam);
    state.touched.extend(grad.rows().map(|(t, _)| t));
    if let Some(momentum) = state.momentum.as_mut() {
        momentum.update_rows(&state.params, state.touched.iter().copied())?;
    }
    if let Some(queue) = state.queue.as_mut() {
        queue.enqueue(keys)?;
    }
    state.step += 1;

    Ok(StepMetrics {
        step,
        loss: fwd.loss,
        lr,
        w_mean: w_sum / w_count as f64,
        w_min,
        w_max,
        w_cross_topic: topics.cross_mean(),
        w_same_topic: topics.same_mean(),
        groups: groups.len(),
        grad_max_abs: grad.max_abs(),
    })
}

/// Tokenized documents that can be cropped under the config, in corpus order.
pub struct TrainingCorpus {
    docs: Vec<(String, TokenSeq)>,
}

impl TrainingCorpus {
    pub fn new(corpus: &[Document], cfg: &TrainConfig) -> Result<Self> {
        let tokenized: Vec<Option<TokenSeq>> = corpus
            .par_iter()
            .map(|d| tokenize(&d.text, cfg.vocab_size).ok())
            .collect();
        let mut docs = Vec::with_capacity(corpus.len());
        let mut skipped = 0usize;
        for (d, seq) in corpus.iter().zip(tokenized) {
            match seq {
                Some(seq) if cfg.crop.is_croppable(seq.len()) => docs.push((d.id.clone(), seq)),
                _ => skipped += 1,
            }
        }
        if skipped > 0 {
            warn!("{skipped} of {} documents are too short to crop and are skipped", corpus.len());
        }
        if docs.is_empty() {
            return Err(Error::EmptyBatch);
        }
        Ok(Self { docs })
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    /// Full batches per epoch; a corpus smaller than one batch forms a single
    /// short batch.
    pub fn batches_per_epoch(&self, m: usize) -> usize {
        (self.docs.len() / m).max(1)
    }
}

/// Per-epoch permutations of the training corpus.
struct Batcher {
    seed: u64,
    m: usize,
    count: usize,
    cached: Option<(u64, Vec<usize>)>,
}

impl Batcher {
    fn new(seed: u64, m: usize, count: usize) -> Self {
        Self {
            seed,
            m,
            count,
            cached: None,
        }
    }

    fn permutation(seed: u64, epoch: u64, count: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(epoch);
        let mut order: Vec<usize> = (0..count).collect();
        order.shuffle(&mut rng);
        order
    }

    fn batch(&mut self, step: u64) -> &[usize] {
        let per_epoch = (self.count / self.m).max(1) as u64;
        let epoch = step / per_epoch;
        let slot = (step % per_epoch) as usize;
        if self.cached.as_ref().map(|c| c.0) != Some(epoch) {
            self.cached = Some((epoch, Self::permutation(self.seed, epoch, self.count)));
        }
        let order = &self.cached.as_ref().expect("just filled").1;
        let width = self.m.min(self.count);
        &order[slot * width..(slot + 1) * width]
    }
}

pub type StepHook<'h> = Box<dyn FnMut(&StepMetrics) -> Result<()> + 'h>;
pub type CheckpointHook<'h> = Box<dyn FnMut(&TrainState) -> Result<()> + 'h>;

/// Callbacks invoked by [`train_until`].
#[derive(Default)]
pub struct Hooks<'h> {
    pub on_step: Option<StepHook<'h>>,
    /// Called after every `checkpoint_every` steps and once more at the end.
    pub on_checkpoint: Option<CheckpointHook<'h>>,
}

/// Runs from `state.step` up to (excluding) `stop_at`, capped at `total_steps`.
pub fn train_until(
    corpus: &TrainingCorpus,
    cfg: &TrainConfig,
    state: &mut TrainState,
    stop_at: u64,
    labels: Option<&Labels>,
    hooks: &mut Hooks<'_>,
) -> Result<()> {
    cfg.validate()?;
    state.check_against(cfg)?;
    let stop_at = stop_at.min(cfg.total_steps);
    let mut batcher = Batcher::new(cfg.seed, cfg.batch_groups, corpus.len());
    while state.step < stop_at {
        let batch: Vec<(&str, &TokenSeq)> = batcher
            .batch(state.step)
            .iter()
            .map(|&i| (corpus.docs[i].0.as_str(), &corpus.docs[i].1))
            .collect();
        let metrics = train_step(state, &batch, cfg, labels)?;
        if let Some(f) = hooks.on_step.as_mut() {
            f(&metrics)?;
        }
        if state.step.is_multiple_of(cfg.checkpoint_every) && state.step < stop_at {
            if let Some(f) = hooks.on_checkpoint.as_mut() {
                f(state)?;
            }
        }
    }
    if let Some(f) = hooks.on_checkpoint.as_mut() {
        f(state)?;
    }
    Ok(())
}

/// Full run from a fresh initialization.
pub fn pretrain(
    corpus: &[Document],
    cfg: &TrainConfig,
    labels: Option<&Labels>,
    hooks: &mut Hooks<'_>,
) -> Result<TrainState> {
    let mut state = TrainState::init(cfg)?;
    if cfg.total_steps == 0 {
        return Ok(state);
    }
    let corpus = TrainingCorpus::new(corpus, cfg)?;
    train_until(&corpus, cfg, &mut state, cfg.total_steps, labels, hooks)?;
    Ok(state)
}

/// Continues an interrupted run to `total_steps`.
pub fn resume(
    corpus: &[Document],
    cfg: &TrainConfig,
    mut state: TrainState,
    labels: Option<&Labels>,
    hooks: &mut Hooks<'_>,
) -> Result<TrainState> {
    if state.step >= cfg.total_steps {
        return Ok(state);
    }
    let corpus = TrainingCorpus::new(corpus, cfg)?;
    train_until(&corpus, cfg, &mut state, cfg.total_steps, labels, hooks)?;
    Ok(state)
}

/// Further pre-training of existing parameters on a target corpus with a
/// fresh schedule, optimizer, momentum copy and queue. Zero steps returns the
/// parameters untouched.
pub fn continue_pretrain(
    params: &EncoderParams,
    target: &[Document],
    cfg: &TrainConfig,
    labels: Option<&Labels>,
    hooks: &mut Hooks<'_>,
) -> Result<TrainState> {
    let mut cfg = cfg.clone();
    cfg.vocab_size = params.vocab();
    cfg.dim = params.dim();
    cfg.normalize = params.normalize;
    cfg.validate()?;
    let mut state = TrainState::from_params(params.clone(), &cfg)?;
    if cfg.total_steps == 0 {
        return Ok(state);
    }
    let corpus = TrainingCorpus::new(target, &cfg)?;
    train_until(&corpus, &cfg, &mut state, cfg.total_steps, labels, hooks)?;
    Ok(state)
}

/// Mean self-estimated relevance weight of cross-topic and same-topic pairs
/// over a labelled corpus, with `rounds` crop draws per document.
pub fn relevance_diagnostics(
    params: &EncoderParams,
    corpus: &[Document],
    labels: &Labels,
    crop: &CropConfig,
    weight_floor: f64,
    seed: u64,
    rounds: u64,
) -> Result<TopicWeights> {
    let per_doc: Vec<TopicWeights> = corpus
        .par_iter()
        .map(|doc| -> Result<TopicWeights> {
            let mut acc = TopicWeights::default();
            let Ok(seq) = tokenize(&doc.text, params.vocab()) else {
                return Ok(acc);
            };
            for round in 0..rounds {
                let Ok(group) = make_group(&doc.id, &seq, crop, &mut doc_rng(seed, u64::MAX - round, &doc.id)) else {
                    break;
                };
                let q = encode(params, &group.query)?;
                let scores: Vec<f64> = group
                    .positives
                    .iter()
                    .map(|p| encode(params, p).map(|e| crate::encoder::dot(&q.0, &e.0)))
                    .collect::<Result<_>>()?;
                acc.add(labels, &group, &relevance_weights(&scores, weight_floor));
            }
            Ok(acc)
        })
        .collect::<Result<_>>()?;
    let mut total = TopicWeights::default();
    for w in per_doc {
        total.cross_sum += w.cross_sum;
        total.cross_pairs += w.cross_pairs;
        total.same_sum += w.same_sum;
        total.same_pairs += w.same_pairs;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_fixtures() {
        let cfg = TrainConfig {
            total_steps: 2000,
            warmup_steps: 200,
            peak_lr: 0.05,
            ..TrainConfig::default()
        };
        assert_eq!(lr_at(0, &cfg).unwrap(), 0.0);
        assert_eq!(lr_at(200, &cfg).unwrap(), 0.05);
        assert!((lr_at(100, &cfg).unwrap() - 0.025).abs() < 1e-15);
        assert!((lr_at(1999, &cfg).unwrap() - 0.05 / 1800.0).abs() < 1e-15);
        assert!(lr_at(2000, &cfg).is_err());
        // continuity at the junction: the ramp's limit equals the decay's start
        let ramp_limit = cfg.peak_lr * 200.0 / 200.0;
        assert_eq!(ramp_limit, lr_at(200, &cfg).unwrap());
    }

    #[test]
    fn schedule_without_warmup_starts_at_peak() {
        let cfg = TrainConfig {
            total_steps: 10,
            warmup_steps: 0,
            ..TrainConfig::default()
        };
        assert_eq!(lr_at(0, &cfg).unwrap(), cfg.peak_lr);
    }

    #[test]
    fn batches_cover_each_epoch_once() {
        let mut b = Batcher::new(3, 4, 10);
        let mut seen: Vec<usize> = (0..2).flat_map(|s| b.batch(s).to_vec()).collect();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), 8);
        let first_epoch = b.batch(0).to_vec();
        assert_ne!(b.batch(2).to_vec(), first_epoch);
    }

    #[test]
    fn small_corpus_forms_one_batch() {
        let mut b = Batcher::new(0, 8, 3);
        assert_eq!(b.batch(5).len(), 3);
    }
}
