//! Synthetic end-to-end runs: pre-train an arm on a generated corpus, index
//! it, score held-out queries, and measure how the learned relevance weights
//! split between same-topic and cross-topic crops.

use std::collections::BTreeSet;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{Document, SyntheticCorpus};
use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::retrieval::{build_index, dense_run, Metric, MetricResult, Qrels};
use crate::trainer::{
    fewshot_finetune, pretrain, relevance_diagnostics, FewshotConfig, FewshotExample, Hooks, StepMetrics,
    TopicWeights, TrainConfig,
};

/// Crop draws per document when measuring topic weights after training.
pub const DIAGNOSTIC_ROUNDS: u64 = 4;

/// Training config for the synthetic corpus.
///
/// The queue holds fewer keys than one epoch produces (800 documents x 4
/// positives), so a document's own stale crops never act as its negatives,
/// and the softer temperature lets topic structure form within 2,000 steps.
pub fn synthetic_config(seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig {
        seed,
        queue_capacity: 512,
        ..TrainConfig::default()
    };
    cfg.loss.tau = 0.5;
    cfg
}

#[derive(Debug, Clone)]
pub struct ArmReport {
    pub params: EncoderParams,
    pub ndcg10: MetricResult,
    pub topic_weights: TopicWeights,
    pub metrics: Vec<StepMetrics>,
    pub elapsed: Duration,
}

impl ArmReport {
    pub fn losses(&self) -> Vec<f64> {
        self.metrics.iter().map(|m| m.loss).collect()
    }
}

pub fn evaluate_dense(
    params: &EncoderParams,
    corpus: &[Document],
    queries: &[Document],
    qrels: &Qrels,
    metric: Metric,
) -> Result<MetricResult> {
    let index = build_index(params, corpus)?;
    let k = match metric {
        Metric::Ndcg(k) | Metric::Recall(k) => k,
    };
    metric.evaluate(&dense_run(params, &index, queries, k)?, qrels)
}

/// Pre-trains one configuration on the synthetic corpus and evaluates it.
pub fn run_arm(data: &SyntheticCorpus, cfg: &TrainConfig) -> Result<ArmReport> {
    let start = Instant::now();
    let mut metrics = Vec::with_capacity(cfg.total_steps as usize);
    let state = {
        let mut hooks = Hooks {
            on_step: Some(Box::new(|m: &StepMetrics| {
                metrics.push(m.clone());
                Ok(())
            })),
            on_checkpoint: None,
        };
        pretrain(&data.corpus, cfg, Some(&data.labels), &mut hooks)?
    };
    let ndcg10 = evaluate_dense(&state.params, &data.corpus, &data.queries, &data.qrels, Metric::Ndcg(10))?;
    let topic_weights = relevance_diagnostics(
        &state.params,
        &data.corpus,
        &data.labels,
        &cfg.crop,
        cfg.loss.weight_floor,
        cfg.seed,
        DIAGNOSTIC_ROUNDS,
    )?;
    Ok(ArmReport {
        params: state.params,
        ndcg10,
        topic_weights,
        metrics,
        elapsed: start.elapsed(),
    })
}

/// Labelled examples drawn from the synthetic queries, plus the held-out rest.
#[derive(Debug, Clone)]
pub struct FewshotSplit {
    pub examples: Vec<FewshotExample>,
    pub held_out: Vec<Document>,
    pub held_out_qrels: Qrels,
}

/// Picks `count` queries spread round-robin over topics; each gets one
/// relevant document chosen at random as its gold.
pub fn fewshot_split(data: &SyntheticCorpus, count: usize, seed: u64) -> Result<FewshotSplit> {
    if count >= data.queries.len() {
        return Err(Error::InvalidArgument(format!(
            "need fewer labelled queries ({count}) than queries ({})",
            data.queries.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let topics = data.topic_tokens.len();
    let mut by_topic: Vec<Vec<&Document>> = vec![Vec::new(); topics];
    for q in &data.queries {
        by_topic[data.query_topics[&q.id]].push(q);
    }
    for list in &mut by_topic {
        list.shuffle(&mut rng);
    }
    let mut chosen = BTreeSet::new();
    let mut examples = Vec::with_capacity(count);
    let mut round = 0;
    while examples.len() < count {
        for list in &by_topic {
            if examples.len() == count {
                break;
            }
            let Some(q) = list.get(round) else { continue };
            let relevant: Vec<&String> = data.qrels[&q.id]
                .iter()
                .filter(|(_, &g)| g > 0)
                .map(|(d, _)| d)
                .collect();
            let gold = relevant
                .choose(&mut rng)
                .ok_or_else(|| Error::InvalidArgument(format!("query {:?} has no relevant document", q.id)))?;
            chosen.insert(q.id.clone());
            examples.push(FewshotExample {
                query: q.text.clone(),
                positive: (*gold).clone(),
            });
        }
        round += 1;
    }
    let held_out: Vec<Document> = data
        .queries
        .iter()
        .filter(|q| !chosen.contains(&q.id))
        .cloned()
        .collect();
    let held_out_qrels = held_out
        .iter()
        .map(|q| (q.id.clone(), data.qrels[&q.id].clone()))
        .collect();
    Ok(FewshotSplit {
        examples,
        held_out,
        held_out_qrels,
    })
}

#[derive(Debug, Clone)]
pub struct FewshotReport {
    pub before: MetricResult,
    pub after: MetricResult,
    /// Whether any mined negative was a gold document.
    pub gold_in_negatives: bool,
}

/// Held-out Recall@20 before and after few-shot fine-tuning.
pub fn run_fewshot(
    params: &EncoderParams,
    data: &SyntheticCorpus,
    split: &FewshotSplit,
    fcfg: &FewshotConfig,
) -> Result<FewshotReport> {
    let metric = Metric::Recall(20);
    let before = evaluate_dense(params, &data.corpus, &split.held_out, &split.held_out_qrels, metric)?;
    let cfg = FewshotConfig {
        examples: split.examples.clone(),
        ..fcfg.clone()
    };
    let bm25 = crate::retrieval::Bm25Index::build(&data.corpus)?;
    let negatives = crate::trainer::mine_fewshot_negatives(&bm25, &cfg.examples, cfg.negatives_per_query)?;
    let gold_in_negatives = cfg
        .examples
        .iter()
        .zip(&negatives)
        .any(|(ex, negs)| negs.contains(&ex.positive));
    let tuned = fewshot_finetune(params, &data.corpus, &cfg)?;
    let after = evaluate_dense(&tuned, &data.corpus, &split.held_out, &split.held_out_qrels, metric)?;
    Ok(FewshotReport {
        before,
        after,
        gold_in_negatives,
    })
}

/// Small random batch for finite-difference checks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckSetup {
    pub vocab: usize,
    pub dim: usize,
    /// Documents (groups) in the batch.
    pub m: usize,
    /// Positives per document.
    pub n: usize,
    pub doc_len: usize,
    /// Queue entries in moco mode.
    pub queue_len: usize,
    pub seed: u64,
}

impl Default for GradcheckSetup {
    fn default() -> Self {
        Self {
            vocab: 64,
            dim: 8,
            m: 2,
            n: 4,
            doc_len: 40,
            queue_len: 16,
            seed: 0,
        }
    }
}

/// Everything a gradient check needs, kept alive together.
#[derive(Debug, Clone)]
pub struct GradcheckFixture {
    pub params: EncoderParams,
    pub batch: Vec<crate::augment::PositiveGroup>,
    /// Live table plus a small perturbation.
    pub momentum: crate::encoder::Table,
    pub queue: crate::negatives::NegativeQueue,
}

impl GradcheckFixture {
    pub fn new(setup: &GradcheckSetup) -> Result<Self> {
        use rand::Rng;

        use crate::augment::{make_group, CropConfig};
        use crate::corpus::TokenSeq;
        use crate::encoder::Embedding;

        let mut rng = ChaCha8Rng::seed_from_u64(setup.seed);
        let params = EncoderParams::init(setup.vocab, setup.dim, true, 0.5, setup.seed)?;
        let crop = CropConfig {
            n: setup.n,
            min_span_tokens: 4,
            ..CropConfig::default()
        };
        let mut batch = Vec::with_capacity(setup.m);
        for i in 0..setup.m {
            let tokens = (0..setup.doc_len).map(|_| rng.gen_range(0..setup.vocab as u32)).collect();
            let doc = TokenSeq::new(tokens, setup.vocab)?;
            let group = make_group(&format!("doc{i}"), &doc, &crop, &mut rng)
                .map_err(|e| Error::InvalidArgument(format!("fixture document too short: {e:?}")))?;
            batch.push(group);
        }
        let mut momentum = params.table.clone();
        for x in momentum.data_mut() {
            *x += rng.gen_range(-0.05..0.05);
        }
        let mut queue = crate::negatives::NegativeQueue::new(setup.queue_len.max(1), setup.dim)?;
        let entries: Vec<Embedding> = (0..setup.queue_len)
            .map(|_| {
                let v: Vec<f64> = (0..setup.dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                Embedding(v.into_iter().map(|x| x / norm).collect())
            })
            .collect();
        queue.enqueue(entries)?;
        Ok(Self {
            params,
            batch,
            momentum,
            queue,
        })
    }

    pub fn source(&self, mode: crate::negatives::NegativesMode) -> crate::encoder::NegativeSource<'_> {
        match mode {
            crate::negatives::NegativesMode::InBatch => crate::encoder::NegativeSource::InBatch,
            crate::negatives::NegativesMode::Moco => crate::encoder::NegativeSource::Moco {
                momentum: &self.momentum,
                queue: &self.queue,
            },
        }
    }

    pub fn check(
        &self,
        cfg: &crate::loss::LossConfig,
        mode: crate::negatives::NegativesMode,
        eps: f64,
    ) -> Result<crate::encoder::GradCheckReport> {
        crate::encoder::check_gradients(&self.params, &self.batch, cfg, self.source(mode), eps, 0)
    }
}
