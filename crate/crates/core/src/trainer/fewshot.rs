//! Supervised fine-tuning from a handful of labelled queries, with BM25 hard
//! negatives mined once up front and in-batch sharing of every document.

use std::collections::{BTreeMap, HashMap};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{FewshotConfig, FewshotExample};
use super::OptimizerState;
use crate::corpus::{surface_tokens, tokenize, Document, TokenSeq};
use crate::encoder::{ContrastiveProblem, EncoderParams, Node, ProblemGroup};
use crate::error::{Error, Result};
use crate::loss::{LossConfig, LossMode};
use crate::retrieval::Bm25Index;

/// Top BM25 documents for each example's query, never including its gold.
pub fn mine_fewshot_negatives(
    bm25: &Bm25Index,
    examples: &[FewshotExample],
    count: usize,
) -> Result<Vec<Vec<String>>> {
    examples
        .iter()
        .map(|ex| {
            let terms: Vec<String> = surface_tokens(&ex.query).collect();
            bm25.mine_negatives(&terms, &ex.positive, count)
        })
        .collect()
}

fn check_golds(corpus: &[Document], examples: &[FewshotExample]) -> Result<()> {
    let ids: std::collections::HashSet<&str> = corpus.iter().map(|d| d.id.as_str()).collect();
    for ex in examples {
        if !ids.contains(ex.positive.as_str()) {
            return Err(Error::MissingGold {
                query: ex.query.clone(),
                doc_id: ex.positive.clone(),
            });
        }
    }
    Ok(())
}

pub fn fewshot_finetune(params: &EncoderParams, corpus: &[Document], fcfg: &FewshotConfig) -> Result<EncoderParams> {
    fcfg.validate()?;
    check_golds(corpus, &fcfg.examples)?;
    if fcfg.epochs == 0 {
        return Ok(params.clone());
    }
    if fcfg.examples.is_empty() {
        return Err(Error::InvalidArgument("few-shot fine-tuning needs at least one example".into()));
    }
    let bm25 = Bm25Index::build(corpus)?;
    let negatives = mine_fewshot_negatives(&bm25, &fcfg.examples, fcfg.negatives_per_query)?;

    let vocab = params.vocab();
    let texts: HashMap<&str, &str> = corpus.iter().map(|d| (d.id.as_str(), d.text.as_str())).collect();
    let mut docs: BTreeMap<&str, TokenSeq> = BTreeMap::new();
    for (ex, negs) in fcfg.examples.iter().zip(&negatives) {
        for id in std::iter::once(&ex.positive).chain(negs) {
            if !docs.contains_key(id.as_str()) {
                let seq = tokenize(texts[id.as_str()], vocab)
                    .map_err(|e| Error::InvalidArgument(format!("document {id:?}: {e}")))?;
                docs.insert(id.as_str(), seq);
            }
        }
    }
    let queries: Vec<TokenSeq> = fcfg
        .examples
        .iter()
        .map(|ex| {
            tokenize(&ex.query, vocab).map_err(|e| Error::InvalidArgument(format!("query {:?}: {e}", ex.query)))
        })
        .collect::<Result<_>>()?;

    let loss_cfg = LossConfig {
        tau: fcfg.tau,
        mode: LossMode::Uniform,
        ..LossConfig::default()
    };
    let mut params = params.clone();
    let mut sgd = OptimizerState::Sgd;
    let adam = super::AdamConfig::default();
    for epoch in 0..fcfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(fcfg.seed);
        rng.set_stream(epoch as u64);
        let mut order: Vec<usize> = (0..fcfg.examples.len()).collect();
        order.shuffle(&mut rng);
        for chunk in order.chunks(fcfg.batch_size) {
            let mut problem = ContrastiveProblem::new();
            let query_nodes: Vec<Node> = chunk.iter().map(|&i| problem.add_live(queries[i].clone())).collect();
            // every gold and mined negative of the batch, each encoded once
            let mut doc_nodes: Vec<(&str, Node)> = Vec::new();
            for &i in chunk {
                let ex = &fcfg.examples[i];
                for id in std::iter::once(&ex.positive).chain(&negatives[i]) {
                    if !doc_nodes.iter().any(|(d, _)| *d == id.as_str()) {
                        let node = problem.add_live(docs[id.as_str()].clone());
                        doc_nodes.push((id.as_str(), node));
                    }
                }
            }
            for (&i, &query) in chunk.iter().zip(&query_nodes) {
                let gold = fcfg.examples[i].positive.as_str();
                let positive = doc_nodes.iter().find(|(d, _)| *d == gold).expect("gold added").1;
                problem.add_group(ProblemGroup {
                    doc_id: gold.to_string(),
                    query,
                    positives: vec![positive],
                    negatives: doc_nodes.iter().filter(|(d, _)| *d != gold).map(|&(_, n)| n).collect(),
                });
            }
            let fwd = problem.forward(&params, &loss_cfg)?;
            if !fwd.loss.is_finite() {
                return Err(Error::NonFinite("few-shot loss"));
            }
            let grad = problem.backward(&params, &loss_cfg, &fwd)?;
            sgd.apply(&mut params, &grad, fcfg.lr, &adam);
        }
    }
    Ok(params)
}
