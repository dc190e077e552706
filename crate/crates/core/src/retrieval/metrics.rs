use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use super::{Qrels, RankedRun};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Ndcg(usize),
    Recall(usize),
}

impl Metric {
    pub fn evaluate(&self, run: &RankedRun, qrels: &Qrels) -> Result<MetricResult> {
        match *self {
            Metric::Ndcg(k) => ndcg_at_k(run, qrels, k),
            Metric::Recall(k) => recall_at_k(run, qrels, k),
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Metric::Ndcg(k) => write!(f, "ndcg@{k}"),
            Metric::Recall(k) => write!(f, "recall@{k}"),
        }
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("unknown metric {s:?} (expected ndcg@k or recall@k)"));
        let (name, k) = s.split_once('@').ok_or_else(bad)?;
        let k: usize = k.parse().map_err(|_| bad())?;
        if k == 0 {
            return Err(bad());
        }
        match name.to_ascii_lowercase().as_str() {
            "ndcg" => Ok(Metric::Ndcg(k)),
            "recall" => Ok(Metric::Recall(k)),
            _ => Err(bad()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricResult {
    pub per_query: BTreeMap<String, f64>,
    pub mean: f64,
}

/// Queries that have at least one positive judgment. A run query missing
/// from the qrels is an error; a judged query missing from the run scores 0.
fn evaluated_queries<'a>(run: &RankedRun, qrels: &'a Qrels) -> Result<Vec<(&'a String, &'a BTreeMap<String, u32>)>> {
    if let Some(q) = run.keys().find(|q| !qrels.contains_key(*q)) {
        return Err(Error::MissingQrels(q.clone()));
    }
    Ok(qrels
        .iter()
        .filter(|(_, rel)| rel.values().any(|&g| g > 0))
        .collect())
}

fn aggregate(per_query: BTreeMap<String, f64>) -> MetricResult {
    let mean = if per_query.is_empty() {
        0.0
    } else {
        per_query.values().sum::<f64>() / per_query.len() as f64
    };
    MetricResult { per_query, mean }
}

fn gain(g: u32) -> f64 {
    2f64.powi(g as i32) - 1.0
}

/// NDCG with gain `2^g - 1` and discount `log2(rank + 1)`.
pub fn ndcg_at_k(run: &RankedRun, qrels: &Qrels, k: usize) -> Result<MetricResult> {
    let mut per_query = BTreeMap::new();
    for (qid, rel) in evaluated_queries(run, qrels)? {
        let ranking = run.get(qid).map(Vec::as_slice).unwrap_or_default();
        let dcg: f64 = ranking
            .iter()
            .take(k)
            .enumerate()
            .map(|(i, (doc, _))| gain(rel.get(doc).copied().unwrap_or(0)) / ((i + 2) as f64).log2())
            .sum();
        let mut ideal: Vec<u32> = rel.values().copied().collect();
        ideal.sort_unstable_by(|a, b| b.cmp(a));
        let idcg: f64 = ideal
            .iter()
            .take(k)
            .enumerate()
            .map(|(i, &g)| gain(g) / ((i + 2) as f64).log2())
            .sum();
        per_query.insert(qid.clone(), dcg / idcg);
    }
    Ok(aggregate(per_query))
}

/// Fraction of positive-gain documents found in the top `k`.
pub fn recall_at_k(run: &RankedRun, qrels: &Qrels, k: usize) -> Result<MetricResult> {
    let mut per_query = BTreeMap::new();
    for (qid, rel) in evaluated_queries(run, qrels)? {
        let relevant = rel.values().filter(|&&g| g > 0).count();
        let ranking = run.get(qid).map(Vec::as_slice).unwrap_or_default();
        let found = ranking
            .iter()
            .take(k)
            .filter(|(doc, _)| rel.get(doc).is_some_and(|&g| g > 0))
            .count();
        per_query.insert(qid.clone(), found as f64 / relevant as f64);
    }
    Ok(aggregate(per_query))
}
