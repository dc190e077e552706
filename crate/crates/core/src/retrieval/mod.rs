//! Exact dense retrieval, ranking metrics, BM25 and paired significance tests.

mod bm25;
mod index;
mod metrics;
mod trec;
mod ttest;

use std::collections::BTreeMap;

pub use bm25::{bm25_run, Bm25Index, Bm25Stats, DEFAULT_B, DEFAULT_K1};
pub use index::{build_index, dense_run, read_index, search, write_index, DenseIndex};
pub use metrics::{ndcg_at_k, recall_at_k, Metric, MetricResult};
pub use trec::{
    format_qrels, format_run, parse_qrels, parse_run, read_qrels, read_run, write_qrels,
    write_run,
};
pub use ttest::{paired_t_test, TTest};

/// `query_id -> (doc_id -> gain)`.
pub type Qrels = BTreeMap<String, BTreeMap<String, u32>>;

/// `query_id -> [(doc_id, score)]` ranked best first.
pub type RankedRun = BTreeMap<String, Vec<(String, f64)>>;

/// Descending score, ties by ascending doc id.
pub fn rank_order(a: &(String, f64), b: &(String, f64)) -> std::cmp::Ordering {
    b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0))
}

/// Sorts under [`rank_order`] and keeps the first `k`.
pub fn top_k(mut scored: Vec<(String, f64)>, k: usize) -> Vec<(String, f64)> {
    scored.sort_by(rank_order);
    scored.truncate(k);
    scored
}
