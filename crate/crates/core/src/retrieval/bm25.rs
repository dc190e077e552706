//! Okapi BM25 over lowercased surface words.
//!
//! score(q, d) = sum over distinct query terms t of
//!   idf(t) * tf * (k1 + 1) / (tf + k1 * (1 - b + b * len / avg_len))
//! with idf(t) = ln(1 + (N - df + 0.5) / (df + 0.5)), which never goes negative.

use std::collections::{BTreeSet, HashMap};

use super::{top_k, RankedRun};
use crate::corpus::{surface_tokens, Document};
use crate::error::{Error, Result};

pub const DEFAULT_K1: f64 = 1.2;
pub const DEFAULT_B: f64 = 0.75;

#[derive(Debug, Clone)]
pub struct Bm25Stats {
    pub doc_freq: HashMap<String, usize>,
    pub doc_len: HashMap<String, usize>,
    pub avg_len: f64,
    pub n: usize,
    pub k1: f64,
    pub b: f64,
}

impl Bm25Stats {
    pub fn idf(&self, df: usize) -> f64 {
        let n = self.n as f64;
        let df = df as f64;
        (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
    }

    fn term_weight(&self, tf: u32, len: usize) -> f64 {
        let tf = f64::from(tf);
        let norm = 1.0 - self.b + self.b * len as f64 / self.avg_len;
        tf * (self.k1 + 1.0) / (tf + self.k1 * norm)
    }
}

#[derive(Debug, Clone)]
pub struct Bm25Index {
    stats: Bm25Stats,
    doc_ids: Vec<String>,
    positions: HashMap<String, usize>,
    postings: HashMap<String, Vec<(usize, u32)>>,
}

fn distinct_terms(query_terms: &[String]) -> BTreeSet<&str> {
    query_terms.iter().map(String::as_str).collect()
}

impl Bm25Index {
    pub fn build(corpus: &[Document]) -> Result<Self> {
        Self::with_params(corpus, DEFAULT_K1, DEFAULT_B)
    }

    pub fn with_params(corpus: &[Document], k1: f64, b: f64) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::InvalidArgument("cannot build BM25 over an empty corpus".into()));
        }
        let mut doc_freq: HashMap<String, usize> = HashMap::new();
        let mut doc_len = HashMap::new();
        let mut positions = HashMap::new();
        let mut postings: HashMap<String, Vec<(usize, u32)>> = HashMap::new();
        let mut total_len = 0usize;
        for (i, doc) in corpus.iter().enumerate() {
            let mut tf: HashMap<String, u32> = HashMap::new();
            let mut len = 0usize;
            for term in surface_tokens(&doc.text) {
                *tf.entry(term).or_default() += 1;
                len += 1;
            }
            // sorted so postings lists are built in a fixed order
            let mut terms: Vec<(String, u32)> = tf.into_iter().collect();
            terms.sort_unstable();
            for (term, count) in terms {
                *doc_freq.entry(term.clone()).or_default() += 1;
                postings.entry(term).or_default().push((i, count));
            }
            total_len += len;
            doc_len.insert(doc.id.clone(), len);
            if positions.insert(doc.id.clone(), i).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate document id {:?}", doc.id)));
            }
        }
        let avg_len = total_len as f64 / corpus.len() as f64;
        if avg_len <= 0.0 {
            return Err(Error::InvalidArgument("corpus has no terms".into()));
        }
        Ok(Self {
            stats: Bm25Stats {
                doc_freq,
                doc_len,
                avg_len,
                n: corpus.len(),
                k1,
                b,
            },
            doc_ids: corpus.iter().map(|d| d.id.clone()).collect(),
            positions,
            postings,
        })
    }

    pub fn stats(&self) -> &Bm25Stats {
        &self.stats
    }

    pub fn len(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.doc_ids.is_empty()
    }

    pub fn contains(&self, doc_id: &str) -> bool {
        self.positions.contains_key(doc_id)
    }

    pub fn score(&self, query_terms: &[String], doc_id: &str) -> Result<f64> {
        let &pos = self
            .positions
            .get(doc_id)
            .ok_or_else(|| Error::UnknownDocument(doc_id.to_string()))?;
        let len = self.stats.doc_len[doc_id];
        let mut score = 0.0;
        for term in distinct_terms(query_terms) {
            let Some(list) = self.postings.get(term) else { continue };
            if let Ok(k) = list.binary_search_by_key(&pos, |&(d, _)| d) {
                score += self.stats.idf(list.len()) * self.stats.term_weight(list[k].1, len);
            }
        }
        Ok(score)
    }

    fn all_scores(&self, query_terms: &[String]) -> Vec<f64> {
        let mut scores = vec![0.0; self.doc_ids.len()];
        for term in distinct_terms(query_terms) {
            let Some(list) = self.postings.get(term) else { continue };
            let idf = self.stats.idf(list.len());
            for &(d, tf) in list {
                scores[d] += idf * self.stats.term_weight(tf, self.stats.doc_len[&self.doc_ids[d]]);
            }
        }
        scores
    }

    /// Every document ranked under the shared tie rule, truncated to `k`.
    pub fn search(&self, query_terms: &[String], k: usize) -> Vec<(String, f64)> {
        let scored = self
            .doc_ids
            .iter()
            .cloned()
            .zip(self.all_scores(query_terms))
            .collect();
        top_k(scored, k)
    }

    /// Top-`count` BM25 documents other than `gold_doc_id`.
    pub fn mine_negatives(&self, query_terms: &[String], gold_doc_id: &str, count: usize) -> Result<Vec<String>> {
        if count == 0 {
            return Err(Error::InvalidArgument("negative count must be >= 1".into()));
        }
        if !self.contains(gold_doc_id) {
            return Err(Error::UnknownDocument(gold_doc_id.to_string()));
        }
        Ok(self
            .search(query_terms, self.len())
            .into_iter()
            .map(|(d, _)| d)
            .filter(|d| d != gold_doc_id)
            .take(count)
            .collect())
    }
}

/// BM25 top-`k` for every query over its surface words.
pub fn bm25_run(index: &Bm25Index, queries: &[Document], k: usize) -> RankedRun {
    queries
        .iter()
        .map(|q| {
            let terms: Vec<String> = surface_tokens(&q.text).collect();
            (q.id.clone(), index.search(&terms, k))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn terms(q: &str) -> Vec<String> {
        surface_tokens(q).collect()
    }

    fn tiny() -> Bm25Index {
        Bm25Index::build(&[
            Document::new("d1", "a b"),
            Document::new("d2", "a a c"),
            Document::new("d3", "b c"),
        ])
        .unwrap()
    }

    // independent evaluation of the formula from raw counts
    fn reference(tf: f64, len: f64, df: f64, n: f64, avg: f64) -> f64 {
        let idf = ((n - df + 0.5) / (df + 0.5) + 1.0).ln();
        idf * (tf * 2.2) / (tf + 1.2 * (0.25 + 0.75 * len / avg))
    }

    #[test]
    fn three_document_fixture() {
        let idx = tiny();
        let q = terms("a");
        let avg = 7.0 / 3.0;
        let d1 = idx.score(&q, "d1").unwrap();
        let d2 = idx.score(&q, "d2").unwrap();
        assert!((d1 - reference(1.0, 2.0, 2.0, 3.0, avg)).abs() < 1e-12);
        assert!((d2 - reference(2.0, 3.0, 2.0, 3.0, avg)).abs() < 1e-12);
        assert!((d1 - 0.499176).abs() < 1e-5);
        assert!((d2 - 0.598186).abs() < 1e-5);
        assert_eq!(idx.score(&q, "d3").unwrap(), 0.0);
        assert!(matches!(idx.score(&q, "nope"), Err(Error::UnknownDocument(_))));
    }

    #[test]
    fn empty_query_scores_zero() {
        let idx = tiny();
        for d in ["d1", "d2", "d3"] {
            assert_eq!(idx.score(&[], d).unwrap(), 0.0);
        }
    }

    #[test]
    fn idf_never_negative() {
        let idx = tiny();
        for df in 0..=idx.stats().n {
            assert!(idx.stats().idf(df) > 0.0);
        }
    }

    #[test]
    fn search_matches_pointwise_scores() {
        let idx = tiny();
        let q = terms("a c");
        let hits = idx.search(&q, 3);
        for (d, s) in &hits {
            assert!((idx.score(&q, d).unwrap() - s).abs() < 1e-12);
        }
        assert_eq!(hits[0].0, "d2");
    }

    #[test]
    fn negatives_skip_gold() {
        let idx = tiny();
        let q = terms("a");
        assert_eq!(idx.mine_negatives(&q, "d2", 1).unwrap(), vec!["d1".to_string()]);
        assert_eq!(idx.mine_negatives(&q, "d1", 10).unwrap().len(), 2);
        assert!(!idx.mine_negatives(&q, "d1", 10).unwrap().contains(&"d1".to_string()));
        assert!(idx.mine_negatives(&q, "zz", 1).is_err());
    }
}
