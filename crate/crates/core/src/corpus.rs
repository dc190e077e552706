//! Corpus ingestion, hashing tokenizer and the synthetic topic corpus.
//!
//! The synthetic generator plants false positives on purpose: a fraction of
//! documents is the concatenation of two unrelated topics, so a pair of spans
//! cropped from either side of the boundary is lexically unrelated. The labels
//! returned alongside the corpus record where the boundary sits.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::retrieval::Qrels;

pub const DEFAULT_VOCAB_SIZE: usize = 65_536;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meta: Option<BTreeMap<String, String>>,
}

impl Document {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            text: text.into(),
            meta: None,
        }
    }
}

/// Token ids drawn from a vocabulary of size `vocab`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenSeq {
    tokens: Vec<u32>,
    vocab: usize,
}

impl TokenSeq {
    pub fn new(tokens: Vec<u32>, vocab: usize) -> Result<Self> {
        if let Some(&token) = tokens.iter().find(|&&t| t as usize >= vocab) {
            return Err(Error::TokenOutOfRange { token, vocab });
        }
        Ok(Self { tokens, vocab })
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Contiguous sub-sequence `[start, end)`.
    pub fn slice(&self, start: usize, end: usize) -> TokenSeq {
        TokenSeq {
            tokens: self.tokens[start..end].to_vec(),
            vocab: self.vocab,
        }
    }
}

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    bytes.iter().fold(OFFSET, |hash, &b| {
        (hash ^ u64::from(b)).wrapping_mul(PRIME)
    })
}

fn token_id(word: &str, vocab: usize) -> u32 {
    (fnv1a64(word.as_bytes()) % vocab as u64) as u32
}

/// Surface tokens: lowercased maximal runs of alphanumeric characters.
pub fn surface_tokens(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(|w| w.to_lowercase())
}

/// Hashing tokenizer: each surface token maps to `fnv1a64(token) mod vocab`.
pub fn tokenize(text: &str, vocab: usize) -> Result<TokenSeq> {
    if vocab < 2 {
        return Err(Error::Config(format!("vocabulary size must be >= 2, got {vocab}")));
    }
    let tokens: Vec<u32> = surface_tokens(text).map(|w| token_id(&w, vocab)).collect();
    if tokens.is_empty() {
        return Err(Error::EmptySequence);
    }
    Ok(TokenSeq { tokens, vocab })
}

#[derive(Deserialize)]
struct JsonlRecord {
    id: String,
    text: String,
    #[serde(default)]
    meta: Option<BTreeMap<String, String>>,
}

/// Reads `{"id", "text"}` objects, one per line. Blank lines are ignored.
pub fn read_jsonl<R: BufRead>(reader: R) -> Result<Vec<Document>> {
    let mut docs = Vec::new();
    let mut seen = HashSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let record: JsonlRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if record.id.is_empty() {
            return Err(Error::Parse {
                line: line_no,
                message: "empty document id".into(),
            });
        }
        if record.text.is_empty() {
            return Err(Error::Parse {
                line: line_no,
                message: format!("document {:?} has empty text", record.id),
            });
        }
        if !seen.insert(record.id.clone()) {
            return Err(Error::DuplicateId {
                id: record.id,
                line: line_no,
            });
        }
        docs.push(Document {
            id: record.id,
            text: record.text,
            meta: record.meta,
        });
    }
    Ok(docs)
}

pub fn ingest_jsonl(path: impl AsRef<Path>) -> Result<Vec<Document>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_jsonl(BufReader::new(file)).map_err(|e| match e {
        Error::Parse { line, message } => Error::Parse {
            line,
            message: format!("{}: {message}", path.display()),
        },
        other => other,
    })
}

pub fn write_jsonl(path: impl AsRef<Path>, docs: &[Document]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for doc in docs {
        out.push_str(&serde_json::to_string(doc).expect("documents serialize"));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Tokenizes every document, naming the first one that yields no tokens.
pub fn tokenize_corpus(docs: &[Document], vocab: usize) -> Result<Vec<TokenSeq>> {
    docs.iter()
        .map(|d| {
            tokenize(&d.text, vocab).map_err(|e| match e {
                Error::EmptySequence => {
                    Error::InvalidArgument(format!("document {:?} has no tokens", d.id))
                }
                other => other,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub num_topics: usize,
    pub docs_per_topic: usize,
    pub mixed_fraction: f64,
    pub tokens_per_doc: usize,
    pub vocab_per_topic: usize,
    pub seed: u64,
    pub queries_per_topic: usize,
    pub tokens_per_query: usize,
    pub vocab_size: usize,
    /// Prefix of every generated surface word; distinct prefixes give
    /// unrelated vocabularies (used to fabricate a "target domain").
    pub word_prefix: String,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_topics: 4,
            docs_per_topic: 200,
            mixed_fraction: 0.5,
            tokens_per_doc: 64,
            vocab_per_topic: 400,
            seed: 0,
            queries_per_topic: 25,
            tokens_per_query: 8,
            vocab_size: DEFAULT_VOCAB_SIZE,
            word_prefix: "w".into(),
        }
    }
}

impl SyntheticSpec {
    pub fn total_docs(&self) -> usize {
        self.num_topics * self.docs_per_topic
    }

    pub fn mixed_count(&self) -> usize {
        (self.mixed_fraction * self.total_docs() as f64).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.num_topics == 0
            || self.docs_per_topic == 0
            || self.tokens_per_doc == 0
            || self.vocab_per_topic == 0
            || self.tokens_per_query == 0
        {
            return fail("synthetic sizes must be positive");
        }
        if !(0.0..=1.0).contains(&self.mixed_fraction) {
            return fail("mixed_fraction must lie in [0, 1]");
        }
        if self.mixed_count() > 0 && self.num_topics < 2 {
            return fail("mixed documents need at least two topics");
        }
        if self.mixed_count() > 0 && self.tokens_per_doc < 2 {
            return fail("mixed documents need at least two tokens");
        }
        if self.word_prefix.is_empty() || !self.word_prefix.chars().all(char::is_alphanumeric) {
            return fail("word_prefix must be non-empty and alphanumeric");
        }
        if 2 * self.num_topics * self.vocab_per_topic > self.vocab_size {
            return fail("topic vocabularies need at most half of the hashed vocabulary");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DocLabel {
    Coherent { topic: usize },
    /// Tokens before `boundary` come from `first`, the rest from `second`.
    Mixed {
        first: usize,
        second: usize,
        boundary: usize,
    },
}

impl DocLabel {
    /// Topic holding the majority of tokens in `[start, end)`; ties go to the
    /// first topic.
    pub fn majority_topic(&self, start: usize, end: usize) -> usize {
        match *self {
            DocLabel::Coherent { topic } => topic,
            DocLabel::Mixed {
                first,
                second,
                boundary,
            } => {
                let in_first = boundary.clamp(start, end) - start;
                let in_second = (end - start) - in_first;
                if in_first >= in_second {
                    first
                } else {
                    second
                }
            }
        }
    }

    pub fn is_mixed(&self) -> bool {
        matches!(self, DocLabel::Mixed { .. })
    }
}

pub type Labels = BTreeMap<String, DocLabel>;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub corpus: Vec<Document>,
    pub queries: Vec<Document>,
    pub query_topics: BTreeMap<String, usize>,
    pub qrels: Qrels,
    pub labels: Labels,
    /// Per topic, the token ids of its vocabulary.
    pub topic_tokens: Vec<Vec<u32>>,
}

pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    // Words are rejected when their hashed id is already taken, so topic
    // vocabularies are disjoint at the token-id level.
    let mut taken = HashSet::new();
    let mut vocabularies: Vec<Vec<String>> = Vec::with_capacity(spec.num_topics);
    let mut topic_tokens = Vec::with_capacity(spec.num_topics);
    for topic in 0..spec.num_topics {
        let mut words = Vec::with_capacity(spec.vocab_per_topic);
        let mut ids = Vec::with_capacity(spec.vocab_per_topic);
        let mut k = 0usize;
        while words.len() < spec.vocab_per_topic {
            let word = format!("{}{topic}x{k}", spec.word_prefix).to_lowercase();
            let id = token_id(&word, spec.vocab_size);
            if taken.insert(id) {
                words.push(word);
                ids.push(id);
            }
            k += 1;
        }
        vocabularies.push(words);
        topic_tokens.push(ids);
    }

    let total = spec.total_docs();
    let mut order: Vec<usize> = (0..total).collect();
    order.shuffle(&mut rng);
    let mut is_mixed = vec![false; total];
    for &i in &order[..spec.mixed_count()] {
        is_mixed[i] = true;
    }

    let sample_words = |rng: &mut ChaCha8Rng, topic: usize, count: usize, out: &mut String| {
        for _ in 0..count {
            let w = &vocabularies[topic][rng.gen_range(0..spec.vocab_per_topic)];
            if !out.is_empty() {
                out.push(' ');
            }
            out.push_str(w);
        }
    };

    let mut corpus = Vec::with_capacity(total);
    let mut labels = Labels::new();
    for (i, &mixed) in is_mixed.iter().enumerate() {
        let topic = i / spec.docs_per_topic;
        let id = format!("d{i:05}");
        let mut text = String::new();
        let label = if mixed {
            let offset = rng.gen_range(1..spec.num_topics);
            let second = (topic + offset) % spec.num_topics;
            let len = spec.tokens_per_doc;
            let lo = (len / 4).max(1);
            let hi = (3 * len / 4).clamp(lo, len - 1);
            let boundary = rng.gen_range(lo..=hi);
            sample_words(&mut rng, topic, boundary, &mut text);
            sample_words(&mut rng, second, len - boundary, &mut text);
            DocLabel::Mixed {
                first: topic,
                second,
                boundary,
            }
        } else {
            sample_words(&mut rng, topic, spec.tokens_per_doc, &mut text);
            DocLabel::Coherent { topic }
        };
        labels.insert(id.clone(), label);
        corpus.push(Document::new(id, text));
    }

    let mut queries = Vec::new();
    let mut query_topics = BTreeMap::new();
    let mut qrels = Qrels::new();
    for topic in 0..spec.num_topics {
        for j in 0..spec.queries_per_topic {
            let id = format!("q{:04}", topic * spec.queries_per_topic + j);
            let mut text = String::new();
            sample_words(&mut rng, topic, spec.tokens_per_query, &mut text);
            let relevant: BTreeMap<String, u32> = labels
                .iter()
                .filter(|(_, l)| **l == DocLabel::Coherent { topic })
                .map(|(d, _)| (d.clone(), 1))
                .collect();
            qrels.insert(id.clone(), relevant);
            query_topics.insert(id.clone(), topic);
            queries.push(Document::new(id, text));
        }
    }

    Ok(SyntheticCorpus {
        corpus,
        queries,
        query_topics,
        qrels,
        labels,
        topic_tokens,
    })
}

/// `doc_id<TAB>coherent|mixed<TAB>topicA<TAB>topicB<TAB>boundary`; coherent
/// rows carry `-` in the last two columns.
pub fn format_labels(labels: &Labels) -> String {
    let mut out = String::new();
    for (id, label) in labels {
        match label {
            DocLabel::Coherent { topic } => {
                let _ = writeln!(out, "{id}\tcoherent\t{topic}\t-\t-");
            }
            DocLabel::Mixed {
                first,
                second,
                boundary,
            } => {
                let _ = writeln!(out, "{id}\tmixed\t{first}\t{second}\t{boundary}");
            }
        }
    }
    out
}

pub fn parse_labels(text: &str) -> Result<Labels> {
    let mut labels = Labels::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |m: &str| Error::Parse {
            line: idx + 1,
            message: m.to_string(),
        };
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 5 {
            return Err(bad("expected 5 tab-separated columns"));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| bad("expected an integer"));
        let label = match cols[1] {
            "coherent" => DocLabel::Coherent { topic: num(cols[2])? },
            "mixed" => DocLabel::Mixed {
                first: num(cols[2])?,
                second: num(cols[3])?,
                boundary: num(cols[4])?,
            },
            other => return Err(bad(&format!("unknown label kind {other:?}"))),
        };
        labels.insert(cols[0].to_string(), label);
    }
    Ok(labels)
}

pub fn write_labels(path: impl AsRef<Path>, labels: &Labels) -> Result<()> {
    let path = path.as_ref();
    let mut file = File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(format_labels(labels).as_bytes())
        .map_err(|e| Error::io(path, e))
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<Labels> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_labels(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fnv1a_reference_vectors() {
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn tokenize_splits_and_lowercases() {
        let seq = tokenize("Hello, world!", 1000).unwrap();
        assert_eq!(seq.len(), 2);
        assert!(seq.tokens().iter().all(|&t| t < 1000));
        assert_eq!(seq, tokenize("hello WORLD", 1000).unwrap());

        let repeated = tokenize("a a a", 1000).unwrap();
        assert_eq!(repeated.len(), 3);
        assert!(repeated.tokens().iter().all(|&t| t == repeated.tokens()[0]));
    }

    #[test]
    fn tokenize_rejects_empty_and_tiny_vocab() {
        assert!(matches!(tokenize(" ,;! ", 100), Err(Error::EmptySequence)));
        assert!(matches!(tokenize("abc", 1), Err(Error::Config(_))));
    }

    #[test]
    fn jsonl_preserves_order() {
        let text = r#"{"id":"a","text":"one"}
{"id":"b","text":"two"}
{"id":"c","text":"three"}
"#;
        let docs = read_jsonl(text.as_bytes()).unwrap();
        let ids: Vec<_> = docs.iter().map(|d| d.id.as_str()).collect();
        assert_eq!(ids, ["a", "b", "c"]);
        assert!(read_jsonl("".as_bytes()).unwrap().is_empty());
    }

    #[test]
    fn jsonl_reports_duplicates_and_bad_lines() {
        let text = r#"{"id":"d1","text":"x"}
{"id":"d2","text":"x"}
{"id":"d3","text":"x"}
{"id":"d4","text":"x"}
{"id":"d1","text":"x"}"#;
        match read_jsonl(text.as_bytes()) {
            Err(Error::DuplicateId { id, line }) => {
                assert_eq!(id, "d1");
                assert_eq!(line, 5);
            }
            other => panic!("unexpected {other:?}"),
        }
        let bad = "{\"id\":\"a\",\"text\":\"x\"}\nnot json\n";
        assert!(matches!(
            read_jsonl(bad.as_bytes()),
            Err(Error::Parse { line: 2, .. })
        ));
    }

    fn small_spec() -> SyntheticSpec {
        SyntheticSpec {
            num_topics: 3,
            docs_per_topic: 20,
            mixed_fraction: 0.5,
            tokens_per_doc: 32,
            vocab_per_topic: 50,
            seed: 11,
            queries_per_topic: 3,
            tokens_per_query: 6,
            vocab_size: 4096,
            word_prefix: "w".into(),
        }
    }

    #[test]
    fn synthetic_is_deterministic() {
        let a = gen_synthetic(&small_spec()).unwrap();
        let b = gen_synthetic(&small_spec()).unwrap();
        assert_eq!(a, b);
        let other = gen_synthetic(&SyntheticSpec {
            seed: 12,
            ..small_spec()
        })
        .unwrap();
        assert_ne!(a.corpus, other.corpus);
    }

    #[test]
    fn synthetic_without_mixing_is_coherent() {
        let spec = SyntheticSpec {
            mixed_fraction: 0.0,
            ..small_spec()
        };
        let synth = gen_synthetic(&spec).unwrap();
        assert!(synth.labels.values().all(|l| !l.is_mixed()));
        for rel in synth.qrels.values() {
            assert_eq!(rel.len(), spec.docs_per_topic);
        }
    }

    #[test]
    fn synthetic_mixed_documents_respect_boundaries() {
        let spec = small_spec();
        let synth = gen_synthetic(&spec).unwrap();
        let topic_of: BTreeMap<u32, usize> = synth
            .topic_tokens
            .iter()
            .enumerate()
            .flat_map(|(t, ids)| ids.iter().map(move |&id| (id, t)))
            .collect();
        assert_eq!(topic_of.len(), spec.num_topics * spec.vocab_per_topic);

        let mixed = synth.labels.values().filter(|l| l.is_mixed()).count();
        assert_eq!(mixed, spec.mixed_count());

        for doc in &synth.corpus {
            let seq = tokenize(&doc.text, spec.vocab_size).unwrap();
            assert_eq!(seq.len(), spec.tokens_per_doc);
            match synth.labels[&doc.id] {
                DocLabel::Coherent { topic } => {
                    assert!(seq.tokens().iter().all(|t| topic_of[t] == topic));
                }
                DocLabel::Mixed {
                    first,
                    second,
                    boundary,
                } => {
                    assert_ne!(first, second);
                    for (i, t) in seq.tokens().iter().enumerate() {
                        let expected = if i < boundary { first } else { second };
                        assert_eq!(topic_of[t], expected);
                    }
                }
            }
        }
    }

    #[test]
    fn synthetic_rejects_bad_specs() {
        let bad = SyntheticSpec {
            mixed_fraction: 1.5,
            ..small_spec()
        };
        assert!(matches!(gen_synthetic(&bad), Err(Error::Config(_))));
        let one_topic = SyntheticSpec {
            num_topics: 1,
            ..small_spec()
        };
        assert!(matches!(gen_synthetic(&one_topic), Err(Error::Config(_))));
    }

    #[test]
    fn majority_topic_ties_go_first() {
        let label = DocLabel::Mixed {
            first: 0,
            second: 1,
            boundary: 10,
        };
        assert_eq!(label.majority_topic(0, 10), 0);
        assert_eq!(label.majority_topic(10, 20), 1);
        assert_eq!(label.majority_topic(6, 14), 0);
        assert_eq!(label.majority_topic(7, 14), 1);
    }

    #[test]
    fn labels_tsv_round_trip() {
        let synth = gen_synthetic(&small_spec()).unwrap();
        let text = format_labels(&synth.labels);
        assert_eq!(parse_labels(&text).unwrap(), synth.labels);
    }
}
