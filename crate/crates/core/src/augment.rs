//! Random span cropping into positive groups: one fixed query span and `n`
//! positive spans, all drawn independently from the same document.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::corpus::{fnv1a64, TokenSeq};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CropConfig {
    /// Positives per document.
    pub n: usize,
    pub min_ratio: f64,
    pub max_ratio: f64,
    pub min_span_tokens: usize,
}

impl Default for CropConfig {
    fn default() -> Self {
        Self {
            n: 4,
            min_ratio: 0.1,
            max_ratio: 0.5,
            min_span_tokens: 8,
        }
    }
}

// ceil(ratio * len), tolerant of products like 0.1 * 30 landing one ulp high.
fn ceil_ratio(ratio: f64, len: usize) -> usize {
    (ratio * len as f64 - 1e-9).ceil().max(0.0) as usize
}

impl CropConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::Config("pairs per document must be >= 1".into()));
        }
        if !(self.min_ratio > 0.0 && self.min_ratio <= self.max_ratio && self.max_ratio <= 1.0) {
            return Err(Error::Config(format!(
                "crop ratios must satisfy 0 < min_ratio <= max_ratio <= 1, got [{}, {}]",
                self.min_ratio, self.max_ratio
            )));
        }
        if self.min_span_tokens == 0 {
            return Err(Error::Config("min_span_tokens must be >= 1".into()));
        }
        Ok(())
    }

    /// Inclusive range of admissible span lengths for a document of `len`
    /// tokens, or `None` when the document is too short to crop.
    pub fn span_length_range(&self, len: usize) -> Option<(usize, usize)> {
        if len < self.min_span_tokens {
            return None;
        }
        let lo = self.min_span_tokens.max(ceil_ratio(self.min_ratio, len));
        let hi = ceil_ratio(self.max_ratio, len).min(len);
        (lo <= hi).then_some((lo, hi))
    }

    pub fn is_croppable(&self, len: usize) -> bool {
        self.span_length_range(len).is_some()
    }
}

/// Non-fatal signal that a document cannot be cropped under the config.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TooShort {
    pub len: usize,
    pub min_span_tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Span {
    pub tokens: TokenSeq,
    pub start: usize,
    pub end: usize,
}

pub fn sample_span<R: Rng + ?Sized>(
    doc: &TokenSeq,
    cfg: &CropConfig,
    rng: &mut R,
) -> std::result::Result<Span, TooShort> {
    let len = doc.len();
    let (lo, hi) = cfg.span_length_range(len).ok_or(TooShort {
        len,
        min_span_tokens: cfg.min_span_tokens,
    })?;
    let span_len = rng.gen_range(lo..=hi);
    let start = rng.gen_range(0..=len - span_len);
    let end = start + span_len;
    Ok(Span {
        tokens: doc.slice(start, end),
        start,
        end,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PositiveGroup {
    pub doc_id: String,
    pub query: TokenSeq,
    pub positives: Vec<TokenSeq>,
    /// `(start, end)` of the query first, then of each positive.
    pub span_offsets: Vec<(usize, usize)>,
}

impl PositiveGroup {
    pub fn n(&self) -> usize {
        self.positives.len()
    }
}

/// Draws `n + 1` independent spans; the first is the query.
pub fn make_group<R: Rng + ?Sized>(
    doc_id: &str,
    doc: &TokenSeq,
    cfg: &CropConfig,
    rng: &mut R,
) -> std::result::Result<PositiveGroup, TooShort> {
    let query = sample_span(doc, cfg, rng)?;
    let mut span_offsets = Vec::with_capacity(cfg.n + 1);
    span_offsets.push((query.start, query.end));
    let mut positives = Vec::with_capacity(cfg.n);
    for _ in 0..cfg.n {
        let span = sample_span(doc, cfg, rng)?;
        span_offsets.push((span.start, span.end));
        positives.push(span.tokens);
    }
    Ok(PositiveGroup {
        doc_id: doc_id.to_string(),
        query: query.tokens,
        positives,
        span_offsets,
    })
}

/// Generator owned by one augmentation call, derived from the run seed, a
/// stream counter (the training step) and the document id.
pub fn doc_rng(seed: u64, stream: u64, doc_id: &str) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a64(doc_id.as_bytes()).rotate_left(17));
    rng.set_stream(stream);
    rng
}

#[derive(Serialize)]
struct GroupDump<'a> {
    doc_id: &'a str,
    spans: &'a [(usize, usize)],
}

/// One JSON object per group: `{"doc_id": ..., "spans": [[start, end], ...]}`.
pub fn dump_groups(groups: &[PositiveGroup]) -> String {
    let mut out = String::new();
    for g in groups {
        let line = GroupDump {
            doc_id: &g.doc_id,
            spans: &g.span_offsets,
        };
        out.push_str(&serde_json::to_string(&line).expect("group serializes"));
        out.push('\n');
    }
    out
}
