//! Bag-of-tokens bi-encoder: embedding lookup, mean pooling and optional L2
//! normalization, shared between queries and documents.

mod gradcheck;
mod objective;

pub use gradcheck::{check_gradients, compare_gradients, GradCheckReport, GradientCheck};
pub use objective::{
    backward, forward_loss, ContrastiveProblem, Forward, NegativeSource, Node, ProblemGroup,
    SparseGrad,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::TokenSeq;
use crate::error::{Error, Result};

pub const DEFAULT_DIM: usize = 64;
pub const DEFAULT_INIT_SCALE: f64 = 0.05;

/// Dense `vocab x dim` matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    vocab: usize,
    dim: usize,
    data: Vec<f64>,
}

impl Table {
    pub fn zeros(vocab: usize, dim: usize) -> Self {
        Self {
            vocab,
            dim,
            data: vec![0.0; vocab * dim],
        }
    }

    pub fn from_data(vocab: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != vocab * dim {
            return Err(Error::DimensionMismatch {
                expected: vocab * dim,
                found: data.len(),
            });
        }
        Ok(Self { vocab, dim, data })
    }

    /// Entries i.i.d. uniform in `[-scale, scale]`.
    pub fn uniform(vocab: usize, dim: usize, scale: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..vocab * dim)
            .map(|_| rng.gen_range(-scale..=scale))
            .collect();
        Self { vocab, dim, data }
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, token: u32) -> &[f64] {
        let start = token as usize * self.dim;
        &self.data[start..start + self.dim]
    }

    pub fn row_mut(&mut self, token: u32) -> &mut [f64] {
        let start = token as usize * self.dim;
        &mut self.data[start..start + self.dim]
    }

    pub fn same_shape(&self, other: &Table) -> bool {
        self.vocab == other.vocab && self.dim == other.dim
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub table: Table,
    pub normalize: bool,
}

impl EncoderParams {
    pub fn new(table: Table, normalize: bool) -> Result<Self> {
        if table.dim < 2 {
            return Err(Error::Config(format!("embedding dimension must be >= 2, got {}", table.dim)));
        }
        if table.data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("encoder table"));
        }
        Ok(Self { table, normalize })
    }

    pub fn init(vocab: usize, dim: usize, normalize: bool, scale: f64, seed: u64) -> Result<Self> {
        Self::new(Table::uniform(vocab, dim, scale, seed), normalize)
    }

    pub fn vocab(&self) -> usize {
        self.table.vocab
    }

    pub fn dim(&self) -> usize {
        self.table.dim
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(pub Vec<f64>);

impl Embedding {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        dot(&self.0, &self.0).sqrt()
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Embedding plus the pooled norm needed to backpropagate through it.
#[derive(Debug, Clone)]
pub(crate) struct Pooled {
    pub out: Vec<f64>,
    /// L2 norm of the mean-pooled vector before normalization.
    pub pooled_norm: f64,
}

pub(crate) fn pool(table: &Table, normalize: bool, seq: &TokenSeq) -> Result<Pooled> {
    if seq.is_empty() {
        return Err(Error::EmptySequence);
    }
    if seq.vocab() != table.vocab {
        if let Some(&token) = seq.tokens().iter().find(|&&t| t as usize >= table.vocab) {
            return Err(Error::TokenOutOfRange {
                token,
                vocab: table.vocab,
            });
        }
    }
    let mut out = vec![0.0; table.dim];
    for &t in seq.tokens() {
        for (o, x) in out.iter_mut().zip(table.row(t)) {
            *o += x;
        }
    }
    let inv = 1.0 / seq.len() as f64;
    out.iter_mut().for_each(|o| *o *= inv);
    let pooled_norm = dot(&out, &out).sqrt();
    if normalize {
        if pooled_norm > 0.0 {
            out.iter_mut().for_each(|o| *o /= pooled_norm);
        } else {
            log::warn!("mean-pooled embedding is exactly zero; left unnormalized");
        }
    }
    Ok(Pooled { out, pooled_norm })
}

pub fn encode_with(table: &Table, normalize: bool, seq: &TokenSeq) -> Result<Embedding> {
    pool(table, normalize, seq).map(|p| Embedding(p.out))
}

pub fn encode(params: &EncoderParams, seq: &TokenSeq) -> Result<Embedding> {
    encode_with(&params.table, params.normalize, seq)
}

pub fn similarity(a: &Embedding, b: &Embedding) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            expected: a.dim(),
            found: b.dim(),
        });
    }
    Ok(dot(&a.0, &b.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn params(normalize: bool) -> EncoderParams {
        EncoderParams::init(32, 6, normalize, 0.05, 9).unwrap()
    }

    fn seq(tokens: &[u32]) -> TokenSeq {
        TokenSeq::new(tokens.to_vec(), 32).unwrap()
    }

    #[test]
    fn single_token_is_its_row() {
        let p = params(false);
        assert_eq!(encode(&p, &seq(&[5])).unwrap().0, p.table.row(5));
        let pn = params(true);
        let e = encode(&pn, &seq(&[5])).unwrap();
        let row = pn.table.row(5);
        let norm = dot(row, row).sqrt();
        for (a, b) in e.0.iter().zip(row) {
            assert!((a - b / norm).abs() < 1e-15);
        }
        assert_eq!(encode(&pn, &seq(&[5, 5])).unwrap(), e);
    }

    #[test]
    fn zero_table_gives_zero_vector() {
        let p = EncoderParams::new(Table::zeros(8, 4), false).unwrap();
        assert_eq!(encode(&p, &seq(&[1, 2])).unwrap().0, vec![0.0; 4]);
        let pn = EncoderParams::new(Table::zeros(8, 4), true).unwrap();
        assert_eq!(encode(&pn, &seq(&[1, 2])).unwrap().0, vec![0.0; 4]);
    }

    #[test]
    fn rejects_bad_inputs() {
        let p = params(true);
        let empty = TokenSeq::new(vec![], 32).unwrap();
        assert!(matches!(encode(&p, &empty), Err(Error::EmptySequence)));
        let big = TokenSeq::new(vec![40], 64).unwrap();
        assert!(matches!(encode(&p, &big), Err(Error::TokenOutOfRange { .. })));
        assert!(EncoderParams::new(Table::zeros(4, 1), true).is_err());
        let a = Embedding(vec![1.0, 0.0]);
        let b = Embedding(vec![1.0, 0.0, 0.0]);
        assert!(similarity(&a, &b).is_err());
    }

    #[test]
    fn similarity_fixtures() {
        let v = Embedding(vec![0.6, 0.8]);
        let w = Embedding(vec![-0.8, 0.6]);
        let neg = Embedding(vec![-0.6, -0.8]);
        assert!((similarity(&v, &v).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(similarity(&v, &w).unwrap(), 0.0);
        assert!((similarity(&v, &neg).unwrap() + 1.0).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn encode_is_permutation_invariant(tokens in proptest::collection::vec(0u32..32, 1..20), seed in any::<u64>()) {
            let p = params(true);
            let a = encode(&p, &seq(&tokens)).unwrap();
            let mut shuffled = tokens.clone();
            use rand::seq::SliceRandom;
            shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let b = encode(&p, &seq(&shuffled)).unwrap();
            for (x, y) in a.0.iter().zip(&b.0) {
                prop_assert!((x - y).abs() < 1e-12);
            }
            prop_assert!((similarity(&a, &a).unwrap() - 1.0).abs() < 1e-9);
        }
    }
}
