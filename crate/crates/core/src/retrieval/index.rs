use std::collections::HashSet;
use std::io::{Read, Write};
use std::path::Path;

use rayon::prelude::*;

use super::{top_k, RankedRun};
use crate::corpus::{tokenize, Document};
use crate::encoder::{dot, encode, EncoderParams, Embedding};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"RIDX";
const VERSION: u32 = 1;

/// One encoder embedding per document, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseIndex {
    doc_ids: Vec<String>,
    dim: usize,
    matrix: Vec<f64>,
}

impl DenseIndex {
    pub fn new(doc_ids: Vec<String>, dim: usize, matrix: Vec<f64>) -> Result<Self> {
        if matrix.len() != doc_ids.len() * dim {
            return Err(Error::DimensionMismatch {
                expected: doc_ids.len() * dim,
                found: matrix.len(),
            });
        }
        let mut seen = HashSet::new();
        if let Some(dup) = doc_ids.iter().find(|id| !seen.insert(id.as_str())) {
            return Err(Error::InvalidArgument(format!("duplicate document id {dup:?} in index")));
        }
        if matrix.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("index matrix"));
        }
        Ok(Self { doc_ids, dim, matrix })
    }

    pub fn len(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.doc_ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn doc_ids(&self) -> &[String] {
        &self.doc_ids
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.matrix[i * self.dim..(i + 1) * self.dim]
    }
}

pub fn build_index(params: &EncoderParams, corpus: &[Document]) -> Result<DenseIndex> {
    if corpus.is_empty() {
        return Err(Error::InvalidArgument("cannot index an empty corpus".into()));
    }
    let rows: Vec<Embedding> = corpus
        .par_iter()
        .map(|doc| {
            let seq = tokenize(&doc.text, params.vocab()).map_err(|e| {
                Error::InvalidArgument(format!("document {:?}: {e}", doc.id))
            })?;
            encode(params, &seq)
        })
        .collect::<Result<_>>()?;
    let matrix = rows.into_iter().flat_map(|e| e.0).collect();
    DenseIndex::new(corpus.iter().map(|d| d.id.clone()).collect(), params.dim(), matrix)
}

/// Exact top-`k` by dot product. `k` larger than the index returns everything.
pub fn search(index: &DenseIndex, query: &Embedding, k: usize) -> Result<Vec<(String, f64)>> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be >= 1".into()));
    }
    if query.dim() != index.dim {
        return Err(Error::DimensionMismatch {
            expected: index.dim,
            found: query.dim(),
        });
    }
    let scored = index
        .doc_ids
        .iter()
        .enumerate()
        .map(|(i, id)| (id.clone(), dot(index.row(i), query.as_slice())))
        .collect();
    Ok(top_k(scored, k))
}

/// Top-`k` documents for every query; a query with no usable tokens is an
/// error naming it.
pub fn dense_run(params: &EncoderParams, index: &DenseIndex, queries: &[Document], k: usize) -> Result<RankedRun> {
    let ranked: Vec<(String, Vec<(String, f64)>)> = queries
        .par_iter()
        .map(|q| {
            let seq = tokenize(&q.text, params.vocab())
                .map_err(|e| Error::InvalidArgument(format!("query {:?}: {e}", q.id)))?;
            Ok((q.id.clone(), search(index, &encode(params, &seq)?, k)?))
        })
        .collect::<Result<_>>()?;
    Ok(ranked.into_iter().collect())
}

fn read_exact<const N: usize>(r: &mut impl Read) -> std::io::Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

/// `RIDX`, version u32, N u64, d u64, then per document a u32-length-prefixed
/// UTF-8 id followed by d f64 values; all little-endian.
pub fn write_index(path: impl AsRef<Path>, index: &DenseIndex) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::with_capacity(16 + index.matrix.len() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(index.len() as u64).to_le_bytes());
    out.extend_from_slice(&(index.dim as u64).to_le_bytes());
    for (i, id) in index.doc_ids.iter().enumerate() {
        out.extend_from_slice(&(id.len() as u32).to_le_bytes());
        out.extend_from_slice(id.as_bytes());
        for x in index.row(i) {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&out).map_err(|e| Error::io(path, e))
}

pub fn read_index(path: impl AsRef<Path>) -> Result<DenseIndex> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |m: &str| Error::Checkpoint(format!("{}: {m}", path.display()));
    let mut r = bytes.as_slice();
    let io = |_: std::io::Error| bad("truncated index");
    if &read_exact::<4>(&mut r).map_err(io)? != MAGIC {
        return Err(bad("bad magic"));
    }
    if u32::from_le_bytes(read_exact(&mut r).map_err(io)?) != VERSION {
        return Err(bad("unsupported version"));
    }
    let n = u64::from_le_bytes(read_exact(&mut r).map_err(io)?) as usize;
    let dim = u64::from_le_bytes(read_exact(&mut r).map_err(io)?) as usize;
    let mut doc_ids = Vec::with_capacity(n);
    let mut matrix = Vec::with_capacity(n * dim);
    for _ in 0..n {
        let len = u32::from_le_bytes(read_exact(&mut r).map_err(io)?) as usize;
        if r.len() < len {
            return Err(bad("truncated index"));
        }
        let (id, rest) = r.split_at(len);
        doc_ids.push(String::from_utf8(id.to_vec()).map_err(|_| bad("non-UTF-8 doc id"))?);
        r = rest;
        for _ in 0..dim {
            matrix.push(f64::from_le_bytes(read_exact(&mut r).map_err(io)?));
        }
    }
    if !r.is_empty() {
        return Err(bad("trailing bytes"));
    }
    DenseIndex::new(doc_ids, dim, matrix)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> EncoderParams {
        EncoderParams::init(1024, 8, true, 0.05, 1).unwrap()
    }

    fn corpus() -> Vec<Document> {
        vec![
            Document::new("a", "alpha beta gamma"),
            Document::new("b", "delta epsilon"),
            Document::new("c", "zeta eta theta iota"),
        ]
    }

    #[test]
    fn rows_are_unit_norm_and_rebuild_is_identical() {
        let p = params();
        let idx = build_index(&p, &corpus()).unwrap();
        assert_eq!(idx.len(), 3);
        for i in 0..idx.len() {
            let n = dot(idx.row(i), idx.row(i)).sqrt();
            assert!((n - 1.0).abs() < 1e-9);
        }
        assert_eq!(idx, build_index(&p, &corpus()).unwrap());

        let single = build_index(&p, &corpus()[..1]).unwrap();
        assert_eq!((single.len(), single.dim()), (1, 8));
    }

    #[test]
    fn self_query_ranks_first() {
        let p = params();
        let idx = build_index(&p, &corpus()).unwrap();
        let q = Embedding(idx.row(1).to_vec());
        let hits = search(&idx, &q, 10).unwrap();
        assert_eq!(hits.len(), 3);
        assert_eq!(hits[0].0, "b");
        assert!((hits[0].1 - 1.0).abs() < 1e-12);
        assert!(search(&idx, &q, 0).is_err());
    }

    #[test]
    fn ties_break_by_doc_id() {
        let idx = DenseIndex::new(
            vec!["z".into(), "m".into(), "a".into()],
            2,
            vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0],
        )
        .unwrap();
        let hits = search(&idx, &Embedding(vec![1.0, 0.0]), 3).unwrap();
        let ids: Vec<&str> = hits.iter().map(|h| h.0.as_str()).collect();
        assert_eq!(ids, ["a", "z", "m"]);
    }

    #[test]
    fn index_file_round_trip() {
        let idx = build_index(&params(), &corpus()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("idx.bin");
        write_index(&path, &idx).unwrap();
        assert_eq!(read_index(&path).unwrap(), idx);
        std::fs::write(&path, b"nope").unwrap();
        assert!(read_index(&path).is_err());
    }
}
