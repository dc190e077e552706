//! Negative supply: momentum copy of the encoder table, FIFO queue of past
//! document embeddings, and the in-batch alternative.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use crate::encoder::{EncoderParams, Embedding, Table};
use crate::error::{Error, Result};

pub const DEFAULT_QUEUE_CAPACITY: usize = 4096;
pub const DEFAULT_MOMENTUM: f64 = 0.99;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NegativesMode {
    Moco,
    InBatch,
}

impl fmt::Display for NegativesMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NegativesMode::Moco => "moco",
            NegativesMode::InBatch => "in_batch",
        })
    }
}

impl FromStr for NegativesMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "moco" => Ok(NegativesMode::Moco),
            "in_batch" => Ok(NegativesMode::InBatch),
            other => Err(Error::Config(format!("unknown negatives mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MomentumState {
    pub table: Table,
    pub mu: f64,
}

impl MomentumState {
    /// Exact copy of the live table.
    pub fn from_params(params: &EncoderParams, mu: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&mu) {
            return Err(Error::Config(format!("momentum must lie in [0, 1], got {mu}")));
        }
        Ok(Self {
            table: params.table.clone(),
            mu,
        })
    }

    /// `slow <- mu * slow + (1 - mu) * fast` over every entry.
    pub fn update(&mut self, fast: &EncoderParams) -> Result<()> {
        self.check_shape(fast)?;
        let mu = self.mu;
        for (s, f) in self.table.data_mut().iter_mut().zip(fast.table.data()) {
            *s = mu * *s + (1.0 - mu) * f;
        }
        Ok(())
    }

    /// Same recurrence restricted to `rows`. Rows the optimizer never touched
    /// still equal the live table and are left alone.
    pub fn update_rows<I>(&mut self, fast: &EncoderParams, rows: I) -> Result<()>
    where
        I: IntoIterator<Item = u32>,
    {
        self.check_shape(fast)?;
        let mu = self.mu;
        for t in rows {
            for (s, f) in self.table.row_mut(t).iter_mut().zip(fast.table.row(t)) {
                *s = mu * *s + (1.0 - mu) * f;
            }
        }
        Ok(())
    }

    fn check_shape(&self, fast: &EncoderParams) -> Result<()> {
        if !self.table.same_shape(&fast.table) {
            return Err(Error::DimensionMismatch {
                expected: self.table.vocab() * self.table.dim(),
                found: fast.table.vocab() * fast.table.dim(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NegativeQueue {
    capacity: usize,
    dim: usize,
    entries: VecDeque<Embedding>,
}

impl NegativeQueue {
    pub fn new(capacity: usize, dim: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("queue capacity must be positive".into()));
        }
        Ok(Self {
            capacity,
            dim,
            entries: VecDeque::with_capacity(capacity),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Oldest first.
    pub fn iter(&self) -> impl Iterator<Item = &Embedding> {
        self.entries.iter()
    }

    pub fn get(&self, i: usize) -> Option<&Embedding> {
        self.entries.get(i)
    }

    /// Appends in order and returns the evicted entries, oldest first.
    pub fn enqueue<I>(&mut self, new: I) -> Result<Vec<Embedding>>
    where
        I: IntoIterator<Item = Embedding>,
    {
        let new: Vec<Embedding> = new.into_iter().collect();
        if let Some(bad) = new.iter().find(|e| e.dim() != self.dim) {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: bad.dim(),
            });
        }
        let mut evicted = Vec::new();
        for e in new {
            if self.entries.len() == self.capacity {
                evicted.extend(self.entries.pop_front());
            }
            self.entries.push_back(e);
        }
        Ok(evicted)
    }
}

/// Where one negative comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NegativeSlot {
    Queue(usize),
    /// Positive `positive` of batch group `group`.
    Batch { group: usize, positive: usize },
}

/// Negative slots for the query of `group_index`. All positives of a group
/// share one pool.
///
/// In moco mode the pool is the whole queue; before anything has been
/// enqueued it falls back to the other documents of the batch. In-batch mode
/// takes every positive of the batch whose source document differs from the
/// query's.
pub fn negative_slots(
    mode: NegativesMode,
    queue_len: usize,
    batch: &[(&str, usize)],
    group_index: usize,
) -> Result<Vec<NegativeSlot>> {
    let other_docs = || {
        let own = batch[group_index].0;
        batch
            .iter()
            .enumerate()
            .filter(|(_, (doc, _))| *doc != own)
            .flat_map(|(group, &(_, n))| {
                (0..n).map(move |positive| NegativeSlot::Batch { group, positive })
            })
            .collect::<Vec<_>>()
    };
    match mode {
        NegativesMode::Moco if queue_len > 0 => Ok((0..queue_len).map(NegativeSlot::Queue).collect()),
        NegativesMode::Moco => Ok(other_docs()),
        NegativesMode::InBatch => {
            if batch.len() < 2 {
                return Err(Error::InvalidArgument(
                    "in-batch negatives need at least two groups".into(),
                ));
            }
            Ok(other_docs())
        }
    }
}

/// Document embeddings of one batch group.
#[derive(Debug, Clone)]
pub struct BatchDocs {
    pub doc_id: String,
    pub embeddings: Vec<Embedding>,
}

pub fn negatives_for<'a>(
    mode: NegativesMode,
    queue: &'a NegativeQueue,
    batch: &'a [BatchDocs],
    group_index: usize,
) -> Result<Vec<&'a Embedding>> {
    let shape: Vec<(&str, usize)> = batch
        .iter()
        .map(|b| (b.doc_id.as_str(), b.embeddings.len()))
        .collect();
    Ok(negative_slots(mode, queue.len(), &shape, group_index)?
        .into_iter()
        .map(|slot| match slot {
            NegativeSlot::Queue(i) => &queue.entries[i],
            NegativeSlot::Batch { group, positive } => &batch[group].embeddings[positive],
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn emb(x: f64) -> Embedding {
        Embedding(vec![x, 0.0])
    }

    #[test]
    fn momentum_fixtures() {
        let fast = EncoderParams::new(Table::zeros(2, 2), false).unwrap();
        let mut slow = MomentumState {
            table: Table::from_data(2, 2, vec![1.0; 4]).unwrap(),
            mu: 0.99,
        };
        slow.update(&fast).unwrap();
        assert!(slow.table.data().iter().all(|&x| x == 0.99));

        let mut frozen = MomentumState { mu: 1.0, ..slow.clone() };
        frozen.update(&fast).unwrap();
        assert_eq!(frozen.table, slow.table);

        let mut copy = MomentumState { mu: 0.0, ..slow };
        copy.update(&fast).unwrap();
        assert_eq!(copy.table, fast.table);

        let other = EncoderParams::new(Table::zeros(3, 2), false).unwrap();
        assert!(copy.update(&other).is_err());
    }

    #[test]
    fn enqueue_is_fifo() {
        let mut q = NegativeQueue::new(4, 2).unwrap();
        q.enqueue([emb(1.0), emb(2.0), emb(3.0)]).unwrap();
        let evicted = q.enqueue([emb(4.0), emb(5.0)]).unwrap();
        assert_eq!(evicted, vec![emb(1.0)]);
        let xs: Vec<f64> = q.iter().map(|e| e.0[0]).collect();
        assert_eq!(xs, [2.0, 3.0, 4.0, 5.0]);

        let mut q = NegativeQueue::new(3, 2).unwrap();
        q.enqueue((0..7).map(|i| emb(i as f64))).unwrap();
        let xs: Vec<f64> = q.iter().map(|e| e.0[0]).collect();
        assert_eq!(xs, [4.0, 5.0, 6.0]);

        assert!(q.enqueue([Embedding(vec![1.0])]).is_err());
    }

    #[test]
    fn in_batch_counts_and_exclusion() {
        let batch: Vec<BatchDocs> = (0..3)
            .map(|g| BatchDocs {
                doc_id: format!("d{g}"),
                embeddings: (0..4).map(|j| emb((g * 10 + j) as f64)).collect(),
            })
            .collect();
        let queue = NegativeQueue::new(8, 2).unwrap();
        for g in 0..3 {
            let negs = negatives_for(NegativesMode::InBatch, &queue, &batch, g).unwrap();
            assert_eq!(negs.len(), 8);
            assert!(negs.iter().all(|e| (e.0[0] as usize) / 10 != g));
        }
        assert!(negatives_for(NegativesMode::InBatch, &queue, &batch[..1], 0).is_err());
    }

    #[test]
    fn moco_uses_whole_queue() {
        let mut queue = NegativeQueue::new(256, 2).unwrap();
        queue.enqueue((0..300).map(|i| emb(i as f64))).unwrap();
        let batch = vec![BatchDocs {
            doc_id: "a".into(),
            embeddings: vec![emb(-1.0)],
        }];
        let negs = negatives_for(NegativesMode::Moco, &queue, &batch, 0).unwrap();
        assert_eq!(negs.len(), 256);
        assert_eq!(negs[0].0[0], 44.0);
    }

    #[test]
    fn moco_falls_back_to_batch_when_queue_empty() {
        let slots = negative_slots(NegativesMode::Moco, 0, &[("a", 2), ("b", 2)], 0).unwrap();
        assert_eq!(
            slots,
            vec![
                NegativeSlot::Batch { group: 1, positive: 0 },
                NegativeSlot::Batch { group: 1, positive: 1 }
            ]
        );
    }

    proptest! {
        #[test]
        fn queue_fifo_property(capacity in 1usize..20, chunks in proptest::collection::vec(0usize..12, 0..12)) {
            let mut q = NegativeQueue::new(capacity, 2).unwrap();
            let mut next = 0usize;
            let mut evicted_all = Vec::new();
            for c in chunks {
                let batch: Vec<Embedding> = (next..next + c).map(|i| emb(i as f64)).collect();
                next += c;
                evicted_all.extend(q.enqueue(batch).unwrap());
                prop_assert_eq!(q.len(), capacity.min(next));
            }
            for (k, e) in evicted_all.iter().enumerate() {
                prop_assert_eq!(e.0[0], k as f64);
            }
            let expected: Vec<f64> = (next - q.len()..next).map(|i| i as f64).collect();
            let held: Vec<f64> = q.iter().map(|e| e.0[0]).collect();
            prop_assert_eq!(held, expected);
        }
    }
}
