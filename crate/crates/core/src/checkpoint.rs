//! Binary checkpoints, little-endian throughout:
//!
//! ```text
//! "RCTR" | version u32 | vocab u64 | dim u64 | normalize u8 | table f64[vocab*dim]
//! | has_momentum u8 [ mu f64 | table f64[vocab*dim] ]
//! | has_queue u8 [ capacity u64 | len u64 | f64[len*dim] ]
//! | step u64 | touched_len u64 | u32[touched_len]
//! | optimizer u8 (0 sgd, 1 adam) [ t u64 | m f64[vocab*dim] | v f64[vocab*dim] ]
//! | config_len u64 | UTF-8 config text
//! ```

use std::io::{BufWriter, Write};
use std::path::Path;

use crate::encoder::{EncoderParams, Embedding, Table};
use crate::error::{Error, Result};
use crate::negatives::{MomentumState, NegativeQueue};
use crate::trainer::{AdamState, OptimizerState, TrainState};

const MAGIC: &[u8; 4] = b"RCTR";
const VERSION: u32 = 1;

/// A training state plus the config text it was produced with (may be empty).
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub state: TrainState,
    pub config: String,
}

struct Writer<W: Write> {
    out: W,
}

impl<W: Write> Writer<W> {
    fn bytes(&mut self, b: &[u8]) -> std::io::Result<()> {
        self.out.write_all(b)
    }

    fn u8(&mut self, x: u8) -> std::io::Result<()> {
        self.bytes(&[x])
    }

    fn u64(&mut self, x: u64) -> std::io::Result<()> {
        self.bytes(&x.to_le_bytes())
    }

    fn f64s(&mut self, xs: &[f64]) -> std::io::Result<()> {
        let mut buf = Vec::with_capacity(8 * 4096);
        for chunk in xs.chunks(4096) {
            buf.clear();
            for x in chunk {
                buf.extend_from_slice(&x.to_le_bytes());
            }
            self.bytes(&buf)?;
        }
        Ok(())
    }
}

fn encode_checkpoint<W: Write>(out: W, ckpt: &Checkpoint) -> std::io::Result<()> {
    let s = &ckpt.state;
    let mut w = Writer { out };
    w.bytes(MAGIC)?;
    w.bytes(&VERSION.to_le_bytes())?;
    w.u64(s.params.vocab() as u64)?;
    w.u64(s.params.dim() as u64)?;
    w.u8(s.params.normalize as u8)?;
    w.f64s(s.params.table.data())?;
    match &s.momentum {
        Some(m) => {
            w.u8(1)?;
            w.bytes(&m.mu.to_le_bytes())?;
            w.f64s(m.table.data())?;
        }
        None => w.u8(0)?,
    }
    match &s.queue {
        Some(q) => {
            w.u8(1)?;
            w.u64(q.capacity() as u64)?;
            w.u64(q.len() as u64)?;
            for e in q.iter() {
                w.f64s(e.as_slice())?;
            }
        }
        None => w.u8(0)?,
    }
    w.u64(s.step)?;
    w.u64(s.touched.len() as u64)?;
    for t in &s.touched {
        w.bytes(&t.to_le_bytes())?;
    }
    match &s.optimizer {
        OptimizerState::Sgd => w.u8(0)?,
        OptimizerState::Adam(a) => {
            w.u8(1)?;
            w.u64(a.t)?;
            w.f64s(a.m.data())?;
            w.f64s(a.v.data())?;
        }
    }
    w.u64(ckpt.config.len() as u64)?;
    w.bytes(ckpt.config.as_bytes())?;
    w.out.flush()
}

pub fn write_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    encode_checkpoint(BufWriter::new(file), ckpt).map_err(|e| Error::io(path, e))
}

pub fn to_bytes(ckpt: &Checkpoint) -> Vec<u8> {
    let mut out = Vec::new();
    encode_checkpoint(&mut out, ckpt).expect("writing to memory cannot fail");
    out
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() < n {
            return Err(Error::Checkpoint("truncated file".into()));
        }
        let (head, rest) = self.buf.split_at(n);
        self.buf = rest;
        Ok(head)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Checkpoint("size overflows usize".into()))
    }

    fn flag(&mut self) -> Result<bool> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            x => Err(Error::Checkpoint(format!("bad flag byte {x}"))),
        }
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = n
            .checked_mul(8)
            .ok_or_else(|| Error::Checkpoint("size overflows usize".into()))?;
        Ok(self
            .take(bytes)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn table(&mut self, vocab: usize, dim: usize) -> Result<Table> {
        let n = vocab
            .checked_mul(dim)
            .ok_or_else(|| Error::Checkpoint("table size overflows".into()))?;
        Table::from_data(vocab, dim, self.f64s(n)?)
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf: bytes };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let vocab = r.usize()?;
    let dim = r.usize()?;
    let normalize = r.flag()?;
    let params = EncoderParams::new(r.table(vocab, dim)?, normalize)?;
    let momentum = if r.flag()? {
        let mu = f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
        Some(MomentumState {
            table: r.table(vocab, dim)?,
            mu,
        })
    } else {
        None
    };
    let queue = if r.flag()? {
        let capacity = r.usize()?;
        let len = r.usize()?;
        if len > capacity {
            return Err(Error::Checkpoint("queue longer than its capacity".into()));
        }
        let mut q = NegativeQueue::new(capacity, dim)?;
        let mut entries = Vec::with_capacity(len);
        for _ in 0..len {
            entries.push(Embedding(r.f64s(dim)?));
        }
        q.enqueue(entries)?;
        Some(q)
    } else {
        None
    };
    let step = r.u64()?;
    let touched_len = r.usize()?;
    let mut touched = std::collections::BTreeSet::new();
    for _ in 0..touched_len {
        let t = r.u32()?;
        if t as usize >= vocab {
            return Err(Error::Checkpoint(format!("touched row {t} out of range")));
        }
        touched.insert(t);
    }
    let optimizer = match r.u8()? {
        0 => OptimizerState::Sgd,
        1 => {
            let t = r.u64()?;
            OptimizerState::Adam(AdamState {
                t,
                m: r.table(vocab, dim)?,
                v: r.table(vocab, dim)?,
            })
        }
        x => return Err(Error::Checkpoint(format!("unknown optimizer tag {x}"))),
    };
    let config_len = r.usize()?;
    let config = String::from_utf8(r.take(config_len)?.to_vec())
        .map_err(|_| Error::Checkpoint("config text is not UTF-8".into()))?;
    if !r.buf.is_empty() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    Ok(Checkpoint {
        state: TrainState {
            params,
            momentum,
            queue,
            optimizer,
            step,
            touched,
        },
        config,
    })
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes).map_err(|e| match e {
        Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::{OptimizerKind, TrainConfig};

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            vocab_size: 16,
            dim: 4,
            queue_capacity: 5,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn round_trip_with_everything() {
        let cfg = TrainConfig {
            optimizer: OptimizerKind::Adam,
            ..small_cfg()
        };
        let mut state = TrainState::init(&cfg).unwrap();
        state.step = 17;
        state.touched.extend([1, 3, 15]);
        state
            .queue
            .as_mut()
            .unwrap()
            .enqueue([Embedding(vec![1.0, 2.0, 3.0, 4.0]), Embedding(vec![0.5; 4])])
            .unwrap();
        if let OptimizerState::Adam(a) = &mut state.optimizer {
            a.t = 9;
            a.m.row_mut(2)[1] = 0.25;
        }
        let ckpt = Checkpoint {
            state,
            config: cfg.to_text(),
        };
        assert_eq!(from_bytes(&to_bytes(&ckpt)).unwrap(), ckpt);
    }

    #[test]
    fn round_trip_params_only() {
        let params = EncoderParams::init(8, 2, false, 0.1, 4).unwrap();
        let ckpt = Checkpoint {
            state: TrainState::params_only(params),
            config: String::new(),
        };
        assert_eq!(from_bytes(&to_bytes(&ckpt)).unwrap(), ckpt);
    }

    #[test]
    fn rejects_corruption() {
        let ckpt = Checkpoint {
            state: TrainState::init(&small_cfg()).unwrap(),
            config: String::new(),
        };
        let bytes = to_bytes(&ckpt);
        assert!(from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(from_bytes(&bad).is_err());
        let mut long = bytes;
        long.push(0);
        assert!(from_bytes(&long).is_err());
    }
}
