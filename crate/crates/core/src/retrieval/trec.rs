//! TREC run files (`qid Q0 docid rank score tag`) and qrels
//! (`qid 0 docid gain`, tab-separated on output, any whitespace on input).

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use super::{rank_order, Qrels, RankedRun};
use crate::error::{Error, Result};

pub fn format_run(run: &RankedRun, tag: &str) -> String {
    let mut out = String::new();
    for (qid, ranking) in run {
        for (rank, (doc, score)) in ranking.iter().enumerate() {
            let _ = writeln!(out, "{qid} Q0 {doc} {} {score} {tag}", rank + 1);
        }
    }
    out
}

/// Parses a run and re-sorts each query under the shared tie rule; ranks in
/// the file are ignored in favour of scores.
pub fn parse_run(text: &str) -> Result<RankedRun> {
    let mut run = RankedRun::new();
    let mut seen = HashSet::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |m: &str| Error::Parse {
            line: idx + 1,
            message: m.to_string(),
        };
        let cols: Vec<&str> = line.split_whitespace().collect();
        if cols.len() != 6 {
            return Err(bad("expected `qid Q0 docid rank score tag`"));
        }
        let score: f64 = cols[4].parse().map_err(|_| bad("score is not a number"))?;
        if !score.is_finite() {
            return Err(bad("score is not finite"));
        }
        if !seen.insert((cols[0].to_string(), cols[2].to_string())) {
            return Err(bad(&format!("duplicate document {:?} for query {:?}", cols[2], cols[0])));
        }
        run.entry(cols[0].to_string())
            .or_default()
            .push((cols[2].to_string(), score));
    }
    for ranking in run.values_mut() {
        ranking.sort_by(rank_order);
    }
    Ok(run)
}

pub fn format_qrels(qrels: &Qrels) -> String {
    let mut out = String::new();
    for (qid, rel) in qrels {
        for (doc, gain) in rel {
            let _ = writeln!(out, "{qid}\t0\t{doc}\t{gain}");
        }
    }
    out
}

pub fn parse_qrels(text: &str) -> Result<Qrels> {
    let mut qrels = Qrels::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |m: &str| Error::Parse {
            line: idx + 1,
            message: m.to_string(),
        };
        let cols: Vec<&str> = line.split_whitespace().collect();
        if cols.len() != 4 {
            return Err(bad("expected `qid 0 docid gain`"));
        }
        let gain: u32 = cols[3].parse().map_err(|_| bad("gain must be a non-negative integer"))?;
        qrels
            .entry(cols[0].to_string())
            .or_default()
            .insert(cols[2].to_string(), gain);
    }
    Ok(qrels)
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn with_path(path: &Path, e: Error) -> Error {
    match e {
        Error::Parse { line, message } => Error::Parse {
            line,
            message: format!("{}: {message}", path.display()),
        },
        other => other,
    }
}

pub fn read_run(path: impl AsRef<Path>) -> Result<RankedRun> {
    let path = path.as_ref();
    parse_run(&read_text(path)?).map_err(|e| with_path(path, e))
}

pub fn read_qrels(path: impl AsRef<Path>) -> Result<Qrels> {
    let path = path.as_ref();
    parse_qrels(&read_text(path)?).map_err(|e| with_path(path, e))
}

pub fn write_run(path: impl AsRef<Path>, run: &RankedRun, tag: &str) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, format_run(run, tag)).map_err(|e| Error::io(path, e))
}

pub fn write_qrels(path: impl AsRef<Path>, qrels: &Qrels) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, format_qrels(qrels)).map_err(|e| Error::io(path, e))
}
