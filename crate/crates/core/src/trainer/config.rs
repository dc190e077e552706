//! Flat `key = value` configuration files.
//!
//! Blank lines and `#` comments are ignored. Unknown keys, repeated keys and
//! unparsable values are errors carrying the line number.

use std::collections::HashSet;
use std::fmt::{self, Write as _};
use std::str::FromStr;

use crate::augment::CropConfig;
use crate::corpus::DEFAULT_VOCAB_SIZE;
use crate::encoder::{DEFAULT_DIM, DEFAULT_INIT_SCALE};
use crate::error::{Error, Result};
use crate::loss::LossConfig;
use crate::negatives::{NegativesMode, DEFAULT_MOMENTUM, DEFAULT_QUEUE_CAPACITY};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    /// Adam applied lazily: only rows with a gradient in the current step move.
    Adam,
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
        })
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            _ => Err(Error::Config(format!("unknown optimizer {s:?} (expected sgd or adam)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub total_steps: u64,
    pub warmup_steps: u64,
    pub peak_lr: f64,
    /// Documents per batch (`m`).
    pub batch_groups: usize,
    /// Cropping, including the number of positives per document (`n`).
    pub crop: CropConfig,
    pub loss: LossConfig,
    pub negatives: NegativesMode,
    pub queue_capacity: usize,
    pub mu: f64,
    pub seed: u64,
    pub checkpoint_every: u64,
    pub optimizer: OptimizerKind,
    pub adam: AdamConfig,
    pub vocab_size: usize,
    pub dim: usize,
    pub normalize: bool,
    pub init_scale: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            total_steps: 2000,
            warmup_steps: 200,
            peak_lr: 0.05,
            batch_groups: 32,
            crop: CropConfig::default(),
            loss: LossConfig::default(),
            negatives: NegativesMode::Moco,
            queue_capacity: DEFAULT_QUEUE_CAPACITY,
            mu: DEFAULT_MOMENTUM,
            seed: 0,
            checkpoint_every: 500,
            optimizer: OptimizerKind::Sgd,
            adam: AdamConfig::default(),
            vocab_size: DEFAULT_VOCAB_SIZE,
            dim: DEFAULT_DIM,
            normalize: true,
            init_scale: DEFAULT_INIT_SCALE,
        }
    }
}

impl TrainConfig {
    /// Defaults for continued pre-training on a target corpus: a quarter of
    /// the pre-training peak rate and a long warmup.
    pub fn continued() -> Self {
        Self {
            total_steps: 1000,
            warmup_steps: 250,
            peak_lr: 0.0125,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.warmup_steps > self.total_steps {
            return fail(format!(
                "warmup_steps ({}) exceeds total_steps ({})",
                self.warmup_steps, self.total_steps
            ));
        }
        if !(self.peak_lr.is_finite() && self.peak_lr > 0.0) {
            return fail(format!("peak_lr must be positive, got {}", self.peak_lr));
        }
        if self.batch_groups == 0 {
            return fail("batch_groups must be >= 1".into());
        }
        if self.negatives == NegativesMode::InBatch && self.batch_groups < 2 {
            return fail("in_batch negatives need batch_groups >= 2".into());
        }
        if self.queue_capacity == 0 {
            return fail("queue_capacity must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.mu) {
            return fail(format!("mu must lie in [0, 1], got {}", self.mu));
        }
        if self.checkpoint_every == 0 {
            return fail("checkpoint_every must be >= 1".into());
        }
        if self.vocab_size < 2 {
            return fail("vocab_size must be >= 2".into());
        }
        if self.dim < 2 {
            return fail("dim must be >= 2".into());
        }
        if !(self.init_scale.is_finite() && self.init_scale > 0.0) {
            return fail("init_scale must be positive".into());
        }
        let a = &self.adam;
        if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0) {
            return fail("adam betas must lie in [0, 1) and eps must be positive".into());
        }
        self.crop.validate()?;
        self.loss.validate()
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::default().with_text(text)
    }

    /// Applies the entries of a config file on top of `self`.
    pub fn with_text(mut self, text: &str) -> Result<Self> {
        for entry in entries(text)? {
            self.set(&entry.key, &entry.value).map_err(|e| entry.error(e))?;
        }
        self.validate()?;
        Ok(self)
    }

    /// Applies a single `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "total_steps" => self.total_steps = parse(key, value)?,
            "warmup_steps" => self.warmup_steps = parse(key, value)?,
            "peak_lr" => self.peak_lr = parse(key, value)?,
            "batch_groups" => self.batch_groups = parse(key, value)?,
            "pairs_per_doc" => self.crop.n = parse(key, value)?,
            "min_crop_ratio" => self.crop.min_ratio = parse(key, value)?,
            "max_crop_ratio" => self.crop.max_ratio = parse(key, value)?,
            "min_span_tokens" => self.crop.min_span_tokens = parse(key, value)?,
            "loss_mode" => self.loss.mode = value.parse()?,
            "tau" => self.loss.tau = parse(key, value)?,
            "weight_floor" => self.loss.weight_floor = parse(key, value)?,
            "detach_weights" => self.loss.detach_weights = parse(key, value)?,
            "negatives_mode" => self.negatives = value.parse()?,
            "queue_capacity" => self.queue_capacity = parse(key, value)?,
            "mu" => self.mu = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, value)?,
            "optimizer" => self.optimizer = value.parse()?,
            "adam_beta1" => self.adam.beta1 = parse(key, value)?,
            "adam_beta2" => self.adam.beta2 = parse(key, value)?,
            "adam_eps" => self.adam.eps = parse(key, value)?,
            "vocab_size" => self.vocab_size = parse(key, value)?,
            "dim" => self.dim = parse(key, value)?,
            "normalize" => self.normalize = parse(key, value)?,
            "init_scale" => self.init_scale = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Every key with its current value, in a form [`TrainConfig::parse`] reads back.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut put = |k: &str, v: &dyn fmt::Display| {
            let _ = writeln!(out, "{k} = {v}");
        };
        put("total_steps", &self.total_steps);
        put("warmup_steps", &self.warmup_steps);
        put("peak_lr", &self.peak_lr);
        put("batch_groups", &self.batch_groups);
        put("pairs_per_doc", &self.crop.n);
        put("min_crop_ratio", &self.crop.min_ratio);
        put("max_crop_ratio", &self.crop.max_ratio);
        put("min_span_tokens", &self.crop.min_span_tokens);
        put("loss_mode", &self.loss.mode);
        put("tau", &self.loss.tau);
        put("weight_floor", &self.loss.weight_floor);
        put("detach_weights", &self.loss.detach_weights);
        put("negatives_mode", &self.negatives);
        put("queue_capacity", &self.queue_capacity);
        put("mu", &self.mu);
        put("seed", &self.seed);
        put("checkpoint_every", &self.checkpoint_every);
        put("optimizer", &self.optimizer);
        put("adam_beta1", &self.adam.beta1);
        put("adam_beta2", &self.adam.beta2);
        put("adam_eps", &self.adam.eps);
        put("vocab_size", &self.vocab_size);
        put("dim", &self.dim);
        put("normalize", &self.normalize);
        put("init_scale", &self.init_scale);
        out
    }
}

/// One labelled pair for few-shot fine-tuning.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct FewshotExample {
    pub query: String,
    /// Id of the gold document.
    pub positive: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FewshotConfig {
    pub examples: Vec<FewshotExample>,
    pub negatives_per_query: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub tau: f64,
    pub seed: u64,
}

impl Default for FewshotConfig {
    fn default() -> Self {
        Self {
            examples: Vec::new(),
            negatives_per_query: 1,
            epochs: 80,
            batch_size: 8,
            lr: 0.05,
            tau: 0.05,
            seed: 0,
        }
    }
}

impl FewshotConfig {
    pub fn validate(&self) -> Result<()> {
        if self.negatives_per_query == 0 {
            return Err(Error::Config("negatives_per_query must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        Ok(())
    }

    /// Parses the scalar settings plus any number of
    /// `example = <doc_id> | <query text>` lines.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for entry in entries_allowing(text, &["example"])? {
            cfg.set(&entry.key, &entry.value).map_err(|e| entry.error(e))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "negatives_per_query" => self.negatives_per_query = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "tau" => self.tau = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "example" => {
                let (doc, query) = value
                    .split_once('|')
                    .ok_or_else(|| Error::Config("example must look like `doc_id | query text`".into()))?;
                let (doc, query) = (doc.trim(), query.trim());
                if doc.is_empty() || query.is_empty() {
                    return Err(Error::Config("example needs a doc id and a query".into()));
                }
                self.examples.push(FewshotExample {
                    query: query.to_string(),
                    positive: doc.to_string(),
                });
            }
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "negatives_per_query = {}", self.negatives_per_query);
        let _ = writeln!(out, "epochs = {}", self.epochs);
        let _ = writeln!(out, "batch_size = {}", self.batch_size);
        let _ = writeln!(out, "lr = {}", self.lr);
        let _ = writeln!(out, "tau = {}", self.tau);
        let _ = writeln!(out, "seed = {}", self.seed);
        for ex in &self.examples {
            let _ = writeln!(out, "example = {} | {}", ex.positive, ex.query);
        }
        out
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value {value:?} for {key}")))
}

struct Entry {
    line: usize,
    key: String,
    value: String,
}

impl Entry {
    fn error(&self, e: Error) -> Error {
        let message = match e {
            Error::Config(m) => m,
            other => other.to_string(),
        };
        Error::Parse {
            line: self.line,
            message,
        }
    }
}

fn entries(text: &str) -> Result<Vec<Entry>> {
    entries_allowing(text, &[])
}

/// Splits lines into entries; keys outside `repeatable` may appear once.
fn entries_allowing(text: &str, repeatable: &[&str]) -> Result<Vec<Entry>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.split_once('#').map_or(raw, |(l, _)| l).trim();
        if line.is_empty() {
            continue;
        }
        let bad = |m: String| Error::Parse {
            line: idx + 1,
            message: m,
        };
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| bad("expected `key = value`".into()))?;
        let (key, value) = (key.trim(), value.trim());
        if key.is_empty() {
            return Err(bad("missing key".into()));
        }
        if !repeatable.contains(&key) && !seen.insert(key.to_string()) {
            return Err(bad(format!("key {key:?} given twice")));
        }
        out.push(Entry {
            line: idx + 1,
            key: key.to_string(),
            value: value.to_string(),
        });
    }
    Ok(out)
}
