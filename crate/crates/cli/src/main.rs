//! `recon`: pre-train, fine-tune, index, search and evaluate tiny dense
//! retrievers from the command line.
//!
//! Exit status is 0 on success, 1 on a usage error and 2 on a runtime error.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use recon::checkpoint::{read_checkpoint, write_checkpoint, Checkpoint};
use recon::corpus::{gen_synthetic, ingest_jsonl, read_labels, write_jsonl, write_labels, Document, SyntheticSpec};
use recon::encoder::EncoderParams;
use recon::experiment::{GradcheckFixture, GradcheckSetup};
use recon::loss::{LossConfig, LossMode};
use recon::negatives::NegativesMode;
use recon::retrieval::{
    bm25_run, build_index, dense_run, paired_t_test, read_index, read_qrels, read_run, write_index, write_qrels,
    write_run, Bm25Index, Metric, RankedRun,
};
use recon::trainer::{
    continue_pretrain, fewshot_finetune, pretrain, resume, FewshotConfig, FewshotExample, Hooks, StepMetrics,
    TrainConfig, TrainState,
};

#[derive(Parser, Debug)]
#[command(name = "recon", version, about = "Relevance-aware contrastive pre-training for tiny dense retrievers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a labelled synthetic corpus with queries and judgments.
    GenSynthetic(GenSyntheticArgs),
    /// Pre-train an encoder from scratch, or resume an interrupted run.
    Pretrain(PretrainArgs),
    /// Continue pre-training a checkpoint on a target corpus.
    ContinuePretrain(ContinueArgs),
    /// Fine-tune a checkpoint on a few labelled queries with BM25 negatives.
    Fewshot(FewshotArgs),
    /// Encode a corpus into a dense index file.
    Index(IndexArgs),
    /// Rank a corpus for each query and write a TREC run.
    Search(SearchArgs),
    /// Score a run, or a checkpoint's dense run, against judgments.
    Evaluate(EvaluateArgs),
    /// Paired t-test between two runs on per-query metric values.
    Compare(CompareArgs),
    /// Check analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
struct GenSyntheticArgs {
    /// Number of topics.
    #[arg(long, default_value_t = 4)]
    topics: usize,
    /// Documents generated per topic.
    #[arg(long, default_value_t = 200)]
    docs_per_topic: usize,
    /// Fraction of documents that splice two topics.
    #[arg(long, default_value_t = 0.5)]
    mixed: f64,
    #[arg(long, default_value_t = 64)]
    tokens_per_doc: usize,
    /// Distinct words per topic.
    #[arg(long, default_value_t = 400)]
    vocab_per_topic: usize,
    #[arg(long, default_value_t = 25)]
    queries_per_topic: usize,
    #[arg(long, default_value_t = 8)]
    tokens_per_query: usize,
    /// Hashed vocabulary size.
    #[arg(long, default_value_t = 65_536)]
    vocab_size: usize,
    /// Prefix of every generated word.
    #[arg(long, default_value = "w")]
    word_prefix: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

/// Overrides shared by the two pre-training commands.
#[derive(Args, Debug)]
struct TrainOverrides {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Loss weighting: uniform, relevance_doc or relevance_batch [default: config value].
    #[arg(long)]
    mode: Option<LossMode>,
    /// Positive pairs cropped per document [default: config value].
    #[arg(long)]
    pairs: Option<usize>,
    /// Run seed [default: config value, 0 unless set].
    #[arg(long)]
    seed: Option<u64>,
    /// Total optimizer steps [default: config value].
    #[arg(long)]
    steps: Option<u64>,
    /// Extra config entry as key=value (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args, Debug)]
struct PretrainArgs {
    /// Corpus JSONL with `id` and `text` fields.
    #[arg(long)]
    corpus: PathBuf,
    /// Checkpoint path, rewritten at every periodic checkpoint.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    train: TrainOverrides,
    /// Resume from this checkpoint using the configuration stored in it.
    #[arg(long, conflicts_with_all = ["config", "mode", "pairs", "seed", "steps", "set"])]
    resume: Option<PathBuf>,
    /// Per-step metrics as JSONL.
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Synthetic document labels (TSV) for topic-split weight metrics.
    #[arg(long)]
    labels: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ContinueArgs {
    /// Checkpoint to start from.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Target corpus JSONL.
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    train: TrainOverrides,
    #[arg(long)]
    metrics: Option<PathBuf>,
    #[arg(long)]
    labels: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct FewshotArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Corpus holding the gold documents and BM25 negatives.
    #[arg(long)]
    corpus: PathBuf,
    /// JSONL of `{"query": ..., "positive": doc_id}` examples.
    #[arg(long)]
    examples: Option<PathBuf>,
    /// Flat `key = value` config file; may list `example = doc_id | query`.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Training epochs [default: 80].
    #[arg(long)]
    epochs: Option<usize>,
    /// Learning rate [default: 0.05].
    #[arg(long)]
    lr: Option<f64>,
    /// BM25 negatives per query [default: 1].
    #[arg(long)]
    negatives: Option<usize>,
    /// Seed for the example shuffle [default: 0].
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct IndexArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SearchArgs {
    /// Queries JSONL with `id` and `text` fields.
    #[arg(long)]
    queries: PathBuf,
    /// Dense retrieval with this checkpoint.
    #[arg(long, required_unless_present = "bm25")]
    checkpoint: Option<PathBuf>,
    /// Prebuilt dense index; otherwise --corpus is encoded on the fly.
    #[arg(long, conflicts_with = "bm25")]
    index: Option<PathBuf>,
    #[arg(long, required_unless_present = "index")]
    corpus: Option<PathBuf>,
    /// Rank with BM25 instead of a dense encoder.
    #[arg(long, conflicts_with = "checkpoint")]
    bm25: bool,
    /// Documents kept per query.
    #[arg(long, default_value_t = 100)]
    k: usize,
    /// Output TREC run.
    #[arg(long)]
    out: PathBuf,
    /// Run tag written in the last column.
    #[arg(long, default_value = "recon")]
    tag: String,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    /// TREC qrels.
    #[arg(long)]
    qrels: PathBuf,
    /// Existing TREC run to score.
    #[arg(long, required_unless_present = "checkpoint", conflicts_with = "checkpoint")]
    run: Option<PathBuf>,
    /// Checkpoint whose dense run is computed and scored.
    #[arg(long, requires_all = ["corpus", "queries"])]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    queries: Option<PathBuf>,
    /// Metric such as ndcg@10 or recall@20 (repeatable).
    #[arg(long = "metric", default_values_t = [String::from("ndcg@10")])]
    metrics: Vec<String>,
    /// Include per-query values.
    #[arg(long)]
    per_query: bool,
}

#[derive(Args, Debug)]
struct CompareArgs {
    #[arg(long)]
    run_a: PathBuf,
    #[arg(long)]
    run_b: PathBuf,
    #[arg(long)]
    qrels: PathBuf,
    #[arg(long, default_value = "ndcg@10")]
    metric: String,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 64)]
    vocab: usize,
    #[arg(long, default_value_t = 8)]
    dim: usize,
    /// Documents per batch.
    #[arg(long, default_value_t = 2)]
    m: usize,
    /// Positives per document.
    #[arg(long, default_value_t = 4)]
    n: usize,
    #[arg(long, default_value_t = 40)]
    doc_len: usize,
    #[arg(long, default_value_t = 16)]
    queue_len: usize,
    #[arg(long, default_value_t = 0.1)]
    tau: f64,
    /// Finite-difference step.
    #[arg(long, default_value_t = 1e-5)]
    eps: f64,
    /// Largest relative error that passes.
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Errors that map to exit status 1.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match configure_threads().and_then(|()| run(cli.command)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.is::<UsageError>() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}

fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var("RECON_THREADS") else {
        return Ok(());
    };
    let threads: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| usage(format!("RECON_THREADS must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new().num_threads(threads).build_global()?;
    Ok(())
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenSynthetic(a) => gen_synthetic_cmd(a),
        Command::Pretrain(a) => pretrain_cmd(a),
        Command::ContinuePretrain(a) => continue_cmd(a),
        Command::Fewshot(a) => fewshot_cmd(a),
        Command::Index(a) => index_cmd(a),
        Command::Search(a) => search_cmd(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Compare(a) => compare_cmd(a),
        Command::Gradcheck(a) => gradcheck_cmd(a),
    }
}

fn gen_synthetic_cmd(a: GenSyntheticArgs) -> Result<()> {
    let spec = SyntheticSpec {
        num_topics: a.topics,
        docs_per_topic: a.docs_per_topic,
        mixed_fraction: a.mixed,
        tokens_per_doc: a.tokens_per_doc,
        vocab_per_topic: a.vocab_per_topic,
        seed: a.seed,
        queries_per_topic: a.queries_per_topic,
        tokens_per_query: a.tokens_per_query,
        vocab_size: a.vocab_size,
        word_prefix: a.word_prefix,
    };
    spec.validate().map_err(|e| usage(e.to_string()))?;
    let data = gen_synthetic(&spec)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    write_jsonl(a.out.join("corpus.jsonl"), &data.corpus)?;
    write_jsonl(a.out.join("queries.jsonl"), &data.queries)?;
    write_qrels(a.out.join("qrels.tsv"), &data.qrels)?;
    write_labels(a.out.join("labels.tsv"), &data.labels)?;
    info!(
        "wrote {} documents and {} queries to {}",
        data.corpus.len(),
        data.queries.len(),
        a.out.display()
    );
    Ok(())
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn apply_overrides(mut cfg: TrainConfig, o: &TrainOverrides) -> Result<TrainConfig> {
    if let Some(path) = &o.config {
        cfg = cfg.with_text(&read_text(path)?).with_context(|| format!("in {}", path.display()))?;
    }
    if let Some(mode) = o.mode {
        cfg.loss.mode = mode;
    }
    if let Some(n) = o.pairs {
        cfg.crop.n = n;
    }
    if let Some(seed) = o.seed {
        cfg.seed = seed;
    }
    if let Some(steps) = o.steps {
        cfg.total_steps = steps;
        cfg.warmup_steps = cfg.warmup_steps.min(steps);
    }
    for entry in &o.set {
        let (k, v) = entry
            .split_once('=')
            .ok_or_else(|| usage(format!("--set expects KEY=VALUE, got {entry:?}")))?;
        cfg.set(k.trim(), v.trim()).map_err(|e| usage(format!("--set {entry}: {e}")))?;
    }
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    Ok(cfg)
}

/// Writes step metrics as JSONL and periodic checkpoints to `out`.
struct RunOutputs {
    metrics: Option<BufWriter<File>>,
    out: PathBuf,
    config_text: String,
}

impl RunOutputs {
    fn new(metrics: Option<&Path>, out: &Path, cfg: &TrainConfig, append: bool) -> Result<Self> {
        let metrics = metrics
            .map(|p| -> Result<_> {
                if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                    fs::create_dir_all(dir)?;
                }
                let file = fs::OpenOptions::new()
                    .create(true)
                    .write(true)
                    .append(append)
                    .truncate(!append)
                    .open(p)
                    .with_context(|| format!("opening {}", p.display()))?;
                Ok(BufWriter::new(file))
            })
            .transpose()?;
        Ok(Self {
            metrics,
            out: out.to_path_buf(),
            config_text: cfg.to_text(),
        })
    }

    fn hooks(&mut self) -> Hooks<'_> {
        let Self {
            metrics,
            out,
            config_text,
        } = self;
        Hooks {
            on_step: Some(Box::new(move |m: &StepMetrics| {
                if m.step.is_multiple_of(100) {
                    info!("step {} loss {:.4} lr {:.5}", m.step, m.loss, m.lr);
                }
                if let Some(w) = metrics.as_mut() {
                    let line = serde_json::to_string(m).map_err(|e| recon::Error::InvalidArgument(e.to_string()))?;
                    writeln!(w, "{line}").map_err(|e| recon::Error::Io {
                        path: PathBuf::from("metrics"),
                        source: e,
                    })?;
                }
                Ok(())
            })),
            on_checkpoint: Some(Box::new(move |state: &TrainState| {
                info!("checkpoint at step {} -> {}", state.step, out.display());
                write_checkpoint(
                    &*out,
                    &Checkpoint {
                        state: state.clone(),
                        config: config_text.clone(),
                    },
                )
            })),
        }
    }

    fn finish(mut self) -> Result<()> {
        if let Some(w) = self.metrics.as_mut() {
            w.flush()?;
        }
        Ok(())
    }
}

fn load_labels(path: Option<&PathBuf>) -> Result<Option<recon::corpus::Labels>> {
    path.map(|p| read_labels(p).map_err(anyhow::Error::from)).transpose()
}

fn pretrain_cmd(a: PretrainArgs) -> Result<()> {
    let corpus = ingest_jsonl(&a.corpus)?;
    let labels = load_labels(a.labels.as_ref())?;
    let (cfg, state) = match &a.resume {
        Some(path) => {
            let ckpt = read_checkpoint(path)?;
            let cfg = TrainConfig::parse(&ckpt.config).context("checkpoint configuration")?;
            (cfg, Some(ckpt.state))
        }
        None => (apply_overrides(TrainConfig::default(), &a.train)?, None),
    };
    let resuming = state.is_some();
    let mut outputs = RunOutputs::new(a.metrics.as_deref(), &a.out, &cfg, resuming)?;
    let final_state = {
        let mut hooks = outputs.hooks();
        match state {
            Some(state) => {
                info!("resuming at step {} of {}", state.step, cfg.total_steps);
                resume(&corpus, &cfg, state, labels.as_ref(), &mut hooks)?
            }
            None => pretrain(&corpus, &cfg, labels.as_ref(), &mut hooks)?,
        }
    };
    outputs.finish()?;
    if cfg.total_steps == 0 {
        write_checkpoint(
            &a.out,
            &Checkpoint {
                state: final_state,
                config: cfg.to_text(),
            },
        )?;
    }
    info!("wrote {}", a.out.display());
    Ok(())
}

fn continue_cmd(a: ContinueArgs) -> Result<()> {
    let source = read_checkpoint(&a.checkpoint)?;
    let corpus = ingest_jsonl(&a.corpus)?;
    let labels = load_labels(a.labels.as_ref())?;
    let mut base = TrainConfig::continued();
    // carry over what the checkpoint was trained with, except the schedule
    if let Ok(prev) = TrainConfig::parse(&source.config) {
        base.crop = prev.crop;
        base.loss = prev.loss;
        base.negatives = prev.negatives;
        base.queue_capacity = prev.queue_capacity;
        base.mu = prev.mu;
        base.seed = prev.seed;
        base.optimizer = prev.optimizer;
        base.adam = prev.adam;
        base.batch_groups = prev.batch_groups;
    }
    let params = &source.state.params;
    base.vocab_size = params.vocab();
    base.dim = params.dim();
    base.normalize = params.normalize;
    let cfg = apply_overrides(base, &a.train)?;
    let mut outputs = RunOutputs::new(a.metrics.as_deref(), &a.out, &cfg, false)?;
    let state = {
        let mut hooks = outputs.hooks();
        continue_pretrain(params, &corpus, &cfg, labels.as_ref(), &mut hooks)?
    };
    outputs.finish()?;
    write_checkpoint(
        &a.out,
        &Checkpoint {
            state,
            config: cfg.to_text(),
        },
    )?;
    info!("wrote {}", a.out.display());
    Ok(())
}

fn read_examples(path: &Path) -> Result<Vec<FewshotExample>> {
    let file = File::open(path).with_context(|| format!("reading {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let ex: FewshotExample =
            serde_json::from_str(&line).with_context(|| format!("{}: line {}", path.display(), i + 1))?;
        out.push(ex);
    }
    Ok(out)
}

fn fewshot_cmd(a: FewshotArgs) -> Result<()> {
    let mut fcfg = match &a.config {
        Some(path) => FewshotConfig::parse(&read_text(path)?).with_context(|| format!("in {}", path.display()))?,
        None => FewshotConfig::default(),
    };
    if let Some(path) = &a.examples {
        fcfg.examples.extend(read_examples(path)?);
    }
    if fcfg.examples.is_empty() {
        return Err(usage("no labelled examples: pass --examples or list them in --config"));
    }
    if let Some(v) = a.epochs {
        fcfg.epochs = v;
    }
    if let Some(v) = a.lr {
        fcfg.lr = v;
    }
    if let Some(v) = a.negatives {
        fcfg.negatives_per_query = v;
    }
    if let Some(v) = a.seed {
        fcfg.seed = v;
    }
    fcfg.validate().map_err(|e| usage(e.to_string()))?;
    let source = read_checkpoint(&a.checkpoint)?;
    let corpus = ingest_jsonl(&a.corpus)?;
    info!("fine-tuning on {} examples for {} epochs", fcfg.examples.len(), fcfg.epochs);
    let tuned = fewshot_finetune(&source.state.params, &corpus, &fcfg)?;
    write_checkpoint(
        &a.out,
        &Checkpoint {
            state: TrainState::params_only(tuned),
            config: source.config,
        },
    )?;
    info!("wrote {}", a.out.display());
    Ok(())
}

fn load_params(path: &Path) -> Result<EncoderParams> {
    Ok(read_checkpoint(path)?.state.params)
}

fn index_cmd(a: IndexArgs) -> Result<()> {
    let params = load_params(&a.checkpoint)?;
    let corpus = ingest_jsonl(&a.corpus)?;
    let index = build_index(&params, &corpus)?;
    write_index(&a.out, &index)?;
    info!("indexed {} documents into {}", index.len(), a.out.display());
    Ok(())
}

fn read_queries(path: &Path) -> Result<Vec<Document>> {
    Ok(ingest_jsonl(path)?)
}

fn search_cmd(a: SearchArgs) -> Result<()> {
    if a.k == 0 {
        return Err(usage("--k must be positive"));
    }
    let queries = read_queries(&a.queries)?;
    let run = if a.bm25 {
        let corpus_path = a.corpus.as_ref().ok_or_else(|| usage("--bm25 needs --corpus"))?;
        let index = Bm25Index::build(&ingest_jsonl(corpus_path)?)?;
        bm25_run(&index, &queries, a.k)
    } else {
        let ckpt = a.checkpoint.as_ref().ok_or_else(|| usage("dense search needs --checkpoint"))?;
        let params = load_params(ckpt)?;
        let index = match (&a.index, &a.corpus) {
            (Some(path), _) => read_index(path)?,
            (None, Some(path)) => build_index(&params, &ingest_jsonl(path)?)?,
            (None, None) => return Err(usage("dense search needs --index or --corpus")),
        };
        if index.dim() != params.dim() {
            bail!("index dimension {} does not match checkpoint dimension {}", index.dim(), params.dim());
        }
        dense_run(&params, &index, &queries, a.k)?
    };
    write_run(&a.out, &run, &a.tag)?;
    info!("ranked {} queries into {}", run.len(), a.out.display());
    Ok(())
}

fn parse_metric(s: &str) -> Result<Metric> {
    s.parse().map_err(|e: recon::Error| usage(e.to_string()))
}

fn evaluate_cmd(a: EvaluateArgs) -> Result<()> {
    let metrics: Vec<Metric> = a.metrics.iter().map(|m| parse_metric(m)).collect::<Result<_>>()?;
    let qrels = read_qrels(&a.qrels)?;
    let run: RankedRun = match (&a.run, &a.checkpoint) {
        (Some(path), _) => read_run(path)?,
        (None, Some(ckpt)) => {
            let params = load_params(ckpt)?;
            let corpus = ingest_jsonl(a.corpus.as_ref().ok_or_else(|| usage("--checkpoint needs --corpus"))?)?;
            let queries = read_queries(a.queries.as_ref().ok_or_else(|| usage("--checkpoint needs --queries"))?)?;
            let depth = metrics
                .iter()
                .map(|m| match m {
                    Metric::Ndcg(k) | Metric::Recall(k) => *k,
                })
                .max()
                .unwrap_or(10);
            dense_run(&params, &build_index(&params, &corpus)?, &queries, depth)?
        }
        (None, None) => return Err(usage("pass --run or --checkpoint")),
    };
    let mut out = serde_json::Map::new();
    for metric in metrics {
        let r = metric.evaluate(&run, &qrels)?;
        let value = if a.per_query {
            serde_json::json!({ "mean": r.mean, "queries": r.per_query.len(), "per_query": r.per_query })
        } else {
            serde_json::json!({ "mean": r.mean, "queries": r.per_query.len() })
        };
        out.insert(metric.to_string(), value);
    }
    println!("{}", serde_json::Value::Object(out));
    Ok(())
}

fn compare_cmd(a: CompareArgs) -> Result<()> {
    let metric = parse_metric(&a.metric)?;
    let qrels = read_qrels(&a.qrels)?;
    let ra = metric.evaluate(&read_run(&a.run_a)?, &qrels)?;
    let rb = metric.evaluate(&read_run(&a.run_b)?, &qrels)?;
    // both results cover exactly the judged queries, in the same order
    let xa: Vec<f64> = ra.per_query.values().copied().collect();
    let xb: Vec<f64> = rb.per_query.values().copied().collect();
    let test = paired_t_test(&xa, &xb)?;
    let json = serde_json::json!({
        "metric": metric.to_string(),
        "queries": xa.len(),
        "mean_a": ra.mean,
        "mean_b": rb.mean,
        "t": finite_or_string(test.t),
        "p": test.p,
        "df": test.df,
    });
    println!("{json}");
    Ok(())
}

fn finite_or_string(x: f64) -> serde_json::Value {
    if x.is_finite() {
        serde_json::json!(x)
    } else {
        serde_json::json!(x.to_string())
    }
}

fn gradcheck_cmd(a: GradcheckArgs) -> Result<()> {
    let fx = GradcheckFixture::new(&GradcheckSetup {
        vocab: a.vocab,
        dim: a.dim,
        m: a.m,
        n: a.n,
        doc_len: a.doc_len,
        queue_len: a.queue_len,
        seed: a.seed,
    })
    .map_err(|e| usage(e.to_string()))?;
    let mut worst = 0.0f64;
    for mode in [LossMode::Uniform, LossMode::RelevanceDoc, LossMode::RelevanceBatch] {
        for negatives in [NegativesMode::InBatch, NegativesMode::Moco] {
            let cfg = LossConfig {
                tau: a.tau,
                mode,
                ..LossConfig::default()
            };
            let r = fx.check(&cfg, negatives, a.eps)?;
            worst = worst.max(r.max_rel_error);
            println!(
                "{}",
                serde_json::json!({
                    "mode": mode.to_string(),
                    "negatives": negatives.to_string(),
                    "max_rel_error": r.max_rel_error,
                    "entries": r.entries_checked,
                    "pass": r.max_rel_error < a.tolerance,
                })
            );
        }
    }
    if worst >= a.tolerance {
        return Err(anyhow!("largest relative error {worst:.3e} exceeds {:.1e}", a.tolerance));
    }
    Ok(())
}
