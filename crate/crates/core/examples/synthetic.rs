//! Runs the synthetic comparison for one seed and prints a summary per arm.
//!
//! cargo run --release -p recon-core --example synthetic -- [seed] [steps] [key=value ...]

use recon::corpus::{gen_synthetic, SyntheticSpec};
use recon::experiment::{fewshot_split, run_arm, run_fewshot, synthetic_config};
use recon::loss::LossMode;
use recon::trainer::{FewshotConfig, TrainConfig};


fn main() -> recon::Result<()> {
    let mut args = std::env::args().skip(1);
    let seed: u64 = args.next().map_or(0, |s| s.parse().expect("seed"));
    let steps: u64 = args.next().map_or(2000, |s| s.parse().expect("steps"));
    let data = gen_synthetic(&SyntheticSpec {
        seed,
        ..SyntheticSpec::default()
    })?;
    let mut base = TrainConfig {
        total_steps: steps,
        warmup_steps: steps / 10,
        ..synthetic_config(seed)
    };
    for kv in args {
        let (k, v) = kv.split_once('=').expect("overrides look like key=value");
        base.set(k, v)?;
    }
    let only = std::env::var("ARMS").unwrap_or_else(|_| "012".into());
    let arms = [
        ("relevance_doc n=4", LossMode::RelevanceDoc, 4),
        ("uniform n=4", LossMode::Uniform, 4),
        ("relevance_batch n=1", LossMode::RelevanceBatch, 1),
    ];
    let mut first = None;
    for (i, (name, mode, n)) in arms.into_iter().enumerate() {
        if !only.contains(&i.to_string()) {
            continue;
        }
        let mut cfg = base.clone();
        cfg.loss.mode = mode;
        cfg.crop.n = n;
        let r = run_arm(&data, &cfg)?;
        let losses = r.losses();
        let drops = losses.windows(2).take(50).filter(|w| w[1] < w[0]).count();
        println!(
            "{name:<22} ndcg@10 {:.4}  w_cross {:.4} w_same {:.4}  first-50 decreases {drops}  final loss {:.4}  {:.1}s",
            r.ndcg10.mean,
            r.topic_weights.cross_mean().unwrap_or(f64::NAN),
            r.topic_weights.same_mean().unwrap_or(f64::NAN),
            losses.last().copied().unwrap_or(f64::NAN),
            r.elapsed.as_secs_f64()
        );
        first.get_or_insert(r.params);
    }
    let split = fewshot_split(&data, 8, seed)?;
    let fs = run_fewshot(first.as_ref().expect("ran"), &data, &split, &FewshotConfig::default())?;
    println!(
        "few-shot recall@20 {:.4} -> {:.4} (gold in negatives: {})",
        fs.before.mean, fs.after.mean, fs.gold_in_negatives
    );
    Ok(())
}
