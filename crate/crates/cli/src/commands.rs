//! Subcommand implementations.

use std::path::{Path, PathBuf};

use clap::Args;
use s2pnm_core::biasedmf::{train_mf, MfConfig, MfParams};
use s2pnm_core::checkpoint::{self, LoadedModel, ModelMeta};
use s2pnm_core::corpus::{
    self, apply_manifest, filter_min_history, load_csv, parse_manifest, ColSel, Corpus, CsvSchema,
    Protocol, SplitResult,
};
use s2pnm_core::error::{Error, Result};
use s2pnm_core::evaluator::{evaluate_ranking, evaluate_rating, EvalReport};
use s2pnm_core::scalar::{Dtype, Scalar};
use s2pnm_core::synthetic::{gen_drift, gen_static, to_csv, truth_to_tsv, DriftSpec, StaticSpec};
use s2pnm_core::trainer::{self, format_log, parse_config, Precision, Task, TrainConfig};

fn parse_delimiter(s: &str) -> Result<char> {
    match s {
        "tab" | "\\t" => Ok('\t'),
        _ => {
            let mut chars = s.chars();
            match (chars.next(), chars.next()) {
                (Some(c), None) => Ok(c),
                _ => Err(Error::Config(format!(
                    "delimiter must be a single character, got `{s}`"
                ))),
            }
        }
    }
}

fn parse_schema(spec: &str, delimiter: char, header: bool) -> Result<CsvSchema> {
    let mut schema = CsvSchema {
        delimiter,
        has_header: header,
        ..CsvSchema::default()
    };
    for part in spec.split(',') {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        let (key, value) = part.split_once('=').ok_or_else(|| {
            Error::Config(format!("schema entry `{part}` is not `column=selector`"))
        })?;
        let sel = match value.trim().parse::<usize>() {
            Ok(pos) => ColSel::Position(pos),
            Err(_) => ColSel::Name(value.trim().to_string()),
        };
        match key.trim() {
            "user" => schema.user = sel,
            "item" => schema.item = sel,
            "rating" => schema.rating = sel,
            "timestamp" => schema.timestamp = sel,
            other => {
                return Err(Error::Config(format!(
                    "unknown schema column `{other}` (user|item|rating|timestamp)"
                )))
            }
        }
    }
    if !schema.has_header {
        let named = [
            &schema.user,
            &schema.item,
            &schema.rating,
            &schema.timestamp,
        ]
        .iter()
        .any(|c| matches!(c, ColSel::Name(_)));
        schema.has_header = named;
    }
    Ok(schema)
}

fn schema_to_string(schema: &CsvSchema) -> String {
    let fmt = |sel: &ColSel| match sel {
        ColSel::Position(p) => p.to_string(),
        ColSel::Name(n) => n.clone(),
    };
    format!(
        "user={},item={},rating={},timestamp={}",
        fmt(&schema.user),
        fmt(&schema.item),
        fmt(&schema.rating),
        fmt(&schema.timestamp)
    )
}

#[derive(Args)]
pub struct SplitArgs {
    /// CSV corpus path.
    #[arg(long)]
    input: PathBuf,
    /// Split protocol.
    #[arg(long, value_parser = ["time", "random", "prefix"], default_value = "time")]
    protocol: String,
    /// Train fraction (time/random) or per-user prefix fraction.
    #[arg(long, default_value_t = 0.9)]
    fraction: f64,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Keep only users with at least this many events.
    #[arg(long, default_value_t = 1)]
    min_history: usize,
    /// Output manifest path.
    #[arg(long)]
    out_manifest: PathBuf,
    /// Field delimiter (single character, or `tab`).
    #[arg(long, default_value = ",")]
    delimiter: String,
    /// Column selectors, by position or by header name.
    #[arg(long, default_value = "user=0,item=1,rating=2,timestamp=3")]
    schema: String,
    /// Skip the first row (implied when the schema selects by name).
    #[arg(long, default_value_t = false)]
    header: bool,
}

/// Reload the corpus a manifest was derived from, re-filter, and re-apply
/// the recorded assignments.
fn reload_split(manifest_path: &Path) -> Result<(Corpus, SplitResult)> {
    let text = std::fs::read_to_string(manifest_path)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", manifest_path.display())))?;
    let manifest = parse_manifest(&text)?;
    let input = manifest
        .meta
        .get("input")
        .ok_or_else(|| Error::Data("manifest missing #input metadata".into()))?;
    let delimiter = parse_delimiter(
        manifest
            .meta
            .get("delimiter")
            .map(String::as_str)
            .unwrap_or(","),
    )?;
    let header = manifest.meta.get("header").map(String::as_str) == Some("true");
    let schema = parse_schema(
        manifest
            .meta
            .get("schema")
            .map(String::as_str)
            .unwrap_or("user=0,item=1,rating=2,timestamp=3"),
        delimiter,
        header,
    )?;
    let min_history: usize = manifest
        .meta
        .get("min_history")
        .and_then(|s| s.parse().ok())
        .unwrap_or(1);
    let outcome = load_csv(Path::new(input), &schema)?;
    let corpus = filter_min_history(&outcome.corpus, min_history)?;
    let split = apply_manifest(&corpus, &manifest)?;
    Ok((corpus, split))
}

pub fn run_split(args: SplitArgs) -> Result<()> {
    let delimiter = parse_delimiter(&args.delimiter)?;
    let schema = parse_schema(&args.schema, delimiter, args.header)?;
    if args.min_history < 1 {
        return Err(Error::Config("min-history must be at least 1".into()));
    }
    let input = std::fs::canonicalize(&args.input)
        .map_err(|e| Error::Data(format!("cannot resolve {}: {e}", args.input.display())))?;
    let outcome = load_csv(&input, &schema)?;
    if outcome.skipped_rows > 0 {
        eprintln!("note: skipped {} malformed rows", outcome.skipped_rows);
    }
    if outcome.duplicate_events > 0 {
        eprintln!(
            "note: {} duplicate (user,item,timestamp) events kept",
            outcome.duplicate_events
        );
    }
    let corpus = filter_min_history(&outcome.corpus, args.min_history)?;
    let protocol = Protocol::parse(&args.protocol)
        .ok_or_else(|| Error::Config(format!("unknown protocol `{}`", args.protocol)))?;
    let split = match protocol {
        Protocol::SplitByTime => corpus::split_by_time(&corpus, args.fraction)?,
        Protocol::SplitByRandom => corpus::split_by_random(&corpus, args.fraction, args.seed)?,
        Protocol::PerUserPrefix => corpus::split_per_user_prefix(&corpus, args.fraction)?,
    };
    if split.empty_test_users > 0 {
        eprintln!(
            "note: {} users contributed no test events",
            split.empty_test_users
        );
    }
    let meta = [
        ("input", input.display().to_string()),
        ("delimiter", args.delimiter.clone()),
        ("schema", schema_to_string(&schema)),
        ("header", schema.has_header.to_string()),
        ("min_history", args.min_history.to_string()),
        ("fraction", args.fraction.to_string()),
        ("seed", args.seed.to_string()),
    ];
    std::fs::write(&args.out_manifest, corpus::write_manifest(&split, &meta))?;
    println!(
        "split: {} users, {} items, {} train / {} test events -> {}",
        corpus.num_users(),
        corpus.num_items(),
        split.train.len(),
        split.test.len(),
        args.out_manifest.display()
    );
    Ok(())
}

#[derive(Args)]
pub struct PretrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value_t = 50)]
    d_user: usize,
    #[arg(long, default_value_t = 0.002)]
    lr: f64,
    #[arg(long, default_value_t = 0.01)]
    l2: f64,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 256)]
    batch_size: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long)]
    out_checkpoint: PathBuf,
    /// Optional per-epoch loss log.
    #[arg(long)]
    log: Option<PathBuf>,
}

pub fn run_pretrain(args: PretrainArgs) -> Result<()> {
    let (_, split) = reload_split(&args.manifest)?;
    let cfg = MfConfig {
        d_user: args.d_user,
        lr: args.lr,
        l2: args.l2,
        epochs: args.epochs,
        batch_size: args.batch_size,
        seed: args.seed,
        ..MfConfig::default()
    };
    let out = train_mf::<f64>(&split.train, &cfg)?;
    checkpoint::save_mf(&args.out_checkpoint, &out.params)?;
    if let Some(log_path) = &args.log {
        let mut text = String::from("epoch\ttrain_mse\ttrain_rmse\n");
        for (i, mse) in out.epoch_losses.iter().enumerate() {
            text.push_str(&format!("{}\t{}\t{}\n", i + 1, mse, mse.sqrt()));
        }
        std::fs::write(log_path, text)?;
    }
    let final_rmse = out
        .epoch_losses
        .last()
        .map(|m| m.sqrt())
        .unwrap_or(f64::NAN);
    println!(
        "pretrain: d_user={} epochs={} final train rmse {:.6} -> {}",
        args.d_user,
        args.epochs,
        final_rmse,
        args.out_checkpoint.display()
    );
    Ok(())
}

#[derive(Args)]
pub struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// `key = value` config file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Biased-MF checkpoint to initialize the static embeddings.
    #[arg(long)]
    pretrained: Option<PathBuf>,
    /// Overrides the config file's task.
    #[arg(long, value_parser = ["rating", "ranking"])]
    task: Option<String>,
    #[arg(long)]
    out_checkpoint: PathBuf,
    /// Per-epoch metrics log.
    #[arg(long)]
    log: Option<PathBuf>,
}

pub fn run_train(args: TrainArgs) -> Result<()> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
            parse_config(&text)?
        }
        None => TrainConfig::default(),
    };
    if let Some(task) = &args.task {
        cfg.task = Task::parse(task).expect("clap-validated");
    }
    cfg.validate()?;
    let (_, split) = reload_split(&args.manifest)?;
    match cfg.precision {
        Precision::F64 => train_typed::<f64>(&args, &cfg, &split),
        Precision::F32 => train_typed::<f32>(&args, &cfg, &split),
    }
}

fn train_typed<T: Scalar>(args: &TrainArgs, cfg: &TrainConfig, split: &SplitResult) -> Result<()> {
    let pretrained: Option<MfParams<T>> = match &args.pretrained {
        Some(path) => Some(checkpoint::load_mf::<T>(path)?),
        None => None,
    };
    let outcome = trainer::train::<T>(split, cfg, pretrained.as_ref())?;
    checkpoint::save_model(
        &args.out_checkpoint,
        &outcome.model,
        ModelMeta {
            clip_predictions: cfg.clip_predictions,
        },
    )?;
    if let Some(log_path) = &args.log {
        let mut text = String::new();
        text.push_str(&format!(
            "# task={} variant={} n_neg={} positives_per_epoch={} negatives_per_epoch={}\n",
            cfg.task.name(),
            cfg.variant.name(),
            cfg.n_neg,
            outcome.positives_per_epoch,
            outcome.negatives_per_epoch,
        ));
        text.push_str(&format!(
            "# config {}\n",
            serde_json::to_string(cfg).unwrap()
        ));
        text.push_str(&format_log(&outcome.log));
        std::fs::write(log_path, text)?;
    }
    match outcome.best_epoch {
        Some(best) => println!(
            "train: {} epochs, best epoch {} (val {:.6}) -> {}",
            outcome.log.len(),
            best,
            outcome.log[best - 1].val_metric,
            args.out_checkpoint.display()
        ),
        None => println!(
            "train: {} epochs (no validation selection) -> {}",
            outcome.log.len(),
            args.out_checkpoint.display()
        ),
    }
    Ok(())
}

#[derive(Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_parser = ["rating", "ranking"])]
    task: String,
    /// Comma-separated ranking cutoffs.
    #[arg(long, default_value = "5,10")]
    k: String,
    /// Comma-separated bucket edges over per-user train counts.
    #[arg(long, default_value = "5,10,50")]
    buckets: String,
    #[arg(long)]
    out_report: PathBuf,
}

fn parse_usize_list(s: &str, what: &str) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for part in s.split(',') {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        out.push(
            part.parse::<usize>()
                .map_err(|_| Error::Config(format!("bad {what} entry `{part}`")))?,
        );
    }
    Ok(out)
}

pub fn run_evaluate(args: EvaluateArgs) -> Result<()> {
    let task = Task::parse(&args.task).expect("clap-validated");
    let ks = parse_usize_list(&args.k, "k")?;
    if task == Task::Ranking && ks.is_empty() {
        return Err(Error::Config("ranking evaluation needs at least one k".into()));
    }
    let buckets = parse_usize_list(&args.buckets, "buckets")?;
    if buckets.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config(format!(
            "bucket edges must be strictly ascending, got `{}`",
            args.buckets
        )));
    }
    let (corpus, split) = reload_split(&args.manifest)?;
    let dtype = checkpoint::peek_dtype(&args.checkpoint)?;
    let report = match dtype {
        Dtype::F64 => evaluate_typed::<f64>(&args, task, &corpus, &split, &ks, &buckets)?,
        Dtype::F32 => evaluate_typed::<f32>(&args, task, &corpus, &split, &ks, &buckets)?,
    };

    std::fs::write(&args.out_report, report.to_tsv())?;
    let structured = serde_json::json!({
        "invocation": {
            "checkpoint": args.checkpoint.display().to_string(),
            "manifest": args.manifest.display().to_string(),
            "task": task.name(),
            "k": ks,
            "buckets": buckets,
        },
        "report": report,
    });
    let json_path = args.out_report.with_extension("json");
    std::fs::write(
        &json_path,
        serde_json::to_string_pretty(&structured).unwrap(),
    )?;

    if let Some(r) = report.rmse {
        println!(
            "evaluate: rmse {r:.6} over {} users",
            report.evaluated_users
        );
    }
    for (k, v) in &report.hr_at_k {
        let p = report.metric(&format!("precision@{k}")).unwrap_or(f64::NAN);
        let n = report.metric(&format!("ndcg@{k}")).unwrap_or(f64::NAN);
        println!("evaluate: precision@{k} {p:.6}  hr@{k} {v:.6}  ndcg@{k} {n:.6}");
    }
    println!(
        "report -> {} and {}",
        args.out_report.display(),
        json_path.display()
    );
    Ok(())
}

fn evaluate_typed<T: Scalar>(
    args: &EvaluateArgs,
    task: Task,
    corpus: &Corpus,
    split: &SplitResult,
    ks: &[usize],
    buckets: &[usize],
) -> Result<EvalReport> {
    let loaded = checkpoint::load_any::<T>(&args.checkpoint)?;
    let (m, n) = (corpus.num_users(), corpus.num_items());
    match loaded {
        LoadedModel::Mf(mf) => {
            checkpoint::expect_shape("mf.user_bias", mf.user_bias.value.shape(), &[m])?;
            checkpoint::expect_shape("mf.item_bias", mf.item_bias.value.shape(), &[n])?;
            match task {
                Task::Rating => evaluate_rating(&*mf, split, true, buckets),
                Task::Ranking => evaluate_ranking(&*mf, split, ks, buckets),
            }
        }
        LoadedModel::Full(model, meta) => {
            checkpoint::expect_shape("mf.user_bias", model.mf.user_bias.value.shape(), &[m])?;
            checkpoint::expect_shape("mf.item_bias", model.mf.item_bias.value.shape(), &[n])?;
            match task {
                Task::Rating => evaluate_rating(&*model, split, meta.clip_predictions, buckets),
                Task::Ranking => evaluate_ranking(&*model, split, ks, buckets),
            }
        }
    }
}

#[derive(Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

pub fn run_gradcheck(args: GradcheckArgs) -> Result<()> {
    let report = trainer::gradcheck(args.seed)?;
    print!("{}", report.format());
    if report.passed() {
        println!(
            "gradcheck: ok (worst relative error {:.3e} < {:.0e})",
            report.worst(),
            report.threshold
        );
        Ok(())
    } else {
        Err(Error::Data(format!(
            "gradcheck failed: worst relative error {:.3e}",
            report.worst()
        )))
    }
}

#[derive(Args)]
pub struct SynthArgs {
    #[arg(long, value_parser = ["static", "drift"])]
    kind: String,
    #[arg(long, default_value_t = 100)]
    m: usize,
    #[arg(long, default_value_t = 50)]
    n: usize,
    #[arg(long, default_value_t = 4)]
    d: usize,
    #[arg(long, default_value_t = 0.1)]
    noise_std: f64,
    /// Observed fraction of the rating matrix (static corpora).
    #[arg(long, default_value_t = 0.1)]
    density: f64,
    /// Preference regimes per user (drift corpora).
    #[arg(long, default_value_t = 2)]
    regimes: usize,
    #[arg(long, default_value_t = 40)]
    events_per_user: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Output CSV path; drift corpora also write `<out>.truth.tsv`.
    #[arg(long)]
    out: PathBuf,
}

pub fn run_synth(args: SynthArgs) -> Result<()> {
    match args.kind.as_str() {
        "static" => {
            if !(0.0 < args.density && args.density <= 1.0) {
                return Err(Error::Config(format!(
                    "density must lie in (0, 1], got {}",
                    args.density
                )));
            }
            let corpus = gen_static(&StaticSpec {
                m: args.m,
                n: args.n,
                d: args.d,
                noise_std: args.noise_std,
                density: args.density,
                seed: args.seed,
            });
            std::fs::write(&args.out, to_csv(&corpus))?;
            println!(
                "synth static: {} users x {} items, {} events -> {}",
                args.m,
                args.n,
                corpus.len(),
                args.out.display()
            );
        }
        "drift" => {
            if args.regimes < 1 || args.events_per_user < args.regimes {
                return Err(Error::Config(
                    "need regimes >= 1 and events-per-user >= regimes".into(),
                ));
            }
            let out = gen_drift(&DriftSpec {
                m: args.m,
                n: args.n,
                d: args.d,
                regimes_per_user: args.regimes,
                events_per_user: args.events_per_user,
                noise_std: args.noise_std,
                seed: args.seed,
            });
            std::fs::write(&args.out, to_csv(&out.corpus))?;
            let truth_path = PathBuf::from(format!("{}.truth.tsv", args.out.display()));
            std::fs::write(&truth_path, truth_to_tsv(&out.truth))?;
            println!(
                "synth drift: {} users x {} items, {} events ({} clusters) -> {} (+truth)",
                args.m,
                args.n,
                out.corpus.len(),
                out.truth.num_clusters,
                args.out.display()
            );
        }
        _ => unreachable!("clap-validated"),
    }
    Ok(())
}
