//! `ihq` command-line entry point.
//!
//! Every command writes its artifacts under `--out` together with a
//! `stamp.json` recording the seed, a hash of the effective configuration
//! and the code version. Failures print `error[<category>]: <message>` on
//! stderr and exit with 1 (validation), 2 (numeric) or 3 (I/O).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use ihq::checkpoint::{config_hash, digest, Checkpoint};
use ihq::contrastive::{loss_curve_csv, pretrain, ContrastiveModel, PretrainConfig};
use ihq::curation::{collect_candidates, curation_report, read_annotations, read_catalog, read_keywords};
use ihq::data::{
    class_stats, filter_subset, load_manifest, save_dataset, stratified_kfold, FoldAssignment, Manifest, SubsetFilter,
};
use ihq::evaluation::{ablate_modalities, class_names, compute_metrics, confusion, cross_validate};
use ihq::fusion::{log_csv, Arch, Modalities, Prediction, TrainConfig};
use ihq::gradcheck::{cases, Precision, DEFAULT_RANDOM_PROGRAMS, DEFAULT_SEED};
use ihq::synthetic::{clustered_manifest, jitter_variants, replica_manifest, Signal, SyntheticSpec};
use ihq::{Error, ErrorCategory};

const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Parser)]
#[command(name = "ihq", version, about = "Tri-modal intent recognition over pre-extracted features")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Dataset statistics: per class, per group, benign/malicious, hours.
    Stats {
        #[arg(long)]
        manifest: PathBuf,
        /// Also write stats.json here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Keyword collection and majority-vote resolution.
    Curate(CurateArgs),
    /// Stratified k-fold assignment.
    Split {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 5)]
        folds: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Three-way contrastive pretraining of the projection heads.
    Pretrain(PretrainArgs),
    /// Cross-validated classifier training.
    Train(TrainArgs),
    /// Cross-validated fine-tuning on frozen pretrained embeddings.
    Finetune(TrainArgs),
    /// Metrics and confusion matrix from a predictions file.
    Evaluate {
        /// JSONL with `video_id`, `label` and `prediction` per line.
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        binary: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cross-validation for all seven modality subsets.
    Ablate(TrainArgs),
    /// Finite-difference check of every differentiable operation.
    Gradcheck {
        #[arg(long, value_enum, default_value_t = PrecisionArg::Both)]
        precision: PrecisionArg,
        #[arg(long, default_value_t = DEFAULT_SEED)]
        seed: u64,
        /// Number of randomly composed programs.
        #[arg(long, default_value_t = DEFAULT_RANDOM_PROGRAMS)]
        random: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Writes a seeded synthetic dataset (manifest plus feature files).
    Synth(SynthArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum PrecisionArg {
    F32,
    F64,
    Both,
}

#[derive(Debug, Args)]
struct CurateArgs {
    /// JSONL catalog entries.
    #[arg(long)]
    catalog: PathBuf,
    /// Tab-separated `category<TAB>keyword` lines.
    #[arg(long)]
    keywords: PathBuf,
    /// JSONL annotation records, three decisions each.
    #[arg(long)]
    annotations: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct PretrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    hidden: Option<usize>,
    /// Output embedding width of every projection head.
    #[arg(long)]
    embed_dim: Option<usize>,
    #[arg(long)]
    learnable_tau: bool,
    /// Average both anchor directions of each pairwise loss.
    #[arg(long)]
    symmetric: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "mlp")]
    arch: Arch,
    /// Modality subset, e.g. `v,t` or `all`.
    #[arg(long, default_value = "all")]
    modalities: Modalities,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    dropout: Option<f64>,
    /// Hidden widths of the MLP, e.g. `1024,512`.
    #[arg(long)]
    mlp_hidden: Option<String>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    ff_dim: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    blocks: Option<usize>,
    /// Train on variants of training-fold originals too.
    #[arg(long)]
    include_variants: bool,
    #[arg(long, default_value_t = 5)]
    folds: usize,
    /// Reuse a fold file from `ihq split` instead of stratifying.
    #[arg(long)]
    fold_file: Option<PathBuf>,
    #[arg(long)]
    filter: Option<SubsetFilter>,
    #[arg(long)]
    binary: bool,
    /// Contrastive checkpoint, required for fine-tuning.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SynthKind {
    /// Class clusters in a shared latent space.
    Clustered,
    /// Replica of the published class counts with tiny features.
    Replica,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SignalArg {
    All,
    VideoOnly,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long, value_enum, default_value_t = SynthKind::Clustered)]
    kind: SynthKind,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 10)]
    per_class: usize,
    #[arg(long)]
    variants: bool,
    #[arg(long, value_enum, default_value_t = SignalArg::All)]
    signal: SignalArg,
    #[arg(long)]
    shuffle_labels: bool,
    #[arg(long)]
    separation: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Serialize)]
struct Stamp<'a> {
    command: &'a str,
    seed: Option<u64>,
    config_hash: String,
    version: &'static str,
    /// Input file name → SHA-256 of its bytes.
    inputs: BTreeMap<String, String>,
}

/// A report plus the hash of the configuration that produced it.
#[derive(Debug, Serialize)]
struct Stamped<'a, T: Serialize> {
    config_hash: &'a str,
    seed: Option<u64>,
    #[serde(flatten)]
    report: &'a T,
}

fn write_text(dir: &Path, name: &str, text: &str) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    let path = dir.join(name);
    fs::write(&path, text).map_err(|e| io_error(&path, e))?;
    Ok(())
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write_text(dir, name, &s)
}

fn io_error(path: &Path, e: std::io::Error) -> anyhow::Error {
    anyhow::Error::new(e).context(format!("i/o error on {}", path.display()))
}

fn input_digests(paths: &[&Path]) -> Result<BTreeMap<String, String>> {
    paths
        .iter()
        .map(|p| {
            let bytes = fs::read(p).map_err(|e| io_error(p, e))?;
            let name = p.file_name().map_or_else(|| p.display().to_string(), |n| n.to_string_lossy().into_owned());
            Ok((name, digest(&bytes)))
        })
        .collect()
}

fn stamp(out: &Path, command: &str, seed: Option<u64>, hash: &str, inputs: &[&Path]) -> Result<()> {
    write_json(
        out,
        "stamp.json",
        &Stamp {
            command,
            seed,
            config_hash: hash.to_string(),
            version: VERSION,
            inputs: input_digests(inputs)?,
        },
    )
}

fn need_seed(seed: Option<u64>, command: &str) -> Result<u64> {
    seed.ok_or_else(|| anyhow!(Error::Config(format!("`{command}` requires --seed"))))
}

fn cmd_stats(manifest: &Path, out: Option<&Path>) -> Result<()> {
    let m = load_manifest(manifest)?;
    let s = class_stats(&m);
    println!(
        "videos {}  (originals {}, variants {})",
        s.total + s.variants,
        s.total,
        s.variants
    );
    println!("benign {}  malicious {}  hours {:.2}", s.benign, s.malicious, s.hours);
    for g in &s.per_group {
        println!("  group {:<12} {:>6}", g.name, g.count);
    }
    for c in &s.per_class {
        println!("  {:<28} {:>6}", c.class, c.count);
    }
    if let Some(out) = out {
        write_json(out, "stats.json", &s)?;
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct SkeletonRecord<'a> {
    video_id: &'a str,
    class: ihq::data::ClassId,
    provisional: ihq::data::ClassId,
    duration_s: f64,
}

fn cmd_curate(a: &CurateArgs) -> Result<()> {
    let catalog = read_catalog(&a.catalog)?;
    let keywords = read_keywords(&a.keywords)?;
    let annotations = read_annotations(&a.annotations)?;
    let pool = collect_candidates(&catalog, &keywords)?;
    let resolution = ihq::curation::resolve_annotations(&pool, &annotations)?;
    let report = curation_report(&pool, &resolution);

    let durations: BTreeMap<&str, f64> = catalog.iter().map(|c| (c.video_id.as_str(), c.duration_s)).collect();
    let mut skeleton = String::new();
    for l in &resolution.labeled {
        let rec = SkeletonRecord {
            video_id: &l.video_id,
            class: l.class,
            provisional: l.provisional,
            duration_s: durations[l.video_id.as_str()],
        };
        skeleton.push_str(&serde_json::to_string(&rec)?);
        skeleton.push('\n');
    }
    write_text(&a.out, "skeleton.jsonl", &skeleton)?;
    write_json(&a.out, "curation_report.json", &report)?;
    write_json(&a.out, "resolution.json", &resolution)?;
    let hash = config_hash(&serde_json::json!({ "command": "curate" }));
    stamp(&a.out, "curate", None, &hash, &[&a.catalog, &a.keywords, &a.annotations])?;
    println!(
        "collected {}  kept {}  relabeled {}  discarded {}",
        report.total.collected, report.total.kept, report.total.relabeled, report.total.discarded
    );
    Ok(())
}

fn cmd_split(manifest: &Path, k: usize, seed: Option<u64>, out: &Path) -> Result<()> {
    let seed = need_seed(seed, "split")?;
    let m = load_manifest(manifest)?;
    let folds = stratified_kfold(&m, k, seed)?;
    folds.check(&m)?;
    write_text(out, "folds.json", &folds.to_json())?;
    let hash = config_hash(&serde_json::json!({ "command": "split", "k": k, "seed": seed }));
    stamp(out, "split", Some(seed), &hash, &[manifest])?;
    println!("{k} folds, max per-class spread {}", folds.max_class_spread());
    Ok(())
}

fn cmd_pretrain(a: &PretrainArgs) -> Result<()> {
    let seed = need_seed(a.seed, "pretrain")?;
    let d = PretrainConfig::default();
    let config = PretrainConfig {
        tau: a.tau.unwrap_or(d.tau),
        batch: a.batch.unwrap_or(d.batch),
        epochs: a.epochs.unwrap_or(d.epochs),
        lr: a.lr.unwrap_or(d.lr),
        weight_decay: a.weight_decay.unwrap_or(d.weight_decay),
        hidden: a.hidden.unwrap_or(d.hidden),
        out_dim: a.embed_dim.unwrap_or(d.out_dim),
        learnable_tau: a.learnable_tau,
        symmetric: a.symmetric,
        seed,
    };
    let m = load_manifest(&a.manifest)?;
    let trained = pretrain(&m, &config)?;
    let ck = trained.model.to_checkpoint();
    ck.save(&a.out.join("contrastive.ihqc"))?;
    write_text(&a.out, "loss_curve.csv", &loss_curve_csv(&trained.curve))?;
    stamp(&a.out, "pretrain", Some(seed), &config_hash(&config), &[&a.manifest])?;
    if let Some(last) = trained.curve.last() {
        println!(
            "epoch {}: L_TV {:.4}  L_VA {:.4}  L_AT {:.4}  L_total {:.4}",
            last.epoch, last.tv, last.va, last.at, last.total
        );
    }
    Ok(())
}

fn parse_hidden(s: &str) -> Result<[usize; 2]> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| anyhow!(Error::Config(format!("bad --mlp-hidden `{s}`: {e}"))))?;
    parts
        .try_into()
        .map_err(|_| anyhow!(Error::Config(format!("--mlp-hidden needs two widths, got `{s}`"))))
}

fn train_config(a: &TrainArgs, arch: Arch, seed: u64) -> Result<TrainConfig> {
    let mut c = match arch {
        Arch::Finetune => TrainConfig::finetune(),
        other => TrainConfig::supervised(other),
    };
    c.modalities = a.modalities;
    c.binary = a.binary;
    c.seed = seed;
    c.include_variants = a.include_variants;
    if let Some(e) = a.epochs {
        c.set_epochs(e);
    }
    c.batch = a.batch.unwrap_or(c.batch);
    c.lr = a.lr.unwrap_or(c.lr);
    c.weight_decay = a.weight_decay.unwrap_or(c.weight_decay);
    c.dropout = a.dropout.unwrap_or(c.dropout);
    if let Some(h) = &a.mlp_hidden {
        c.mlp_hidden = parse_hidden(h)?;
    }
    c.xattn.d_model = a.d_model.unwrap_or(c.xattn.d_model);
    c.xattn.ff_dim = a.ff_dim.unwrap_or(c.xattn.ff_dim);
    c.xattn.heads = a.heads.unwrap_or(c.xattn.heads);
    c.xattn.blocks = a.blocks.unwrap_or(c.xattn.blocks);
    Ok(c)
}

/// Everything that determines a training run's outputs.
#[derive(Debug, Serialize)]
struct RunConfig<'a> {
    command: &'a str,
    train: &'a TrainConfig,
    folds_hash: String,
    filter: Option<SubsetFilter>,
    pretrained: Option<String>,
}

struct Prepared {
    manifest: Manifest,
    folds: FoldAssignment,
    config: TrainConfig,
    pretrained: Option<ContrastiveModel>,
    hash: String,
    inputs: Vec<PathBuf>,
}

fn prepare(a: &TrainArgs, command: &str, arch: Arch) -> Result<Prepared> {
    let seed = need_seed(a.seed, command)?;
    let config = train_config(a, arch, seed)?;
    let mut manifest = load_manifest(&a.manifest)?;
    if let Some(f) = a.filter {
        manifest = filter_subset(&manifest, f)?;
    }
    let mut inputs = vec![a.manifest.clone()];
    let folds = match &a.fold_file {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| io_error(p, e))?;
            inputs.push(p.clone());
            let folds = FoldAssignment::from_json(&text)?.restrict(&manifest);
            folds.check(&manifest)?;
            folds
        }
        None => stratified_kfold(&manifest, a.folds, seed)?,
    };
    let pretrained = match (arch, &a.checkpoint) {
        (Arch::Finetune, Some(p)) => {
            inputs.push(p.clone());
            Some(ContrastiveModel::from_checkpoint(&Checkpoint::load(p)?)?)
        }
        (Arch::Finetune, None) => {
            return Err(anyhow!(Error::Config(
                "fine-tuning requires --checkpoint from `ihq pretrain`".into()
            )))
        }
        _ => None,
    };
    let hash = config_hash(&RunConfig {
        command,
        train: &config,
        folds_hash: folds.hash(),
        filter: a.filter,
        pretrained: pretrained.as_ref().map(|m| m.params.fingerprint()),
    });
    Ok(Prepared {
        manifest,
        folds,
        config,
        pretrained,
        hash,
        inputs,
    })
}

fn cmd_train(a: &TrainArgs, command: &str, arch: Arch) -> Result<()> {
    let p = prepare(a, command, arch)?;
    let run = cross_validate(&p.manifest, &p.folds, &p.config, p.pretrained.as_ref())?;
    let out = &a.out;
    let seed = Some(p.config.seed);
    write_json(
        out,
        "metrics.json",
        &Stamped {
            config_hash: &p.hash,
            seed,
            report: &run.report,
        },
    )?;
    write_text(out, "confusion.csv", &run.report.confusion.to_csv())?;
    write_text(out, "folds.json", &p.folds.to_json())?;
    let mut preds = String::new();
    for pr in run.predictions() {
        preds.push_str(&serde_json::to_string(&pr)?);
        preds.push('\n');
    }
    write_text(out, "predictions.jsonl", &preds)?;
    for r in &run.runs {
        write_text(out, &format!("train_log_fold{}.csv", r.fold), &log_csv(&r.log))?;
        r.classifier
            .to_checkpoint()
            .save(&out.join(format!("checkpoints/fold{}.ihqc", r.fold)))?;
    }
    let inputs: Vec<&Path> = p.inputs.iter().map(PathBuf::as_path).collect();
    stamp(out, command, seed, &p.hash, &inputs)?;
    let m = &run.report.mean;
    println!(
        "{} [{}] accuracy {:.4}  macro-P {:.4}  macro-R {:.4}  macro-F1 {:.4}",
        p.config.arch,
        p.config.modalities.label(),
        m.accuracy,
        m.macro_precision,
        m.macro_recall,
        m.macro_f1
    );
    Ok(())
}

fn cmd_ablate(a: &TrainArgs) -> Result<()> {
    let p = prepare(a, "ablate", a.arch)?;
    let reports = ablate_modalities(&p.manifest, &p.folds, &p.config, p.pretrained.as_ref())?;
    let mut table = String::from("modalities,accuracy,macro_precision,macro_recall,macro_f1\n");
    for r in &reports {
        let m = &r.mean;
        table.push_str(&format!(
            "\"{}\",{},{},{},{}\n",
            r.modalities.label(),
            m.accuracy,
            m.macro_precision,
            m.macro_recall,
            m.macro_f1
        ));
        println!("{:<6} accuracy {:.4}  macro-F1 {:.4}", r.modalities.label(), m.accuracy, m.macro_f1);
    }
    let seed = Some(p.config.seed);
    write_json(
        &a.out,
        "ablation.json",
        &Stamped {
            config_hash: &p.hash,
            seed,
            report: &serde_json::json!({ "arms": reports }),
        },
    )?;
    write_text(&a.out, "ablation.csv", &table)?;
    write_text(&a.out, "folds.json", &p.folds.to_json())?;
    let inputs: Vec<&Path> = p.inputs.iter().map(PathBuf::as_path).collect();
    stamp(&a.out, "ablate", seed, &p.hash, &inputs)
}

fn cmd_evaluate(predictions: &Path, binary: bool, out: &Path) -> Result<()> {
    let text = fs::read_to_string(predictions).map_err(|e| io_error(predictions, e))?;
    let mut preds = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let p: Prediction = serde_json::from_str(line).map_err(|e| {
            anyhow!(Error::Format {
                path: predictions.display().to_string(),
                detail: format!("line {}: {e}", i + 1),
            })
        })?;
        preds.push(p);
    }
    let names = class_names(if binary { 2 } else { ihq::data::NUM_CLASSES });
    let labels: Vec<usize> = preds.iter().map(|p| p.label).collect();
    let predicted: Vec<usize> = preds.iter().map(|p| p.prediction).collect();
    let metrics = compute_metrics(&predicted, &labels, &names)?;
    let cm = confusion(&predicted, &labels, &names)?;
    let hash = config_hash(&serde_json::json!({ "command": "evaluate", "binary": binary }));
    write_json(
        out,
        "metrics.json",
        &Stamped {
            config_hash: &hash,
            seed: None,
            report: &metrics,
        },
    )?;
    write_text(out, "confusion.csv", &cm.to_csv())?;
    stamp(out, "evaluate", None, &hash, &[predictions])?;
    println!(
        "n {}  accuracy {:.4}  macro-P {:.4}  macro-R {:.4}  macro-F1 {:.4}",
        metrics.n, metrics.accuracy, metrics.macro_precision, metrics.macro_recall, metrics.macro_f1
    );
    Ok(())
}

fn cmd_gradcheck(precision: PrecisionArg, seed: u64, random: usize, out: Option<&Path>) -> Result<()> {
    let precisions: &[Precision] = match precision {
        PrecisionArg::F32 => &[Precision::F32],
        PrecisionArg::F64 => &[Precision::F64],
        PrecisionArg::Both => &[Precision::F32, Precision::F64],
    };
    let mut results = Vec::new();
    for case in cases(seed, random) {
        for &p in precisions {
            let r = case.check(p)?;
            println!(
                "{:<4} {:<24} {}  rel.err {:.3e}  tol {:.0e}",
                if r.passed { "PASS" } else { "FAIL" },
                r.name,
                r.precision,
                r.max_rel_error,
                r.tolerance
            );
            results.push(r);
        }
    }
    if let Some(out) = out {
        write_json(out, "gradcheck.json", &results)?;
        let hash = config_hash(&serde_json::json!({ "command": "gradcheck", "seed": seed, "random": random }));
        stamp(out, "gradcheck", Some(seed), &hash, &[])?;
    }
    let failed: Vec<String> = results
        .iter()
        .filter(|r| !r.passed)
        .map(|r| format!("{} ({})", r.name, r.precision))
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(anyhow!(Error::Numeric {
            op: "gradcheck",
            detail: format!("{} case(s) failed: {}", failed.len(), failed.join(", ")),
        }))
    }
}

fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let manifest = match a.kind {
        SynthKind::Replica if a.variants => jitter_variants(&replica_manifest(a.seed)?, 0.1, a.seed)?,
        SynthKind::Replica => replica_manifest(a.seed)?,
        SynthKind::Clustered => {
            let d = SyntheticSpec::default();
            clustered_manifest(&SyntheticSpec {
                per_class: a.per_class,
                separation: a.separation.unwrap_or(d.separation),
                signal: match a.signal {
                    SignalArg::All => Signal::All,
                    SignalArg::VideoOnly => Signal::VideoOnly,
                },
                variants: a.variants,
                shuffle_labels: a.shuffle_labels,
                seed: a.seed,
                ..d
            })?
        }
    };
    save_dataset(&manifest, &a.out, "manifest.jsonl")?;
    println!(
        "wrote {} records ({} originals) to {}",
        manifest.len(),
        manifest.num_originals(),
        a.out.join("manifest.jsonl").display()
    );
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Stats { manifest, out } => cmd_stats(manifest, out.as_deref()),
        Command::Curate(a) => cmd_curate(a),
        Command::Split {
            manifest,
            folds,
            seed,
            out,
        } => cmd_split(manifest, *folds, *seed, out),
        Command::Pretrain(a) => cmd_pretrain(a),
        Command::Train(a) => cmd_train(a, "train", a.arch),
        Command::Finetune(a) => cmd_train(a, "finetune", Arch::Finetune),
        Command::Evaluate {
            predictions,
            binary,
            out,
        } => cmd_evaluate(predictions, *binary, out),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Gradcheck {
            precision,
            seed,
            random,
            out,
        } => cmd_gradcheck(*precision, *seed, *random, out.as_deref()),
        Command::Synth(a) => cmd_synth(a),
    }
}

/// Category of the first library or I/O error in the chain.
fn category(err: &anyhow::Error) -> ErrorCategory {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return e.category();
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return ErrorCategory::Io;
        }
    }
    ErrorCategory::Validation
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error[{}]: {first}", ErrorCategory::Validation);
            eprintln!("{}", msg.lines().skip(1).collect::<Vec<_>>().join("\n").trim());
            return ExitCode::from(ErrorCategory::Validation.exit_code() as u8);
        }
    };
    match run(cli).context("command failed") {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let cat = category(&e);
            let mut msg = String::new();
            for cause in e.chain().skip(1).map(ToString::to_string) {
                // Library errors already embed their source in their message.
                if !msg.contains(&cause) {
                    if !msg.is_empty() {
                        msg.push_str(": ");
                    }
                    msg.push_str(&cause);
                }
            }
            eprintln!("error[{cat}]: {msg}");
            ExitCode::from(cat.exit_code() as u8)
        }
    }
}
