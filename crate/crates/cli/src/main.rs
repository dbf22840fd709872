//! `monosema` command-line tool.
//!
//! Exit codes: 0 success, 2 usage, I/O or configuration error, 3 numerical
//! failure. `MONOSEMA_THREADS` overrides `--threads`.

mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use monosema::bench::{bench_svg, parse_sizes, run_bench, training_overhead, write_bench_csv, BenchConfig};
use monosema::data::{self, Dtype, SyntheticSpec};
use monosema::metrics::{self, R2Accumulator};
use monosema::monoscore::{self, write_scores_csv, Algorithm, MonoScoreConfig};
use monosema::sae::checkpoint::{encode_checkpoint, read_checkpoint};
use monosema::sae::train::write_epoch_csv;
use monosema::sae::{self, Arch, TrainConfig, TrainFailure};

use output::Outputs;

#[derive(Parser)]
#[command(name = "monosema", version, about = "MonoScore, MonoLoss and sparse autoencoder tooling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Score every latent of an activation file.
    Score(ScoreArgs),
    /// Train a sparse autoencoder.
    Train(TrainArgs),
    /// Evaluate a checkpoint.
    Eval(EvalArgs),
    /// Time pairwise against single-pass scoring.
    Bench(BenchArgs),
    /// Write a clustered synthetic dataset.
    Synth(SynthArgs),
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    features: PathBuf,
    /// Sample-major activation file in the feature container format.
    #[arg(long)]
    activations: PathBuf,
    #[arg(long, default_value = "linear")]
    algo: Algorithm,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = monoscore::DEFAULT_EPSILON_DEN)]
    epsilon_den: f64,
    #[arg(long, default_value_t = 1024)]
    batch_size: usize,
    /// Worker threads for the linear path.
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum ArchArg {
    Topk,
    Batchtopk,
    Relu,
    Jumprelu,
}

impl From<ArchArg> for Arch {
    fn from(a: ArchArg) -> Arch {
        match a {
            ArchArg::Topk => Arch::TopK,
            ArchArg::Batchtopk => Arch::BatchTopK,
            ArchArg::Relu => Arch::Relu,
            ArchArg::Jumprelu => Arch::JumpRelu,
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    features: PathBuf,
    #[arg(long, value_enum)]
    arch: ArchArg,
    #[arg(long)]
    latents: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    l1_coeff: Option<f64>,
    #[arg(long)]
    jump_coeff: Option<f64>,
    #[arg(long)]
    bandwidth: Option<f64>,
    #[arg(long, default_value_t = 0.0)]
    lambda_mono: f64,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Override the architecture's default weight tying.
    #[arg(long)]
    tied: Option<bool>,
    #[arg(long)]
    layer_norm: bool,
    /// Start from the full-scale hyperparameters instead of desk-scale ones.
    #[arg(long)]
    full_scale: bool,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "r2,monoscore,curve")]
    metrics: Vec<Metric>,
    #[arg(long)]
    out: PathBuf,
    /// Defaults to the training batch size, which BatchTopK selection depends on.
    #[arg(long)]
    batch_size: Option<usize>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Metric {
    R2,
    Monoscore,
    Purity,
    Curve,
}

#[derive(Args)]
struct BenchArgs {
    /// Powers of two, e.g. `2^8..2^14` or `256,512`.
    #[arg(long, default_value = "2^8..2^14")]
    sizes: String,
    #[arg(long, default_value_t = 64)]
    dim: usize,
    #[arg(long, default_value_t = 256)]
    latents: usize,
    #[arg(long, default_value_t = 3)]
    reps: usize,
    #[arg(long, default_value_t = 1 << 14)]
    pairwise_cutoff: usize,
    #[arg(long, default_value_t = 1)]
    threads: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Fast calls are looped until one timed sample lasts this long.
    #[arg(long, default_value_t = 0.25)]
    min_sample_seconds: f64,
    /// Also time one training run with and without MonoLoss.
    #[arg(long)]
    overhead: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 16)]
    clusters: usize,
    #[arg(long, default_value_t = 200)]
    samples_per_cluster: usize,
    #[arg(long, default_value_t = 64)]
    dim: usize,
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

fn threads(flag: usize) -> Result<usize> {
    match std::env::var("MONOSEMA_THREADS") {
        Ok(v) => {
            let n: usize = v.trim().parse().with_context(|| format!("MONOSEMA_THREADS={v:?}"))?;
            Ok(n.max(1))
        }
        Err(_) => Ok(flag.max(1)),
    }
}

fn json_bytes(value: &impl serde::Serialize) -> Result<Vec<u8>> {
    let mut v = serde_json::to_vec_pretty(value)?;
    v.push(b'\n');
    Ok(v)
}

fn csv_bytes(f: impl FnOnce(&mut Vec<u8>) -> std::io::Result<()>) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    Ok(buf)
}

fn cmd_score(args: ScoreArgs) -> Result<()> {
    let h = data::read_features(&args.features)
        .with_context(|| format!("reading features {}", args.features.display()))?;
    let a = data::read_activations(&args.activations)
        .with_context(|| format!("reading activations {}", args.activations.display()))?;
    let cfg = MonoScoreConfig {
        epsilon_den: args.epsilon_den,
        batch_size: args.batch_size,
        ..Default::default()
    };
    let threads = threads(args.threads)?;
    let scores = match args.algo {
        Algorithm::Linear if threads > 1 => monoscore::monoscore_linear_sharded(&h, &a, &cfg, threads)?,
        algo => monoscore::monoscore(&h, &a, algo, &cfg)?,
    };
    let summary = json!({
        "algorithm": args.algo.as_str(),
        "n_samples": h.n_samples(),
        "dim": h.dim(),
        "n_latents": a.n_latents(),
        "active_latents": scores.active_count(),
        "mean_monoscore_active": scores.mean_active(),
        "config": { "epsilon_den": cfg.epsilon_den, "batch_size": cfg.batch_size, "threads": threads },
    });
    let mut out = Outputs::new();
    out.add("scores.csv", csv_bytes(|b| write_scores_csv(b, &scores))?);
    out.add("summary.json", json_bytes(&summary)?);
    out.commit(&args.out)
}

fn train_config(args: &TrainArgs) -> TrainConfig {
    let arch = Arch::from(args.arch);
    let mut cfg = if args.full_scale {
        TrainConfig::full_scale(arch)
    } else {
        TrainConfig::desk(arch)
    };
    if let Some(v) = args.latents {
        cfg.n_latents = v;
    }
    if let Some(v) = args.k {
        cfg.k_active = v;
    }
    if let Some(v) = args.l1_coeff {
        cfg.l1_coeff = v;
    }
    if let Some(v) = args.jump_coeff {
        cfg.jump_sparsity_coeff = v;
    }
    if let Some(v) = args.bandwidth {
        cfg.bandwidth = v;
    }
    if let Some(v) = args.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = args.batch_size {
        cfg.batch_size = v;
        cfg.dead_threshold_examples = 10 * v as u64;
    }
    if let Some(v) = args.lr {
        cfg.lr = v;
    }
    if let Some(v) = args.tied {
        cfg.tied = v;
    }
    cfg.lambda_mono = args.lambda_mono;
    cfg.seed = args.seed;
    cfg.layer_norm = args.layer_norm;
    cfg
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let features = data::read_features(&args.features)
        .with_context(|| format!("reading features {}", args.features.display()))?;
    let cfg = train_config(&args);
    cfg.validate()?;
    match sae::train(&features, &cfg) {
        Ok((model, report)) => {
            let mut out = Outputs::new();
            out.add("model.saem", encode_checkpoint(&model, &cfg)?);
            out.add("report.json", json_bytes(&report)?);
            out.add("epochs.csv", csv_bytes(|b| write_epoch_csv(b, &report))?);
            out.commit(&args.out_dir)
        }
        Err(TrainFailure { error, partial }) => {
            // Keep the diagnostics of completed epochs; no checkpoint.
            let mut out = Outputs::new();
            out.add("report.json", json_bytes(&*partial)?);
            out.add("epochs.csv", csv_bytes(|b| write_epoch_csv(b, &partial))?);
            out.commit(&args.out_dir)?;
            Err(error.into())
        }
    }
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let wants = |m| args.metrics.contains(&m);
    if wants(Metric::Purity) && args.labels.is_none() {
        bail!(UsageError("purity requires --labels".into()));
    }
    let (model, cfg) = read_checkpoint(&args.checkpoint)
        .with_context(|| format!("reading checkpoint {}", args.checkpoint.display()))?;
    let features = data::read_features(&args.features)
        .with_context(|| format!("reading features {}", args.features.display()))?;
    let labels = match &args.labels {
        Some(p) => Some(data::read_labels(p, features.n_samples())?),
        None => None,
    };
    let (activations, recon) = model.encode_dataset(&features, args.batch_size.unwrap_or(cfg.batch_size))?;

    let mut out = Outputs::new();
    let mut summary: Vec<(&str, f64)> = Vec::new();
    let mut report = serde_json::Map::new();
    report.insert("checkpoint_config".into(), serde_json::to_value(&cfg)?);
    report.insert("n_samples".into(), json!(features.n_samples()));

    if wants(Metric::R2) {
        let mut acc = R2Accumulator::new(features.dim());
        acc.update(features.view(), recon.view())?;
        let r2 = acc.finalize()?;
        summary.push(("mean_r2", r2.mean));
        out.add("r2.json", json_bytes(&r2)?);
        report.insert("mean_r2".into(), json!(r2.mean));
    }
    if wants(Metric::Monoscore) || wants(Metric::Curve) {
        let score_cfg = MonoScoreConfig {
            epsilon_den: cfg.epsilon_den,
            ..Default::default()
        };
        let scores = monoscore::monoscore_linear(&features, &activations, &score_cfg)?;
        if wants(Metric::Monoscore) {
            if let Some(m) = scores.mean_active() {
                summary.push(("mean_monoscore", m));
            }
            summary.push(("active_latents", scores.active_count() as f64));
            out.add("monoscore.csv", csv_bytes(|b| write_scores_csv(b, &scores))?);
            report.insert("mean_monoscore_active".into(), json!(scores.mean_active()));
        }
        if wants(Metric::Curve) {
            let curve = metrics::monoscore_curve(&scores);
            out.add("curve.csv", csv_bytes(|b| metrics::write_curve_csv(b, &curve))?);
        }
    }
    if let (true, Some(labels)) = (wants(Metric::Purity), &labels) {
        let purity = metrics::class_purity(&activations, labels)?;
        if let Some(b) = purity.mean_binary {
            summary.push(("mean_binary_purity", b));
        }
        if let Some(w) = purity.mean_weighted {
            summary.push(("mean_weighted_purity", w));
        }
        out.add("purity.csv", csv_bytes(|b| metrics::write_purity_csv(b, &purity))?);
        report.insert("purity".into(), serde_json::to_value(&purity)?);
    }
    out.add("summary.csv", csv_bytes(|b| metrics::write_summary_csv(b, &summary))?);
    out.add("eval.json", json_bytes(&report)?);
    out.commit(&args.out)
}

fn cmd_bench(args: BenchArgs) -> Result<()> {
    let sizes = parse_sizes(&args.sizes)?;
    let cfg = BenchConfig {
        sizes,
        dim: args.dim,
        latents: args.latents,
        repetitions: args.reps,
        pairwise_cutoff: args.pairwise_cutoff,
        threads: threads(args.threads)?,
        seed: args.seed,
        min_sample_seconds: args.min_sample_seconds,
    };
    cfg.validate()?;
    let result = run_bench(&cfg)?;
    let mut report = serde_json::to_value(&result)?;
    if args.overhead {
        let synth = data::generate_synthetic(&SyntheticSpec {
            n_clusters: 16,
            samples_per_cluster: 200,
            dim: args.dim,
            within_cluster_noise: 0.1,
            seed: args.seed,
        })?;
        let mut train_cfg = TrainConfig::desk(Arch::TopK);
        train_cfg.epochs = 2;
        let overhead = training_overhead(&synth.features, &train_cfg, 1e-2)?;
        report["training_overhead"] = serde_json::to_value(overhead)?;
    }
    let mut out = Outputs::new();
    out.add("bench.csv", csv_bytes(|b| write_bench_csv(b, &result))?);
    out.add("bench.json", json_bytes(&report)?);
    out.add("bench.svg", bench_svg(&result).into_bytes());
    out.commit(&args.out)
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let spec = SyntheticSpec {
        n_clusters: args.clusters,
        samples_per_cluster: args.samples_per_cluster,
        dim: args.dim,
        within_cluster_noise: args.noise,
        seed: args.seed,
    };
    let synth = data::generate_synthetic(&spec)?;
    let mut out = Outputs::new();
    out.add("features.mfea", data::encode_matrix(synth.features.as_array(), Dtype::F64)?);
    out.add("centers.mfea", data::encode_matrix(&synth.centers, Dtype::F64)?);
    out.add("labels.txt", data::encode_labels(&synth.labels).into_bytes());
    out.add("spec.json", json_bytes(&spec)?);
    out.commit(&args.out)
}

#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn exit_code(err: &anyhow::Error) -> u8 {
    let numerical = err
        .chain()
        .any(|e| e.downcast_ref::<monosema::Error>().is_some_and(|e| e.is_numerical()));
    if numerical {
        3
    } else {
        2
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Score(a) => cmd_score(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Synth(a) => cmd_synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
