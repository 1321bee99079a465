//! `condssl`: pretrain, evaluate, analyze, retrieve, and report on
//! augmentation-conditioned self-supervised models.
//!
//! Dotted-path flags like `--train.epochs=5` override config-file keys;
//! precedence is CLI > file > defaults. Exit codes: 0 success, 1 runtime
//! failure, 2 usage or config error.

mod commands;
mod config;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use commands::{AnalyzeFlags, EvalFlags};
use config::{load_config, split_overrides, Override, RunConfig};

/// Failures split by exit code: usage/config problems exit 2, everything
/// that breaks mid-run exits 1.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<condssl::Error> for CliError {
    fn from(e: condssl::Error) -> Self {
        match e {
            condssl::Error::Config(_) => CliError::Usage(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

#[derive(Parser)]
#[command(name = "condssl", version, about = "Augmentation-conditioned self-supervised pretraining toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Pretrain a model; writes checkpoints and a per-epoch loss log.
    Pretrain(PretrainArgs),
    /// Evaluate a checkpoint with a frozen-feature protocol.
    Eval(EvalArgs),
    /// Run a representation analysis; writes a JSON report and a plot.
    Analyze(AnalyzeArgs),
    /// Rank gallery images by cosine similarity to one query image.
    Retrieve(RetrieveArgs),
    /// Summarize one or more run directories as Markdown.
    Report(ReportArgs),
}

#[derive(Args)]
struct PretrainArgs {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output parent directory; overrides the config's `out`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Checkpoint to resume from; the configuration must match.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// One of: linear, fewshot, rotation.
    #[arg(long)]
    protocol: String,
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Defaults to the config's train.seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Probe metric: top1 or mean-per-class.
    #[arg(long)]
    metric: Option<String>,
    #[arg(long)]
    n_way: Option<usize>,
    #[arg(long)]
    k_shot: Option<usize>,
    #[arg(long)]
    query_per_class: Option<usize>,
    #[arg(long)]
    n_episodes: Option<usize>,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// One of: conditioning, sensitivity, spectrum, variance, retrieval,
    /// losscurves.
    #[arg(long)]
    analysis: String,
    /// Checkpoint file; repeatable where the analysis compares runs.
    #[arg(long)]
    checkpoint: Vec<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Pair count for conditioning, query count for retrieval.
    #[arg(long)]
    n_pairs: Option<usize>,
    /// Augmentation kind for sensitivity: crop, jitter, blur, flip,
    /// grayscale, all.
    #[arg(long)]
    aug: Option<String>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Cached embedding payload (.bin with JSON sidecar) for spectrum and
    /// variance, replacing --checkpoint/--config.
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Training log (CSV); losscurves needs two or more, baseline first.
    #[arg(long)]
    log: Vec<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Neighbors per query for retrieval.
    #[arg(long)]
    k: Option<usize>,
    /// Explicit 1-based eigenvalue fit range for spectrum.
    #[arg(long)]
    fit_lo: Option<usize>,
    #[arg(long)]
    fit_hi: Option<usize>,
}

#[derive(Args)]
struct RetrieveArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    config: PathBuf,
    /// Row of the configured dataset split used as the query.
    #[arg(long)]
    query_index: usize,
    #[arg(long, default_value_t = 10)]
    k: usize,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct ReportArgs {
    /// Run directory to summarize; repeatable.
    #[arg(long)]
    run: Vec<PathBuf>,
    /// Output file; defaults to report.md inside the first run directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn load(config: &std::path::Path, out: &Option<PathBuf>, ovs: &[Override]) -> Result<RunConfig, CliError> {
    let mut cfg = load_config(config, ovs)?;
    if let Some(o) = out {
        cfg.out = o.clone();
    }
    Ok(cfg)
}

fn run(cli: Cli, overrides: Vec<Override>) -> Result<(), CliError> {
    match cli.cmd {
        Cmd::Pretrain(a) => {
            let cfg = load(&a.config, &a.out, &overrides)?;
            commands::cmd_pretrain(&cfg, a.resume.as_deref())
        }
        Cmd::Eval(a) => {
            let cfg = load(&a.config, &a.out, &overrides)?;
            let flags = EvalFlags {
                seed: a.seed,
                metric: a.metric,
                n_way: a.n_way,
                k_shot: a.k_shot,
                query_per_class: a.query_per_class,
                n_episodes: a.n_episodes,
            };
            commands::cmd_eval(&cfg, &a.checkpoint, &a.protocol, &flags)
        }
        Cmd::Analyze(a) => {
            let cfg = match &a.config {
                Some(p) => Some(load(p, &a.out, &overrides)?),
                None if overrides.is_empty() => None,
                None => {
                    return Err(CliError::Usage(
                        "dotted overrides need --config to override".into(),
                    ))
                }
            };
            let flags = AnalyzeFlags {
                checkpoints: a.checkpoint,
                config: cfg,
                n_pairs: a.n_pairs,
                aug: a.aug,
                tau: a.tau,
                batch_size: a.batch_size,
                embeddings: a.embeddings,
                logs: a.log,
                seed: a.seed,
                k: a.k,
                fit_lo: a.fit_lo,
                fit_hi: a.fit_hi,
            };
            commands::cmd_analyze(&a.analysis, &flags, a.out.as_deref())
        }
        Cmd::Retrieve(a) => {
            let cfg = load(&a.config, &a.out, &overrides)?;
            commands::cmd_retrieve(&cfg, &a.checkpoint, a.query_index, a.k, a.seed)
        }
        Cmd::Report(a) => {
            if !overrides.is_empty() {
                return Err(CliError::Usage("report takes no config overrides".into()));
            }
            commands::cmd_report(&a.run, a.out.as_deref())
        }
    }
}

fn main() {
    let (argv, overrides) = split_overrides(std::env::args().collect());
    // clap exits 2 on usage errors and 0 for --help/--version on its own.
    let cli = Cli::parse_from(argv);
    match run(cli, overrides) {
        Ok(()) => {}
        Err(CliError::Usage(m)) => {
            eprintln!("error: {m}");
            std::process::exit(2);
        }
        Err(CliError::Runtime(m)) => {
            eprintln!("error: {m}");
            std::process::exit(1);
        }
    }
}
