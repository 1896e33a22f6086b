//! Command-line interface: train, evaluate, predict, grid-search, verify.
//!
//! Exit codes: 0 success, 2 configuration or data error, 3 numeric failure,
//! 4 verification failure.

mod commands;
mod config;
mod verify;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Numeric(String),
    Verify(String),
}

impl CliError {
    pub fn config(msg: impl Into<String>) -> Self {
        CliError::Config(msg.into())
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numeric(_) => 3,
            CliError::Verify(_) => 4,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Numeric(m) | CliError::Verify(m) => m,
        }
    }
}

impl From<spnseq::Error> for CliError {
    fn from(e: spnseq::Error) -> Self {
        match e {
            spnseq::Error::Numeric(m) => CliError::Numeric(m),
            other => CliError::Config(other.to_string()),
        }
    }
}

#[derive(Parser)]
#[command(
    name = "spnseq",
    version,
    about = "Sequence labeling with sum-product-network local factors"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write the best checkpoint plus a JSON report.
    Train(TrainArgs),
    /// Evaluate a checkpoint: label error rate with a per-sequence breakdown.
    Eval(EvalArgs),
    /// Decode sequences; one line of space-separated label indices each.
    Predict(PredictArgs),
    /// Train over a learning-rate / L2 grid and report the best pair.
    GridSearch(GridSearchArgs),
    /// Run the oracle-equivalence and gradient-check suites.
    Verify(VerifyArgs),
}

/// Model, training and data selection, shared by the training-style
/// commands. Every flag overrides the corresponding config-file entry.
#[derive(Args, Clone)]
pub struct RunFlags {
    /// TOML config file; flags override its entries.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Model kind: spn-memm, spn-crf, or spn-ho-crf.
    #[arg(long)]
    pub model: Option<String>,
    /// SPN hidden layers (L).
    #[arg(long)]
    pub layers: Option<usize>,
    /// Children per parent (I).
    #[arg(long)]
    pub children: Option<usize>,
    /// States per hidden variable (H).
    #[arg(long)]
    pub states: Option<usize>,
    /// MEMM order M.
    #[arg(long)]
    pub order: Option<usize>,
    /// Beam width for MEMM decoding.
    #[arg(long)]
    pub beam_width: Option<usize>,
    /// Observation window width.
    #[arg(long)]
    pub window: Option<usize>,
    /// Higher-order factors, e.g. "1:1,2:2".
    #[arg(long)]
    pub factors: Option<String>,
    /// Transition n-gram orders, e.g. "1,2".
    #[arg(long)]
    pub ngram_orders: Option<String>,
    /// Semiring: sum or max.
    #[arg(long)]
    pub semiring: Option<String>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub l2: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Epochs between development evaluations.
    #[arg(long)]
    pub eval_every: Option<usize>,
    /// Worker threads for evaluation passes.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,

    /// Data kind: jsonl, ocr, or synth.
    #[arg(long)]
    pub data_kind: Option<String>,
    /// Training set (JSON lines).
    #[arg(long)]
    pub train_data: Option<PathBuf>,
    /// Development set (JSON lines).
    #[arg(long)]
    pub dev_data: Option<PathBuf>,
    /// Test set (JSON lines).
    #[arg(long)]
    pub test_data: Option<PathBuf>,
    /// Handwritten-letter corpus file.
    #[arg(long)]
    pub ocr: Option<PathBuf>,
    /// Fold held out as the test set.
    #[arg(long)]
    pub test_fold: Option<usize>,
    /// Fold held out as the development set.
    #[arg(long)]
    pub dev_fold: Option<usize>,
    /// Synthetic task: "seed,sequences,len,labels,dim".
    #[arg(long)]
    pub synth: Option<String>,
    /// Sequences from the synthetic tail held out for development.
    #[arg(long)]
    pub synth_dev: Option<usize>,
    /// Skip feature normalization.
    #[arg(long)]
    pub no_normalize: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    flags: RunFlags,
    /// Checkpoint output path.
    #[arg(long, default_value = "model.json")]
    out_model: PathBuf,
    /// Training report output path.
    #[arg(long, default_value = "train_report.json")]
    out_report: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint to evaluate.
    #[arg(long)]
    model_file: PathBuf,
    #[command(flatten)]
    flags: RunFlags,
    /// Where to write the JSON report (stdout summary is always printed).
    #[arg(long)]
    out_report: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    /// Checkpoint to decode with.
    #[arg(long)]
    model_file: PathBuf,
    #[command(flatten)]
    flags: RunFlags,
    /// Output file; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write per-position posterior label marginals (JSON lines, one
    /// record per sequence). Chain models only.
    #[arg(long)]
    marginals: Option<PathBuf>,
}

#[derive(Args)]
struct GridSearchArgs {
    #[command(flatten)]
    flags: RunFlags,
    /// Learning-rate grid.
    #[arg(long, default_value = "1e-2,1e-3,1e-4")]
    lrs: String,
    /// L2 grid.
    #[arg(long, default_value = "1e-2,1e-3,1e-4")]
    l2s: String,
    /// Grid report output path.
    #[arg(long, default_value = "grid_report.json")]
    out_report: PathBuf,
}

#[derive(Args)]
struct VerifyArgs {
    /// Suite to run: all, spn, chain, memm, or gradients.
    #[arg(long, default_value = "all")]
    scope: String,
    /// Corrupt one gradient component to prove the harness catches it.
    #[arg(long)]
    inject_fault: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn merged_config(flags: &RunFlags) -> Result<config::RunConfig, CliError> {
    let mut cfg = match &flags.config {
        Some(path) => config::RunConfig::load(path)?,
        None => config::RunConfig::default(),
    };
    if let Some(v) = &flags.model {
        cfg.model.kind = v.clone();
    }
    if let Some(v) = flags.layers {
        cfg.model.layers = v;
    }
    if let Some(v) = flags.children {
        cfg.model.children = v;
    }
    if let Some(v) = flags.states {
        cfg.model.states = v;
    }
    if let Some(v) = flags.order {
        cfg.model.order = v;
    }
    if let Some(v) = flags.beam_width {
        cfg.model.beam_width = v;
    }
    if let Some(v) = flags.window {
        cfg.model.window = v;
    }
    if let Some(v) = &flags.factors {
        cfg.model.factors = config::parse_factors(v)?;
    }
    if let Some(v) = &flags.ngram_orders {
        cfg.model.ngram_orders = config::parse_orders(v)?;
    }
    if let Some(v) = &flags.semiring {
        cfg.model.semiring = v.clone();
    }
    if let Some(v) = flags.lr {
        cfg.train.lr = v;
    }
    if let Some(v) = flags.l2 {
        cfg.train.l2 = v;
    }
    if let Some(v) = flags.epochs {
        cfg.train.epochs = v;
    }
    if let Some(v) = flags.seed {
        cfg.train.seed = v;
    }
    if let Some(v) = flags.eval_every {
        cfg.train.eval_every = v;
    }
    if let Some(v) = &flags.data_kind {
        cfg.data.kind = Some(v.clone());
    }
    if let Some(v) = &flags.train_data {
        cfg.data.train = Some(v.clone());
    }
    if let Some(v) = &flags.dev_data {
        cfg.data.dev = Some(v.clone());
    }
    if let Some(v) = &flags.test_data {
        cfg.data.test = Some(v.clone());
    }
    if let Some(v) = &flags.ocr {
        cfg.data.ocr_path = Some(v.clone());
    }
    if let Some(v) = flags.test_fold {
        cfg.data.test_fold = Some(v);
    }
    if let Some(v) = flags.dev_fold {
        cfg.data.dev_fold = Some(v);
    }
    if let Some(v) = &flags.synth {
        cfg.data.synth = Some(config::parse_synth(v)?);
    }
    if let Some(v) = flags.synth_dev {
        cfg.data.synth_dev = Some(v);
    }
    if flags.no_normalize {
        cfg.data.normalize = false;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train(args) => {
            let cfg = merged_config(&args.flags)?;
            commands::cmd_train(&cfg, &args.out_model, &args.out_report)
        }
        Command::Eval(args) => {
            let cfg = merged_config(&args.flags)?;
            commands::cmd_eval(
                &cfg,
                &args.model_file,
                args.out_report.as_deref(),
                args.flags.jobs,
                args.flags.semiring.as_deref(),
            )
        }
        Command::Predict(args) => {
            let cfg = merged_config(&args.flags)?;
            commands::cmd_predict(
                &cfg,
                &args.model_file,
                args.out.as_deref(),
                args.marginals.as_deref(),
                args.flags.jobs,
                args.flags.semiring.as_deref(),
            )
        }
        Command::GridSearch(args) => {
            let cfg = merged_config(&args.flags)?;
            let lrs = parse_float_list(&args.lrs)?;
            let l2s = parse_float_list(&args.l2s)?;
            commands::cmd_grid_search(&cfg, &lrs, &l2s, &args.out_report)
        }
        Command::Verify(args) => verify::cmd_verify(&args.scope, args.seed, args.inject_fault),
    }
}

fn parse_float_list(spec: &str) -> Result<Vec<f64>, CliError> {
    spec.split(',')
        .map(|v| {
            v.trim()
                .parse()
                .map_err(|_| CliError::config(format!("bad number {v:?}")))
        })
        .collect()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.exit_code())
        }
    }
}
