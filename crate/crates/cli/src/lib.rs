//! `cft` command-line driver: dataset generation, training, evaluation,
//! attention dumps and complexity reports.
//!
//! Exit codes: 0 success, 1 runtime or I/O failure, 2 usage error.

pub mod commands;
pub mod config;

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Runtime(m) => write!(f, "error: {m}"),
        }
    }
}

impl From<cft_core::CftError> for CliError {
    fn from(e: cft_core::CftError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(name = "cft", version, about = "Cross-modality fusion detector for paired RGB/thermal images")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic paired dataset (train and test splits).
    GenData(GenDataArgs),
    /// Train a detector and write its log and checkpoints.
    Train(TrainArgs),
    /// Evaluate a checkpoint and write the metrics report.
    Eval(EvalArgs),
    /// Dump correlation matrices and correction magnitudes for one sample.
    DumpAttn(DumpAttnArgs),
    /// Report analytic and counted parameters and FLOPs.
    Complexity(ComplexityArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Training pairs.
    #[arg(long, default_value_t = 500)]
    pub n: usize,
    #[arg(long, default_value_t = 100)]
    pub n_test: usize,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    /// Probabilities of rgb_only, thermal_only and both.
    #[arg(long, default_value = "0.35,0.35,0.30")]
    pub visibility_probs: String,
    #[arg(long, default_value_t = 0.5)]
    pub night_fraction: f64,
    #[arg(long, default_value_t = 1)]
    pub min_objects: usize,
    #[arg(long, default_value_t = 4)]
    pub max_objects: usize,
}

/// Flags that override run-config keys. Each maps to the key with dashes
/// replaced by underscores.
#[derive(Debug, Default, Args)]
pub struct RunArgs {
    /// Flat `key = value` file; flags take precedence over it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub seed: Option<String>,
    #[arg(long)]
    pub epochs: Option<String>,
    #[arg(long)]
    pub batch_size: Option<String>,
    #[arg(long)]
    pub lr: Option<String>,
    #[arg(long)]
    pub momentum: Option<String>,
    #[arg(long)]
    pub weight_decay: Option<String>,
    #[arg(long)]
    pub lr_step_every: Option<String>,
    #[arg(long)]
    pub lr_step_factor: Option<String>,
    /// Hold every fusion correction at zero (cft mode).
    #[arg(long)]
    pub zero_deltas: Option<String>,
    #[arg(long)]
    pub image_size: Option<String>,
    #[arg(long)]
    pub stem_channels: Option<String>,
    #[arg(long)]
    pub stage_channels: Option<String>,
    #[arg(long)]
    pub pyramid_channels: Option<String>,
    #[arg(long)]
    pub head_hidden: Option<String>,
    #[arg(long)]
    pub cft_heads: Option<String>,
    #[arg(long)]
    pub cft_blocks: Option<String>,
    #[arg(long)]
    pub cft_pooled_size: Option<String>,
    #[arg(long)]
    pub cft_mlp_ratio: Option<String>,
    #[arg(long)]
    pub score_threshold: Option<String>,
    #[arg(long)]
    pub iou_threshold: Option<String>,
    #[arg(long)]
    pub interpolation: Option<String>,
}

impl RunArgs {
    pub fn overrides(&self) -> BTreeMap<String, String> {
        let pairs = [
            ("mode", &self.mode),
            ("seed", &self.seed),
            ("epochs", &self.epochs),
            ("batch_size", &self.batch_size),
            ("lr", &self.lr),
            ("momentum", &self.momentum),
            ("weight_decay", &self.weight_decay),
            ("lr_step_every", &self.lr_step_every),
            ("lr_step_factor", &self.lr_step_factor),
            ("zero_deltas", &self.zero_deltas),
            ("image_size", &self.image_size),
            ("stem_channels", &self.stem_channels),
            ("stage_channels", &self.stage_channels),
            ("pyramid_channels", &self.pyramid_channels),
            ("head_hidden", &self.head_hidden),
            ("cft_heads", &self.cft_heads),
            ("cft_blocks", &self.cft_blocks),
            ("cft_pooled_size", &self.cft_pooled_size),
            ("cft_mlp_ratio", &self.cft_mlp_ratio),
            ("score_threshold", &self.score_threshold),
            ("iou_threshold", &self.iou_threshold),
            ("interpolation", &self.interpolation),
        ];
        pairs
            .into_iter()
            .filter_map(|(k, v)| v.as_ref().map(|v| (k.to_string(), v.clone())))
            .collect()
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset root containing `train/`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output directory for the log, checkpoints and resolved config.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Report path; defaults to `eval_<split>.txt` beside the checkpoint.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Debug, Args)]
pub struct DumpAttnArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long, default_value_t = 0)]
    pub index: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Debug, Args)]
pub struct ComplexityArgs {
    /// Flat `key = value` file with any of the flags below.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub channels: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub blocks: Option<usize>,
    #[arg(long)]
    pub pooled_size: Option<usize>,
    #[arg(long)]
    pub mlp_ratio: Option<usize>,
    #[arg(long)]
    pub literal_heads: Option<bool>,
    #[arg(long)]
    pub layernorm: Option<bool>,
    /// Also write the report here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Parse `args` (including the program name) and run. Returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(&a),
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::DumpAttn(a) => commands::dump_attn(&a),
        Command::Complexity(a) => commands::complexity(&a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}
