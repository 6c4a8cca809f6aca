//! `spikelab`: calibrate, diagnose and mitigate activation spikes on
//! simulated-INT8 GLU transformers.
//!
//! Exit codes: 0 success, 1 error, 2 usage error, 3 artifact/model
//! fingerprint mismatch, 4 prefix search inapplicable.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

pub const EXIT_ERROR: u8 = 1;
pub const EXIT_FINGERPRINT: u8 = 3;
pub const EXIT_INAPPLICABLE: u8 = 4;

#[derive(Debug, Parser)]
#[command(name = "spikelab", version, about = "Activation-spike calibration and mitigation for INT8 GLU transformers")]
struct Cli {
    /// Worker threads; 0 uses every core. Outputs do not depend on it.
    #[arg(long, global = true, env = "SPIKELAB_JOBS", default_value_t = 0)]
    jobs: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic model with an engineered activation spike.
    Genmodel(GenmodelArgs),
    /// Record per-token input scales of every linear module.
    Calibrate(CalibrateArgs),
    /// Write per-module max/median/ratio tables and token traces as CSV.
    Analyze(AnalyzeArgs),
    /// Choose the modules to keep out of activation quantization.
    Qfem(QfemArgs),
    /// Search a three-token prefix that absorbs the activation spike.
    Qfep(QfepArgs),
    /// Perplexity and/or last-hidden MSE of a quantization plan.
    Eval(EvalArgs),
    /// Latency and memory of a quantization plan.
    Bench(BenchArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum FfnArg {
    Swiglu,
    Geglu,
    Plain,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum SpikeModeArg {
    /// Only the first occurrence of the spike token spikes.
    First,
    /// Every occurrence spikes.
    Static,
    /// No spike.
    None,
}

#[derive(Debug, Args, Serialize)]
pub struct GenmodelArgs {
    #[arg(long, default_value_t = 8)]
    pub layers: usize,
    #[arg(long, default_value_t = 64)]
    pub dim: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    /// Feed-forward width; defaults to twice `--dim`.
    #[arg(long)]
    pub dff: Option<usize>,
    #[arg(long, value_enum, default_value_t = FfnArg::Swiglu)]
    pub ffn: FfnArg,
    #[arg(long, value_enum, default_value_t = SpikeModeArg::First)]
    pub spike_mode: SpikeModeArg,
    /// Token id that spikes (default: newline).
    #[arg(long, default_value_t = 10)]
    pub spike_token: u32,
    #[arg(long, default_value_t = 1)]
    pub spike_layer: usize,
    /// Minimum max-median ratio at the spike module.
    #[arg(long, default_value_t = 1000.0)]
    pub target_ratio: f64,
    /// Residual dimension carrying the occurrence marker (default 29, or
    /// the last dimension of narrower models).
    #[arg(long)]
    pub marker_dim: Option<usize>,
    #[arg(long, default_value_t = 128)]
    pub max_positions: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct CorpusArgs {
    /// `synthetic` for the built-in grammar, otherwise a text file path.
    #[arg(long, default_value = "synthetic")]
    pub corpus: String,
    #[arg(long, default_value_t = 64)]
    pub samples: usize,
    #[arg(long, default_value_t = 32)]
    pub seqlen: usize,
    /// Share of synthetic sequences containing the model's spike token.
    #[arg(long, default_value_t = 0.5)]
    pub spike_rate: f64,
}

#[derive(Debug, Args, Serialize)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub corpus: CorpusArgs,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Also store static per-tensor activation scales (needed by
    /// `--act-scheme per-tensor-static`).
    #[arg(long)]
    pub static_scales: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub calib: PathBuf,
    /// Per-module `layer,kind,max,median,ratio` table.
    #[arg(long)]
    pub out: PathBuf,
    /// Per-layer residual absmax table.
    #[arg(long)]
    pub hidden: Option<PathBuf>,
    /// Token-wise scale trace of one sample.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    /// Module for `--trace`, as `LAYER.KIND` (e.g. `1.down`); defaults to
    /// the highest-ratio module.
    #[arg(long)]
    pub trace_module: Option<String>,
    #[arg(long, default_value_t = 0)]
    pub trace_sample: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum PlanArg {
    Fp,
    W8a8,
    W8a16,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ActScheme {
    /// AQ1: dynamic per-token.
    PerTokenDyn,
    /// AQ2: dynamic per-tensor.
    PerTensorDyn,
    /// AQ3: static per-tensor (scales from a calibration report).
    PerTensorStatic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightScheme {
    PerChannel,
    PerTensor,
}

#[derive(Debug, Args, Serialize)]
pub struct QuantArgs {
    /// Activation scheme (AQ1 per-token-dyn, AQ2 per-tensor-dyn, AQ3
    /// per-tensor-static).
    #[arg(long, value_enum, default_value_t = ActScheme::PerTensorDyn)]
    pub act_scheme: ActScheme,
    #[arg(long, value_enum, default_value_t = WeightScheme::PerChannel)]
    pub weight_scheme: WeightScheme,
    /// Also quantize the attention batched matmuls.
    #[arg(long)]
    pub bmm: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct QfemArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub calib: PathBuf,
    /// Search the threshold on the evaluation corpus.
    #[arg(long, conflicts_with = "alpha", required_unless_present = "alpha")]
    pub search_alpha: bool,
    /// Use this threshold (`inf` excludes nothing).
    #[arg(long)]
    pub alpha: Option<f64>,
    #[command(flatten)]
    pub corpus: CorpusArgs,
    #[arg(long, default_value_t = 2)]
    pub seed: u64,
    #[command(flatten)]
    pub quant: QuantArgs,
    /// Perplexity at every candidate threshold.
    #[arg(long)]
    pub curve: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct QfepArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub calib: PathBuf,
    /// Spike threshold relative to the median scale.
    #[arg(long, default_value_t = 4.0)]
    pub tau: f64,
    /// Number of most frequent calibration tokens tried as context.
    #[arg(long, default_value_t = 200)]
    pub context_pool: usize,
    /// Number of candidate spike tokens.
    #[arg(long, default_value_t = 3)]
    pub candidates: usize,
    /// Smallest max-median ratio worth absorbing; defaults to `--tau`.
    #[arg(long)]
    pub min_ratio: Option<f64>,
    /// Search a two-token prefix `[BOS, C]` without a context token.
    #[arg(long)]
    pub no_context: bool,
    /// Replace the repeated `[T, C]` probe tail with this text followed by C.
    #[arg(long)]
    pub tail_text: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Metric {
    Ppl,
    Mse,
    Both,
}

#[derive(Debug, Args, Serialize)]
pub struct PlanArgs {
    #[arg(long, value_enum, default_value_t = PlanArg::Fp)]
    pub plan: PlanArg,
    #[command(flatten)]
    pub quant: QuantArgs,
    /// Exclusion set from `qfem`.
    #[arg(long)]
    pub qfem: Option<PathBuf>,
    /// Prefix from `qfep`.
    #[arg(long)]
    pub qfep: Option<PathBuf>,
    /// Calibration report holding static scales.
    #[arg(long)]
    pub calib: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub plan: PlanArgs,
    #[command(flatten)]
    pub corpus: CorpusArgs,
    #[arg(long, default_value_t = 2)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = Metric::Ppl)]
    pub metric: Metric,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct BenchArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub plan: PlanArgs,
    #[arg(long, default_value_t = 64)]
    pub seqlen: usize,
    #[arg(long, default_value_t = 21)]
    pub reps: usize,
    #[arg(long)]
    pub out: PathBuf,
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<spikelab::Error>() {
        Some(spikelab::Error::FingerprintMismatch { .. }) => EXIT_FINGERPRINT,
        Some(spikelab::Error::PrefixInapplicable { .. }) => EXIT_INAPPLICABLE,
        _ => EXIT_ERROR,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = spikelab::par::with_jobs(cli.jobs, || match cli.command {
        Command::Genmodel(a) => commands::genmodel(&a),
        Command::Calibrate(a) => commands::calibrate(&a),
        Command::Analyze(a) => commands::analyze(&a),
        Command::Qfem(a) => commands::qfem(&a),
        Command::Qfep(a) => commands::qfep(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Bench(a) => commands::bench(&a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
