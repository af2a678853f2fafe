// SPDX-License-Identifier: MIT OR Apache-2.0

//! `attn-steer` command-line tool.
//!
//! Exit codes: 0 on success, 1 on I/O failure, 2 on any other error. Errors
//! are reported on stderr as one JSON line `{"error": kind, "message": text}`.

mod commands;
mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use attn_steer::profiler::HeatmapMatrix;
use attn_steer::{Mode, Strategy};

#[derive(Debug, Parser)]
#[command(name = "attn-steer", version, about = "Attention steering experiments on small causal transformers")]
pub struct Cli {
    /// JSON run config; flags override its fields.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for sampled decoding; per-prompt seeds derive from it.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build an attention profile from labeled records or a synthetic world.
    Profile(ProfileArgs),
    /// Decode prompts, optionally under an intervention.
    Generate(GenerateArgs),
    /// Score captions against ground-truth objects.
    Evaluate(EvaluateArgs),
    /// Grid over alpha, beta and layer ranges on a synthetic world.
    Sweep(SweepArgs),
    /// Write one profile matrix as a layer,head,value CSV.
    ExportHeatmap(HeatmapArgs),
    /// Compare several methods on a synthetic world.
    Compare(CompareArgs),
    /// Write a synthetic world's weights, vocabulary, prompts and annotations.
    SynthWorld(SynthArgs),
}

/// Decoding flags shared by the commands that generate text.
#[derive(Debug, Clone, Default, Args)]
pub struct DecodeArgs {
    #[arg(long)]
    pub max_tokens: Option<usize>,
    #[arg(long, value_parser = parse_strategy)]
    pub strategy: Option<Strategy>,
    #[arg(long)]
    pub temperature: Option<f64>,
}

#[derive(Debug, Args)]
pub struct ProfileArgs {
    /// JSON lines of labeled generation records.
    #[arg(long)]
    pub records: Option<PathBuf>,
    /// World spec; its profiling images are decoded and labeled.
    #[arg(long)]
    pub world: Option<PathBuf>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[command(flatten)]
    pub decode: DecodeArgs,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InterventionArgs {
    #[arg(long, value_parser = parse_mode)]
    pub mode: Option<Mode>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    /// Inclusive absolute layer range, `lo-hi`.
    #[arg(long, value_parser = config::parse_range)]
    pub layers: Option<(usize, usize)>,
    #[arg(long)]
    pub profile: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// World spec supplying weights, prompts and the stop token.
    #[arg(long)]
    pub world: Option<PathBuf>,
    #[arg(long)]
    pub weights: Option<PathBuf>,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// JSON lines of `{image_id, system, image, instruction}` word lists.
    #[arg(long)]
    pub prompts: Option<PathBuf>,
    /// Word that ends generation.
    #[arg(long)]
    pub stop_token: Option<String>,
    #[command(flatten)]
    pub intervention: InterventionArgs,
    #[command(flatten)]
    pub decode: DecodeArgs,
    /// Include attention maps in the records.
    #[arg(long)]
    pub capture: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// JSON lines with `image_id` and `text`.
    #[arg(long)]
    pub generations: Option<PathBuf>,
    /// `{image_id: [objects]}`.
    #[arg(long)]
    pub annotations: Option<PathBuf>,
    /// `{phrase: canonical}` object vocabulary.
    #[arg(long)]
    pub synonyms: Option<PathBuf>,
    /// World spec supplying annotations and vocabulary.
    #[arg(long)]
    pub world: Option<PathBuf>,
    /// JSON lines of `{image_id, object, judgment}`.
    #[arg(long)]
    pub judgments: Option<PathBuf>,
    /// Report the open-vocabulary rate; needs judgments.
    #[arg(long)]
    pub open_chair: bool,
    #[arg(long)]
    pub macro_f1: bool,
    /// Count every mention instead of each object once per caption.
    #[arg(long)]
    pub every_mention: bool,
    /// Extra distinct-n orders.
    #[arg(long, value_delimiter = ',')]
    pub distinct: Vec<usize>,
    #[arg(long)]
    pub no_self_bleu: bool,
    /// Row label of the CSV summary.
    #[arg(long, default_value = "run")]
    pub method: String,
    /// Report JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write the CSV summary here.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub world: Option<PathBuf>,
    #[arg(long, value_parser = parse_mode)]
    pub mode: Mode,
    #[arg(long, value_delimiter = ',', required = true)]
    pub alphas: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "0.5")]
    pub betas: Vec<f64>,
    /// Comma-separated `lo-hi` ranges.
    #[arg(long, value_delimiter = ',', value_parser = config::parse_range, required = true)]
    pub layers: Vec<(usize, usize)>,
    /// Profile for adaptive cells; built from the world when absent.
    #[arg(long)]
    pub profile: Option<PathBuf>,
    #[command(flatten)]
    pub decode: DecodeArgs,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct HeatmapArgs {
    #[arg(long)]
    pub profile: Option<PathBuf>,
    /// `a_r_tp`, `a_h_tp` or `m`.
    #[arg(long, default_value = "m", value_parser = parse_matrix)]
    pub matrix: HeatmapMatrix,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[arg(long)]
    pub world: Option<PathBuf>,
    /// JSON array of `{name, mode, alpha, ...}`.
    #[arg(long)]
    pub methods: Option<PathBuf>,
    #[arg(long)]
    pub profile: Option<PathBuf>,
    /// Decode serially and add ms/token; the timing column varies run to run.
    #[arg(long)]
    pub timing: bool,
    #[command(flatten)]
    pub decode: DecodeArgs,
    /// Directory for `comparison.json` and `comparison.csv`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// World spec; defaults apply when absent.
    #[arg(long)]
    pub world: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    s.parse().map_err(|e: attn_steer::Error| e.to_string())
}

fn parse_strategy(s: &str) -> Result<Strategy, String> {
    match s {
        "greedy" => Ok(Strategy::Greedy),
        "sample" => Ok(Strategy::Sample),
        _ => Err(format!("unknown strategy '{s}'")),
    }
}

fn parse_matrix(s: &str) -> Result<HeatmapMatrix, String> {
    s.parse().map_err(|e: attn_steer::Error| e.to_string())
}

/// Failure of a command.
#[derive(Debug)]
pub enum CliError {
    Core(attn_steer::Error),
    Io { path: PathBuf, source: std::io::Error },
    Usage(String),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            CliError::Core(e) => e.kind(),
            CliError::Io { .. } => "io",
            CliError::Usage(_) => "usage",
        }
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(e) if e.is_io() => 1,
            CliError::Io { .. } => 1,
            _ => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Io { path, source } => write!(f, "{}: {source}", path.display()),
            CliError::Usage(m) => f.write_str(m),
        }
    }
}

impl From<attn_steer::Error> for CliError {
    fn from(e: attn_steer::Error) -> Self {
        CliError::Core(e)
    }
}

fn report(err: &CliError) -> ExitCode {
    let line = serde_json::json!({ "error": err.kind(), "message": err.to_string() });
    eprintln!("{line}");
    ExitCode::from(err.exit_code())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or_default().trim_start_matches("error: ");
            return report(&CliError::Usage(first.to_string()));
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => report(&e),
    }
}
