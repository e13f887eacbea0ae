//! `videograph` command-line entry point.
//!
//! Exit codes: 0 success, 1 runtime or validation failure, 2 usage error.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use videograph::eval::Aggregation;
use videograph::data::GtSource;
use videograph::losses::LossMode;
use videograph::model::QueryMode;

/// Error class that maps to exit code 2.
#[derive(Debug)]
pub struct Usage(pub String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

#[derive(Parser, Debug)]
#[command(name = "videograph", version, about = "Language-guided spatiotemporal graph video summarizer")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Cmd,
}

#[derive(Subcommand, Debug)]
pub enum Cmd {
    /// Generate planted synthetic videos, a split and a manifest.
    Synth(SynthArgs),
    /// Train a model on a directory of containers.
    Train(TrainArgs),
    /// Score one video with a trained model.
    Summarize(SummarizeArgs),
    /// Evaluate predicted summaries against groundtruth containers.
    Eval(EvalArgs),
    /// Finite-difference check of every op and the full model.
    Gradcheck(GradcheckArgs),
    /// Re-run the command recorded in a manifest.
    Replay { manifest: PathBuf },
}

#[derive(Args, Debug, Clone)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub videos: usize,
    #[arg(long, default_value_t = 64)]
    pub frames: usize,
    #[arg(long, default_value_t = 6)]
    pub objects: usize,
    #[arg(long, default_value_t = 4)]
    pub events: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long, default_value_t = 32)]
    pub d_obj: usize,
    #[arg(long, default_value = "word")]
    pub query_mode: QueryMode,
    #[arg(long, default_value_t = 16)]
    pub query_dim: usize,
    #[arg(long, default_value_t = 0.15)]
    pub keyframe_ratio: f64,
    #[arg(long, default_value_t = 0.3)]
    pub noise: f64,
    #[arg(long, default_value_t = 15)]
    pub stride: usize,
    /// Training videos; defaults to what remains after validation and test.
    #[arg(long)]
    pub train: Option<usize>,
    #[arg(long)]
    pub val: Option<usize>,
}

#[derive(Args, Debug, Clone)]
pub struct TrainArgs {
    /// TOML file with `preset`, `[data]`, `[model]` and `[train]` tables.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Directory of containers; overrides `data.dir`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub mode: Option<LossMode>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub objects: Option<usize>,
    #[arg(long)]
    pub words: Option<usize>,
    #[arg(long)]
    pub query_mode: Option<QueryMode>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// `paper` or `desk`; overrides `preset`.
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct SummarizeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    /// Summary length as a fraction of the original frames.
    #[arg(long, default_value_t = 0.15)]
    pub budget: f64,
    /// Comma-separated query words replacing the detected ones.
    #[arg(long, value_delimiter = ',')]
    pub query: Option<Vec<String>>,
    #[arg(long)]
    pub words: Option<usize>,
    /// Directory for `<video>.summary.json` and the manifest.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Frame score series and selected shots as plain text.
    #[arg(long)]
    pub plot: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct EvalArgs {
    /// Directory of `<video>.summary.json` files.
    #[arg(long)]
    pub pred: PathBuf,
    /// Directory of `<video>.vgf` containers.
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long, default_value = "max")]
    pub aggregation: Aggregation,
    #[arg(long, default_value = "auto", value_parser = parse_gt_source)]
    pub gt_source: GtSource,
    #[arg(long, default_value_t = 0.15)]
    pub budget: f64,
    /// Directory for `eval.json` and the manifest.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 4)]
    pub frames: usize,
    #[arg(long, default_value_t = 3)]
    pub objects: usize,
    #[arg(long, default_value_t = 2)]
    pub iterations: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Op-suite repetitions with consecutive seeds.
    #[arg(long, default_value_t = 1)]
    pub seeds: u64,
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    #[arg(long, default_value_t = 1e-5)]
    pub eps: f64,
    #[arg(long)]
    pub skip_ops: bool,
    #[arg(long)]
    pub skip_model: bool,
    /// Adds a case with a deliberately wrong gradient.
    #[arg(long, hide = true)]
    pub inject_fault: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_gt_source(s: &str) -> Result<GtSource, String> {
    match s {
        "auto" => Ok(GtSource::Auto),
        "binary" => Ok(GtSource::Binary),
        "scores" => Ok(GtSource::Scores),
        other => Err(format!("unknown groundtruth source '{other}'")),
    }
}

fn run(cli: Cli, argv: &[String]) -> anyhow::Result<u8> {
    match cli.command {
        Cmd::Synth(a) => commands::synth(&a, argv),
        Cmd::Train(a) => commands::train(&a, argv),
        Cmd::Summarize(a) => commands::summarize(&a, argv),
        Cmd::Eval(a) => commands::eval(&a, argv),
        Cmd::Gradcheck(a) => commands::gradcheck(&a, argv),
        Cmd::Replay { manifest } => {
            let m = manifest::RunManifest::read(&manifest)?;
            let mut full = vec!["videograph".to_string()];
            full.extend(m.argv.iter().cloned());
            let cli = Cli::try_parse_from(&full).map_err(|e| usage(format!("manifest arguments: {e}")))?;
            if matches!(cli.command, Cmd::Replay { .. }) {
                return Err(usage("a manifest cannot replay another replay"));
            }
            run(cli, &m.argv)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let argv: Vec<String> = std::env::args().skip(1).collect();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match run(cli, &argv) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.chain().any(|c| c.is::<Usage>()) {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
