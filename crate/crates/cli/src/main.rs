//! `bayesphys`: synthesize data, train, evaluate and predict.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "bayesphys", version, about = "Bayesian rPPG heart-rate network with Monte-Carlo uncertainty")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset.
    Synth(SynthArgs),
    /// Train a network on the train split of a dataset.
    Train(TrainArgs),
    /// Run the noise sweep on the test split and write the reports.
    Eval(EvalArgs),
    /// Monte-Carlo heart-rate predictions for every record of a split.
    Predict(PredictArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 64, value_parser = clap::value_parser!(u64).range(1..))]
    pub clips: u64,
    /// Heart-rate range in bpm, `LO:HI`.
    #[arg(long, default_value = "50:150", value_parser = parse_range)]
    pub hr_range: (f64, f64),
    #[arg(long, default_value_t = 128, value_parser = clap::value_parser!(u64).range(2..))]
    pub frames: u64,
    /// Frame size, `HxW`.
    #[arg(long, default_value = "32x32", value_parser = parse_size)]
    pub size: (usize, usize),
    #[arg(long, default_value_t = 0.7)]
    pub train_fraction: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// JSON run config; every key is optional.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Checkpoint path, rewritten after every epoch.
    #[arg(long)]
    pub out: PathBuf,
    /// Resume from this checkpoint.
    #[arg(long)]
    pub from: Option<PathBuf>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub epochs: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    pub threads: u64,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Noise levels, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub noise: Option<Vec<f64>>,
    /// Monte-Carlo passes.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub mc: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub confidence: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    pub threads: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
    All,
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::All)]
    pub split: SplitArg,
    #[arg(long, default_value_t = 20, value_parser = clap::value_parser!(u64).range(1..))]
    pub mc: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// CSV output file; standard output when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    pub threads: u64,
}

fn parse_range(s: &str) -> Result<(f64, f64), String> {
    let (lo, hi) = s.split_once(':').ok_or("expected LO:HI")?;
    let lo: f64 = lo.trim().parse().map_err(|e| format!("bad LO: {e}"))?;
    let hi: f64 = hi.trim().parse().map_err(|e| format!("bad HI: {e}"))?;
    if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
        return Err(format!("need 0 < LO <= HI, got {lo}:{hi}"));
    }
    Ok((lo, hi))
}

fn parse_size(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s.split_once(['x', 'X']).ok_or("expected HxW")?;
    let h: usize = h.trim().parse().map_err(|e| format!("bad height: {e}"))?;
    let w: usize = w.trim().parse().map_err(|e| format!("bad width: {e}"))?;
    if h == 0 || w == 0 {
        return Err("height and width must be >= 1".into());
    }
    Ok((h, w))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => commands::synth(&a),
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Predict(a) => commands::predict(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
