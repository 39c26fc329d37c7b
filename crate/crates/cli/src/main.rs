//! `coopt`: train, evaluate, replay and check co-optimized navigation setups.
//!
//! Exit status is 0 on success, 1 when a run fails at runtime or a bound
//! check does not hold, and 2 for invalid input.

mod artifacts;
mod commands;
mod svg;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use coopt_core::Error;

#[derive(Parser, Debug)]
#[command(
    name = "coopt",
    version,
    about = "Agent-environment co-optimization for multi-agent navigation"
)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Global {
    /// Built-in scenario id or path to a scenario JSON file.
    #[arg(long, global = true)]
    pub scenario: Option<String>,
    /// JSON config: training settings for `train`, a sweep for `convlab`.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads; 0 uses every core.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Co-optimize a policy and an obstacle generator.
    Train(TrainArgs),
    /// Score a checkpoint over random tasks and trials.
    Eval(EvalArgs),
    /// Draw an exported episode as an SVG image.
    Replay(ReplayArgs),
    /// Check the tracking bound on synthetic time-varying problems.
    Convlab(ConvlabArgs),
    /// List the built-in scenarios.
    Scenarios,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum TrainLayout {
    /// Layouts sampled from the generator, which is trained as well.
    Generated,
    /// The scenario's hand-designed layout; the generator stays fixed.
    HandDesigned,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Overrides the configured number of outer iterations.
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    #[arg(long, value_enum, default_value_t = TrainLayout::Generated)]
    pub layout: TrainLayout,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Generated,
    HandDesigned,
    RandomLayout,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, value_enum, default_value_t = Mode::Generated)]
    pub mode: Mode,
    #[arg(long, default_value_t = 30)]
    pub tasks: usize,
    #[arg(long, default_value_t = 10)]
    pub trials: usize,
    /// Also write every episode as CSV with a JSON sidecar.
    #[arg(long)]
    pub export: bool,
}

#[derive(Args, Debug)]
pub struct ReplayArgs {
    /// Episode CSV; a sidecar with the same stem and a `.json` extension
    /// supplies its task and layout.
    pub episode: PathBuf,
}

#[derive(Args, Debug)]
pub struct ConvlabArgs {
    /// Sweep JSON; falls back to `--config`.
    pub sweep: Option<PathBuf>,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Usage(_) | Error::Json(_) | Error::Parse { .. } => 2,
        Error::Numeric(_) | Error::Domain(_) | Error::Io(_) => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("COOPT_LOG", "warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => commands::train(&cli.global, &a),
        Command::Eval(a) => commands::eval(&cli.global, &a),
        Command::Replay(a) => commands::replay(&cli.global, &a),
        Command::Convlab(a) => commands::convlab(&cli.global, &a),
        Command::Scenarios => commands::scenarios(),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
