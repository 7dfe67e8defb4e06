//! `atlas-match`: dataset generation, training, evaluation and registration.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

mod commands;
mod config;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Runtime(atlas_match::Error),
}

impl From<atlas_match::Error> for Failure {
    fn from(e: atlas_match::Error) -> Self {
        Failure::Runtime(e)
    }
}

#[derive(Parser, Debug)]
#[command(name = "atlas-match", version, about = "Slice-to-atlas identification and registration")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic atlas and labeled slices.
    GenData(GenDataArgs),
    /// Train the embedding network.
    Train(TrainArgs),
    /// Rank plates for every slice of a split and report MAE / TOP-n.
    Evaluate(EvaluateArgs),
    /// Register a moving image onto a fixed image.
    Register(RegisterArgs),
    /// Random hyperparameter search (same as `register --mode search`).
    SearchHparams(SearchArgs),
    /// Train the affine regression network.
    TrainRegressor(TrainRegressorArgs),
    /// Print the JSON schema of the run configuration file.
    Schema,
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    #[arg(long, default_value_t = 132)]
    pub plates: usize,
    #[arg(long, default_value_t = 128)]
    pub size: usize,
    /// Defaults to ATLAS_MATCH_SEED, then 0.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Slices per split: train,val1,val2,test.
    #[arg(long, value_parser = parse_counts, default_value = "50,12,10,12")]
    pub counts: [usize; 4],
    #[arg(long, default_value_t = 1.0)]
    pub morph_rate: f64,
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_counts(s: &str) -> Result<[usize; 4], String> {
    let v = s
        .split(',')
        .map(|x| x.trim().parse::<usize>().map_err(|e| format!("{x:?}: {e}")))
        .collect::<Result<Vec<_>, _>>()?;
    v.try_into()
        .map_err(|v: Vec<usize>| format!("expected 4 counts (train,val1,val2,test), got {}", v.len()))
}

#[derive(Args, Debug)]
pub struct Overrides {
    #[arg(long)]
    pub seed: Option<u64>,
    /// Omit timing fields so repeated runs produce identical output.
    #[arg(long)]
    pub no_timing: bool,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub loss: Option<String>,
    #[arg(long)]
    pub mining: Option<String>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub input_size: Option<usize>,
    #[arg(long)]
    pub max_iterations: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[command(flatten)]
    pub common: Overrides,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Baseline {
    Mi,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Identify by exhaustive MI registration instead of the network.
    #[arg(long, value_enum)]
    pub baseline: Option<Baseline>,
    /// Pyramid levels for the MI baseline.
    #[arg(long)]
    pub resolutions: Option<usize>,
    /// Iterations per level for the MI baseline.
    #[arg(long)]
    pub iterations: Option<usize>,
    #[command(flatten)]
    pub common: Overrides,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Optimize,
    Search,
    Regress,
}

#[derive(Args, Debug)]
pub struct SearchArgs {
    #[arg(long)]
    pub fixed: PathBuf,
    #[arg(long)]
    pub moving: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub trials: Option<usize>,
    #[command(flatten)]
    pub common: Overrides,
}

#[derive(Args, Debug)]
pub struct RegisterArgs {
    #[arg(long, value_enum, default_value = "optimize")]
    pub mode: Mode,
    /// Regressor checkpoint; required for `--mode regress`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[command(flatten)]
    pub search: SearchArgs,
}

#[derive(Args, Debug)]
pub struct TrainRegressorArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 3000)]
    pub pretrain_iterations: usize,
    #[arg(long, default_value_t = 100)]
    pub finetune_iterations: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub learning_rate: f64,
    #[command(flatten)]
    pub common: Overrides,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(&a),
        Command::Train(a) => commands::train(&a),
        Command::Evaluate(a) => commands::evaluate(&a),
        Command::Register(a) => commands::register(&a),
        Command::SearchHparams(a) => commands::register(&RegisterArgs {
            mode: Mode::Search,
            checkpoint: None,
            search: a,
        }),
        Command::TrainRegressor(a) => commands::train_regressor_cmd(&a),
        Command::Schema => {
            let _ = std::io::Write::write_all(&mut std::io::stdout(), config::SCHEMA.as_bytes());
            Ok(())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
