//! `glimpse`: generate the synthetic corpus, train, caption, evaluate and verify.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use glimpse::decoder::Mode;

/// Exit status of a failed command.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Code {
    Usage = 1,
    Data = 2,
    Numeric = 3,
}

/// An error with the exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: Code,
    pub error: anyhow::Error,
}

impl Failure {
    pub fn new(code: Code, error: impl Into<anyhow::Error>) -> Self {
        Self {
            code,
            error: error.into(),
        }
    }
}

pub type CmdResult = Result<(), Failure>;

/// Attaches an exit code and context to any error.
pub trait Classify<T> {
    fn or_exit(self, code: Code, context: &str) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn or_exit(self, code: Code, context: &str) -> Result<T, Failure> {
        self.map_err(|e| Failure::new(code, e.into().context(context.to_string())))
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "glimpse",
    version,
    about = "Soft and hard attention caption decoders on a synthetic scene corpus"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic scene-caption dataset.
    GenData(GenDataArgs),
    /// Train a decoder with early stopping on validation BLEU.
    Train(TrainArgs),
    /// Caption dataset records with a trained checkpoint.
    Caption(CaptionArgs),
    /// Report BLEU and alignment scores of a checkpoint on a dataset split.
    Evaluate(EvaluateArgs),
    /// Run the built-in oracle suites.
    Verify(VerifyArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Soft,
    Hard,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Soft => Mode::Soft,
            ModeArg::Hard => Mode::Hard,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
    All,
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 5000)]
    pub count: usize,
    #[arg(long)]
    pub grid_side: Option<usize>,
    /// Comma-separated colour words.
    #[arg(long, value_delimiter = ',')]
    pub colors: Option<Vec<String>>,
    /// Comma-separated shape words.
    #[arg(long, value_delimiter = ',')]
    pub shapes: Option<Vec<String>>,
    /// Comma-separated templates: single, left_of, above.
    #[arg(long, value_delimiter = ',')]
    pub relations: Option<Vec<String>>,
    #[arg(long)]
    pub noise: Option<f64>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub seed: u64,
    /// TOML run configuration; flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    #[arg(long)]
    pub embed: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub attn: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// rmsprop or adam.
    #[arg(long)]
    pub optimizer: Option<String>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub lambda_penalty: Option<f64>,
    #[arg(long)]
    pub lambda_r: Option<f64>,
    #[arg(long)]
    pub lambda_e: Option<f64>,
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
    /// Stop starting epochs after this many seconds.
    #[arg(long)]
    pub time_limit: Option<f64>,
    /// Train on at most this many records of the training split.
    #[arg(long)]
    pub limit: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum StrategyArg {
    Greedy,
    Beam,
    Sample,
}

#[derive(Args, Debug)]
pub struct CaptionArgs {
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t = ModeArg::Soft)]
    pub mode: ModeArg,
    #[arg(long, value_enum, default_value_t = StrategyArg::Greedy)]
    pub strategy: StrategyArg,
    #[arg(long, default_value_t = 3)]
    pub width: usize,
    #[arg(long, default_value_t = 1.0)]
    pub temperature: f64,
    /// Sample hard attention locations instead of taking the argmax.
    #[arg(long)]
    pub sample_attention: bool,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long, default_value_t = 20)]
    pub max_len: usize,
    /// Write per-word attention heatmaps and manifests into this directory.
    #[arg(long)]
    pub viz: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t = ModeArg::Soft)]
    pub mode: ModeArg,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
    #[arg(long, default_value_t = 20)]
    pub max_len: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum LevelArg {
    Fast,
    Full,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum FaultArg {
    Gradient,
}

#[derive(Args, Debug)]
pub struct VerifyArgs {
    #[arg(long, value_enum, default_value_t = LevelArg::Fast)]
    pub level: LevelArg,
    /// Test hook: plant a defect the suites must catch.
    #[arg(long, value_enum, hide = true)]
    pub inject_fault: Option<FaultArg>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(Code::Usage as u8)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(a),
        Command::Train(a) => commands::train(a),
        Command::Caption(a) => commands::caption(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::Verify(a) => commands::verify(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code as u8)
        }
    }
}
