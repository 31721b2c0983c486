mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "dkinet", version, about = "Knowledge-injected medication recommendation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic EHR corpus, concept graph, code map and DDI list
    Synth(SynthArgs),
    /// Train a model and write checkpoints
    Train(TrainArgs),
    /// Bootstrap evaluation of a checkpoint
    Eval(EvalArgs),
    /// Recommend medications for one visit of one patient
    Predict(PredictArgs),
    /// Show how a code is linked into the concept graph
    InspectKg(InspectArgs),
}

/// Input files. `--data` points at a directory with the default file names;
/// explicit paths win over it.
#[derive(Args, Clone, Debug, Default)]
pub struct DataArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub ehr: Option<PathBuf>,
    #[arg(long)]
    pub triples: Option<PathBuf>,
    #[arg(long)]
    pub code_map: Option<PathBuf>,
    #[arg(long)]
    pub ddi: Option<PathBuf>,
    /// Ignore any DDI file
    #[arg(long)]
    pub no_ddi: bool,
}

#[derive(Args)]
pub struct SynthArgs {
    /// Output directory
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overwrite existing files
    #[arg(long)]
    pub force: bool,
    #[arg(long)]
    pub patients: Option<usize>,
    #[arg(long)]
    pub diag: Option<usize>,
    #[arg(long)]
    pub proc: Option<usize>,
    #[arg(long)]
    pub med: Option<usize>,
    #[arg(long)]
    pub concepts: Option<usize>,
    #[arg(long)]
    pub relations: Option<usize>,
    #[arg(long)]
    pub conditions: Option<usize>,
    #[arg(long)]
    pub avg_visits: Option<f64>,
    #[arg(long)]
    pub diag_per_visit: Option<usize>,
    #[arg(long)]
    pub proc_per_visit: Option<usize>,
    #[arg(long)]
    pub acute_rate: Option<f64>,
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub ddi_pairs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Run directory for checkpoints, logs and the merged config
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Continue from the run directory's last checkpoint
    #[arg(long, conflicts_with = "force")]
    pub resume: bool,
    /// Start over even if the run directory holds a checkpoint
    #[arg(long)]
    pub force: bool,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub num_filters: Option<usize>,
    #[arg(long)]
    pub kg_layers: Option<usize>,
    #[arg(long)]
    pub eta: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub club_inner_steps: Option<usize>,
    #[arg(long)]
    pub bce_clamp: Option<f64>,
    /// Train without the concept graph
    #[arg(long)]
    pub no_kg: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SplitPart {
    Train,
    Val,
    Test,
    All,
}

#[derive(Args)]
pub struct EvalArgs {
    /// Checkpoint directory, usually `<run>/best`
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Which part of the split to evaluate
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitPart,
    #[arg(long, default_value_t = 10)]
    pub rounds: usize,
    /// Use the evaluation set as is in every round
    #[arg(long)]
    pub no_resample: bool,
    /// Bootstrap seed; defaults to the training seed
    #[arg(long)]
    pub seed: Option<u64>,
    /// Report path; defaults to `report.json` next to the checkpoint directory
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Patient id; defaults to the first patient in the file
    #[arg(long)]
    pub patient: Option<String>,
    /// Visit number, starting at 1
    #[arg(long)]
    pub visit: usize,
    /// How many ranked medications to list
    #[arg(long, default_value_t = 10)]
    pub top: usize,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum TypeArg {
    Diag,
    Proc,
    Med,
}

#[derive(Args)]
pub struct InspectArgs {
    /// The code to explain
    #[arg(long)]
    pub code: String,
    /// Code type, needed only when the code exists under several types
    #[arg(long = "type", value_enum)]
    pub code_type: Option<TypeArg>,
    /// Trained checkpoint for attention and relation weights
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Relations listed per filter
    #[arg(long, default_value_t = 2)]
    pub top_k: usize,
    /// Filter count when no checkpoint is given
    #[arg(long, default_value_t = 4)]
    pub num_filters: usize,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Predict(a) => commands::predict(a),
        Command::InspectKg(a) => commands::inspect_kg(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {msg}", e.kind());
            ExitCode::FAILURE
        }
    }
}
