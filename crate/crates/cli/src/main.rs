use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;

use ntm_core::Error;

/// Neural Turing machine experiments: baseline and hierarchical-memory variants.
#[derive(Parser, Debug)]
#[command(name = "ntm", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one run per seed and write records, summary, checkpoint and manifest.
    Train(TrainArgs),
    /// Compare backprop gradients with finite differences on a tiny model.
    Gradcheck(GradcheckArgs),
    /// Print episodes as 0/1 grids: inputs | targets | mask.
    Taskdump(TaskdumpArgs),
    /// Show the metadata and tensors of a checkpoint.
    Inspect(InspectArgs),
    /// Reduce several runs' records.csv into per-iteration median/min/max.
    Plotdata(PlotdataArgs),
}

/// Model, task and trainer settings. Anything left unset falls back to the
/// config file, then to the built-in defaults.
#[derive(Args, Debug, Default)]
pub struct ConfigFlags {
    /// ntm, ntm1, ntm2 or ntm3
    #[arg(long)]
    pub variant: Option<String>,
    /// copy or recall
    #[arg(long)]
    pub task: Option<String>,
    #[arg(long)]
    pub mem_slots: Option<String>,
    #[arg(long)]
    pub mem_width: Option<String>,
    #[arg(long)]
    pub read_heads: Option<String>,
    #[arg(long)]
    pub write_heads: Option<String>,
    #[arg(long)]
    pub controller_width: Option<String>,
    #[arg(long)]
    pub layers: Option<String>,
    /// fixed or learned
    #[arg(long)]
    pub mix_mode: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    pub mix_a: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    pub mix_b: Option<String>,
    #[arg(long)]
    pub lr: Option<String>,
    #[arg(long)]
    pub momentum: Option<String>,
    #[arg(long)]
    pub decay: Option<String>,
    /// Global gradient-norm threshold, or "none"
    #[arg(long)]
    pub clip: Option<String>,
    #[arg(long)]
    pub max_iters: Option<String>,
    #[arg(long)]
    pub sample_every: Option<String>,
    /// Any other configuration key, as key=value
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub extra: Vec<String>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigFlags,
    /// Flat `key = value` file; command-line flags take precedence
    #[arg(long = "config")]
    pub config_file: Option<PathBuf>,
    /// Either a count N (runs seeds 1..=N) or a comma list such as 3,7
    #[arg(long, default_value = "1")]
    pub seeds: String,
    /// Output root
    #[arg(long, env = "NTM_OUT_DIR", default_value = "runs")]
    pub out: PathBuf,
    /// Seeds trained concurrently
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long, default_value = "ntm")]
    pub variant: String,
    #[arg(long, default_value_t = 1)]
    pub read_heads: usize,
    #[arg(long, default_value_t = 1)]
    pub write_heads: usize,
    #[arg(long)]
    pub layers: Option<usize>,
    /// Check every standard head/topology setup instead
    #[arg(long)]
    pub all: bool,
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
    /// Corrupt one backward rule (negative control)
    #[arg(long, hide = true)]
    pub inject_fault: Option<String>,
}

#[derive(Args, Debug)]
pub struct TaskdumpArgs {
    #[arg(long, default_value = "copy")]
    pub task: String,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value_t = 1)]
    pub count: u64,
    #[arg(long)]
    pub copy_min: Option<String>,
    #[arg(long)]
    pub copy_max: Option<String>,
    #[arg(long)]
    pub copy_width: Option<String>,
    #[arg(long)]
    pub recall_min: Option<String>,
    #[arg(long)]
    pub recall_max: Option<String>,
    #[arg(long)]
    pub recall_item_len: Option<String>,
    #[arg(long)]
    pub recall_width: Option<String>,
}

#[derive(Args, Debug)]
pub struct InspectArgs {
    pub checkpoint: PathBuf,
}

#[derive(Args, Debug)]
pub struct PlotdataArgs {
    /// records.csv files or run directories containing one
    #[arg(required = true)]
    pub runs: Vec<PathBuf>,
    /// loss_per_bit, loss_per_item, loss_sum or grad_norm
    #[arg(long, default_value = "loss_per_bit")]
    pub column: String,
    /// Write here instead of stdout
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Process exit status.
pub enum Failure {
    Config(String),
    Runtime(String),
    Check(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 1,
            Failure::Runtime(_) => 2,
            Failure::Check(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Config(m) | Failure::Runtime(m) | Failure::Check(m) => m,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => Failure::Config(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Train(a) => commands::train(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
        Command::Taskdump(a) => commands::taskdump(a),
        Command::Inspect(a) => commands::inspect(a),
        Command::Plotdata(a) => commands::plotdata(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
