//! `mops`: experiment driver for mixture-of-prompts adaptation.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "mops", version, about = "Mixture-of-prompts adaptation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Run configuration (JSON). Unset fields keep their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides `seed` from the config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory; created if missing.
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides `mode` from the config.
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
pub enum ModeArg {
    Baseline,
    Mop,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
pub enum StageArg {
    Pretrained,
    Trained,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the corpus and pretrain a dense backbone.
    Pretrain(Common),
    /// Compress a dense backbone with the configured spec.
    Compress {
        #[command(flatten)]
        common: Common,
        /// Dense backbone written by `pretrain`.
        #[arg(long)]
        backbone: PathBuf,
    },
    /// Prepare (compress, pretrain prompts and gate) and train centrally.
    Train {
        #[command(flatten)]
        common: Common,
        /// Reuse a dense backbone instead of pretraining one.
        #[arg(long)]
        backbone: Option<PathBuf>,
    },
    /// Same preparation, then federated training.
    TrainFederated {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        backbone: Option<PathBuf>,
    },
    /// Re-evaluate a finished run directory.
    Eval {
        /// Directory written by `train` or `train-federated`.
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// One run per injection layer.
    SweepInjection {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        backbone: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_values_t = vec![1, 3, 5, 7])]
        layers: Vec<usize>,
    },
    /// One run per prompts-per-expert value.
    SweepPrompts {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        backbone: Option<PathBuf>,
        #[arg(long = "m", value_delimiter = ',', default_values_t = vec![1, 4, 8])]
        m_values: Vec<usize>,
    },
    /// Per-task expert-group masses from a gate log.
    GateReport {
        /// CSV with header `task,p0..`.
        #[arg(long)]
        log: PathBuf,
        #[arg(long, value_enum)]
        stage: StageArg,
        /// Prompts per expert group.
        #[arg(long)]
        per_expert: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Pretrain(c) => commands::pretrain(&c),
        Command::Compress { common, backbone } => commands::compress(&common, &backbone),
        Command::Train { common, backbone } => commands::train(&common, backbone.as_deref()),
        Command::TrainFederated { common, backbone } => commands::train_federated(&common, backbone.as_deref()),
        Command::Eval { run, out } => commands::eval(&run, &out),
        Command::SweepInjection { common, backbone, layers } => {
            commands::sweep_injection(&common, backbone.as_deref(), &layers)
        }
        Command::SweepPrompts { common, backbone, m_values } => {
            commands::sweep_prompts(&common, backbone.as_deref(), &m_values)
        }
        Command::GateReport { log, stage, per_expert, out } => commands::gate_report(&log, stage, per_expert, &out),
    };
    match result {
        Ok(line) => {
            println!("{line}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
