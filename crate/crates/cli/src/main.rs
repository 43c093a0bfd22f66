use std::path::PathBuf;
use std::process::ExitCode;

use clap::builder::BoolishValueParser;
use clap::{ArgAction, Parser, Subcommand};

mod commands;
mod config;
mod error;
mod io;
mod run;

use error::{CliError, CliResult};
use run::Run;

/// Fingerprint simulation, dictionary matching and CNN reconstruction
/// experiments. Every flag can also be set through `FPF_<FLAG>`.
#[derive(Parser)]
#[command(name = "fpf", version)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,

    /// JSON config for the subcommand; built-in defaults when omitted.
    #[arg(long, global = true, env = "FPF_CONFIG")]
    config: Option<PathBuf>,

    /// Base seed (dataset seed, training seed, first permutation seed).
    #[arg(long, global = true, env = "FPF_SEED")]
    seed: Option<u64>,

    /// Output directory.
    #[arg(long, global = true, env = "FPF_OUT", default_value = "out")]
    out: PathBuf,

    /// Worker threads; all cores by default.
    #[arg(long, global = true, env = "FPF_THREADS")]
    threads: Option<usize>,

    /// Single-threaded numerics so re-runs are byte-identical.
    #[arg(long, global = true, env = "FPF_DETERMINISTIC", action = ArgAction::SetTrue, value_parser = BoolishValueParser::new())]
    deterministic: bool,
}

#[derive(Subcommand)]
enum Cmd {
    /// Simulate a normalized dictionary over a parameter grid.
    SimulateDict,
    /// Forge a synthetic phantom dataset with train/validation/test splits.
    GenerateDataset,
    /// Dictionary-match every image of a dataset.
    Match {
        #[arg(long)]
        dataset: PathBuf,
        /// Directory written by `simulate-dict`; simulated from the dataset otherwise.
        #[arg(long)]
        dict: Option<PathBuf>,
    },
    /// Realize an architecture from a receptive field and parameter budget.
    BuildArch,
    /// Realize architectures over receptive fields and budgets.
    SweepArch,
    /// Train a CNN on the training split of a dataset.
    Train {
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Reconstruct parametric maps with a trained model.
    Reconstruct {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Compare predicted maps against ground truth or reference maps.
    Evaluate {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        pred: PathBuf,
        /// Reference maps (predictions directory); dataset ground truth otherwise.
        #[arg(long)]
        reference: Option<PathBuf>,
    },
    /// High-frequency energy ratio of maps.
    Blurriness {
        /// Predictions or dataset directory.
        #[arg(long)]
        input: PathBuf,
        /// Dataset whose foreground masks are applied before the transform.
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Temporal permutation importance of a trained model.
    PermImportance {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
    },
}

impl Cmd {
    fn name(&self) -> &'static str {
        match self {
            Cmd::SimulateDict => "simulate-dict",
            Cmd::GenerateDataset => "generate-dataset",
            Cmd::Match { .. } => "match",
            Cmd::BuildArch => "build-arch",
            Cmd::SweepArch => "sweep-arch",
            Cmd::Train { .. } => "train",
            Cmd::Reconstruct { .. } => "reconstruct",
            Cmd::Evaluate { .. } => "evaluate",
            Cmd::Blurriness { .. } => "blurriness",
            Cmd::PermImportance { .. } => "perm-importance",
        }
    }
}

fn execute(cli: Cli) -> CliResult<()> {
    let threads = if cli.deterministic {
        1
    } else {
        cli.threads.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
    };
    if threads == 0 {
        return Err(CliError::Schema("--threads must be >= 1".into()));
    }
    rayon::ThreadPoolBuilder::new().num_threads(threads).build_global().map_err(CliError::runtime)?;
    let mut run = Run::new(cli.command.name(), &cli.out, cli.seed, threads, cli.deterministic)?;
    let cfg = cli.config.as_deref();
    if let Some(c) = cfg {
        run.inputs.push(c.display().to_string());
    }
    match &cli.command {
        Cmd::SimulateDict => commands::simulate_dict(&mut run, cfg)?,
        Cmd::GenerateDataset => commands::generate_dataset(&mut run, cfg)?,
        Cmd::Match { dataset, dict } => commands::match_maps(&mut run, cfg, dataset, dict.as_deref())?,
        Cmd::BuildArch => commands::build_arch(&mut run, cfg)?,
        Cmd::SweepArch => commands::sweep_arch(&mut run, cfg)?,
        Cmd::Train { dataset } => commands::train_model(&mut run, cfg, dataset)?,
        Cmd::Reconstruct { model, dataset } => commands::reconstruct(&mut run, cfg, model, dataset)?,
        Cmd::Evaluate { dataset, pred, reference } => {
            commands::evaluate_maps(&mut run, cfg, dataset, pred, reference.as_deref())?
        }
        Cmd::Blurriness { input, dataset } => commands::blur(&mut run, cfg, input, dataset.as_deref())?,
        Cmd::PermImportance { model, dataset } => commands::perm_importance(&mut run, cfg, model, dataset)?,
    }
    run.finish()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
