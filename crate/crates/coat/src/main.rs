//! Command-line entry point: data generation, curriculum export,
//! training, evaluation, and strategy comparison.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use coat::cli::{
    cmd_compare, cmd_eval, cmd_export_curriculum, cmd_gen_data, cmd_train, RunConfig, StageSel,
};
use coat::sampler::SelectionStrategy;

#[derive(Parser)]
#[command(
    name = "coat",
    version,
    about = "Concept-aware training for small in-context learners"
)]
struct Cli {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Global seed; every component derives its own stream from it.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory (data/, curricula/, checkpoints/, reports/).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate train/valid/test datasets plus manifests
    GenData {
        /// Which stage to generate: 1 (concept chains), 2 (wh proxy), both
        #[arg(long, default_value = "both")]
        stage: StageSel,
    },

    /// Export constructed training prompts for offline replay
    ExportCurriculum {
        #[arg(long)]
        strategy: SelectionStrategy,

        /// Checkpoint to score candidates with (required for coat)
        #[arg(long)]
        checkpoint: Option<PathBuf>,

        #[arg(long, default_value = "1")]
        stage: StageSel,
    },

    /// Train a model under one selection strategy
    Train {
        #[arg(long)]
        strategy: SelectionStrategy,

        #[arg(long, default_value = "both")]
        stage: StageSel,
    },

    /// Evaluate a checkpoint on the unseen-concept test split
    Eval {
        #[arg(long)]
        strategy: SelectionStrategy,

        /// Explicit checkpoint path; defaults to the trained one
        #[arg(long)]
        checkpoint: Option<PathBuf>,

        #[arg(long, default_value = "1")]
        stage: StageSel,

        /// Demonstrations per evaluation prompt
        #[arg(long)]
        k_shots: Option<usize>,
    },

    /// Evaluate all strategy checkpoints head to head
    Compare {
        #[arg(long, default_value = "1")]
        stage: StageSel,

        #[arg(long)]
        k_shots: Option<usize>,
    },
}

fn run(cli: Cli) -> coat::Result<()> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.display().to_string();
    }
    match cli.command {
        Command::GenData { stage } => cmd_gen_data(&cfg, stage),
        Command::ExportCurriculum {
            strategy,
            checkpoint,
            stage,
        } => cmd_export_curriculum(&cfg, strategy, checkpoint.as_deref(), stage),
        Command::Train { strategy, stage } => cmd_train(&cfg, strategy, stage),
        Command::Eval {
            strategy,
            checkpoint,
            stage,
            k_shots,
        } => {
            if let Some(k) = k_shots {
                cfg.eval.k_shots = k;
            }
            cmd_eval(&cfg, strategy, checkpoint.as_deref(), stage)
        }
        Command::Compare { stage, k_shots } => {
            if let Some(k) = k_shots {
                cfg.eval.k_shots = k;
            }
            cmd_compare(&cfg, stage)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("COAT_LOG", "info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
