use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use bambino::model::Role;
use bambino_cli::{commands, ExperimentConfig, Workspace};
use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "bambino", version, about = "Continual pre-training with parent-perplexity feedback")]
struct Cli {
    /// Experiment config (flat `key = value` text). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the master seed from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; relative config paths are resolved against it.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    /// Steps between progress lines on stderr (0 silences them).
    #[arg(long, global = true, default_value_t = 100)]
    progress_every: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum RoleArg {
    Baby,
    Parent,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the L1/L2 corpora, tokenizer and evaluation tasks.
    GenData,
    /// Train the baby on L1 or the parent on L2 with next-token prediction.
    Pretrain {
        #[arg(long, value_enum)]
        role: RoleArg,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Continually train the baby on L2 (bambino, no-ppo or no-alternating).
    Continual {
        #[arg(long, default_value = "bambino")]
        mode: String,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Measure perplexities and task accuracies of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Earlier checkpoint to compute forgetting and acquisition against.
        #[arg(long)]
        baseline: Option<PathBuf>,
        /// Report file (defaults to `<reports>/eval-<mode>.txt`).
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Summarize eval reports across modes and seeds.
    Report {
        /// Eval report files.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<serde_json::Value> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let mut ws = Workspace::new(cfg, cli.out);
    ws.progress_every = cli.progress_every;
    match cli.command {
        Command::GenData => commands::gen_data(&ws),
        Command::Pretrain { role, resume } => {
            let role = match role {
                RoleArg::Baby => Role::Baby,
                RoleArg::Parent => Role::Parent,
            };
            commands::pretrain(&ws, role, resume.as_deref())
        }
        Command::Continual { mode, resume } => commands::continual(&ws, &mode, resume.as_deref()),
        Command::Eval {
            checkpoint,
            baseline,
            report,
        } => commands::eval(&ws, &checkpoint, baseline.as_deref(), report.as_deref()).map(|(_, s)| s),
        Command::Report { inputs, output } => commands::report(&ws, &inputs, output.as_deref()).map(|(_, s)| s),
    }
}

fn main() -> ExitCode {
    bambino_cli::tune_allocator();
    let cli = Cli::parse();
    match run(cli).context("bambino failed") {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
