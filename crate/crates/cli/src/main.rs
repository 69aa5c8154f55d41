use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dcmtl::data::Regime;
use dcmtl::{Split, TaskKind};
use dcmtl_cli::{commands, resolve, CliResult};

#[derive(Parser)]
#[command(name = "dcmtl", version, about = "Dense co-attention multi-task training on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "run")]
    out: PathBuf,
    /// Override a config key, e.g. `--set adam.lr=0.0005`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the world dataset and its split manifest.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        num_worlds: Option<u64>,
        #[arg(long)]
        regime: Option<Regime>,
    },
    /// Train on the generated dataset.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "val")]
        split: Split,
        /// Restrict to one task; all trained tasks by default.
        #[arg(long)]
        task: Option<TaskKind>,
    },
    /// Write attention maps and predictions for selected worlds.
    DumpAttention {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated world ids.
        #[arg(long, value_delimiter = ',', required = true)]
        samples: Vec<u64>,
    },
}

fn config(common: &Common, extra: Vec<String>) -> CliResult<dcmtl_cli::RunConfig> {
    let mut sets = Vec::new();
    if let Some(seed) = common.seed {
        sets.push(format!("seed={seed}"));
    }
    sets.extend(extra);
    sets.extend(common.set.iter().cloned());
    let config = resolve(common.config.as_deref(), &sets)?;
    config.validate()?;
    Ok(config)
}

fn run(cli: Cli) -> CliResult<String> {
    match cli.command {
        Command::GenData {
            common,
            num_worlds,
            regime,
        } => {
            let mut extra = Vec::new();
            if let Some(n) = num_worlds {
                extra.push(format!("num_worlds={n}"));
            }
            if let Some(r) = regime {
                extra.push(format!("regime=\"{r}\""));
            }
            commands::gen_data(&config(&common, extra)?, &common.out)
        }
        Command::Train { common } => commands::train(&config(&common, vec![])?, &common.out),
        Command::Eval {
            common,
            checkpoint,
            split,
            task,
        } => {
            let tasks: Vec<TaskKind> = task.into_iter().collect();
            commands::eval(&config(&common, vec![])?, &common.out, &checkpoint, split, &tasks)
        }
        Command::DumpAttention {
            common,
            checkpoint,
            samples,
        } => commands::dump(&config(&common, vec![])?, &common.out, &checkpoint, &samples),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(report) => {
            print!("{report}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error[{}]: {e}", e.code());
            ExitCode::FAILURE
        }
    }
}
