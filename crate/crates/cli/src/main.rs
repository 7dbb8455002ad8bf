//! Command-line entry point. Parsing and dispatch only; the work lives in
//! the library modules so integration tests can drive it directly.
//!
//! Exit codes: 0 success, 2 configuration problems (bad file, bad override,
//! failed validation, refused checkpoint), 3 training divergence, 1
//! anything else.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context as _;
use clap::{Parser, Subcommand};
use fedabml_cli::commands;
use fedabml_cli::config::{self, ConfigError, RunConfig};

#[derive(Parser)]
#[command(
    name = "fedabml",
    version,
    about = "Personalized federated training of Bayesian neural networks"
)]
struct Cli {
    /// JSON configuration file; defaults apply when omitted.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Dotted-path override, repeatable: --set fed.lr_phi=0.05
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,

    /// Output directory; falls back to the config's output_dir, then
    /// $FEDABML_OUT_DIR, then the working directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Worker threads for each round's client updates (0 = one per core).
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from scratch; writes checkpoint.fabm, history.jsonl, history.csv.
    Train,
    /// Continue a checkpointed run for more rounds, bit-exactly.
    Resume {
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        /// How many additional rounds to run.
        #[arg(long, default_value_t = 0)]
        extra_rounds: u64,
    },
    /// Two-client linear benchmark comparing the hierarchical update with
    /// plain averaging; writes toy_curves.csv.
    RunToy,
    /// Personalize a checkpointed prior to freshly drawn clients across an
    /// epoch grid; writes finetune.csv.
    Finetune {
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        /// Comma-separated epoch counts to report.
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4,5,8,10")]
        epochs: Vec<usize>,
        /// Number of fresh clients (default: the training client count).
        #[arg(long)]
        count: Option<usize>,
    },
    /// Compare predictive entropy on training inputs against a shifted
    /// copy; writes entropy.json.
    EntropyReport {
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        /// Shift to apply: mean:<delta> or holdout:<c1,c2,...>
        #[arg(long, default_value = "mean:2.0")]
        shift: String,
    },
    /// Write the label partition a configuration produces (partition.json).
    Partition,
    /// Print the resolved manifest (canonical config, hash, model shape).
    Validate,
}

fn real_main(cli: Cli) -> anyhow::Result<()> {
    if let Some(threads) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .context("initializing the thread pool")?;
    }
    match cli.command {
        Command::Train => {
            let cfg = config::load_config(cli.config.as_deref(), &cli.set)?;
            let out = commands::resolve_out_dir(cli.out.as_deref(), cfg.output_dir.as_deref())?;
            commands::cmd_train(&cfg, &out)
        }
        Command::Resume {
            checkpoint,
            extra_rounds,
        } => commands::cmd_resume(&checkpoint, extra_rounds, &cli.set, cli.out.as_deref()),
        Command::RunToy => {
            let cfg = match cli.config.as_deref() {
                Some(path) => config::load_config(Some(path), &cli.set)?,
                None => {
                    // No file: start from the tuned benchmark baseline and
                    // apply overrides on top of it.
                    let mut value = serde_json::to_value(commands::toy_default_config())?;
                    for spec in &cli.set {
                        config::apply_override(&mut value, spec)?;
                    }
                    let cfg: RunConfig = serde_json::from_value(value)
                        .map_err(|e| ConfigError(format!("bad override: {e}")))?;
                    cfg.validate()?;
                    cfg
                }
            };
            let out = commands::resolve_out_dir(cli.out.as_deref(), cfg.output_dir.as_deref())?;
            commands::cmd_run_toy(&cfg, &out)
        }
        Command::Finetune {
            checkpoint,
            epochs,
            count,
        } => commands::cmd_finetune(&checkpoint, &epochs, count, cli.out.as_deref()),
        Command::EntropyReport { checkpoint, shift } => {
            commands::cmd_entropy_report(&checkpoint, &shift, cli.out.as_deref())
        }
        Command::Partition => {
            let cfg = config::load_config(cli.config.as_deref(), &cli.set)?;
            let out = commands::resolve_out_dir(cli.out.as_deref(), cfg.output_dir.as_deref())?;
            commands::cmd_partition(&cfg, &out)
        }
        Command::Validate => {
            let cfg = config::load_config(cli.config.as_deref(), &cli.set)?;
            commands::cmd_validate(&cfg)
        }
    }
}

fn exit_code_for(err: &anyhow::Error) -> ExitCode {
    if err.downcast_ref::<ConfigError>().is_some() {
        return ExitCode::from(2);
    }
    if matches!(
        err.downcast_ref::<fedabml_core::Error>(),
        Some(fedabml_core::Error::Diverged { .. })
    ) {
        return ExitCode::from(3);
    }
    ExitCode::from(1)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match real_main(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            exit_code_for(&err)
        }
    }
}
