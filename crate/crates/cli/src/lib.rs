//! `ssa` command line: train, eval, diagnose and cost.

use std::io::Write;
use std::path::PathBuf;

use clap::{Parser, Subcommand};
use ssa_core::harness::config::{DatasetKind, RunConfig};
use ssa_core::harness::run;
use ssa_core::learning::MethodKind;
use ssa_core::Error;

#[derive(Debug, Parser)]
#[command(name = "ssa", about = "Local learning on SVD-factored weights")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train from a TOML config; writes metrics.csv and final.ckpt.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's method.
        #[arg(long)]
        method: Option<MethodKind>,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (default: the config's output_dir).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Continue a run from one of its checkpoints.
    Resume {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print a checkpoint's test accuracy on a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: DatasetKind,
    },
    /// Alignment study: SSA, DFA and BP on mlp3 with matched seeds.
    Diagnose {
        #[arg(long, default_value_t = 5)]
        epochs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Dataset and hyperparameters (default: built-in defaults).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "diagnose")]
        out: PathBuf,
    },
    /// Print per-layer parameters and multiply-accumulates of a checkpoint.
    Cost {
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

fn execute(cmd: Command, out: &mut dyn Write) -> Result<(), Error> {
    let io = |e| Error::Io {
        path: PathBuf::from("<stdout>"),
        source: e,
    };
    match cmd {
        Command::Train {
            config,
            method,
            seed,
            out: dir,
        } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(m) = method {
                cfg.method = m.name().into();
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            cfg.validate()?;
            let dir = dir.unwrap_or_else(|| cfg.output_dir.clone());
            let outcome = run::train(&cfg, &dir)?;
            report(out, &outcome).map_err(io)?;
        }
        Command::Resume { checkpoint, out: dir } => {
            let outcome = run::resume(&checkpoint, &dir)?;
            report(out, &outcome).map_err(io)?;
        }
        Command::Eval { checkpoint, dataset } => {
            let acc = run::evaluate(&checkpoint, dataset)?;
            writeln!(out, "test_accuracy {acc:.6}").map_err(io)?;
        }
        Command::Diagnose {
            epochs,
            seed,
            config,
            out: dir,
        } => {
            let base = match config {
                Some(p) => RunConfig::load(&p)?,
                None => RunConfig::default(),
            };
            for p in run::diagnose(&base, epochs, seed, &dir)? {
                writeln!(out, "wrote {}", p.display()).map_err(io)?;
            }
        }
        Command::Cost { checkpoint } => {
            write!(out, "{}", run::cost_of_checkpoint(&checkpoint)?).map_err(io)?;
        }
    }
    Ok(())
}

fn report(out: &mut dyn Write, outcome: &run::RunOutcome) -> std::io::Result<()> {
    if let Some(last) = outcome.records.last() {
        let test = last
            .test_accuracy
            .map_or_else(|| "-".to_string(), |a| format!("{a:.4}"));
        writeln!(
            out,
            "epoch {} train_loss {:.4} train_accuracy {:.4} test_accuracy {test}",
            last.epoch, last.train_loss, last.train_accuracy
        )?;
    }
    writeln!(out, "metrics {}", outcome.metrics_path.display())?;
    writeln!(out, "checkpoint {}", outcome.checkpoint_path.display())
}

/// Runs the command line and returns the process exit code: 0 on success,
/// 1 on a failed command, 2 on a usage error.
pub fn run(argv: Vec<String>) -> i32 {
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let stdout = std::io::stdout();
    match execute(cli.command, &mut stdout.lock()) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
