//! Command-line interface behind the `clbench` binary.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::config::load_layered;
use crate::error::{Error, Result};
use crate::runner::{prepare, run_experiment, run_suite, sweep_memory};

#[derive(Debug, Parser)]
#[command(name = "clbench", version, about = "Continual-learning benchmark harness")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train and evaluate one experiment.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Extra defaults layered under the config file.
        #[arg(long)]
        defaults: Option<PathBuf>,
        /// Dotted-key overrides, e.g. `--set optimizer.learning_rate=0.05`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
    },
    /// Run every config matching a glob under each seed.
    Suite {
        #[arg(long)]
        configs: String,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5")]
        seeds: Vec<u64>,
        /// Run experiments one at a time.
        #[arg(long)]
        serial: bool,
    },
    /// Accuracy against memory budget for one method.
    Sweep {
        #[arg(long)]
        method: String,
        /// Budgets in MB.
        #[arg(long, value_delimiter = ',')]
        targets: Vec<f64>,
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
    },
    /// Print the task sequence a config produces, as JSON.
    Compose {
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
    },
}

/// Process exit code for an error: 2 configuration, 4 infeasible sweep,
/// 3 anything that failed during training.
pub fn exit_code(e: &Error) -> u8 {
    if e.is_config_error() {
        2
    } else if matches!(e, Error::Infeasible(_)) {
        4
    } else {
        3
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run { config, defaults, sets } => {
            let cfg = load_layered(defaults.as_deref(), &config, &sets)?;
            let rec = run_experiment(&cfg)?;
            println!("{}", rec.matrix.to_csv());
            if let Some(m) = rec.metrics {
                println!("last_acc={:.4} avg_acc={:.4}", m.last_acc, m.avg_acc);
            }
            if let Some(b) = rec.budget {
                println!("memory={} units ({})", b.total_units, b.display_mb());
            }
            println!("outputs in {}", cfg.output_dir.display());
        }
        Command::Suite { configs, seeds, serial } => {
            let paths: Vec<PathBuf> = glob::glob(&configs)
                .map_err(|e| Error::ConfigMissing(format!("bad glob `{configs}`: {e}").into()))?
                .filter_map(std::result::Result::ok)
                .collect();
            if paths.is_empty() {
                return Err(Error::ConfigMissing(format!("no config matches `{configs}`").into()));
            }
            let cfgs = paths.iter().map(|p| load_layered(None, p, &[])).collect::<Result<Vec<_>>>()?;
            let report = run_suite(&cfgs, &seeds, !serial)?;
            print!("{}", report.to_table());
            for r in &report.rows {
                for (s, e) in &r.failures {
                    eprintln!("{} seed {s} failed: {e}", r.name);
                }
            }
        }
        Command::Sweep { method, targets, config, seeds, sets } => {
            let cfg = load_layered(None, &config, &sets)?;
            let report = sweep_memory(&method, &targets, &cfg, &seeds)?;
            print!("{}", report.to_csv()?);
        }
        Command::Compose { config, sets } => {
            let cfg = load_layered(None, &config, &sets)?;
            let (_, _, seq) = prepare(&cfg)?;
            println!("{}", seq.to_json());
        }
    }
    Ok(())
}

pub fn main_with(cli: Cli) -> ExitCode {
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
