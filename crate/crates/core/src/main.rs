use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use indo::harness::{analyze, parse_config, prepare, run_prepared, HarnessError, Preset, RunOutcome, RunStatus};

#[derive(Parser)]
#[command(name = "indo", version, about = "Distributed PMM with JOR (INDO) and ESOM inner solvers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every [[runs]] entry of a config file.
    Run {
        config: PathBuf,
        /// Output directory; overrides `output_dir` in the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Directory holding LIBSVM datasets (default: $INDO_DATA_DIR).
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Run a built-in experiment grid.
    Reproduce {
        preset: Preset,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Replace the preset's outer iteration count.
        #[arg(long)]
        iterations: Option<usize>,
    },
    /// Print the rate report of every run as JSON, without running.
    Analyze {
        config: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
    },
}

fn summarize(outcomes: &[RunOutcome]) -> bool {
    let mut ok = true;
    for o in outcomes {
        let s = &o.sidecar;
        match s.status {
            RunStatus::Completed => println!(
                "{:<20} {:>6} iterations  metric {:.6e}  -> {}",
                o.label,
                s.iterations_completed,
                s.final_metric.unwrap_or(f64::NAN),
                o.csv.display()
            ),
            RunStatus::Failed => {
                ok = false;
                println!(
                    "{:<20} failed after {} iterations: {}",
                    o.label,
                    s.iterations_completed,
                    s.error.as_deref().unwrap_or("unknown error")
                );
            }
        }
    }
    ok
}

fn execute(cli: Cli) -> Result<bool, HarnessError> {
    match cli.command {
        Command::Run { config, out, data } => {
            let config = parse_config(&config)?;
            let out = out
                .or_else(|| config.output_dir.as_ref().map(|d| config.base_dir.join(d)))
                .unwrap_or_else(|| PathBuf::from("out"));
            let experiment = prepare(&config, data.as_deref())?;
            Ok(summarize(&run_prepared(&experiment, &out)?))
        }
        Command::Reproduce { preset, out, data, iterations } => {
            let config = preset.config(iterations)?;
            let out = out.unwrap_or_else(|| PathBuf::from("out").join(preset.name()));
            let experiment = prepare(&config, data.as_deref())?;
            Ok(summarize(&run_prepared(&experiment, &out)?))
        }
        Command::Analyze { config, data } => {
            let config = parse_config(&config)?;
            let experiment = prepare(&config, data.as_deref())?;
            let mut ok = true;
            let mut reports = serde_json::Map::new();
            for (label, report) in analyze(&experiment) {
                let value = match report {
                    Ok(r) => serde_json::to_value(r)?,
                    Err(e) => {
                        ok = false;
                        serde_json::json!({ "error": e })
                    }
                };
                reports.insert(label, value);
            }
            println!("{}", serde_json::to_string_pretty(&reports)?);
            Ok(ok)
        }
    }
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
