use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use kdv_core::experiment::{
    atlas_rows, run, write_atlas, CritlenSection, ExperimentConfig, ExperimentError, RunManifest, SweepSection, Task,
};

#[derive(Parser)]
#[command(name = "kdvctl", version, about = "Run KdV boundary-control experiments from flat TOML configs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute the task in a config file.
    Run {
        config: PathBuf,
        #[arg(short, long, default_value = "runs")]
        out: PathBuf,
    },
    /// Run the config's task once per parameter value.
    Sweep {
        config: PathBuf,
        /// L, n_x or amplitude.
        #[arg(short, long)]
        parameter: String,
        #[arg(short, long, value_delimiter = ',', required = true, allow_negative_numbers = true)]
        values: Vec<f64>,
        #[arg(short, long, default_value = "runs")]
        out: PathBuf,
    },
    /// Parse and check a config without running it.
    Validate { config: PathBuf },
    /// Export a critical-length atlas as CSV.
    Atlas {
        /// S, N or F.
        #[arg(short, long, default_value = "S")]
        set: String,
        #[arg(long, default_value_t = 3)]
        k_max: u32,
        #[arg(long, default_value_t = 12)]
        seeds_per_axis: usize,
        #[arg(long, default_value_t = 15.0)]
        half_width: f64,
        #[arg(short, long, default_value = "atlas.csv")]
        out: PathBuf,
    },
}

const CONFIG_ERROR: u8 = 2;
const TASK_ERROR: u8 = 3;

fn report(m: &RunManifest) {
    println!("run_id {}", m.run_id);
    for (k, v) in &m.headline_metrics {
        println!("{k} = {v:?}");
    }
}

fn dispatch(cli: Cli) -> Result<(), ExperimentError> {
    match cli.command {
        Command::Run { config, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            report(&run(&cfg, &out)?);
        }
        Command::Sweep { config, parameter, values, out } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            let inner = if cfg.task == Task::Sweep { cfg.sweep.as_ref().map_or(Task::Gramian, |s| s.task) } else { cfg.task };
            cfg.task = Task::Sweep;
            cfg.sweep = Some(SweepSection { parameter, values, task: inner });
            cfg.validate()?;
            let m = run(&cfg, &out)?;
            report(&m);
            println!("table {}", out.join(&m.run_id).join("sweep.csv").display());
        }
        Command::Validate { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            println!("ok: task {} run_id {}", cfg.task.name(), cfg.run_id());
        }
        Command::Atlas { set, k_max, seeds_per_axis, half_width, out } => {
            let sec = CritlenSection { set, k_max, seeds_per_axis, half_width, ..CritlenSection::default() };
            let rows = atlas_rows(&sec)?;
            write_atlas(&out, &rows)?;
            println!("{} rows -> {}", rows.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { CONFIG_ERROR } else { TASK_ERROR })
        }
    }
}
