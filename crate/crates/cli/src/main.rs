//! `stmix` command-line driver.

mod commands;
mod config;
mod error;
mod fitfile;

use clap::{Args, Parser, Subcommand};
use commands::DataPaths;
use config::LoadedConfig;
use error::CliError;
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "stmix", version, about = "PDE-regularized space-time mixed-effects regression")]
struct Cli {
    /// Worker threads for grid searches and column solves.
    #[arg(long, global = true, env = "STMIX_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct DataArgs {
    /// Directory holding observations.csv, locations.csv and times.csv.
    #[arg(long, required_unless_present_all = ["observations", "locations", "times"])]
    data: Option<PathBuf>,
    #[arg(long, requires_all = ["locations", "times"], conflicts_with = "data")]
    observations: Option<PathBuf>,
    #[arg(long, requires = "observations")]
    locations: Option<PathBuf>,
    #[arg(long, requires = "observations")]
    times: Option<PathBuf>,
}

impl DataArgs {
    fn paths(&self) -> DataPaths {
        match (&self.data, &self.observations, &self.locations, &self.times) {
            (Some(dir), ..) => DataPaths::in_dir(dir),
            (None, Some(o), Some(l), Some(t)) => DataPaths { observations: o.clone(), locations: l.clone(), times: t.clone() },
            _ => unreachable!("clap enforces the data arguments"),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset and its ground truth.
    Simulate {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the seed from the configuration.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Fit the model and write a fit file.
    Fit {
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: PathBuf,
        /// Also write the smoothing scan as CSV.
        #[arg(long)]
        scan_out: Option<PathBuf>,
    },
    /// Scan the smoothing grid and write GCV scores as CSV.
    Gcv {
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: PathBuf,
        /// Best GCV per PDE candidate, as JSON.
        #[arg(long)]
        candidates_out: Option<PathBuf>,
    },
    /// Evaluate a fitted field on a regular grid.
    Predict {
        #[arg(long)]
        fit: PathBuf,
        /// Points along x and y, e.g. 50x50.
        #[arg(long)]
        grid: String,
        /// Comma-separated evaluation times.
        #[arg(long)]
        times: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print confidence intervals for a fit as JSON.
    Report {
        #[arg(long)]
        fit: PathBuf,
        #[arg(long, default_value_t = 0.99)]
        level: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Config("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(e.to_string()))?;
    }
    match cli.command {
        Command::Simulate { config, seed, out_dir } => {
            commands::cmd_simulate(&LoadedConfig::load(config.as_deref())?, seed, &out_dir)
        }
        Command::Fit { config, data, out, scan_out } => {
            commands::cmd_fit(&LoadedConfig::load(config.as_deref())?, &data.paths(), &out, scan_out.as_deref())
        }
        Command::Gcv { config, data, out, candidates_out } => {
            commands::cmd_gcv(&LoadedConfig::load(config.as_deref())?, &data.paths(), &out, candidates_out.as_deref())
        }
        Command::Predict { fit, grid, times, out } => commands::cmd_predict(&fit, &grid, &times, &out),
        Command::Report { fit, level, out } => commands::cmd_report(&fit, level, out.as_deref()),
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(e) = run(cli) {
        eprintln!("stmix: {e}");
        std::process::exit(e.exit_code());
    }
}
