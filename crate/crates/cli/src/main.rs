//! `pnrtomo`: simulate detector traces and run the tomography pipeline.

mod archive;
mod config;
mod error;
mod pipeline;
mod simulate;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{Overrides, PipelineConfig};
use error::{CliError, CliResult};

#[derive(Parser)]
#[command(name = "pnrtomo", version, about = "Photon-number-resolving detector tomography")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic trace file and its metadata sidecar.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Trace file to write; defaults to `paths.traces`.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Run the pipeline stages into the results directory.
    Pipeline {
        #[command(flatten)]
        common: Common,
        /// Comma-separated subset of pca,density,em,marginalize,efficiency,confidence.
        #[arg(long)]
        stages: Option<String>,
    },
}

#[derive(Args)]
struct Common {
    /// TOML configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Overwrite existing outputs.
    #[arg(long)]
    force: bool,
    #[arg(long)]
    grid_points: Option<usize>,
    #[arg(long)]
    n_max: Option<usize>,
    /// flat, thermal:<lambda^2> or poisson:<|alpha|^2>.
    #[arg(long)]
    prior: Option<String>,
    /// Relative standard deviation of the probe-energy calibration.
    #[arg(long)]
    calib_sigma: Option<f64>,
    /// Cap on worker threads.
    #[arg(long)]
    threads: Option<usize>,
}

impl Common {
    fn load(&self) -> CliResult<PipelineConfig> {
        let overrides = Overrides {
            seed: self.seed,
            grid_points: self.grid_points,
            n_max: self.n_max,
            prior: self.prior.clone(),
            calib_sigma: self.calib_sigma,
            threads: self.threads,
        };
        let config = PipelineConfig::load(self.config.as_deref(), &overrides)?;
        if let Some(n) = config.threads {
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
                .map_err(|e| CliError::Config(format!("threads: {e}")))?;
        }
        Ok(config)
    }
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Simulate { common, output } => {
            let config = common.load()?;
            let output = output.unwrap_or_else(|| config.paths.traces.clone());
            simulate::run(&config, &output, common.force)?;
            eprintln!("wrote {}", output.display());
        }
        Command::Pipeline { common, stages } => {
            let config = common.load()?;
            let stages = match stages {
                Some(s) => pipeline::parse_stages(&s)?,
                None => pipeline::STAGES.to_vec(),
            };
            let manifest = pipeline::run(&config, &stages, common.force)?;
            eprintln!("{} -> {}: {}", stages.join(","), config.paths.archive.display(), manifest.status);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("pnrtomo: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
