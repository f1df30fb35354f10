//! Command-line front end for task-phasing experiments: phasing runs over
//! seeds, parameter sweeps, exact theory checks and demonstration capture.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;
pub mod error;
pub mod experiment;
pub mod output;
pub mod plot;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use commands::{Check, Outcome};
pub use config::ExperimentConfig;
pub use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "taskphase", version, about = "Task-phasing curriculum experiments and theory checks")]
pub struct Cli {
    /// Run only this seed instead of the config's list.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory, replacing the config's.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// One phasing run per seed.
    Run { config: PathBuf },
    /// Run one theory check; exit status 1 when it does not hold.
    Verify {
        config: PathBuf,
        #[arg(long)]
        check: Check,
    },
    /// Run every listed value of one config field against every seed.
    Sweep {
        config: PathBuf,
        /// Dotted field path, e.g. `learner.epsilon`.
        #[arg(long)]
        param: String,
        /// Comma-separated values; JSON values may contain commas.
        #[arg(long)]
        values: String,
    },
    /// Collect demonstrations (and the derived policy and reward) per seed.
    DemoCollect { config: PathBuf },
}

impl Cli {
    fn config_path(&self) -> &PathBuf {
        match &self.command {
            Command::Run { config }
            | Command::Verify { config, .. }
            | Command::Sweep { config, .. }
            | Command::DemoCollect { config } => config,
        }
    }

    /// Loads the config and applies the command-line overrides.
    pub fn load_config(&self) -> Result<ExperimentConfig, CliError> {
        let mut config = ExperimentConfig::load(self.config_path())?;
        if let Some(seed) = self.seed {
            config.seeds = vec![seed];
        }
        if let Some(out) = &self.out {
            config.output_dir = out.clone();
        }
        if self.jobs == Some(0) {
            return Err(CliError::ConfigInvalid(vec!["--jobs: must be at least 1".into()]));
        }
        Ok(config)
    }
}

/// Runs the parsed command line and returns the process exit code.
pub fn execute(cli: &Cli) -> Result<Outcome, CliError> {
    let config = cli.load_config()?;
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(jobs) = cli.jobs {
        pool = pool.num_threads(jobs);
    }
    let pool = pool.build().map_err(|e| CliError::Runtime(e.to_string()))?;
    pool.install(|| match &cli.command {
        Command::Run { .. } => commands::cmd_run(&config),
        Command::Verify { check, .. } => commands::cmd_verify(&config, *check).map(|(outcome, _)| outcome),
        Command::Sweep { param, values, .. } => commands::cmd_sweep(&config, param, &commands::split_values(values)),
        Command::DemoCollect { .. } => commands::cmd_demo_collect(&config),
    })
}
