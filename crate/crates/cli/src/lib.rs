//! Experiment driver behind the `esplit` binary.

pub mod command;
pub mod config;
pub mod error;
pub mod run;

use std::path::PathBuf;

use clap::Parser;

pub use command::{execute, Command, Outcome, SweepSummary};
pub use config::ExperimentConfig;
pub use error::{CliError, CliResult};
pub use run::{run_root, RunManifest, RUN_ROOT_ENV};

#[derive(Debug, Parser)]
#[command(name = "esplit", version, about = "Learned feature compression for split computing")]
pub struct Cli {
    /// TOML experiment configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Run directory name under $ESPLIT_RUN_ROOT (or a path, if it contains a separator).
    #[arg(long, global = true, default_value = "default")]
    pub run: String,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

impl Cli {
    pub fn run_dir(&self) -> PathBuf {
        let p = PathBuf::from(&self.run);
        if p.is_absolute() || self.run.contains(std::path::MAIN_SEPARATOR) {
            p
        } else {
            run_root().join(p)
        }
    }

    /// Effective configuration: file (or defaults), then flags.
    pub fn config(&self) -> CliResult<ExperimentConfig> {
        let mut cfg = ExperimentConfig::load(self.config.as_deref())?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        self.command.apply_overrides(&mut cfg)?;
        Ok(cfg)
    }

    pub fn execute(&self) -> CliResult<(Outcome, RunManifest)> {
        let cfg = if matches!(self.command, Command::Rerun { .. }) { ExperimentConfig::default() } else { self.config()? };
        execute(&self.command, cfg, self.run_dir())
    }
}
