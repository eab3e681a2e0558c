mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use npeb_core::discrimination::{CallbackModel, Profile};

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Core(npeb_core::Error),
    Io(std::io::Error),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config: {m}"),
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Io(e) => write!(f, "io: {e}"),
        }
    }
}

impl From<npeb_core::Error> for CliError {
    fn from(e: npeb_core::Error) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e)
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Core(e.into())
    }
}

#[derive(Parser, Debug)]
#[command(name = "npeb", version = env!("NPEB_GIT_DESCRIBE"), about = "Empirical Bayes priors as stable fixed points")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, value_enum)]
    pub profile: Option<ProfileArg>,
    #[arg(long, global = true, default_value = "out")]
    pub out_dir: PathBuf,
    /// Worker threads; defaults to the machine's parallelism.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[arg(long, short, global = true)]
    pub verbose: bool,
    /// Input data file; overrides `data` in the config.
    #[arg(long, global = true)]
    pub data: Option<PathBuf>,
    #[arg(long, global = true)]
    pub cache_dir: Option<PathBuf>,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
pub enum ProfileArg {
    Desk,
    Full,
}

impl From<ProfileArg> for Profile {
    fn from(p: ProfileArg) -> Self {
        match p {
            ProfileArg::Desk => Profile::Desk,
            ProfileArg::Full => Profile::Full,
        }
    }
}

#[derive(ValueEnum, Debug, Clone, Copy)]
pub enum ModelArg {
    Independent,
    Frechet,
}

impl From<ModelArg> for CallbackModel {
    fn from(m: ModelArg) -> Self {
        match m {
            ModelArg::Independent => CallbackModel::Independent,
            ModelArg::Frechet => CallbackModel::Frechet,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Solve for the stable fixed point of a discrete model.
    Solve {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        max_iterations: Option<usize>,
    },
    /// Identification report for a discrete model.
    Diagnose {
        #[command(flatten)]
        common: Common,
        /// result.json from a previous solve; targets the audit at its support.
        #[arg(long)]
        result: Option<PathBuf>,
    },
    /// Per-pattern discrimination report for callback data.
    Discrimination {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        model: Option<ModelArg>,
    },
    /// Simulated conditional test of independence for callback data.
    Independence {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        n_sim: Option<usize>,
    },
    /// Nested-grid refinement study.
    Refine {
        #[command(flatten)]
        common: Common,
    },
    /// Sample-size consistency study on simulated data.
    Consistency {
        #[command(flatten)]
        common: Common,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
