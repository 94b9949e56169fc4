//! Command-line front end: simulate, fit, assess, predict, screen, study.

mod commands;
mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "multisurvey", version, about = "Joint spatial models for multi-survey abundance counts")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate one synthetic replicate: dataset, truth, covariate grid and mesh.
    Simulate(Common),
    /// Fit the configured model to a dataset.
    Fit(Common),
    /// Score a fitted model (DIC, WAIC, LPML, CRPS, RMSE).
    Assess(Common),
    /// Predict the reference-country total on the covariate grid.
    Predict(Common),
    /// Drop covariates that are strongly correlated over the grid.
    Screen(Common),
    /// Run the replicate recovery study.
    Study(Common),
}

#[derive(Debug, Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Existing output directory.
    #[arg(long)]
    out: PathBuf,
    /// Worker threads (default: all cores).
    #[arg(long)]
    threads: Option<usize>,
    /// Fewer samples and replicates.
    #[arg(long)]
    fast: bool,
}

#[derive(Debug)]
pub enum CliError {
    Input(String),
    Numerical(String),
}

impl From<multisurvey::Error> for CliError {
    fn from(e: multisurvey::Error) -> Self {
        if e.is_numerical() {
            let mut msg = e.to_string();
            if let multisurvey::Error::InnerNewton { trace, .. } = &e {
                msg.push_str(&format!("\nnewton trace (log density per iteration): {trace:?}"));
            }
            CliError::Numerical(msg)
        } else {
            CliError::Input(e.to_string())
        }
    }
}

/// Everything a command needs after argument and config validation.
pub struct Run {
    pub command: &'static str,
    pub config: RunConfig,
    pub config_sha256: String,
    pub seed: u64,
    pub out: PathBuf,
}

fn prepare(command: &'static str, args: Common) -> Result<Run, CliError> {
    if !args.out.is_dir() {
        return Err(CliError::Input(format!(
            "output directory {} does not exist",
            args.out.display()
        )));
    }
    let mut config = RunConfig::load(&args.config)?;
    if args.seed.is_some() {
        config.seed = args.seed;
    }
    let seed = config
        .seed
        .ok_or_else(|| CliError::Input("a seed is required (config `seed` or --seed)".into()))?;
    if args.fast {
        config.make_fast();
    }
    // hashed before path resolution so the digest does not depend on where the run happens
    let config_sha256 = commands::sha256_hex(&serde_json::to_vec(&config).map_err(|e| CliError::Input(e.to_string()))?);
    config.resolve_paths(args.config.parent().unwrap_or(Path::new(".")));
    if let Some(n) = args.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Input(format!("--threads: {e}")))?;
    }
    Ok(Run {
        command,
        config,
        config_sha256,
        seed,
        out: args.out,
    })
}

type Action = fn(&Run) -> Result<Vec<String>, CliError>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (name, args, action): (_, _, Action) = match cli.command {
        Command::Simulate(a) => ("simulate", a, commands::simulate),
        Command::Fit(a) => ("fit", a, commands::fit),
        Command::Assess(a) => ("assess", a, commands::assess),
        Command::Predict(a) => ("predict", a, commands::predict),
        Command::Screen(a) => ("screen", a, commands::screen),
        Command::Study(a) => ("study", a, commands::study),
    };
    let result = prepare(name, args).and_then(|run| {
        let outputs = action(&run)?;
        commands::write_manifest(&run, &outputs)
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Input(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Numerical(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(3)
        }
    }
}
