//! Command-line driver for the sampling pipeline.
//!
//! Seven subcommands cover the full experimental loop: `simulate` a
//! synthetic population, fit per-individual `map` estimates, `propose`
//! adapted Gaussians, `sample` a single chain, `compare` kernels over
//! replicate runs against a long reference, run that `reference` chain
//! alone, and `info-gap` for the Monte Carlo curvature check.
//!
//! Every run is deterministic in the master seed: repeating a command
//! with the same inputs and seed reproduces its artifacts byte for
//! byte. Errors print as a single `error: ...` line on stderr with
//! exit status 1.

mod commands;
mod config;
mod pipeline;

use std::path::PathBuf;

use anyhow::{bail, Result};
use clap::{Parser, Subcommand};

use config::{Config, Overrides};
use pipeline::OutputLayout;

#[derive(Parser)]
#[command(
    name = "nlme-mcmc",
    version,
    about = "Posterior sampling of individual parameters in mixed effects models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Input dataset CSV with columns id,time,observation,dose.
    #[arg(long, global = true, value_name = "FILE")]
    data: Option<PathBuf>,

    /// TOML configuration; missing sections use built-in defaults.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Output directory, created if missing.
    #[arg(long, global = true, value_name = "DIR", default_value = "out")]
    out: PathBuf,

    /// Master seed (default 42 unless the config sets one).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Kernel kind: prior-imh, rwm-componentwise, rwm-blockwise, mala
    /// or nlme-imh.
    #[arg(long, global = true)]
    kernel: Option<String>,

    /// Iterations per chain.
    #[arg(long, global = true)]
    iters: Option<usize>,

    /// Replicate runs per kernel in compare.
    #[arg(long, global = true)]
    runs: Option<usize>,

    /// Individual id for single-individual commands.
    #[arg(long, global = true)]
    individual: Option<String>,

    /// States discarded before diagnostics.
    #[arg(long = "burn-in", global = true)]
    burn_in: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic population and write dataset and truth CSVs.
    Simulate,
    /// Fit the posterior mode of every individual in the dataset.
    Map,
    /// Build both Gaussian proposals for one individual.
    Propose,
    /// Run one chain for one individual with the configured kernel.
    Sample,
    /// Run replicate chains for every kernel against a long reference.
    Compare,
    /// Run the long adapted-independence reference chain.
    Reference,
    /// Monte Carlo check of the expected likelihood curvature at the mode.
    InfoGap,
}

fn main() {
    if let Err(err) = run() {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}

fn run() -> Result<()> {
    let cli = Cli::parse();

    let mut cfg = Config::load(cli.config.as_deref())?;
    cfg.apply(&Overrides {
        seed: cli.seed,
        kernel: cli.kernel.clone(),
        iters: cli.iters,
        runs: cli.runs,
        individual: cli.individual.clone(),
        burn_in: cli.burn_in,
    });
    cfg.validate()?;

    let out = OutputLayout::create(&cli.out)?;
    let echoed = cfg.echo(&out.root)?;

    match cli.command {
        Command::Simulate => commands::simulate_cmd(&cfg, &out)?,
        Command::Map => commands::map_cmd(&cfg, &out, &require_data(&cli, "map")?)?,
        Command::Propose => commands::propose_cmd(&cfg, &out, &require_data(&cli, "propose")?)?,
        Command::Sample => commands::sample_cmd(&cfg, &out, &require_data(&cli, "sample")?)?,
        Command::Compare => commands::compare_cmd(&cfg, &out, &require_data(&cli, "compare")?)?,
        Command::Reference => {
            commands::reference_cmd(&cfg, &out, &require_data(&cli, "reference")?)?
        }
        Command::InfoGap => commands::info_gap_cmd(&cfg, &out, &require_data(&cli, "info-gap")?)?,
    }
    println!("wrote {}", echoed.display());
    Ok(())
}

fn require_data(cli: &Cli, command: &str) -> Result<PathBuf> {
    let Some(path) = &cli.data else {
        bail!("the {command} command requires --data <FILE>");
    };
    if !path.exists() {
        bail!("dataset {} does not exist", path.display());
    }
    Ok(path.clone())
}
