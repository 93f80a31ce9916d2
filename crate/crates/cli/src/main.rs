//! `otbary`: fit barycenter models, simulate and estimate conditional
//! densities, solve optimal transport, run Bayesian inference, and benchmark
//! solver scaling. Exit codes: 0 success, 1 usage/validation, 2
//! non-convergence, 3 I/O.

mod commands;
mod config;
mod grid;

use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};

use config::RunConfig;
use otbary::otdensity::OtMode;
use otbary::Error;

#[derive(Parser)]
#[command(name = "otbary", version, about = "Monge optimal-transport barycenter solver")]
struct Cli {
    /// Run configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the configuration seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads for row-parallel evaluation (default: rayon's choice).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,

    /// Override a config field: dotted path, JSON value (repeatable).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,

    /// Skip the model/config schema compatibility check.
    #[arg(long, global = true)]
    force: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum OtModeArg {
    Symmetric,
    Direct,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a barycenter model per the configuration; writes model.json,
    /// report.json and progress.csv.
    Fit,
    /// Generate the configured synthetic dataset as CSV.
    Synth {
        #[arg(long, default_value = "dataset.csv")]
        output: String,
    },
    /// Simulate ρ(x|z*) from a fitted model.
    Simulate {
        #[arg(long)]
        model: PathBuf,
        /// Target covariates, comma-separated in schema order.
        #[arg(long, allow_hyphen_values = true)]
        z: String,
        /// Optional barycenter sample indices to push back.
        #[arg(long)]
        subset: Option<String>,
        #[arg(long, default_value = "simulated.csv")]
        output: String,
    },
    /// Conditional quantile curves over a covariate grid (1D outcomes).
    Quantiles {
        #[arg(long)]
        model: PathBuf,
        /// Grid spec: name=min:max:steps[,name=...] covering all covariates.
        #[arg(long)]
        grid: String,
        #[arg(long, default_value = "0.05,0.5,0.95")]
        probs: String,
        #[arg(long, default_value = "quantiles.csv")]
        output: String,
    },
    /// Regular density estimation of the configured dataset's outcomes.
    Density {
        /// Probe grid over the outcome dimensions: name=min:max:steps[,...].
        #[arg(long)]
        grid: String,
        #[arg(long, default_value = "density.csv")]
        output: String,
    },
    /// Monge optimal transport between two sample files.
    Ot {
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long, value_enum, default_value = "symmetric")]
        mode: OtModeArg,
    },
    /// Posterior over covariates given an observed outcome.
    Bayes {
        #[arg(long)]
        model: PathBuf,
        /// Observed outcome, comma-separated.
        #[arg(long, allow_hyphen_values = true)]
        x_obs: String,
        /// Grid spec over the covariate columns.
        #[arg(long)]
        grid: String,
        #[arg(long, default_value = "posterior.csv")]
        output: String,
    },
    /// Sequential Bayes over an unknown parameter column, using the
    /// configured dataset as the observation series.
    BayesOnline {
        #[arg(long)]
        model: PathBuf,
        /// Schema column holding the unknown parameter.
        #[arg(long)]
        theta_col: String,
        /// Grid spec over the parameter column: name=min:max:steps.
        #[arg(long)]
        grid: String,
        #[arg(long, default_value = "posterior_steps.csv")]
        output: String,
    },
    /// Scaling benchmark; writes timing JSON.
    Bench {
        #[arg(long, default_value = "bench.json")]
        output: String,
    },
}

fn exit_code_for(err: &Error) -> i32 {
    match err {
        Error::Io(_) | Error::Csv(_) => 3,
        Error::LineSearchStall { .. } => 2,
        _ => 1,
    }
}

fn load_config(cli: &Cli) -> otbary::Result<RunConfig> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Error::Config("this command requires --config".into()))?;
    RunConfig::load(path, &cli.sets, cli.seed)
}

fn dispatch(cli: &Cli) -> otbary::Result<i32> {
    if let Some(n) = cli.threads {
        // Ignore the error when a global pool already exists (tests).
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    std::fs::create_dir_all(&cli.out)?;
    match &cli.command {
        Command::Fit => commands::cmd_fit(&load_config(cli)?, &cli.out),
        Command::Synth { output } => commands::cmd_synth(&load_config(cli)?, &cli.out, output),
        Command::Simulate { model, z, subset, output } => {
            commands::cmd_simulate(model, z, subset.as_deref(), &cli.out, output)
        }
        Command::Quantiles { model, grid, probs, output } => {
            commands::cmd_quantiles(model, grid, probs, &cli.out, output)
        }
        Command::Density { grid, output } => {
            commands::cmd_density(&load_config(cli)?, grid, &cli.out, output)
        }
        Command::Ot { source, target, mode } => {
            let mode = match mode {
                OtModeArg::Symmetric => OtMode::Symmetric,
                OtModeArg::Direct => OtMode::Direct,
            };
            commands::cmd_ot(&load_config(cli)?, source, target, mode, &cli.out)
        }
        Command::Bayes { model, x_obs, grid, output } => {
            commands::cmd_bayes(&load_config(cli)?, model, x_obs, grid, cli.force, &cli.out, output)
        }
        Command::BayesOnline { model, theta_col, grid, output } => commands::cmd_bayes_online(
            &load_config(cli)?,
            model,
            theta_col,
            grid,
            cli.force,
            &cli.out,
            output,
        ),
        Command::Bench { output } => commands::cmd_bench(&load_config(cli)?, &cli.out, output),
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap prints help/version through the error path with success
            // status; keep that behavior, map real usage errors to 1.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    match dispatch(&cli) {
        Ok(code) => std::process::exit(code),
        Err(err) => {
            eprintln!("error: {err}");
            std::process::exit(exit_code_for(&err));
        }
    }
}
