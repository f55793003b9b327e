use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use openpath::config::{Mode, RunConfig};
use openpath::run::{analyze, run_extrapolate, run_oracle, run_variational};

#[derive(Parser, Debug)]
#[command(name = "openpath", version, about = "Open-path PIMD with enhanced sampling of the end-to-end opening")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
struct Common {
    /// TOML run configuration; missing keys take their defaults.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Master seed for the walker streams.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Number of walkers.
    #[arg(long, value_name = "N")]
    walkers: Option<usize>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
struct Sampling {
    #[command(flatten)]
    common: Common,
    /// Continue from a checkpoint file.
    #[arg(long, value_name = "CKPT")]
    restart: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Sample the one-dimensional model with a bias on x.
    Run1d(Sampling),
    /// Sample the triatomic-plus-bath model with a bias on x.
    RunMany(Sampling),
    /// Sample the endpoint kernel with a two-dimensional bias.
    RunRdm(Sampling),
    /// Exact distributions of the one-dimensional model.
    Oracle(Common),
    /// Turn a finished run directory into result tables.
    Analyze {
        /// Run directory (overrides `input` from the configuration).
        run: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Linear fit of eigenvalues against temperature, extrapolated to T = 0.
    Extrapolate {
        /// Analyzed RDM run directories, added to those in the configuration.
        runs: Vec<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
}

fn load(common: &Common, mode: Mode) -> Result<RunConfig> {
    let mut config = match &common.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
        None => RunConfig::default(),
    };
    config.mode = mode;
    if let Some(s) = common.seed {
        config.seed = s;
    }
    if let Some(w) = common.walkers {
        config.walkers = w;
    }
    if let Some(o) = &common.out {
        config.out = o.clone();
    }
    config.validate()?;
    Ok(config)
}

fn sample(args: &Sampling, mode: Mode) -> Result<()> {
    let config = load(&args.common, mode)?;
    let sim = run_variational(&config, args.restart.as_deref())?;
    log::info!(
        "finished {} variational steps and {} production chunks in {}",
        sim.records.len(),
        sim.production_chunks,
        sim.config.out.display()
    );
    let out = analyze(&sim.config.out, &sim.config.out);
    match out {
        Ok(_) => log::info!("analysis written to {}", sim.config.out.display()),
        Err(e) => log::warn!("run finished but analysis was refused: {e}"),
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match &cli.command {
        Command::Run1d(a) => sample(a, Mode::Run1d),
        Command::RunMany(a) => sample(a, Mode::RunMany),
        Command::RunRdm(a) => sample(a, Mode::RunRdm),
        Command::Oracle(c) => {
            let config = load(c, Mode::Oracle)?;
            run_oracle(&config)?;
            log::info!("oracle written to {}", config.out.display());
            Ok(())
        }
        Command::Analyze { run, common } => {
            let config = load(common, Mode::Analyze)?;
            let Some(dir) = run.clone().or(config.input.clone()) else {
                bail!("analyze needs a run directory");
            };
            let out = common.out.clone().unwrap_or_else(|| dir.clone());
            analyze(&dir, &out)?;
            log::info!("analysis written to {}", out.display());
            Ok(())
        }
        Command::Extrapolate { runs, common } => {
            let mut config = load(common, Mode::Extrapolate)?;
            config.extrapolate.runs.extend(runs.iter().cloned());
            let fit = run_extrapolate(&config)?;
            print!("{}", fit.report());
            Ok(())
        }
    }
}
