use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use otfs_dfrc::experiment::{run_experiment, ExperimentConfig};

/// Pilot and data-power design for OTFS dual-functional radar-communication.
#[derive(Parser)]
#[command(name = "otfs-dfrc", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Optimize one weighted design and write it with its solver trace.
    Optimize(RunArgs),
    /// Sweep the trade-off weight and the baseline power splits.
    Region(RunArgs),
    /// Empirical ambiguity-function slices.
    Af(RunArgs),
    /// Monte Carlo bit error rate of the optimized design and baselines.
    Ber(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; falls back to `run.out_dir` in the configuration.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the configuration seed.
    #[arg(long)]
    seed: Option<u64>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let (name, args) = match &cli.command {
        Command::Optimize(a) => ("optimize", a),
        Command::Region(a) => ("region", a),
        Command::Af(a) => ("af", a),
        Command::Ber(a) => ("ber", a),
    };
    match run(name, args) {
        Ok(files) => {
            for f in files {
                println!("{}", f.display());
            }
            ExitCode::SUCCESS
        }
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}

fn run(name: &str, args: &RunArgs) -> Result<Vec<PathBuf>, String> {
    let mut config = ExperimentConfig::load(&args.config).map_err(|e| e.to_string())?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(configured) = &config.run.experiment {
        if configured != name {
            log::warn!("configuration names experiment '{configured}', running '{name}' as requested");
        }
    }
    let out = args
        .out
        .clone()
        .or_else(|| config.run.out_dir.clone())
        .ok_or("no output directory: pass --out or set run.out_dir")?;
    run_experiment(&config, name, &out).map_err(|e| e.to_string())
}
