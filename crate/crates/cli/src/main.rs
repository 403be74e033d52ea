use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod config;
mod output;

use config::RunConfig;

/// Bounded control ramps for small quantum systems.
#[derive(Parser)]
#[command(name = "qramp", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Optimize the ramp at a fixed duration along the M schedule.
    Optimize(Common),
    /// Estimate the minimal duration reaching the scenario threshold.
    Qsl(Common),
    /// Knot-noise ensembles around a stored outcome.
    Noise(Common),
    /// Re-evaluate a stored outcome under larger cutoffs.
    Converge(Common),
    /// Lowest eigenvalues against the coupling.
    Spectrum(Common),
}

#[derive(Args)]
struct Common {
    /// TOML run configuration.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set schedule.duration=3.5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for this run.
    #[arg(short, long)]
    out: Option<PathBuf>,
    /// Worker threads for restarts, gradients and noise realizations.
    #[arg(long, env = "QRAMP_THREADS")]
    threads: Option<usize>,
}

impl Common {
    fn load(&self) -> qramp_core::Result<RunConfig> {
        let mut overrides = self.overrides.clone();
        if let Some(seed) = self.seed {
            overrides.push(format!("seed={seed}"));
        }
        if let Some(out) = &self.out {
            let quoted = toml::Value::String(out.display().to_string()).to_string();
            overrides.push(format!("output_dir={quoted}"));
        }
        RunConfig::load(self.config.as_deref(), &overrides)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (common, run): (&Common, fn(&RunConfig) -> qramp_core::Result<()>) = match &cli.command {
        Command::Optimize(c) => (c, commands::optimize),
        Command::Qsl(c) => (c, commands::qsl),
        Command::Noise(c) => (c, commands::noise),
        Command::Converge(c) => (c, commands::converge),
        Command::Spectrum(c) => (c, commands::spectrum),
    };
    if let Some(n) = common.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            eprintln!("error: cannot size the thread pool: {e}");
            return ExitCode::from(2);
        }
    }
    match common.load().and_then(|cfg| run(&cfg)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
