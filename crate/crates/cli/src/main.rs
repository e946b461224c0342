//! `cnls`: lattice classification, normal form, Melnikov checks and
//! simulation of the coupled cubic NLS system on the 2-torus.
//!
//! Exit codes: 0 when the verdict passes, 1 when it fails, 2 on error.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use config::RawConfig;
use output::{sha256_hex, Manifest, OutputDir};

#[derive(Parser, Debug)]
#[command(name = "cnls", version, about = "Quasi-periodic solutions of coupled cubic NLS systems on T²")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the seed from the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, env = "CNLS_OUT_DIR", default_value = "cnls-out")]
    out_dir: PathBuf,
    /// Worker threads for parallel sampling (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Resonant-site classification and admissibility.
    Lattice,
    /// Cubic Birkhoff normal form and frequency data.
    Normalform,
    /// Melnikov conditions at a point and the measure scan.
    Melnikov,
    /// Split-step run of the first-order ansatz.
    Simulate,
    /// End-to-end validation on the default two-component scenario.
    Verify,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Lattice => "lattice",
            Command::Normalform => "normalform",
            Command::Melnikov => "melnikov",
            Command::Simulate => "simulate",
            Command::Verify => "verify",
        }
    }
}

fn execute(cli: &Cli) -> Result<bool> {
    let start = Instant::now();
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    let mut inputs = std::collections::BTreeMap::new();
    let mut raw = match &cli.config {
        Some(path) => {
            let (raw, bytes) = config::parse_file(path)?;
            inputs.insert(path.display().to_string(), sha256_hex(&bytes));
            raw
        }
        None => RawConfig::default(),
    };
    if cli.seed.is_some() {
        raw.seed = cli.seed;
    }
    let mut out = OutputDir::create(&cli.out_dir)?;
    let (resolved, seed, passed) = match cli.command {
        Command::Lattice => {
            let run = config::resolve_lattice(&raw, 12)?;
            let ok = commands::lattice(&run, &mut out)?;
            (serde_json::to_value(&run)?, run.common.seed, ok)
        }
        Command::Normalform => {
            let run = config::resolve_lattice(&raw, 3)?;
            let ok = commands::normalform(&run, &mut out)?;
            (serde_json::to_value(&run)?, run.common.seed, ok)
        }
        Command::Melnikov => {
            let run = config::resolve_melnikov(&raw)?;
            let ok = commands::melnikov(&run, &mut out)?;
            (serde_json::to_value(&run)?, run.common.seed, ok)
        }
        Command::Simulate => {
            let run = config::resolve_simulate(&raw)?;
            let ok = commands::simulate(&run, &mut out)?;
            (serde_json::to_value(&run)?, run.common.seed, ok)
        }
        Command::Verify => {
            let run = config::resolve_simulate(&raw.over(config::verify_defaults()))?;
            let ok = commands::verify(&run, &mut out)?;
            (serde_json::to_value(&run)?, run.common.seed, ok)
        }
    };
    out.finish(Manifest {
        subcommand: cli.command.name().to_string(),
        tool: env!("CARGO_PKG_NAME").to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        seed,
        config: resolved,
        inputs,
        outputs: Default::default(),
        wall_time_s: start.elapsed().as_secs_f64(),
        passed,
    })?;
    Ok(passed)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("{}: verdict failed (see {})", cli.command.name(), cli.out_dir.display());
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
