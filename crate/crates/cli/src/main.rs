use std::fs;
use std::path::PathBuf;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use qntk_core::experiments::{self, ExperimentConfig, ExperimentKind, Preset};

#[derive(Parser)]
#[command(name = "qntk", version, about = "NTK / QuadNTK experiments on the sphere")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// λ3 sweep of f_L + f_Q with R3 only.
    Fig1(RunArgs),
    /// n_star against d for the full network.
    Scaling(RunArgs),
    /// λ1 sweep at fixed λ3 with the fresh-sample R1 estimator.
    R1(RunArgs),
    /// Analytic vs Monte-Carlo covariance and its eigenvalue gaps.
    Spectrum(RunArgs),
    /// Explicit W_L, W_Q, W* across widths.
    Expressivity(RunArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetArg {
    Desk,
    Paper,
}

#[derive(clap::Args)]
struct RunArgs {
    /// TOML file overriding preset values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, required_unless_present = "dry_run")]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "desk")]
    preset: PresetArg,
    /// Print the resolved config and exit.
    #[arg(long)]
    dry_run: bool,
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let (kind, args) = match cli.command {
        Command::Fig1(a) => (ExperimentKind::Fig1, a),
        Command::Scaling(a) => (ExperimentKind::Scaling, a),
        Command::R1(a) => (ExperimentKind::R1Implicit, a),
        Command::Spectrum(a) => (ExperimentKind::Spectrum, a),
        Command::Expressivity(a) => (ExperimentKind::Expressivity, a),
    };
    let preset = match args.preset {
        PresetArg::Desk => Preset::Desk,
        PresetArg::Paper => Preset::Paper,
    };
    let overrides = match &args.config {
        Some(p) => Some(fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?),
        None => None,
    };
    let cfg = ExperimentConfig::resolve(kind, preset, overrides.as_deref()).context("resolving config")?;
    if args.dry_run {
        print!("{}", cfg.to_toml_string()?);
        return Ok(());
    }
    let out = args.out.expect("clap enforces --out");
    log::info!("{kind} -> {} ({} threads)", out.display(), experiments::thread_count());
    let start = Instant::now();
    let summary = experiments::run(&cfg, &out).with_context(|| format!("running {kind}"))?;
    println!("{}", serde_json::to_string_pretty(&summary)?);
    log::info!("finished in {:.1} s", start.elapsed().as_secs_f64());
    Ok(())
}
