//! `bscopula`: fit Bregman-Sinkhorn copulas to two-arm experiments and run the
//! simulation studies.

mod commands;
mod config;
mod output;

use std::process::ExitCode;
use std::time::Instant;

use anyhow::Context;
use clap::{Parser, Subcommand};

use config::{resolve, Flags};
use output::Artifacts;

#[derive(Parser)]
#[command(name = "bscopula", version, about = "Rank-sticky couplings of never-jointly-observed potential outcomes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a copula to observed `y,t` data and export potentials, coupling, effects and variances.
    Fit(Flags),
    /// Draw one panel of potential outcomes from a simulation design.
    Simulate(Flags),
    /// Imputed effect distribution across a stickiness grid, scored against the truth.
    Sweep(Flags),
    /// Variance estimators over repeated balanced assignments of one panel.
    Variance(Flags),
    /// Log-log convergence slope of the fitted potentials or comonotone map.
    Rate(Flags),
    /// Per-stratum fits for `y,t,x` data and the mixture effect distribution.
    Stratified(Flags),
}

impl Command {
    fn split(&self) -> (&'static str, &Flags) {
        match self {
            Command::Fit(f) => ("fit", f),
            Command::Simulate(f) => ("simulate", f),
            Command::Sweep(f) => ("sweep", f),
            Command::Variance(f) => ("variance", f),
            Command::Rate(f) => ("rate", f),
            Command::Stratified(f) => ("stratified", f),
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let (name, flags) = cli.command.split();
    let cfg = resolve(name, flags).with_context(|| format!("{name}: configuration"))?;
    let start = Instant::now();
    let mut art = Artifacts::create(&cfg.out)?;
    let results = match name {
        "fit" => commands::fit(&cfg, &mut art),
        "simulate" => commands::simulate_panel(&cfg, &mut art),
        "sweep" => commands::sweep(&cfg, &mut art),
        "variance" => commands::variance(&cfg, &mut art),
        "rate" => commands::rate(&cfg, &mut art),
        "stratified" => commands::stratified(&cfg, &mut art),
        _ => unreachable!("subcommands are fixed by clap"),
    }
    .with_context(|| name.to_string())?;
    art.manifest(&cfg, start.elapsed().as_secs_f64(), results)?;
    println!("{name}: wrote {}", cfg.out.display());
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
