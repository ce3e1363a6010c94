use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use tollflow::cli::commands;
use tollflow::cli::config::{parse_config, parse_seeds, ExperimentConfig};
use tollflow::cli::verify::verify;
use tollflow::error::{Error, Result};

#[derive(Parser)]
#[command(name = "tollflow", version, about = "Adaptive marginal-cost tolling on parallel-link networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the stochastic load/toll process, one trajectory CSV per seed.
    Simulate(Common),
    /// Integrate the coupled ODE limit.
    Ode(Common),
    /// Solve for the equilibrium toll and social optimum.
    Equilibrium(Common),
    /// Check model properties and print a pass/fail table.
    Verify(Common),
    /// Ensemble convergence statistics over the seed list.
    Stats(Common),
    /// Print the fully resolved configuration.
    Config(Common),
}

#[derive(Args)]
struct Common {
    /// Configuration file in `key = value` form.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Preset (s1, s2, s3, s4); overrides the file's preset line.
    #[arg(long)]
    preset: Option<String>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seeds as a comma list or half-open range `a..b`.
    #[arg(long)]
    seeds: Option<String>,
}

fn load(common: &Common) -> Result<ExperimentConfig> {
    let mut text = match &common.config {
        Some(path) => std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.clone(),
            source: e,
        })?,
        None => String::new(),
    };
    if let Some(preset) = &common.preset {
        // A flag wins over a preset line in the file.
        text = text
            .lines()
            .map(|l| if l.trim_start().starts_with("preset") { "" } else { l })
            .collect::<Vec<_>>()
            .join("\n");
        text = format!("preset = {preset}\n{text}");
    }
    let mut cfg = parse_config(&text)?;
    if let Some(out) = &common.out {
        cfg.output = out.clone();
    }
    if let Some(seeds) = &common.seeds {
        cfg.seeds = parse_seeds(seeds)?;
        if cfg.seeds.is_empty() {
            return Err(Error::ConfigInvalid("seed list is empty".into()));
        }
        cfg.sim.seed = cfg.seeds[0];
    }
    Ok(cfg)
}

fn report(paths: &[PathBuf]) {
    for p in paths {
        println!("wrote {}", p.display());
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Simulate(c) => report(&commands::simulate(&load(&c)?)?),
        Command::Ode(c) => report(&commands::ode(&load(&c)?)?),
        Command::Equilibrium(c) => {
            let cfg = load(&c)?;
            println!("{}", serde_json::to_string_pretty(&commands::equilibrium_record(&cfg)?)?);
            report(&commands::equilibrium(&cfg)?);
        }
        Command::Stats(c) => report(&commands::stats(&load(&c)?)?),
        Command::Verify(c) => {
            let result = verify(&load(&c)?)?;
            print!("{}", result.table());
            if !result.all_passed() {
                return Ok(ExitCode::from(1));
            }
        }
        Command::Config(c) => print!("{}", load(&c)?.to_text()),
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
