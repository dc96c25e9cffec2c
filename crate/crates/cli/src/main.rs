use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use meanfield_cli::{execute, Command, Invocation, WORKERS_ENV};

#[derive(Parser)]
#[command(
    name = "meanfield",
    version,
    about = "Particle and mean-field PDE experiments from a config file"
)]
struct Cli {
    #[command(subcommand)]
    command: Sub,
}

#[derive(Subcommand)]
enum Sub {
    /// Build and export the lattice sample.
    Sample(Common),
    /// Run one realization of a particle system and export its frames.
    Simulate(Common),
    /// Solve the mean-field PDE and export density/velocity frames.
    Pde(Common),
    /// Run the convergence sweep over the configured lattice spacings.
    Converge(Common),
    /// Estimate the separation statistic of the self-consistent system.
    Separation(Common),
}

#[derive(Args)]
struct Common {
    /// Configuration file (TOML), or a manifest.json from an earlier run.
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Worker threads (defaults to the config's `workers`, then all cores).
    #[arg(long, value_name = "N", env = WORKERS_ENV)]
    workers: Option<usize>,
    /// Base preset the config is layered over: smoke, desk, paper-direction.
    #[arg(long, value_name = "NAME")]
    preset: Option<String>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (command, common) = match cli.command {
        Sub::Sample(c) => (Command::Sample, c),
        Sub::Simulate(c) => (Command::Simulate, c),
        Sub::Pde(c) => (Command::Pde, c),
        Sub::Converge(c) => (Command::Converge, c),
        Sub::Separation(c) => (Command::Separation, c),
    };
    let inv = Invocation {
        command,
        config: common.config,
        out: common.out,
        workers: common.workers,
        preset: common.preset,
    };
    match execute(&inv) {
        Ok(manifest) => {
            for o in &manifest.outputs {
                println!("{}", inv.out.join(&o.path).display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
