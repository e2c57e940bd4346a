use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use trajent_cli::{execute, Command};

/// Entropy-dissipation experiments for degenerate nonlinear diffusions.
#[derive(Parser)]
#[command(name = "trajent", version)]
struct Cli {
    #[command(subcommand)]
    command: Sub,
}

#[derive(Subcommand)]
enum Sub {
    /// Solve the PDE (and its perturbed version) and dump snapshots.
    Solve(Common),
    /// Solve, then simulate the particle ensemble and its decomposition.
    Simulate(Common),
    /// Solve, then check the entropy dissipation identities.
    Verify(Common),
    /// Solve, then compare Wasserstein and entropy slopes.
    Slopes(Common),
    /// Check the HWI chain on the configured grid.
    Hwi(Common),
    /// Every stage.
    All(Common),
}

#[derive(Args)]
struct Common {
    /// Experiment file (TOML, or JSON with a .json extension).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `output.dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed override for particles and random HWI pairs.
    #[arg(long)]
    seed: Option<u64>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (command, args) = match cli.command {
        Sub::Solve(a) => (Command::Solve, a),
        Sub::Simulate(a) => (Command::Simulate, a),
        Sub::Verify(a) => (Command::Verify, a),
        Sub::Slopes(a) => (Command::Slopes, a),
        Sub::Hwi(a) => (Command::Hwi, a),
        Sub::All(a) => (Command::All, a),
    };
    ExitCode::from(execute(command, &args.config, args.out.as_deref(), args.seed))
}
