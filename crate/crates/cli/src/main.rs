use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use conelab_core::harness::{self, Command, RunConfig};

/// Numerical checks for products of positive random matrices.
#[derive(Parser)]
#[command(name = "conelab", version)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Print the comparability constants and the non-arithmeticity heuristic.
    Check(Common),
    /// Solve the transfer-operator eigenproblems and dump them.
    Spectral(Common),
    /// Tabulate Lambda, its derivatives and the rate function.
    Cumulants(Common),
    /// Empirical CDFs against the first-order Edgeworth expansion.
    Edgeworth(Common),
    /// Kolmogorov distances to the Gaussian, scaled by sqrt(n).
    BerryEsseen(Common),
    /// Importance-sampled tails against the sharp large-deviation asymptotics.
    Ldp(Common),
    /// Window probabilities against the local limit theorems.
    Llt(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    harness::init_workers();
    let cli = Cli::parse();
    let (cmd, common) = match cli.command {
        Cmd::Check(c) => (Command::Check, c),
        Cmd::Spectral(c) => (Command::Spectral, c),
        Cmd::Cumulants(c) => (Command::Cumulants, c),
        Cmd::Edgeworth(c) => (Command::Edgeworth, c),
        Cmd::BerryEsseen(c) => (Command::BerryEsseen, c),
        Cmd::Ldp(c) => (Command::Ldp, c),
        Cmd::Llt(c) => (Command::Llt, c),
    };
    let result = RunConfig::load(&common.config).and_then(|mut cfg| {
        if let Some(seed) = common.seed {
            cfg.seed = seed;
        }
        let out = common
            .out
            .or_else(|| cfg.out_dir.clone())
            .unwrap_or_else(|| PathBuf::from("conelab-out"));
        harness::run(cmd, &cfg, &out)
    });
    match result {
        Ok(output) => {
            print!("{}", output.stdout);
            ExitCode::from(output.exit_code as u8)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(harness::exit_code_for(&e) as u8)
        }
    }
}
