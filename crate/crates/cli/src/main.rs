use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use spde_reflect_cli::{execute, init_threads, replay, CliError, Command, ExperimentConfig, OUT_ENV};

#[derive(Parser)]
#[command(name = "spde-reflect", version, about = "Reflected stochastic heat equation experiments")]
struct Cli {
    /// TOML experiment config; defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, env = OUT_ENV, default_value = "out")]
    out: PathBuf,
    /// Master seed (overrides the config or manifest).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    replicas: Option<u64>,
    /// Worker threads; defaults to the available cores.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Sub,
}

#[derive(Subcommand)]
enum Sub {
    /// Heat-kernel identities (mass, representations, semigroup).
    KernelCheck,
    /// Reflected trajectories.
    Simulate,
    /// Penalized-vs-projected convergence and sandwich bounds.
    SweepPenalization,
    /// Obstacle-map Lipschitz factor and mild-form composition.
    ObstacleCheck,
    /// Ordered coupling, coupling probabilities and the QV bound.
    Couple,
    /// Two-chain distances, occupation stability and Hölder moments.
    Ergodic,
    /// Strong Feller ratio and derivative flow.
    StrongFeller,
    /// Rerun the experiment recorded in a manifest.
    Replay {
        #[arg(long)]
        manifest: PathBuf,
    },
}

fn command(sub: &Sub) -> Option<Command> {
    Some(match sub {
        Sub::KernelCheck => Command::KernelCheck,
        Sub::Simulate => Command::Simulate,
        Sub::SweepPenalization => Command::SweepPenalization,
        Sub::ObstacleCheck => Command::ObstacleCheck,
        Sub::Couple => Command::Couple,
        Sub::Ergodic => Command::Ergodic,
        Sub::StrongFeller => Command::StrongFeller,
        Sub::Replay { .. } => return None,
    })
}

fn run(cli: Cli) -> Result<i32, CliError> {
    let outcome = match &cli.command {
        Sub::Replay { manifest } => {
            init_threads(cli.threads)?;
            replay(manifest, &cli.out, cli.seed)?
        }
        sub => {
            let mut cfg = match &cli.config {
                Some(path) => ExperimentConfig::load(path)?,
                None => ExperimentConfig::default(),
            };
            if let Some(s) = cli.seed {
                cfg.master_seed = s;
            }
            if let Some(r) = cli.replicas {
                cfg.replicas = r;
            }
            if cli.threads.is_some() {
                cfg.threads = cli.threads;
            }
            init_threads(cfg.threads)?;
            execute(command(sub).unwrap(), &cfg, &cli.out)?
        }
    };
    let m = &outcome.manifest;
    for c in &m.checks {
        let tag = if c.passed { "ok" } else { "FAIL" };
        println!("{tag:>4}  {}: {:e} (limit {:e})", c.name, c.value, c.threshold);
    }
    if let Some(e) = &m.error {
        eprintln!("error: {e}");
    }
    println!("manifest: {}", outcome.manifest_path.display());
    Ok(outcome.exit_code())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
