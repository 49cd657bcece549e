use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use drfc_cli::{commands, CliError};

#[derive(Parser)]
#[command(name = "drfc", version, about = "Train and evaluate the robust free-energy controller")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train across the configured seeds and write a run directory.
    Train {
        /// TOML run configuration.
        config: PathBuf,
        /// Output directory (default: runs/<config-stem>).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate the checkpoints in a run directory.
    Eval {
        /// Run directory produced by `train`.
        run_dir: PathBuf,
        /// Simulator perturbation, e.g. friction=0.8,drift=0.05,reward_noise=0.1.
        #[arg(long)]
        perturb: Option<String>,
        /// Override the robustness weight at decision time.
        #[arg(long)]
        rho: Option<f64>,
        /// Number of evaluation rollouts per seed.
        #[arg(long)]
        rollouts: Option<usize>,
        /// Restrict evaluation to one training seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Also write full state trajectories.
        #[arg(long)]
        trajectories: bool,
    },
    /// Run a parameter sweep described by a TOML sweep file.
    Sweep {
        /// TOML sweep description.
        sweep_file: PathBuf,
        /// Output directory (default: runs/<sweep-stem>).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Retrain for every swept value instead of sharing checkpoints.
        #[arg(long)]
        retrain: bool,
    },
    /// Train the configured controller and a plain free-energy baseline side by side.
    Compare {
        /// TOML run configuration.
        config: PathBuf,
        /// Output directory (default: runs/<config-stem>_compare).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn init_workers() {
    let Ok(v) = std::env::var("DRFC_WORKERS") else {
        return;
    };
    match v.parse::<usize>() {
        Ok(n) if n > 0 => {
            #[cfg(feature = "parallel")]
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
                .expect("worker pool is configured before any parallel work");
            #[cfg(not(feature = "parallel"))]
            eprintln!("warning: DRFC_WORKERS={n} ignored in the sequential build");
        }
        _ => eprintln!("warning: ignoring DRFC_WORKERS={v:?} (want a positive integer)"),
    }
}

fn main() -> ExitCode {
    init_workers();
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Train { config, out } => commands::train(&config, out.as_deref()),
        Cmd::Eval {
            run_dir,
            perturb,
            rho,
            rollouts,
            seed,
            trajectories,
        } => commands::eval(
            &run_dir,
            commands::EvalFlags {
                perturb: perturb.as_deref(),
                rho,
                rollouts,
                seed,
                trajectories,
            },
        ),
        Cmd::Sweep {
            sweep_file,
            out,
            retrain,
        } => commands::sweep(&sweep_file, out.as_deref(), retrain),
        Cmd::Compare { config, out } => commands::compare(&config, out.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}
