use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;

/// Stacked intelligent metasurface simulator: DFT fitting and energy-only
/// direction-of-arrival estimation.
#[derive(Debug, Parser)]
#[command(name = "simdoa", version)]
struct Cli {
    /// Worker threads for Monte Carlo trials and sweeps (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,

    /// Output directory.
    #[arg(long, short, global = true, env = "SIMDOA_OUT_DIR", default_value = "out")]
    out: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train the phase stack to fit the 2D DFT.
    Fit(ConfigArg),
    /// Angular spectrum of the configured source.
    Spectrum(ConfigArg),
    /// Peak search and angle recovery for the configured source.
    Estimate(ConfigArg),
    /// Analytic MSE upper bound for the configured source.
    Bound(ConfigArg),
    /// Empirical MSE and averaged bound versus effective SNR.
    Montecarlo(ConfigArg),
    /// Geometry ablation sweep and receiver-arrangement study.
    Sweep(ConfigArg),
    /// Compare the analytic gradient with finite differences.
    Gradcheck(OptionalConfigArg),
}

#[derive(Debug, clap::Args)]
struct ConfigArg {
    /// TOML configuration file.
    #[arg(long, short)]
    config: PathBuf,
}

#[derive(Debug, clap::Args)]
struct OptionalConfigArg {
    /// TOML configuration file; defaults apply when omitted.
    #[arg(long, short)]
    config: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return ExitCode::from(if usage { 2 } else { 0 });
        }
    };
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            eprintln!("error: --jobs must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    let out = cli.out.clone();
    let result = match cli.command {
        Command::Fit(a) => commands::fit(&a.config, &out),
        Command::Spectrum(a) => commands::spectrum(&a.config, &out),
        Command::Estimate(a) => commands::estimate(&a.config, &out),
        Command::Bound(a) => commands::bound(&a.config, &out),
        Command::Montecarlo(a) => commands::montecarlo(&a.config, &out),
        Command::Sweep(a) => commands::sweep(&a.config, &out),
        Command::Gradcheck(a) => commands::gradcheck(a.config.as_deref(), &out),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
