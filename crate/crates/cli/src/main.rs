use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::error;

use qptorus_cli::{cmd_compare, cmd_continue, cmd_ns_init, cmd_stability, CliResult, RunConfig};

/// Continuation and stability of periodic and quasi-periodic responses.
///
/// Exit codes: 0 success, 1 other failure, 2 configuration error,
/// 3 branch stall (partial output written), 4 not an NS point,
/// 5 time-integration blow-up. Log level via RUST_LOG.
#[derive(Parser)]
#[command(name = "qptorus", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Continue a branch and write its CSV, branch JSON and run summary.
    Continue { config: PathBuf },
    /// Floquet (d = 1) or Lyapunov (d ≥ 2) analysis of every branch point.
    Stability { config: PathBuf, branch: PathBuf },
    /// Seed a two-frequency torus at an NS-tagged point.
    NsInit {
        config: PathBuf,
        branch: PathBuf,
        index: usize,
        #[arg(allow_negative_numbers = true)]
        epsilon: f64,
    },
    /// Compare a branch point with direct time integration.
    Compare { config: PathBuf, branch: PathBuf, index: usize },
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Continue { config } => {
            let cfg = RunConfig::load(&config)?;
            let out = cmd_continue(&cfg)?;
            println!(
                "{} points, {} unknowns, {:.2} s -> {}",
                out.result.points,
                out.result.unknowns,
                out.result.total_time_s,
                out.csv.display()
            );
            for b in &out.result.bifurcations {
                println!("{} near p = {:.6}", b.kind.tag(), b.p);
            }
        }
        Command::Stability { config, branch } => {
            let cfg = RunConfig::load(&config)?;
            let out = cmd_stability(&cfg, &branch)?;
            let stable = out.verdicts.iter().filter(|v| **v == qptorus::vcf::Stability::Stable).count();
            println!("{stable}/{} stable -> {}", out.verdicts.len(), out.csv.display());
            for b in &out.bifurcations {
                println!("{} near p = {:.6}", b.kind.tag(), b.p);
            }
        }
        Command::NsInit {
            config,
            branch,
            index,
            epsilon,
        } => {
            let cfg = RunConfig::load(&config)?;
            let (path, seed) = cmd_ns_init(&cfg, &branch, index, epsilon)?;
            println!(
                "seed at p = {:.6}, omega = {:?}, alpha = {:.6} -> {}",
                seed.seed.point.p,
                seed.seed.point.omega,
                seed.seed.alpha,
                path.display()
            );
        }
        Command::Compare { config, branch, index } => {
            let cfg = RunConfig::load(&config)?;
            let (path, m) = cmd_compare(&cfg, &branch, index)?;
            println!(
                "relative L2 {:.3e}, worst peak error {:.3e} -> {}",
                m.comparison.relative_l2,
                m.comparison.max_peak_error,
                path.display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
