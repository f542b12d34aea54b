use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use jumpbsde_cli::{parse_config, run_experiment, Command, Options, Violations};
use serde_json::json;

#[derive(Parser)]
#[command(name = "jumpbsde", version, about = "Deep BSDE solver for Lévy-driven PIDEs, with regression oracles")]
struct Cli {
    /// Worker threads (falls back to JUMPBSDE_THREADS, then all cores).
    #[arg(long, global = true, env = "JUMPBSDE_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Sub,
}

#[derive(Subcommand)]
enum Sub {
    /// Train the per-step networks backwards in time.
    ///
    /// Writes solution.csv (y0, y0_std_error, exact, abs_error, rel_error),
    /// z0.csv (component, z0) and losses.csv (step, t, final_loss,
    /// best_epoch, best_validation_loss).
    Solve(RunArgs),
    #[command(subcommand)]
    Oracle(OracleSub),
    /// Cell table of the jump partition.
    ///
    /// Writes partition.csv (cell, axis, sign, lo, hi, mass, radius,
    /// gamma_avg, tail) and partition_summary.csv (cells, total_mass,
    /// tail_mass, k_h, r2_gamma, sigma_eps_trace, r_work).
    PartitionDiag(RunArgs),
}

#[derive(Subcommand)]
enum OracleSub {
    /// Least-squares regression scheme.
    ///
    /// Writes intermediate.csv (v0, v0_std_error, exact, abs_error, y0,
    /// y0_gap) and intermediate_steps.csv (step, t, v_mean,
    /// picard_iterations, picard_residual, ridge_fallback).
    Intermediate(RunArgs),
    /// Coupled small-jump truncation errors.
    ///
    /// Writes rates.csv (epsilon, sigma2, error, std_error, flagged, slope).
    Rates(RunArgs),
    /// Time and cell projection errors of the closed-form Z, L, U.
    ///
    /// Writes projections.csv (quantity, estimate, std_error, dt).
    Projections(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Root seed, overriding the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory, overriding the configuration.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Binary path cache: read if present and matching, written otherwise.
    #[arg(long)]
    cache_paths: Option<PathBuf>,
    /// Write the trained networks to this file.
    #[arg(long)]
    save_nets: Option<PathBuf>,
    /// Use stored networks instead of training.
    #[arg(long)]
    load_nets: Option<PathBuf>,
}

fn config_failure(out: Option<&PathBuf>, err: &anyhow::Error) {
    eprintln!("{err:#}");
    let Some(dir) = out else { return };
    let violations = match err.downcast_ref::<Violations>() {
        Some(v) => v.0.clone(),
        None => vec![format!("{err:#}")],
    };
    let record = json!({"status": "error", "failure": {"kind": "config", "violations": violations}});
    if std::fs::create_dir_all(dir).is_ok() {
        let _ = std::fs::write(dir.join("report.json"), serde_json::to_string_pretty(&record).unwrap_or_default() + "\n");
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("cannot set up {n} threads: {e}");
            return ExitCode::from(2);
        }
    }
    let (command, args) = match cli.command {
        Sub::Solve(a) => (Command::Solve, a),
        Sub::PartitionDiag(a) => (Command::PartitionDiag, a),
        Sub::Oracle(OracleSub::Intermediate(a)) => (Command::OracleIntermediate, a),
        Sub::Oracle(OracleSub::Rates(a)) => (Command::OracleRates, a),
        Sub::Oracle(OracleSub::Projections(a)) => (Command::OracleProjections, a),
    };
    let parsed = match parse_config(&args.config) {
        Ok(p) => p,
        Err(e) => {
            config_failure(args.out.as_ref(), &e);
            return ExitCode::from(2);
        }
    };
    let mut config = parsed.config;
    if let Some(s) = args.seed {
        config.seed = s;
    }
    for w in &parsed.warnings {
        eprintln!("warning: {w}");
    }
    let opts = Options {
        out: args.out.unwrap_or_else(|| config.out.clone().into()),
        cache_paths: args.cache_paths,
        save_nets: args.save_nets,
        load_nets: args.load_nets,
        warnings: parsed.warnings,
    };
    match run_experiment(&config, command, &opts) {
        Ok(0) => {
            if let Ok(text) = std::fs::read_to_string(opts.out.join("report.txt")) {
                print!("{text}");
            }
            ExitCode::SUCCESS
        }
        Ok(code) => {
            if let Ok(text) = std::fs::read_to_string(opts.out.join("report.txt")) {
                eprint!("{text}");
            }
            ExitCode::from(code as u8)
        }
        Err(e) => {
            eprintln!("{e:#}");
            ExitCode::from(1)
        }
    }
}
