//! Subcommand orchestration: build the model from a configuration, run the
//! requested experiment and write CSV tables plus a run report.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use anyhow::{bail, Context};
use jumpbsde::io::{read_networks, read_paths, write_networks, write_paths};
use jumpbsde::levy::{build_partition, default_working_radius, gamma_quadrature_error, JumpPartition, LevyMeasure};
use jumpbsde::paths::{simulate_forward, ModelCoefficients, PathBatch};
use jumpbsde::reference::operators::SpaceTimeFunction;
use jumpbsde::reference::{
    projection_error_estimates, smalljump_rate_experiment, solve_intermediate, ClosedFormProcesses, Continuation,
};
use jumpbsde::rng::{subseed, Purpose};
use jumpbsde::solver::{run_algorithm1_on_paths, TrainedSolution};
use serde_json::json;

use crate::config::{BetaKind, ContinuationKind, DriftKind, DriverKind, RunConfig, TerminalKind};
use crate::output::{CsvTable, Report};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Solve,
    OracleIntermediate,
    OracleRates,
    OracleProjections,
    PartitionDiag,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Solve => "solve",
            Command::OracleIntermediate => "oracle intermediate",
            Command::OracleRates => "oracle rates",
            Command::OracleProjections => "oracle projections",
            Command::PartitionDiag => "partition-diag",
        }
    }
}

/// Everything a run needs besides the configuration.
#[derive(Debug, Clone, Default)]
pub struct Options {
    pub out: PathBuf,
    pub cache_paths: Option<PathBuf>,
    pub save_nets: Option<PathBuf>,
    pub load_nets: Option<PathBuf>,
    pub warnings: Vec<String>,
}

/// Measure, coefficients and partition built from a configuration.
pub struct Setup {
    pub measure: LevyMeasure,
    pub coeffs: ModelCoefficients,
    pub partition: JumpPartition,
    pub r_work: f64,
}

pub fn setup(config: &RunConfig) -> anyhow::Result<Setup> {
    let measure = crate::config::build_measure(&config.levy)?;
    let coeffs = config.model(&measure)?;
    let eps = config.numerics.epsilon;
    let r_work = match config.numerics.r_work {
        Some(r) => r,
        None => default_working_radius(&measure, eps)?,
    };
    let partition = build_partition(&measure, eps, config.numerics.h, r_work, config.gamma().as_ref())?;
    Ok(Setup { measure, coeffs, partition, r_work })
}

/// `u(0, x₀)` when the configuration has a closed-form solution.
pub fn exact_value(config: &RunConfig) -> Option<f64> {
    let m = &config.model;
    match m.driver {
        DriverKind::Manufactured => Some(m.manufactured.solution().value(0.0, &m.x0)),
        DriverKind::Zero if m.drift == DriftKind::Zero && m.beta == BetaKind::Additive => match m.terminal {
            TerminalKind::Identity => Some(m.x0.iter().sum()),
            TerminalKind::Constant => Some(m.terminal_params[0]),
            TerminalKind::Square => None,
        },
        _ => None,
    }
}

/// Closed-form `Z`, `L`, `U` for the martingale and manufactured problems.
pub fn closed_form_processes(config: &RunConfig, setup: &Setup) -> anyhow::Result<ClosedFormProcesses> {
    let m = &config.model;
    let sigma = m.sigma;
    let q = config.levy.dim;
    let s_sqrt = jumpbsde::paths::sigma_sqrt_for(&setup.partition)?;
    match m.driver {
        DriverKind::Manufactured => {
            let sol = m.manufactured.solution();
            let s = s_sqrt[0];
            Ok(ClosedFormProcesses {
                z: Some(Arc::new(move |t: f64, x: &[f64], out: &mut [f64]| {
                    sol.gradient(t, x, out);
                    out[0] *= sigma;
                })),
                l: Some(Arc::new(move |t: f64, x: &[f64], out: &mut [f64]| {
                    sol.gradient(t, x, out);
                    out[0] *= s;
                })),
                u: Some(Arc::new(move |t: f64, x: &[f64], e: &[f64]| sol.value(t, &[x[0] + e[0]]) - sol.value(t, x))),
            })
        }
        DriverKind::Zero
            if m.drift == DriftKind::Zero && m.beta == BetaKind::Additive && m.terminal == TerminalKind::Identity =>
        {
            let c = m.beta_params[0];
            Ok(ClosedFormProcesses {
                z: Some(Arc::new(move |_: f64, _: &[f64], out: &mut [f64]| out.fill(sigma))),
                l: Some(Arc::new(move |_: f64, _: &[f64], out: &mut [f64]| {
                    for (r, o) in out.iter_mut().enumerate() {
                        *o = c * (0..q).map(|k| s_sqrt[r * q + k]).sum::<f64>();
                    }
                })),
                u: Some(Arc::new(move |_: f64, _: &[f64], e: &[f64]| c * e.iter().sum::<f64>())),
            })
        }
        _ => bail!("closed-form Z, L and U are only known for the martingale and manufactured problems"),
    }
}

fn load_or_simulate(config: &RunConfig, setup: &Setup, opts: &Options, seed: u64) -> anyhow::Result<PathBatch> {
    let grid = config.grid()?;
    let x0 = &config.model.x0;
    let batch = config.numerics.batch;
    if let Some(path) = &opts.cache_paths {
        if path.exists() {
            let file = File::open(path).with_context(|| format!("opening path cache {}", path.display()))?;
            let paths = read_paths(BufReader::new(file))?;
            let matches = paths.seed == seed
                && paths.batch() == batch
                && paths.grid == grid
                && paths.q == setup.coeffs.q
                && paths.increments.masses == setup.partition.cells().iter().map(|c| c.mass).collect::<Vec<_>>()
                && paths.states.chunks((grid.steps() + 1) * paths.q).all(|row| &row[..paths.q] == x0.as_slice());
            if !matches {
                bail!("path cache {} was written for a different configuration or seed", path.display());
            }
            if paths.compute_fingerprint() != paths.fingerprint {
                bail!("path cache {} is corrupt (fingerprint mismatch)", path.display());
            }
            return Ok(paths);
        }
    }
    let paths = simulate_forward(&setup.coeffs, &grid, &setup.partition, x0, batch, seed)?;
    if let Some(path) = &opts.cache_paths {
        let file = File::create(path).with_context(|| format!("creating path cache {}", path.display()))?;
        write_paths(&paths, BufWriter::new(file))?;
    }
    Ok(paths)
}

fn train_or_load(config: &RunConfig, setup: &Setup, paths: &PathBatch, opts: &Options, seed: u64) -> anyhow::Result<TrainedSolution> {
    let solution = if let Some(path) = &opts.load_nets {
        let file = File::open(path).with_context(|| format!("opening networks {}", path.display()))?;
        let mut s = read_networks(BufReader::new(file), &setup.coeffs, &setup.partition, &config.model.x0)?;
        if s.grid != paths.grid {
            bail!("stored networks were trained on a different time grid");
        }
        s.y0_std_error = s.y0_std_error_on(&setup.coeffs, &setup.partition, paths)?;
        s
    } else {
        run_algorithm1_on_paths(&setup.coeffs, &setup.partition, paths, &config.model.x0, &config.solver(), seed)?.solution
    };
    if let Some(path) = &opts.save_nets {
        let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
        write_networks(&solution, BufWriter::new(file))?;
    }
    Ok(solution)
}

fn solve(config: &RunConfig, opts: &Options, report: &mut Report) -> anyhow::Result<Vec<CsvTable>> {
    let setup = setup(config)?;
    let seed = config.seed;
    let t = Instant::now();
    let paths = load_or_simulate(config, &setup, opts, subseed(seed, Purpose::Paths, 0))?;
    report.time("paths", t.elapsed());
    let t = Instant::now();
    let sol = train_or_load(config, &setup, &paths, opts, subseed(seed, Purpose::NetInit, 0))?;
    report.time("training", t.elapsed());

    let mut summary = CsvTable::new(&["y0", "y0_std_error", "exact", "abs_error", "rel_error"]);
    let exact = exact_value(config);
    let err = exact.map(|e| (sol.y0 - e).abs());
    summary.row_opt(&[Some(sol.y0), Some(sol.y0_std_error), exact, err, err.zip(exact).map(|(a, e)| a / e.abs())]);
    let mut z = CsvTable::new(&["component", "z0"]);
    for (k, v) in sol.z0.iter().enumerate() {
        z.row(&[k as f64, *v]);
    }
    let mut losses = CsvTable::new(&["step", "t", "final_loss", "best_epoch", "best_validation_loss"]);
    for i in 0..sol.steps.len() {
        let h = sol.history.get(i);
        losses.row_opt(&[
            Some(i as f64),
            Some(sol.grid.t(i)),
            sol.final_losses.get(i).copied(),
            h.map(|h| h.best_epoch as f64),
            h.and_then(|h| h.validation.get(h.best_epoch).copied()),
        ]);
    }
    report.headline("y0", json!(sol.y0));
    report.headline("y0_std_error", json!(sol.y0_std_error));
    report.headline("z0", json!(sol.z0));
    if let (Some(e), Some(a)) = (exact, err) {
        report.headline("exact", json!(e));
        report.headline("abs_error", json!(a));
        report.headline("rel_error", json!(a / e.abs()));
    }
    report.headline("solution_fingerprint", json!(sol.fingerprint()));
    report.headline("valid_paths", json!(paths.valid_count()));
    Ok(vec![summary.named("solution.csv"), z.named("z0.csv"), losses.named("losses.csv")])
}

fn oracle_intermediate(config: &RunConfig, opts: &Options, report: &mut Report) -> anyhow::Result<Vec<CsvTable>> {
    if config.levy.dim > 3 {
        bail!("the regression oracle supports q <= 3, got q = {}", config.levy.dim);
    }
    let setup = setup(config)?;
    let seed = config.seed;
    let paths = load_or_simulate(config, &setup, opts, subseed(seed, Purpose::Paths, 0))?;
    let trained = match config.oracle.continuation {
        ContinuationKind::Networks => {
            let t = Instant::now();
            let s = train_or_load(config, &setup, &paths, opts, subseed(seed, Purpose::NetInit, 0))?;
            report.time("training", t.elapsed());
            Some(s)
        }
        ContinuationKind::SelfReferential => None,
    };
    let continuation = trained.as_ref().map_or(Continuation::SelfReferential, Continuation::Networks);
    let t = Instant::now();
    let sol = solve_intermediate(&setup.coeffs, &setup.partition, &paths, continuation, &config.intermediate())?;
    report.time("intermediate", t.elapsed());

    let mut steps = CsvTable::new(&["step", "t", "v_mean", "picard_iterations", "picard_residual", "ridge_fallback"]);
    for (i, s) in sol.steps.iter().enumerate() {
        let vals = &sol.values[i];
        let mean = vals.iter().sum::<f64>() / vals.len().max(1) as f64;
        steps.row(&[i as f64, paths.grid.t(i), mean, s.picard_iterations as f64, s.picard_residual, s.ridge_fallback as u8 as f64]);
    }
    let exact = exact_value(config);
    let mut summary = CsvTable::new(&["v0", "v0_std_error", "exact", "abs_error", "y0", "y0_gap"]);
    let y0 = trained.as_ref().map(|s| s.y0);
    summary.row_opt(&[
        Some(sol.v0),
        Some(sol.v0_std_error),
        exact,
        exact.map(|e| (sol.v0 - e).abs()),
        y0,
        y0.map(|y| (y - sol.v0).abs()),
    ]);
    report.headline("v0", json!(sol.v0));
    report.headline("v0_std_error", json!(sol.v0_std_error));
    report.headline("z0", json!(sol.z0));
    if let Some(e) = exact {
        report.headline("exact", json!(e));
    }
    if let Some(y) = y0 {
        report.headline("y0", json!(y));
    }
    Ok(vec![summary.named("intermediate.csv"), steps.named("intermediate_steps.csv")])
}

fn oracle_rates(config: &RunConfig, report: &mut Report) -> anyhow::Result<Vec<CsvTable>> {
    let measure = crate::config::build_measure(&config.levy)?;
    let coeffs = config.model(&measure)?;
    let o = &config.oracle;
    let smallest = o.rate_epsilons.iter().copied().fold(f64::INFINITY, f64::min);
    let reference = o.reference_epsilon.unwrap_or(smallest / 8.0);
    let t = Instant::now();
    let table = smalljump_rate_experiment(
        &coeffs,
        &measure,
        &config.grid()?,
        &config.model.x0,
        &o.rate_epsilons,
        config.zeta(),
        reference,
        o.rate_batch,
        subseed(config.seed, Purpose::RateExperiment, 0),
    )?;
    report.time("rates", t.elapsed());
    let slope = table.fit.map(|f| f.slope);
    let mut csv = CsvTable::new(&["epsilon", "sigma2", "error", "std_error", "flagged", "slope"]);
    for r in &table.rows {
        csv.row_opt(&[Some(r.epsilon), Some(r.sigma2), Some(r.error), Some(r.std_error), Some(r.flagged as u8 as f64), slope]);
    }
    report.headline("reference_epsilon", json!(reference));
    report.headline("slope", json!(slope));
    report.headline("monotone_3se", json!(table.monotone(3.0)));
    report.headline("flagged_rows", json!(table.rows.iter().filter(|r| r.flagged).count()));
    Ok(vec![csv.named("rates.csv")])
}

fn oracle_projections(config: &RunConfig, report: &mut Report) -> anyhow::Result<Vec<CsvTable>> {
    let setup = setup(config)?;
    let processes = closed_form_processes(config, &setup)?;
    let factor = config.oracle.fine_factor;
    let fine = config.grid()?.refine(factor);
    let t = Instant::now();
    let paths = simulate_forward(
        &setup.coeffs,
        &fine,
        &setup.partition,
        &config.model.x0,
        config.oracle.projection_batch,
        subseed(config.seed, Purpose::Oracle, 0),
    )?;
    let r = projection_error_estimates(&paths, factor, &setup.partition, &processes, config.oracle.degree, config.oracle.ridge)?;
    report.time("projections", t.elapsed());
    let dt = config.numerics.horizon / config.numerics.steps as f64;
    let mut csv = CsvTable::new(&["quantity", "estimate", "std_error", "dt"]);
    for (name, e) in [("r2_z", r.r2_z), ("r2_l", r.r2_l), ("r2_u", r.r2_u), ("r2_u_tail", r.r2_u_tail)] {
        csv.row_labeled(name, &[e.map(|e| e.mean), e.map(|e| e.std_error), Some(dt)]);
        if let Some(e) = e {
            report.headline(name, json!({"estimate": e.mean, "std_error": e.std_error}));
        }
    }
    Ok(vec![csv.named("projections.csv")])
}

fn partition_diag(config: &RunConfig, report: &mut Report) -> anyhow::Result<Vec<CsvTable>> {
    let setup = setup(config)?;
    let p = &setup.partition;
    let mut cells = CsvTable::new(&["cell", "axis", "sign", "lo", "hi", "mass", "radius", "gamma_avg", "tail"]);
    for (j, c) in p.cells().iter().enumerate() {
        cells.row(&[j as f64, c.axis as f64, c.sign, c.lo, c.hi, c.mass, c.radius, c.gamma_avg, c.tail as u8 as f64]);
    }
    let r2_gamma = gamma_quadrature_error(p, config.gamma().as_ref())?;
    let sigma = p.small_jump_covariance()?;
    let mut summary = CsvTable::new(&["cells", "total_mass", "tail_mass", "k_h", "r2_gamma", "sigma_eps_trace", "r_work"]);
    summary.row(&[p.len() as f64, p.total_mass(), p.tail_mass(), p.k_h(), r2_gamma, sigma.trace(), setup.r_work]);
    report.headline("cells", json!(p.len()));
    report.headline("k_h", json!(p.k_h()));
    report.headline("r2_gamma", json!(r2_gamma));
    report.headline("sigma_eps_trace", json!(sigma.trace()));
    Ok(vec![summary.named("partition_summary.csv"), cells.named("partition.csv")])
}

/// Runs `command`, writes its tables and the report into `opts.out`, and
/// returns the exit code. Failures are recorded in the report.
pub fn run_experiment(config: &RunConfig, command: Command, opts: &Options) -> anyhow::Result<i32> {
    std::fs::create_dir_all(&opts.out).with_context(|| format!("creating {}", opts.out.display()))?;
    let fingerprint = config_fingerprint(config);
    let mut report = Report::new(command.name(), config, &fingerprint, &opts.warnings);
    let start = Instant::now();
    let result = match command {
        Command::Solve => solve(config, opts, &mut report),
        Command::OracleIntermediate => oracle_intermediate(config, opts, &mut report),
        Command::OracleRates => oracle_rates(config, &mut report),
        Command::OracleProjections => oracle_projections(config, &mut report),
        Command::PartitionDiag => partition_diag(config, &mut report),
    };
    report.time("total", start.elapsed());
    let code = match result {
        Ok(tables) => {
            for t in &tables {
                t.write(&opts.out.join(&t.name), &fingerprint)?;
                report.artifact(&t.name);
            }
            0
        }
        Err(e) => {
            report.failure(&e);
            1
        }
    };
    report.write(&opts.out)?;
    Ok(code)
}

pub fn config_fingerprint(config: &RunConfig) -> String {
    use sha2::{Digest, Sha256};
    let canonical = toml::to_string(config).expect("configuration serializes");
    Sha256::digest(canonical.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn default_out(config: &RunConfig) -> PathBuf {
    Path::new(&config.out).to_path_buf()
}
