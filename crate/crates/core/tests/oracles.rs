use std::sync::Arc;

use approx::assert_relative_eq;
use jumpbsde::levy::{build_partition, JumpPartition, LevyMeasure};
use jumpbsde::models::{additive_jumps, gamma_min1, martingale_model, terminal_constant};
use jumpbsde::paths::{generate_increments, simulate_forward, ModelCoefficients, TimeGrid};
use jumpbsde::reference::{
    cell_average, compensated_isometry, orthogonal_residual_variance, project_cell, project_time, projection_error_estimates,
    smalljump_rate_experiment, solve_intermediate, BasisRegression, ClosedFormProcesses, Continuation, IntermediateConfig,
};
use jumpbsde::rng::{stream, Purpose};
use jumpbsde::stats::Estimate;
use rand::Rng;
use rand_distr::StandardNormal;

fn measure(alpha: f64) -> LevyMeasure {
    LevyMeasure::symmetric_power_law(1, 1.0, alpha, 1.0).unwrap()
}

fn partition(m: &LevyMeasure, eps: f64, h: f64) -> JumpPartition {
    build_partition(m, eps, h, 1.0, |e: &[f64]| e[0].abs().min(1.0)).unwrap()
}

/// `X = x₀ + W`: no jumps move the state.
fn brownian_model(m: &LevyMeasure) -> ModelCoefficients {
    let mut c = martingale_model(m, 1.0, false);
    c.jump = additive_jumps(m, 0.0, gamma_min1(1.0), Some(vec![0.0]));
    c
}

#[test]
fn project_time_of_constant_is_constant() {
    let anchors: Vec<f64> = (0..200).map(|k| (k as f64).sin()).collect();
    let samples = vec![1.7; 200 * 5];
    let p = project_time(&anchors, 1, &samples, 5, 3, 1e-8).unwrap();
    for x in [-0.5, 0.0, 0.9] {
        assert!((p.predict(&[x]) - 1.7).abs() < 1e-10);
    }
}

#[test]
fn project_time_of_deterministic_ramp_is_midpoint() {
    let (s, t) = (0.2, 0.7);
    let points = 11;
    let anchors: Vec<f64> = (0..100).map(|k| (k as f64 * 0.3).cos()).collect();
    let samples: Vec<f64> =
        (0..100).flat_map(|_| (0..points).map(move |k| s + (t - s) * k as f64 / (points - 1) as f64)).collect();
    let p = project_time(&anchors, 1, &samples, points, 3, 1e-8).unwrap();
    assert!((p.predict(&[0.1]) - 0.45).abs() < 1e-10);
}

#[test]
fn project_time_of_brownian_path_is_its_start() {
    // Z_r = W_r on [s, t]: π = W_s
    let (s, t, points, n) = (0.5, 1.0, 21, 20_000);
    let mut rng = stream(11, Purpose::Test, 0);
    let mut anchors = Vec::with_capacity(n);
    let mut samples = Vec::with_capacity(n * points);
    let h = (t - s) / (points - 1) as f64;
    for _ in 0..n {
        let mut w = s.sqrt() * rng.sample::<f64, _>(StandardNormal);
        anchors.push(w);
        samples.push(w);
        for _ in 1..points {
            w += h.sqrt() * rng.sample::<f64, _>(StandardNormal);
            samples.push(w);
        }
    }
    let p = BasisRegression::fit(
        &anchors,
        1,
        &samples.chunks(points).map(|c| (0.5 * (c[0] + c[points - 1]) + c[1..points - 1].iter().sum::<f64>()) / (points - 1) as f64).collect::<Vec<_>>(),
        1,
        0.0,
    )
    .unwrap();
    let q = project_time(&anchors, 1, &samples, points, 1, 0.0).unwrap();
    assert_eq!(p.fit.coef, q.fit.coef);
    // standardized basis: slope on x is coef[1] / sd(anchors)
    let mean = anchors.iter().sum::<f64>() / n as f64;
    let sd = (anchors.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
    let slope = q.fit.coef[1] / sd;
    let slope_se = q.fit.std_errors[1] / sd;
    assert!((slope - 1.0).abs() < 3.0 * slope_se, "slope {slope} ± {slope_se}");
    let intercept = q.predict(&[0.0]);
    assert!(intercept.abs() < 3.0 * q.fit.std_errors[0] + 1e-3, "intercept {intercept}");
}

#[test]
fn project_cell_identity_and_moment() {
    let m = measure(0.5);
    let part = partition(&m, 0.05, 0.5);
    let anchors: Vec<f64> = (0..50).map(|k| k as f64 / 50.0).collect();
    let j = part.cells().iter().position(|c| c.hi.is_finite() && c.sign > 0.0).unwrap();
    let c = &part.cells()[j];
    let constant = project_cell(&anchors, 1, &part, j, 0.0, 0.1, |_, _, _| 2.0, 3, 1e-8).unwrap();
    assert!((constant.predict(&[0.3]) - 2.0).abs() < 1e-10);
    let linear = project_cell(&anchors, 1, &part, j, 0.0, 0.1, |_, _, e| e[0], 3, 1e-8).unwrap();
    // (1/ν(K)) ∫_lo^hi r · r^{-1.5} dr
    let exact = 2.0 * (c.hi.sqrt() - c.lo.sqrt()) / c.mass;
    assert_relative_eq!(linear.predict(&[0.3]), exact, max_relative = 1e-8);
    assert_relative_eq!(cell_average(&part, c, |r| r).unwrap(), exact, max_relative = 1e-10);
}

#[test]
fn project_cell_of_independent_noise_is_its_mean() {
    let m = measure(0.5);
    let part = partition(&m, 0.05, 0.5);
    let n = 4000;
    let mut rng = stream(5, Purpose::Test, 1);
    let anchors: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let noise: Vec<f64> = (0..n).map(|_| 0.8 + rng.sample::<f64, _>(StandardNormal)).collect();
    let p = project_cell(&anchors, 1, &part, 0, 0.0, 0.1, |p, _, _| noise[p], 1, 1e-8).unwrap();
    assert!((p.predict(&[0.0]) - 0.8).abs() < 3.0 * p.fit.std_errors[0] + 3.0 / (n as f64).sqrt());
}

#[test]
fn isometry_of_compensated_counts() {
    let m = measure(0.5);
    let part = partition(&m, 0.05, 0.5);
    let grid = TimeGrid::uniform(0.1, 1).unwrap();
    let inc = generate_increments(&grid, &part, 1, 1, 200_000, 17).unwrap();
    let u: Vec<f64> = (0..part.len()).map(|j| ((j as f64) * 0.7).sin() + 0.2).collect();
    let (est, expected) = compensated_isometry(&inc, 0, &u).unwrap();
    assert!(est.within(expected, 4.0), "{} ± {} vs {expected}", est.mean, est.std_error);
}

#[test]
fn brownian_projection_error_is_half_dt_times_t() {
    let m = measure(0.5);
    let model = brownian_model(&m);
    let part = partition(&m, 0.05, 0.5);
    let horizon = 1.0;
    let processes = ClosedFormProcesses {
        z: Some(Arc::new(|_: f64, x: &[f64], out: &mut [f64]| out[0] = x[0])),
        ..Default::default()
    };
    let mut values = Vec::new();
    for coarse in [5, 10] {
        let fine = TimeGrid::uniform(horizon, coarse).unwrap().refine(8);
        let paths = simulate_forward(&model, &fine, &part, &[0.0], 20_000, 23).unwrap();
        let r = projection_error_estimates(&paths, 8, &part, &processes, 3, 1e-8).unwrap();
        let est = r.r2_z.unwrap();
        let dt = horizon / coarse as f64;
        assert!(est.within(horizon * dt / 2.0, 3.0), "N={coarse}: {} ± {}", est.mean, est.std_error);
        values.push(est.mean);
    }
    let ratio = values[1] / values[0];
    assert!((ratio - 0.5).abs() <= 0.1, "halving ratio {ratio}");
}

#[test]
fn constant_processes_have_zero_projection_error() {
    let m = measure(0.5);
    let model = martingale_model(&m, 0.3, true);
    let part = partition(&m, 0.05, 0.5);
    let fine = TimeGrid::uniform(1.0, 4).unwrap().refine(4);
    let paths = simulate_forward(&model, &fine, &part, &[1.0], 2000, 3).unwrap();
    let processes = ClosedFormProcesses {
        z: Some(Arc::new(|_: f64, _: &[f64], out: &mut [f64]| out[0] = 0.3)),
        l: Some(Arc::new(|_: f64, _: &[f64], out: &mut [f64]| out[0] = 0.0)),
        u: Some(Arc::new(|_: f64, _: &[f64], e: &[f64]| e[0])),
    };
    let r = projection_error_estimates(&paths, 4, &part, &processes, 3, 1e-8).unwrap();
    assert!(r.r2_z.unwrap().mean < 1e-20);
    assert!(r.r2_l.unwrap().mean < 1e-20);
    // U(e) = e varies within cells; only its in-cell spread remains
    let spread: f64 = part
        .cells()
        .iter()
        .map(|c| {
            let side = m.axes()[0].side(c.sign);
            let mean = cell_average(&part, c, |r| r).unwrap();
            if c.hi.is_finite() { side.integrate_with(|r| (c.sign * r - mean).powi(2), c.lo, c.hi).unwrap() } else { 0.0 }
        })
        .sum();
    assert_relative_eq!(r.r2_u.unwrap().mean, spread, max_relative = 1e-3);
    assert_eq!(r.r2_u_tail.unwrap().mean, 0.0);
}

#[test]
fn intermediate_constant_terminal_is_exact() {
    let m = measure(0.5);
    let mut model = martingale_model(&m, 0.3, true);
    model.terminal = terminal_constant(4.0);
    let part = partition(&m, 0.05, 0.5);
    let grid = TimeGrid::uniform(0.5, 1).unwrap();
    let paths = simulate_forward(&model, &grid, &part, &[1.0], 500, 1).unwrap();
    let sol = solve_intermediate(&model, &part, &paths, Continuation::SelfReferential, &IntermediateConfig::default()).unwrap();
    assert!((sol.v0 - 4.0).abs() < 1e-12);
    assert!(sol.values[0].iter().all(|v| (v - 4.0).abs() < 1e-12));
}

#[test]
fn intermediate_martingale_recovers_state_and_sigma() {
    let m = measure(0.5);
    let model = martingale_model(&m, 0.3, true);
    let part = partition(&m, 0.05, 0.5);
    let grid = TimeGrid::uniform(1.0, 10).unwrap();
    let paths = simulate_forward(&model, &grid, &part, &[1.0], 20_000, 9).unwrap();
    let sol = solve_intermediate(&model, &part, &paths, Continuation::SelfReferential, &IntermediateConfig::default()).unwrap();
    assert!((sol.v0 - 1.0).abs() < 3.0 * sol.v0_std_error, "{} ± {}", sol.v0, sol.v0_std_error);
    assert!((sol.z0[0] - 0.3).abs() < 0.03, "z0 {}", sol.z0[0]);
    // z̄ across the cloud at a later step
    let step = &sol.steps[5];
    for x in [0.7, 1.0, 1.3] {
        assert!((step.z_at(&[x])[0] - 0.3).abs() < 0.05, "z̄({x}) = {}", step.z_at(&[x])[0]);
    }
    // ρ̄(e_j) ≈ e_j for u(x) = x
    for (j, u) in sol.u0.iter().enumerate() {
        let e = part.representative(j)[0];
        assert!((u - e).abs() < 0.1 + 0.1 * e.abs(), "cell {j}: {u} vs {e}");
    }
}

#[test]
fn intermediate_guard_rejects_large_steps() {
    use jumpbsde::paths::LinearDriver;
    let m = measure(0.5);
    let mut model = martingale_model(&m, 0.3, true);
    model.driver = Arc::new(LinearDriver { a_y: 2.0, a_z: vec![0.0], a_p: 0.0, c: 0.0 });
    let part = partition(&m, 0.05, 0.5);
    let grid = TimeGrid::uniform(1.0, 2).unwrap();
    let paths = simulate_forward(&model, &grid, &part, &[1.0], 100, 1).unwrap();
    assert!(solve_intermediate(&model, &part, &paths, Continuation::SelfReferential, &IntermediateConfig::default()).is_err());
}

#[test]
fn regression_residual_is_orthogonal_to_basis() {
    let m = measure(0.5);
    let model = martingale_model(&m, 0.3, true);
    let part = partition(&m, 0.05, 0.5);
    let grid = TimeGrid::uniform(1.0, 4).unwrap();
    let paths = simulate_forward(&model, &grid, &part, &[1.0], 20_000, 4).unwrap();
    let step = 2;
    let anchors: Vec<f64> = (0..paths.batch()).map(|p| paths.state(p, step)[0]).collect();
    let target: Vec<f64> = (0..paths.batch()).map(|p| paths.state(p, 4)[0].powi(2)).collect();
    let reg = BasisRegression::fit(&anchors, 1, &target, 3, 1e-8).unwrap();
    let resid: Vec<f64> = anchors.iter().zip(&target).map(|(a, y)| y - reg.predict(&[*a])).collect();
    for k in 0..reg.basis.len() {
        let prod = Estimate::from_samples(anchors.iter().zip(&resid).map(|(a, r)| reg.basis.features(&[*a])[k] * r));
        assert!(prod.mean.abs() < 3.0 * prod.std_error + 1e-9, "basis {k}: {} ± {}", prod.mean, prod.std_error);
    }
    // the martingale X_N − X_i is fully spanned by ΔW-, ΔW̃- and Ñ-multiples only over one step
    let tail: Vec<f64> = (0..paths.batch()).map(|p| paths.state(p, step + 1)[0]).collect();
    let orth = orthogonal_residual_variance(&paths, step, &tail, true, &IntermediateConfig::default()).unwrap();
    // what remains is the within-cell spread of jump sizes
    assert!(orth.mean < 0.01, "{}", orth.mean);
}

#[test]
fn rate_experiment_properties() {
    let m = measure(0.5);
    let model = martingale_model(&m, 0.3, true);
    let grid = TimeGrid::uniform(1.0, 10).unwrap();
    let eps = [0.2, 0.1, 0.05, 0.025, 0.003125];
    let table = smalljump_rate_experiment(&model, &m, &grid, &[1.0], &eps, true, 0.003125, 20_000, 5).unwrap();
    let last = table.rows.last().unwrap();
    assert_eq!(last.error, 0.0);
    assert!(table.monotone(3.0));
    let slope = table.fit.unwrap().slope;
    assert!((0.7..=1.3).contains(&slope), "slope {slope}");
}

#[test]
fn rate_experiment_without_compensation() {
    let m = measure(0.5);
    let model = martingale_model(&m, 0.3, false);
    let grid = TimeGrid::uniform(1.0, 5).unwrap();
    let table = smalljump_rate_experiment(&model, &m, &grid, &[1.0], &[0.2, 0.1, 0.05], false, 0.005, 20_000, 6).unwrap();
    // error ≈ T (σ_ε² − σ_ref²) for additive jumps
    for r in &table.rows {
        let exact = r.sigma2 - jumpbsde::levy::truncation_variance(&m, 0.005).unwrap();
        assert!((r.error - exact).abs() < 4.0 * r.std_error, "ε={}: {} ± {} vs {exact}", r.epsilon, r.error, r.std_error);
    }
}

