use std::sync::Arc;

use jumpbsde::levy::{build_partition, AxisDensity, JumpPartition, LevyMeasure, RadialDensity, TableBin};
use jumpbsde::models::{
    additive_jumps, constant_drift, gamma_min1, gamma_zero, martingale_model, ou_drift, state_scaled_jumps, zero_drift,
};
use jumpbsde::paths::{
    euler_step, generate_increments, sigma_sqrt_for, simulate_forward, simulate_with_increments, EulerContext, IncrementBatch,
    ModelCoefficients, StepNoise, TimeGrid,
};
use jumpbsde::reference::compensated_isometry;
use jumpbsde::stats::Estimate;

fn power_law(alpha: f64) -> LevyMeasure {
    LevyMeasure::symmetric_power_law(1, 1.0, alpha, 1.0).unwrap()
}

fn partition(m: &LevyMeasure, eps: f64) -> JumpPartition {
    build_partition(m, eps, 0.5, 1.0, |e: &[f64]| e[0].abs().min(1.0)).unwrap()
}

/// `b`, `σ`, `β` all zero.
fn still_model(m: &LevyMeasure) -> ModelCoefficients {
    let mut c = martingale_model(m, 0.0, false);
    c.jump = additive_jumps(m, 0.0, gamma_zero(), None);
    c
}

#[test]
fn gaussian_increments_have_unit_moments() {
    let m = power_law(0.5);
    let part = partition(&m, 0.05);
    let grid = TimeGrid::uniform(1.0, 1).unwrap();
    let n = 1_000_000;
    let inc = generate_increments(&grid, &part, 1, 1, n, 4).unwrap();
    let bound = 4.0 / (n as f64).sqrt();
    for v in [&inc.dw, &inc.dw_tilde] {
        let mean = v.iter().sum::<f64>() / n as f64;
        let second = v.iter().map(|x| x * x).sum::<f64>() / n as f64;
        assert!(mean.abs() < bound, "{mean}");
        // Var(ΔW²) = 2
        assert!((second - 1.0).abs() < bound * 2f64.sqrt(), "{second}");
    }
    let cross = Estimate::from_samples(inc.dw.iter().zip(&inc.dw_tilde).map(|(a, b)| a * b));
    assert!(cross.within(0.0, 4.0));
}

#[test]
fn empty_truncated_space_has_no_jumps() {
    let bins = vec![TableBin { lo: 0.1, hi: 0.5, density: 1.0 }];
    let m = LevyMeasure::new(vec![AxisDensity::symmetric(RadialDensity::Table { bins })], None).unwrap();
    let part = build_partition(&m, 0.6, 0.5, 1.0, |_: &[f64]| 0.0).unwrap();
    assert!(part.is_empty());
    let grid = TimeGrid::uniform(1.0, 5).unwrap();
    let inc = generate_increments(&grid, &part, 1, 1, 100, 1).unwrap();
    assert!(inc.jump_cells.is_empty());
}

#[test]
fn same_seed_same_batch() {
    let m = power_law(1.2);
    let part = partition(&m, 0.05);
    let grid = TimeGrid::uniform(1.0, 4).unwrap();
    let a = generate_increments(&grid, &part, 1, 1, 300, 99).unwrap();
    let b = generate_increments(&grid, &part, 1, 1, 300, 99).unwrap();
    let c = generate_increments(&grid, &part, 1, 1, 300, 100).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    // a single path does not depend on the batch size
    let d = generate_increments(&grid, &part, 1, 1, 10, 99).unwrap();
    assert_eq!(a.step(3, 2).dw, d.step(3, 2).dw);
    assert_eq!(a.step(3, 2).jump_sizes, d.step(3, 2).jump_sizes);
}

fn one_step(model: &ModelCoefficients, part: &JumpPartition, x: f64, noise: StepNoise<'_>) -> f64 {
    let s = sigma_sqrt_for(part).unwrap();
    let ctx = EulerContext::new(model, part, &s);
    let mut out = [0.0];
    euler_step(&ctx, &[x], &noise, &mut out);
    out[0]
}

#[test]
fn euler_step_hand_cases() {
    let m = power_law(0.5);
    let part = partition(&m, 0.05);
    let noise = |dt: f64| StepNoise { dt, dw: &[0.4], dw_tilde: &[-0.2], jump_cells: &[], jump_sizes: &[] };
    let still = still_model(&m);
    assert_eq!(one_step(&still, &part, 1.3, noise(0.5)), 1.3);
    let mut drift = still.clone();
    drift.drift = constant_drift(vec![1.0]);
    assert_eq!(one_step(&drift, &part, 0.0, noise(0.5)), 0.5);

    // one jump of size 0.3 with the representative compensator
    let mut jumps = still_model(&m);
    jumps.jump = additive_jumps(&m, 1.0, gamma_min1(1.0), None);
    jumps.jump.compensator = None;
    let cell = part.locate(0, 0.3).unwrap() as u32;
    let dt = 0.1;
    let comp: f64 = (0..part.len()).map(|j| part.representative(j)[0] * part.cells()[j].mass).sum();
    let got = one_step(
        &jumps,
        &part,
        0.2,
        StepNoise { dt, dw: &[0.0], dw_tilde: &[0.0], jump_cells: &[cell], jump_sizes: &[0.3] },
    );
    assert!((got - (0.2 + 0.3 - dt * comp)).abs() < 1e-15);
}

#[test]
fn martingale_mean_is_preserved() {
    let m = power_law(1.2);
    let part = partition(&m, 0.05);
    let grid = TimeGrid::uniform(1.0, 10).unwrap();
    for zeta in [false, true] {
        let model = martingale_model(&m, 0.3, zeta);
        let paths = simulate_forward(&model, &grid, &part, &[1.0], 50_000, 8).unwrap();
        let est = Estimate::from_samples((0..paths.batch()).map(|p| paths.state(p, 10)[0]));
        assert!(est.within(1.0, 4.0), "zeta {zeta}: {} ± {}", est.mean, est.std_error);
    }
}

#[test]
fn deterministic_decay_matches_exponential() {
    let m = power_law(0.5);
    let part = partition(&m, 0.05);
    let mut model = still_model(&m);
    model.drift = ou_drift(1.0, 0.0);
    let grid = TimeGrid::uniform(1.0, 1000).unwrap();
    let paths = simulate_forward(&model, &grid, &part, &[1.0], 2, 0).unwrap();
    assert!((paths.state(0, 1000)[0] - (-1.0f64).exp()).abs() < 1e-2);
}

#[test]
fn zero_steps_keeps_initial_state() {
    let m = power_law(0.5);
    let part = partition(&m, 0.05);
    let grid = TimeGrid::uniform(1.0, 0).unwrap();
    let paths = simulate_forward(&martingale_model(&m, 0.3, true), &grid, &part, &[2.5], 4, 0).unwrap();
    assert_eq!(paths.states, vec![2.5; 4]);
}

/// Coarse increments from a fine batch by summing consecutive pairs.
fn coarsen(fine: &IncrementBatch) -> IncrementBatch {
    let steps = fine.steps / 2;
    let mut c = IncrementBatch {
        batch: fine.batch,
        steps,
        d: fine.d,
        q: fine.q,
        dt: (0..steps).map(|i| fine.dt[2 * i] + fine.dt[2 * i + 1]).collect(),
        masses: fine.masses.clone(),
        dw: Vec::new(),
        dw_tilde: Vec::new(),
        jump_offsets: vec![0],
        jump_cells: Vec::new(),
        jump_sizes: Vec::new(),
    };
    for p in 0..fine.batch {
        for i in 0..steps {
            let (a, b) = (fine.step(p, 2 * i), fine.step(p, 2 * i + 1));
            c.dw.extend(a.dw.iter().zip(b.dw).map(|(x, y)| x + y));
            c.dw_tilde.extend(a.dw_tilde.iter().zip(b.dw_tilde).map(|(x, y)| x + y));
            c.jump_cells.extend_from_slice(a.jump_cells);
            c.jump_cells.extend_from_slice(b.jump_cells);
            c.jump_sizes.extend_from_slice(a.jump_sizes);
            c.jump_sizes.extend_from_slice(b.jump_sizes);
            c.jump_offsets.push(c.jump_cells.len());
        }
    }
    c
}

#[test]
fn euler_refinement_on_shared_noise_converges() {
    let m = power_law(1.2);
    let part = partition(&m, 0.05);
    let mut model = martingale_model(&m, 0.4, true);
    model.drift = ou_drift(2.0, 0.5);
    model.diffusion = Arc::new(|x: &[f64], out: &mut [f64]| out[0] = 0.3 * (1.0 + x[0].abs()).sqrt());
    model.jump = state_scaled_jumps(&m, 0.5, 0.5, gamma_min1(1.0), None);
    let batch = 20_000;
    let finest = TimeGrid::uniform(1.0, 32).unwrap();
    let fine_inc = generate_increments(&finest, &part, 1, 1, batch, 12).unwrap();
    let mid_inc = coarsen(&fine_inc);
    let coarse_inc = coarsen(&mid_inc);
    let sim = |inc: IncrementBatch, n: usize| {
        let grid = TimeGrid::uniform(1.0, n).unwrap();
        let p = simulate_with_increments(&model, &grid, &part, &[1.0], inc, 12).unwrap();
        (0..batch).map(|k| p.state(k, n)[0]).collect::<Vec<f64>>()
    };
    let (x8, x16, x32) = (sim(coarse_inc, 8), sim(mid_inc, 16), sim(fine_inc, 32));
    let e1 = x8.iter().zip(&x16).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / batch as f64;
    let e2 = x16.iter().zip(&x32).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / batch as f64;
    assert!(e2 < e1, "{e1} -> {e2}");
}

#[test]
fn second_moment_stays_bounded_across_epsilon() {
    let m = power_law(1.2);
    let grid = TimeGrid::uniform(1.0, 10).unwrap();
    let mut maxima = Vec::new();
    for eps in [0.2, 0.1, 0.05] {
        let part = partition(&m, eps);
        let mut model = martingale_model(&m, 0.3, true);
        model.jump = state_scaled_jumps(&m, 0.5, 0.3, gamma_min1(1.0), None);
        let paths = simulate_forward(&model, &grid, &part, &[1.0], 20_000, 2).unwrap();
        let max = (0..=10)
            .map(|i| (0..paths.batch()).map(|p| paths.state(p, i)[0].powi(2)).sum::<f64>() / paths.batch() as f64)
            .fold(0.0, f64::max);
        maxima.push(max);
    }
    let (lo, hi) = maxima.iter().fold((f64::INFINITY, 0.0f64), |(a, b), &v| (a.min(v), b.max(v)));
    assert!(hi / lo < 1.5, "{maxima:?}");
}

#[test]
fn jump_integral_isometry_for_frozen_state() {
    let m = power_law(0.5);
    let part = partition(&m, 0.05);
    let grid = TimeGrid::uniform(0.2, 1).unwrap();
    let inc = generate_increments(&grid, &part, 1, 1, 200_000, 31).unwrap();
    let jc = state_scaled_jumps(&m, 0.5, 0.7, gamma_min1(1.0), None);
    let x = [1.4];
    let u: Vec<f64> = (0..part.len())
        .map(|j| {
            let mut b = [0.0];
            (jc.beta)(&x, part.representative(j), &mut b);
            b[0]
        })
        .collect();
    let (est, expected) = compensated_isometry(&inc, 0, &u).unwrap();
    assert!(est.within(expected, 4.0), "{} ± {} vs {expected}", est.mean, est.std_error);
}

#[test]
fn representative_forward_jumps_are_available() {
    use jumpbsde::paths::ForwardJumps;
    let m = power_law(0.5);
    let part = partition(&m, 0.05);
    let mut model = martingale_model(&m, 0.3, true);
    model.forward_jumps = ForwardJumps::Representatives;
    model.drift = zero_drift();
    let grid = TimeGrid::uniform(1.0, 4).unwrap();
    let paths = simulate_forward(&model, &grid, &part, &[0.0], 200, 5).unwrap();
    // no diffusion, no compensation noise: states move only by representatives
    let mut still = model.clone();
    still.diffusion = Arc::new(|_: &[f64], out: &mut [f64]| out[0] = 0.0);
    still.zeta = false;
    let p2 = simulate_forward(&still, &grid, &part, &[0.0], 200, 5).unwrap();
    let reps: Vec<f64> = (0..part.len()).map(|j| part.representative(j)[0]).collect();
    for p in 0..200 {
        let noise = p2.increments.step(p, 0);
        let expected: f64 = noise.jump_cells.iter().map(|&j| reps[j as usize]).sum::<f64>();
        // symmetric measure: compensator vanishes
        assert!((p2.state(p, 1)[0] - expected).abs() < 1e-12);
    }
    assert_eq!(paths.valid_count(), 200);
}
