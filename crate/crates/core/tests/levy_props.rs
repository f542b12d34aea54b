use jumpbsde::levy::{
    build_partition, gamma_quadrature_error, small_jump_covariance, truncation_variance, AxisDensity, LevyMeasure, RadialDensity,
    TableBin,
};
use jumpbsde::models::{additive_jumps, gamma_min1, state_scaled_jumps};
use jumpbsde::rng::{stream, Purpose};
use jumpbsde::stats::fit_loglog;
use proptest::prelude::*;
use rand::Rng;

fn power_law(alpha: f64) -> LevyMeasure {
    LevyMeasure::symmetric_power_law(1, 1.0, alpha, 1.0).unwrap()
}

fn gamma(e: &[f64]) -> f64 {
    e.iter().map(|v| v * v).sum::<f64>().sqrt().min(1.0)
}

#[test]
fn log_slope_of_truncation_variance_is_two_minus_alpha() {
    for alpha in [0.5, 1.2, 1.7] {
        let m = power_law(alpha);
        let eps = [0.2, 0.1, 0.05, 0.02];
        let s: Vec<f64> = eps.iter().map(|&e| truncation_variance(&m, e).unwrap()).collect();
        assert!(s.windows(2).all(|w| w[0] > w[1]));
        let fit = fit_loglog(&eps, &s).unwrap();
        assert!((fit.slope - (2.0 - alpha)).abs() < 0.05, "alpha {alpha}: slope {}", fit.slope);
    }
}

#[test]
fn tempered_variance_matches_independent_quadrature() {
    let m = LevyMeasure::symmetric_tempered(1, 0.8, 1.2, 2.0, f64::INFINITY).unwrap();
    let got = truncation_variance(&m, 0.3).unwrap();
    // ∫_0^0.3 r^{-0.2} e^{−2r} · 0.8 dr per side, with r = s⁵ removing the singularity
    let n = 200_000;
    let top = 0.3f64.powf(0.2);
    let h = top / n as f64;
    let oracle: f64 = 2.0
        * (0..n)
            .map(|k| {
                let s = (k as f64 + 0.5) * h;
                0.8 * 5.0 * s.powi(3) * (-2.0 * s.powi(5)).exp() * h
            })
            .sum::<f64>();
    assert!((got - oracle).abs() < 1e-6 * oracle, "{got} vs {oracle}");
}

#[test]
fn partition_covers_truncated_space_exactly_once() {
    let m = LevyMeasure::symmetric_power_law(2, 1.0, 0.8, 2.0).unwrap();
    let part = build_partition(&m, 0.05, 0.3, 1.5, gamma).unwrap();
    let mut rng = stream(1, Purpose::Test, 0);
    for _ in 0..10_000 {
        let axis = rng.random_range(0..2);
        let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
        let r = 0.05 + (2.0 - 0.05) * rng.random::<f64>();
        let mut e = vec![0.0; 2];
        e[axis] = sign * r;
        if r > 0.05 {
            assert_eq!(part.cells_containing(&e), 1, "{e:?}");
        }
    }
    assert!(part.cells().iter().all(|c| c.mass > 0.0));
}

#[test]
fn cell_diameters_shrink_with_h() {
    let m = power_law(0.5);
    let mut prev = f64::INFINITY;
    for k in 0..5 {
        let h = 0.8 / 2f64.powi(k);
        let part = build_partition(&m, 0.05, h, 1.0, gamma).unwrap();
        let max_diam = part.cells().iter().filter(|c| c.hi.is_finite()).map(|c| c.diameter()).fold(0.0, f64::max);
        assert!(max_diam < prev);
        prev = max_diam;
    }
    assert!(prev < 0.05);
}

#[test]
fn gamma_error_decays_along_halvings() {
    let m = power_law(0.5);
    let values: Vec<f64> = (0..5)
        .map(|k| {
            let part = build_partition(&m, 0.05, 1.0 / 2f64.powi(k), 1.0, gamma).unwrap();
            gamma_quadrature_error(&part, gamma).unwrap()
        })
        .collect();
    assert!(values.windows(2).all(|w| w[1] <= w[0]), "{values:?}");
    assert!(values[4] / values[0] <= 0.25);
}

#[test]
fn refining_a_cell_reduces_gamma_error() {
    let one = |lo: f64, hi: f64| {
        let side = RadialDensity::PowerLaw { scale: 1.0, alpha: 0.5, r_max: 1.0 };
        let mass = side.moment(0, lo, hi).unwrap();
        let avg = side.integrate_with(|r| r, lo, hi).unwrap() / mass;
        side.integrate_with(|r| (r - avg).powi(2), lo, hi).unwrap()
    };
    let whole = one(0.5, 1.0);
    let split = one(0.5, 0.75) + one(0.75, 1.0);
    assert!((whole - 0.016750843898).abs() < 1e-10);
    assert!(split < whole);
}

#[test]
fn cell_counts_have_poisson_moments() {
    let m = power_law(0.5);
    let part = build_partition(&m, 0.05, 0.5, 1.0, gamma).unwrap();
    let dt = 0.1;
    let draws = 1_000_000;
    let cells = part.len();
    let mut rng = stream(21, Purpose::Test, 3);
    let mut sum = vec![0.0; cells];
    let mut sum_sq = vec![0.0; cells];
    let mut var_sum = vec![0.0; cells];
    let mut var_sq = vec![0.0; cells];
    for _ in 0..draws {
        let real = part.sample_jumps(dt, &mut rng);
        for j in 0..cells {
            let n = real.counts[j] as f64;
            sum[j] += n;
            sum_sq[j] += n * n;
            let c = (n - part.cells()[j].mass * dt).powi(2);
            var_sum[j] += c;
            var_sq[j] += c * c;
        }
    }
    let mf = draws as f64;
    for j in 0..cells {
        let lam = part.cells()[j].mass * dt;
        let mean = sum[j] / mf;
        let se = ((sum_sq[j] / mf - mean * mean) / mf).sqrt();
        assert!((mean - lam).abs() < 4.0 * se, "cell {j}: mean {mean} vs {lam}");
        let v = var_sum[j] / mf;
        let vse = ((var_sq[j] / mf - v * v) / mf).sqrt();
        assert!((v - lam).abs() < 4.0 * vse, "cell {j}: variance {v} vs {lam}");
    }
}

#[test]
fn jump_coefficients_vanish_at_origin() {
    let m = LevyMeasure::symmetric_power_law(2, 1.0, 0.5, 1.0).unwrap();
    for jc in [additive_jumps(&m, 0.7, gamma_min1(1.0), None), state_scaled_jumps(&m, 0.2, 0.5, gamma_min1(2.0), None)] {
        let mut out = vec![1.0; 2];
        for x in [[0.0, 0.0], [1.5, -2.0]] {
            (jc.beta)(&x, &[0.0, 0.0], &mut out);
            assert_eq!(out, vec![0.0, 0.0]);
        }
        assert_eq!((jc.gamma)(&[0.0, 0.0]), 0.0);
        // 0 ≤ γ ≤ C(1∧|e|)
        for r in [0.01, 0.5, 3.0] {
            let g = (jc.gamma)(&[r, 0.0]);
            assert!(g >= 0.0 && g <= 2.0 * r.min(1.0) + 1e-15);
        }
    }
}

#[test]
fn finite_activity_table_has_no_small_jump_part() {
    let bins = vec![TableBin { lo: 0.3, hi: 0.6, density: 2.0 }];
    let m = LevyMeasure::new(vec![AxisDensity::symmetric(RadialDensity::Table { bins })], None).unwrap();
    assert_eq!(small_jump_covariance(&m, 0.2).unwrap()[(0, 0)], 0.0);
    let part = build_partition(&m, 0.2, 0.5, 1.0, gamma).unwrap();
    assert!((part.total_mass() - 1.2).abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn covariance_is_symmetric_psd_and_trace_is_variance(eps in 0.01f64..1.5, alpha in 0.2f64..1.8) {
        let m = LevyMeasure::symmetric_power_law(3, 1.0, alpha, 1.0).unwrap();
        let s = small_jump_covariance(&m, eps).unwrap();
        prop_assert!((&s - s.transpose()).abs().max() == 0.0);
        prop_assert!(s.symmetric_eigenvalues().iter().all(|&l| l >= 0.0));
        prop_assert_eq!(s.trace(), truncation_variance(&m, eps).unwrap());
    }

    #[test]
    fn truncation_variance_is_nondecreasing(a in 0.01f64..1.0, b in 0.01f64..1.0, alpha in 0.2f64..1.8) {
        let m = power_law(alpha);
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        prop_assert!(truncation_variance(&m, lo).unwrap() <= truncation_variance(&m, hi).unwrap());
    }

    #[test]
    fn sampled_jumps_land_in_their_cells(seed in any::<u64>()) {
        let m = power_law(1.2);
        let part = build_partition(&m, 0.05, 0.4, 1.0, gamma).unwrap();
        let mut rng = stream(seed, Purpose::Test, 0);
        let real = part.sample_jumps(1.0, &mut rng);
        for (&j, &s) in real.cells.iter().zip(&real.sizes) {
            prop_assert_eq!(part.locate(0, s), Some(j));
        }
        let total: u32 = real.counts.iter().sum();
        prop_assert_eq!(total as usize, real.sizes.len());
    }

    #[test]
    fn halving_h_roughly_doubles_cells(h in 0.05f64..0.8) {
        let m = power_law(0.5);
        let a = build_partition(&m, 0.05, h, 1.0, gamma).unwrap().len() as i64;
        let b = build_partition(&m, 0.05, h / 2.0, 1.0, gamma).unwrap().len() as i64;
        // two sides, one remainder cell each
        prop_assert!((b - 2 * a).abs() <= 2, "{} -> {}", a, b);
    }
}

