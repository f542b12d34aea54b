//! Strong error of small-jump truncation on coupled paths.
//!
//! All truncation levels share the Brownian increments and the jumps above
//! `ε_ref`; the jumps in `(ε_ref, ε]` are the truncation gap. With Gaussian
//! compensation the reference path uses `Σ_ref^{1/2} a` and level `ε` uses
//! `Σ_ref^{1/2} a + (Σ_ε − Σ_ref)^{1/2} b_ε` with `a`, `b_ε` independent
//! standard normals, so both have the right covariance.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::levy::{build_partition, default_working_radius, psd_sqrt, small_jump_covariance, truncation_variance, LevyMeasure};
use crate::paths::{ModelCoefficients, TimeGrid};
use crate::rng::{stream, Purpose};
use crate::stats::{fit_loglog, Estimate, LinearFit};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateRow {
    pub epsilon: f64,
    pub sigma2: f64,
    /// `E|X_T^{ε_ref} − X_T^ε|²`.
    pub error: f64,
    pub std_error: f64,
    /// Standard error above 25% of the estimate.
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RateTable {
    pub reference_epsilon: f64,
    pub rows: Vec<RateRow>,
    /// Slope of `ln error` against `ln σ_ε²` over unflagged rows with
    /// `ε > ε_ref`.
    pub fit: Option<LinearFit>,
}

impl RateTable {
    /// Every error is at most the next (larger ε) one plus `k` combined
    /// standard errors. Rows are taken in increasing ε.
    pub fn monotone(&self, k: f64) -> bool {
        let mut rows = self.rows.clone();
        rows.sort_by(|a, b| a.epsilon.total_cmp(&b.epsilon));
        rows.windows(2).all(|w| w[0].error <= w[1].error + k * w[0].std_error.hypot(w[1].std_error))
    }
}

fn row_major(m: &nalgebra::DMatrix<f64>) -> Vec<f64> {
    let q = m.nrows();
    (0..q * q).map(|k| m[(k / q, k % q)]).collect()
}

type Compensator = Box<dyn Fn(&[f64], f64, &mut [f64]) + Send + Sync>;

fn compensator_for(coeffs: &ModelCoefficients, measure: &LevyMeasure) -> Result<Compensator> {
    if let Some(c) = &coeffs.jump.compensator {
        let c = c.clone();
        return Ok(Box::new(move |x, eps, out| c(x, eps, out)));
    }
    if !coeffs.jump.state_independent {
        return Err(Error::InvalidArgument(
            "rate experiment needs an exact compensator for state-dependent jumps".into(),
        ));
    }
    let q = coeffs.q;
    let beta = coeffs.jump.beta.clone();
    let measure = measure.clone();
    Ok(Box::new(move |x, eps, out| {
        let mut b = vec![0.0; q];
        for k in 0..q {
            out[k] = measure
                .integrate_vector(
                    |e| {
                        let mut b = vec![0.0; q];
                        beta(x, e, &mut b);
                        b[k]
                    },
                    eps,
                    f64::INFINITY,
                )
                .unwrap_or(f64::NAN);
        }
        b.clear();
    }))
}

/// Coupled estimate of `E|X_T^{ε_ref} − X_T^ε|²` for every `ε` in `epsilons`.
#[allow(clippy::too_many_arguments)]
pub fn smalljump_rate_experiment(
    coeffs: &ModelCoefficients,
    measure: &LevyMeasure,
    grid: &TimeGrid,
    x0: &[f64],
    epsilons: &[f64],
    zeta: bool,
    reference_epsilon: f64,
    batch: usize,
    seed: u64,
) -> Result<RateTable> {
    let q = coeffs.q;
    let d = coeffs.d;
    if epsilons.iter().any(|&e| e < reference_epsilon) {
        return Err(Error::InvalidArgument(format!(
            "reference ε = {reference_epsilon} must not exceed the tested levels"
        )));
    }
    if batch < 2 {
        return Err(Error::InvalidArgument("batch must be at least 2".into()));
    }
    let r_work = default_working_radius(measure, reference_epsilon)?;
    let reference = build_partition(measure, reference_epsilon, 1.0, r_work, |_: &[f64]| 0.0)?;
    let sigma_ref = small_jump_covariance(measure, reference_epsilon)?;
    let sqrt_ref = row_major(&psd_sqrt(&sigma_ref));
    let sqrt_gap: Vec<Vec<f64>> = epsilons
        .iter()
        .map(|&e| Ok(row_major(&psd_sqrt(&(small_jump_covariance(measure, e)? - &sigma_ref)))))
        .collect::<Result<_>>()?;
    let comp = compensator_for(coeffs, measure)?;
    let fixed: Option<Vec<Vec<f64>>> = coeffs.jump.state_independent.then(|| {
        std::iter::once(reference_epsilon)
            .chain(epsilons.iter().copied())
            .map(|e| {
                let mut c = vec![0.0; q];
                comp(x0, e, &mut c);
                c
            })
            .collect()
    });
    let levels = epsilons.len();
    let n = grid.steps();

    let samples: Vec<Vec<f64>> = (0..batch)
        .into_par_iter()
        .map(|p| {
            let mut rng = stream(seed, Purpose::RateExperiment, p as u64);
            // state 0 is the reference, then one per level
            let mut xs: Vec<Vec<f64>> = vec![x0.to_vec(); levels + 1];
            let mut dw = vec![0.0; d];
            let mut a = vec![0.0; q];
            let mut b = vec![vec![0.0; q]; levels];
            let mut cells = Vec::new();
            let mut sizes = Vec::new();
            let mut buf = vec![0.0; q * d.max(q)];
            let mut v = vec![0.0; q];
            let mut e = vec![0.0; q];
            for i in 0..n {
                let dt = grid.dt(i);
                let sd = dt.sqrt();
                dw.iter_mut().for_each(|w| *w = sd * rng.sample::<f64, _>(StandardNormal));
                a.iter_mut().for_each(|w| *w = sd * rng.sample::<f64, _>(StandardNormal));
                for bk in b.iter_mut() {
                    bk.iter_mut().for_each(|w| *w = sd * rng.sample::<f64, _>(StandardNormal));
                }
                cells.clear();
                sizes.clear();
                reference.sample_into(dt, &mut rng, &mut cells, &mut sizes);
                for (lvl, x) in xs.iter_mut().enumerate() {
                    let eps = if lvl == 0 { reference_epsilon } else { epsilons[lvl - 1] };
                    let start = x.clone();
                    (coeffs.drift)(&start, &mut v);
                    for k in 0..q {
                        x[k] += v[k] * dt;
                    }
                    (coeffs.diffusion)(&start, &mut buf[..q * d]);
                    for r in 0..q {
                        x[r] += (0..d).map(|k| buf[r * d + k] * dw[k]).sum::<f64>();
                    }
                    if zeta {
                        let mut g: Vec<f64> = (0..q).map(|r| (0..q).map(|k| sqrt_ref[r * q + k] * a[k]).sum()).collect();
                        if lvl > 0 {
                            let s = &sqrt_gap[lvl - 1];
                            for r in 0..q {
                                g[r] += (0..q).map(|k| s[r * q + k] * b[lvl - 1][k]).sum::<f64>();
                            }
                        }
                        coeffs.jump.d_beta0_at(&start, &mut buf[..q * q]);
                        for r in 0..q {
                            x[r] += (0..q).map(|k| buf[r * q + k] * g[k]).sum::<f64>();
                        }
                    }
                    for (&cell, &size) in cells.iter().zip(&sizes) {
                        if size.abs() > eps {
                            e.fill(0.0);
                            e[reference.cells()[cell].axis] = size;
                            (coeffs.jump.beta)(&start, &e, &mut v);
                            for k in 0..q {
                                x[k] += v[k];
                            }
                        }
                    }
                    match &fixed {
                        Some(c) => {
                            for k in 0..q {
                                x[k] -= dt * c[lvl][k];
                            }
                        }
                        None => {
                            comp(&start, eps, &mut v);
                            for k in 0..q {
                                x[k] -= dt * v[k];
                            }
                        }
                    }
                }
            }
            (1..=levels)
                .map(|l| xs[l].iter().zip(&xs[0]).map(|(u, w)| (u - w).powi(2)).sum())
                .collect()
        })
        .collect();

    let mut rows = Vec::with_capacity(levels);
    for (l, &eps) in epsilons.iter().enumerate() {
        let est = Estimate::from_samples(samples.iter().map(|s| s[l]));
        let finite = est.mean.is_finite();
        rows.push(RateRow {
            epsilon: eps,
            sigma2: truncation_variance(measure, eps)?,
            error: est.mean,
            std_error: est.std_error,
            flagged: !finite || (est.mean > 0.0 && est.std_error > 0.25 * est.mean),
        });
    }
    let (xs, ys): (Vec<f64>, Vec<f64>) = rows
        .iter()
        .filter(|r| !r.flagged && r.epsilon > reference_epsilon)
        .map(|r| (r.sigma2, r.error))
        .unzip();
    let fit = fit_loglog(&xs, &ys);
    Ok(RateTable { reference_epsilon, rows, fit })
}
