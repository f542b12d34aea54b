//! Least-squares Monte Carlo realisation of the intermediate backward scheme
//!
//! ```text
//! V̂_i = E_i[𝒱_{i+1}] + f(t_i, X_i, V̂_i, z̄_i, P̄_i) Δt_i
//! z̄_i = E_i[𝒱_{i+1} ΔW_i] / Δt_i,   l̄_i = E_i[𝒱_{i+1} ΔW̃_i] / Δt_i,
//! ρ̄_{i,j} = E_i[𝒱_{i+1} Ñ_{i,j}] / (Δt_i λ_j),
//! ```
//!
//! with `𝒱_{i+1} = g(X_N) + Σ_{l>i} f_l Δt_l` and conditional expectations
//! realised as polynomial regressions on `X_i`.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::levy::JumpPartition;
use crate::paths::{ModelCoefficients, PathBatch};
use crate::solver::{precompute_source, JumpQuadrature, TrainedSolution};
use crate::stats::Estimate;

use super::regression::{PolynomialBasis, SharedRegression};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntermediateConfig {
    pub degree: u32,
    pub ridge: f64,
    pub max_iterations: usize,
    pub tolerance: f64,
}

impl Default for IntermediateConfig {
    fn default() -> Self {
        IntermediateConfig { degree: 3, ridge: 1e-8, max_iterations: 50, tolerance: 1e-8 }
    }
}

/// Where the later-step values inside `𝒱` come from.
#[derive(Clone, Copy)]
pub enum Continuation<'a> {
    /// The trained networks of the deep solver.
    Networks(&'a TrainedSolution),
    /// The scheme's own fits at later steps.
    SelfReferential,
}

/// Regression representations `v̂_i, z̄_i, l̄_i, ρ̄_i(·, e_j)` of one step.
#[derive(Debug, Clone, PartialEq)]
pub struct IntermediateStep {
    pub basis: PolynomialBasis,
    pub v: Vec<f64>,
    /// One coefficient vector per Brownian component.
    pub z: Vec<Vec<f64>>,
    /// Empty when ζ = 0.
    pub l: Vec<Vec<f64>>,
    /// One coefficient vector per cell.
    pub u: Vec<Vec<f64>>,
    pub picard_iterations: usize,
    pub picard_residual: f64,
    pub ridge_fallback: bool,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl IntermediateStep {
    pub fn v_at(&self, x: &[f64]) -> f64 {
        dot(&self.basis.features(x), &self.v)
    }
    pub fn z_at(&self, x: &[f64]) -> Vec<f64> {
        let f = self.basis.features(x);
        self.z.iter().map(|c| dot(&f, c)).collect()
    }
    pub fn l_at(&self, x: &[f64]) -> Vec<f64> {
        let f = self.basis.features(x);
        self.l.iter().map(|c| dot(&f, c)).collect()
    }
    pub fn u_at(&self, x: &[f64]) -> Vec<f64> {
        let f = self.basis.features(x);
        self.u.iter().map(|c| dot(&f, c)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IntermediateSolution {
    pub steps: Vec<IntermediateStep>,
    pub v0: f64,
    /// Standard error of `E_0[𝒱_1]` over the path cloud.
    pub v0_std_error: f64,
    pub z0: Vec<f64>,
    pub l0: Vec<f64>,
    pub u0: Vec<f64>,
    /// `V̂_i` at every valid path, `values[i][r]`.
    pub values: Vec<Vec<f64>>,
}

/// Per-path `f_l Δt_l` from the frozen networks of step `l`.
fn network_increment(
    sol: &TrainedSolution,
    l: usize,
    coeffs: &ModelCoefficients,
    quad: &JumpQuadrature,
    partition: &JumpPartition,
    t: f64,
    dt: f64,
    x: &[f64],
    source: f64,
) -> Result<f64> {
    let nets = &sol.steps[l];
    let y = nets.y.eval(x)?[0];
    let z = nets.z.eval(x)?;
    let u = nets.u_at_representatives(x, partition);
    let mut p = dot(&u, &quad.gamma_weights);
    if let Some(w) = &nets.w {
        p += coeffs.zeta_factor() * dot(&w.eval(x)?, &quad.c_w);
    }
    Ok((source + coeffs.driver.core(t, x, y, &z, p)) * dt)
}

/// Backward regression sweep over the valid paths of `paths`.
pub fn solve_intermediate(
    coeffs: &ModelCoefficients,
    partition: &JumpPartition,
    paths: &PathBatch,
    continuation: Continuation<'_>,
    config: &IntermediateConfig,
) -> Result<IntermediateSolution> {
    let q = coeffs.q;
    let d = coeffs.d;
    if q > 3 {
        return Err(Error::InvalidArgument(format!("regression oracle supports q <= 3, got q = {q}")));
    }
    let n = paths.steps();
    if n == 0 {
        return Err(Error::InvalidArgument("time grid has no steps".into()));
    }
    if let Some(cf) = coeffs.driver.lipschitz_y() {
        let dt = paths.grid.max_dt();
        if cf * dt > 0.5 {
            return Err(Error::InvalidArgument(format!(
                "Picard contraction needs Δt <= 0.5 / C_f; Δt = {dt}, C_f = {cf}"
            )));
        }
    }
    if let Continuation::Networks(sol) = continuation {
        if sol.steps.len() != n {
            return Err(Error::Contract(format!("solution has {} steps, paths have {n}", sol.steps.len())));
        }
    }
    let quad = JumpQuadrature::new(coeffs, partition, &paths.sigma_sqrt);
    let cells = quad.cells();
    let rows: Vec<usize> = (0..paths.batch()).filter(|&p| paths.valid[p]).collect();
    let m = rows.len();
    let source = precompute_source(coeffs, paths)?;
    let zeta = coeffs.zeta;

    // 𝒱_{i+1} per valid path, starting from g(X_N)
    let mut cal_v: Vec<f64> = rows.iter().map(|&p| (coeffs.terminal)(paths.state(p, n))).collect();
    let mut steps: Vec<Option<IntermediateStep>> = vec![None; n];
    let mut values = vec![Vec::new(); n];
    let mut v0_std_error = f64::NAN;

    for i in (0..n).rev() {
        let t = paths.grid.t(i);
        let dt = paths.grid.dt(i);
        let anchors: Vec<f64> = rows.iter().flat_map(|&p| paths.state(p, i).iter().copied()).collect();
        let reg = SharedRegression::new(&anchors, q, config.degree, config.ridge)?;
        let c_coef = reg.fit(&cal_v);
        let cond = reg.fitted(&c_coef);
        let centred: Vec<f64> = cal_v.iter().zip(&cond).map(|(a, b)| a - b).collect();

        let product_fit = |noise: &dyn Fn(usize) -> f64, scale: f64| -> Vec<f64> {
            let target: Vec<f64> = (0..m).map(|r| centred[r] * noise(r) / scale).collect();
            reg.fit(&target)
        };
        let inc = &paths.increments;
        let z: Vec<Vec<f64>> = (0..d)
            .map(|k| product_fit(&|r| inc.step(rows[r], i).dw[k], dt))
            .collect();
        let l: Vec<Vec<f64>> = if zeta {
            (0..q).map(|k| product_fit(&|r| inc.step(rows[r], i).dw_tilde[k], dt)).collect()
        } else {
            Vec::new()
        };
        let counts: Vec<Vec<f64>> = rows.iter().map(|&p| inc.compensated_counts(p, i)).collect();
        let u: Vec<Vec<f64>> = (0..cells)
            .map(|j| product_fit(&|r| counts[r][j], dt * quad.masses[j]))
            .collect();

        let zf = |c: &Vec<Vec<f64>>| -> Vec<Vec<f64>> { c.iter().map(|c| reg.fitted(c)).collect() };
        let (zv, lv, uv) = (zf(&z), zf(&l), zf(&u));
        let z_at = |r: usize| -> Vec<f64> { zv.iter().map(|c| c[r]).collect() };
        let p_at = |r: usize| -> f64 {
            let mut p: f64 = (0..cells).map(|j| uv[j][r] * quad.gamma_weights[j]).sum();
            if zeta {
                p += (0..q).map(|k| lv[k][r] * quad.c_w[k]).sum::<f64>();
            }
            p
        };

        // Picard iteration for V̂_i on every path
        let driver = &coeffs.driver;
        let solved: Vec<(f64, usize, f64)> = (0..m)
            .into_par_iter()
            .map(|r| {
                let x = paths.state(rows[r], i);
                let h = source[rows[r] * n + i];
                let (zr, pr) = (z_at(r), p_at(r));
                let mut v = cond[r];
                let mut res = f64::INFINITY;
                for it in 1..=config.max_iterations {
                    let next = cond[r] + (h + driver.core(t, x, v, &zr, pr)) * dt;
                    res = (next - v).abs();
                    v = next;
                    if res <= config.tolerance * (1.0 + v.abs()) {
                        return (v, it, res);
                    }
                }
                (v, usize::MAX, res)
            })
            .collect();
        let worst = solved.iter().map(|s| s.2).fold(0.0, f64::max);
        if solved.iter().any(|s| s.1 == usize::MAX) {
            return Err(Error::FixedPoint { step: i, residual: worst });
        }
        let v_hat: Vec<f64> = solved.iter().map(|s| s.0).collect();
        let iterations = solved.iter().map(|s| s.1).max().unwrap_or(0);
        let v_coef = reg.fit(&v_hat);

        if i == 0 {
            let est = Estimate::from_samples(cal_v.iter().copied());
            v0_std_error = est.std_error;
        }

        // 𝒱_i = 𝒱_{i+1} + f_i Δt_i
        match continuation {
            Continuation::Networks(sol) => {
                let incs: Vec<Result<f64>> = (0..m)
                    .into_par_iter()
                    .map(|r| {
                        let x = paths.state(rows[r], i);
                        network_increment(sol, i, coeffs, &quad, partition, t, dt, x, source[rows[r] * n + i])
                    })
                    .collect();
                for (cv, f) in cal_v.iter_mut().zip(incs) {
                    *cv += f?;
                }
            }
            Continuation::SelfReferential => {
                for r in 0..m {
                    let x = paths.state(rows[r], i);
                    let f = source[rows[r] * n + i] + driver.core(t, x, v_hat[r], &z_at(r), p_at(r));
                    cal_v[r] += f * dt;
                }
            }
        }

        values[i] = v_hat;
        steps[i] = Some(IntermediateStep {
            basis: reg.basis.clone(),
            v: v_coef,
            z,
            l,
            u,
            picard_iterations: iterations,
            picard_residual: worst,
            ridge_fallback: reg.ls.ridge_fallback,
        });
    }
    let steps: Vec<IntermediateStep> = steps.into_iter().map(|s| s.expect("every step solved")).collect();
    let x0 = paths.state(rows[0], 0).to_vec();
    let first = &steps[0];
    Ok(IntermediateSolution {
        v0: values[0].iter().sum::<f64>() / m as f64,
        v0_std_error,
        z0: first.z_at(&x0),
        l0: first.l_at(&x0),
        u0: first.u_at(&x0),
        steps,
        values,
    })
}

/// Variance of the part of `tail` orthogonal to the span of
/// `φ(X_i)·{1, ΔW, ΔW̃, Ñ_j}` at step `i`, with its standard error. Since no
/// choice of `Ŷ_i, Ẑ_i, Ŵ_i, Û_i` can reach the orthogonal part, this bounds
/// the step-`i` loss from below up to the basis bias.
pub fn orthogonal_residual_variance(
    paths: &PathBatch,
    step: usize,
    tail: &[f64],
    zeta: bool,
    config: &IntermediateConfig,
) -> Result<Estimate> {
    let q = paths.q;
    let d = paths.increments.d;
    let rows: Vec<usize> = (0..paths.batch()).filter(|&p| paths.valid[p] && tail[p].is_finite()).collect();
    let anchors: Vec<f64> = rows.iter().flat_map(|&p| paths.state(p, step).iter().copied()).collect();
    let basis = PolynomialBasis::new(&anchors, q, config.degree);
    let cells = paths.increments.masses.len();
    let multipliers = 1 + d + if zeta { q } else { 0 } + cells;
    let cols = basis.len() * multipliers;
    let mut design = nalgebra::DMatrix::zeros(rows.len(), cols);
    for (r, &p) in rows.iter().enumerate() {
        let phi = basis.features(paths.state(p, step));
        let noise = paths.increments.step(p, step);
        let mut mult = vec![1.0];
        mult.extend_from_slice(noise.dw);
        if zeta {
            mult.extend_from_slice(noise.dw_tilde);
        }
        mult.extend(paths.increments.compensated_counts(p, step));
        for (a, mv) in mult.iter().enumerate() {
            for (b, f) in phi.iter().enumerate() {
                design[(r, a * phi.len() + b)] = mv * f;
            }
        }
    }
    let ls = super::regression::LeastSquares::new(design, config.ridge)?;
    let target: Vec<f64> = rows.iter().map(|&p| tail[p]).collect();
    let fit = ls.fit(&target);
    let c = nalgebra::DVector::from_column_slice(&fit.coef);
    let fitted = ls.design() * c;
    Ok(Estimate::from_samples(target.iter().zip(fitted.iter()).map(|(y, f)| (y - f).powi(2))))
}
