//! `L²` projections onto step-wise constant processes and the projection
//! errors `R²_Z`, `R²_L`, `R²_U`.

use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::levy::{Cell, JumpPartition};
use crate::paths::{IncrementBatch, PathBatch};
use crate::quadrature::legendre_nodes;
use crate::stats::Estimate;

use super::regression::BasisRegression;

/// Trapezoidal time average of equally spaced samples.
fn trapezoid_mean(v: &[f64]) -> f64 {
    let k = v.len() - 1;
    if k == 0 {
        return v[0];
    }
    (0.5 * (v[0] + v[k]) + v[1..k].iter().sum::<f64>()) / k as f64
}

/// `π_{[s,t]}(Z) = E[(t−s)⁻¹ ∫_s^t Z_r dr | X_s]`, from `samples` holding each
/// path's `Z` at `points` equally spaced times on `[s, t]` (endpoints
/// included), regressed on the anchor states.
pub fn project_time(anchors: &[f64], q: usize, samples: &[f64], points: usize, degree: u32, ridge: f64) -> Result<BasisRegression> {
    if points < 1 || samples.len() != points * (anchors.len() / q) {
        return Err(Error::Dimension(format!(
            "{} samples do not fill {} paths × {points} times",
            samples.len(),
            anchors.len() / q
        )));
    }
    let averages: Vec<f64> = samples.chunks(points).map(trapezoid_mean).collect();
    BasisRegression::fit(anchors, q, &averages, degree, ridge)
}

/// `ν(K)⁻¹ ∫_K φ(e) ν(de)` for a bounded cell; `φ` receives the signed radius.
pub fn cell_average<F: Fn(f64) -> f64>(partition: &JumpPartition, cell: &Cell, phi: F) -> Result<f64> {
    let side = partition.measure().axes()[cell.axis].side(cell.sign);
    let s = cell.sign;
    Ok(side.integrate_with(|r| phi(s * r), cell.lo, cell.hi)? / cell.mass)
}

/// `π_{[s,t],K}(U) = E[((t−s)ν(K))⁻¹ ∫_s^t ∫_K U_r(e) ν(de) dr | X_s]`.
/// `u(path, r, e)` is evaluated on the 10-point Gauss rule in time and by
/// adaptive quadrature over the cell; an unbounded cell uses its
/// representative.
#[allow(clippy::too_many_arguments)]
pub fn project_cell<U>(
    anchors: &[f64],
    q: usize,
    partition: &JumpPartition,
    cell: usize,
    s: f64,
    t: f64,
    u: U,
    degree: u32,
    ridge: f64,
) -> Result<BasisRegression>
where
    U: Fn(usize, f64, &[f64]) -> f64 + Sync,
{
    let k = &partition.cells()[cell];
    let rep = partition.representative(cell).to_vec();
    let paths = anchors.len() / q;
    let (nodes, weights) = legendre_nodes();
    let half = 0.5 * (t - s);
    let mid = 0.5 * (t + s);
    let averages: Vec<Result<f64>> = (0..paths)
        .into_par_iter()
        .map(|p| {
            let mut acc = 0.0;
            for (x, w) in nodes.iter().zip(&weights) {
                let r = mid + half * x;
                let v = if k.hi.is_finite() {
                    cell_average(partition, k, |sr| {
                        let mut e = vec![0.0; q];
                        e[k.axis] = sr;
                        u(p, r, &e)
                    })?
                } else {
                    u(p, r, &rep)
                };
                acc += 0.5 * w * v;
            }
            Ok(acc)
        })
        .collect();
    let averages = averages.into_iter().collect::<Result<Vec<f64>>>()?;
    BasisRegression::fit(anchors, q, &averages, degree, ridge)
}

/// Closed-form processes on a manufactured or martingale problem.
#[derive(Clone, Default)]
pub struct ClosedFormProcesses {
    /// `Z(t, x)` written into a buffer of length d.
    pub z: Option<Arc<dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync>>,
    /// `L(t, x)`, length q.
    pub l: Option<Arc<dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync>>,
    /// `U(t, x, e)`.
    pub u: Option<Arc<dyn Fn(f64, &[f64], &[f64]) -> f64 + Send + Sync>>,
}

/// Monte Carlo estimates of the projection errors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectionErrors {
    pub r2_z: Option<Estimate>,
    pub r2_l: Option<Estimate>,
    pub r2_u: Option<Estimate>,
    /// Contribution of the unbounded tail cell to `r2_u`.
    pub r2_u_tail: Option<Estimate>,
}

/// `E Σ_i ∫_{t_i}^{t_{i+1}} |V_r − π_i(V)|² dr` for one scalar process sampled
/// at every node of a grid `factor` times finer than the coarse one.
/// `values` is `batch × (N·factor + 1)` and `anchors(p, i)` the state at the
/// coarse node `i`.
#[allow(clippy::too_many_arguments)]
pub fn time_projection_error(
    values: &[f64],
    batch: usize,
    coarse_steps: usize,
    factor: usize,
    fine_dt: &[f64],
    anchors: &dyn Fn(usize, usize) -> Vec<f64>,
    q: usize,
    degree: u32,
    ridge: f64,
) -> Result<Estimate> {
    if values.len() != batch * (coarse_steps * factor + 1) || fine_dt.len() != coarse_steps * factor {
        return Err(Error::Dimension("sample array does not match the fine grid".into()));
    }
    let per_path = time_projection_error_paths(values, batch, coarse_steps, factor, fine_dt, anchors, q, degree, ridge)?;
    Ok(Estimate::from_samples(per_path))
}

/// `R²_Z`, `R²_L`, `R²_U` on `fine`, a path batch on a grid refined `factor`
/// times from the coarse grid of the scheme. The cell integrals use a 10-point
/// Gauss rule per bounded cell; the tail cell uses its representative and is
/// also reported on its own.
pub fn projection_error_estimates(
    fine: &PathBatch,
    factor: usize,
    partition: &JumpPartition,
    processes: &ClosedFormProcesses,
    degree: u32,
    ridge: f64,
) -> Result<ProjectionErrors> {
    if factor == 0 || fine.steps() % factor != 0 {
        return Err(Error::InvalidArgument(format!("{} fine steps are not a multiple of {factor}", fine.steps())));
    }
    let q = fine.q;
    let d = fine.increments.d;
    let coarse = fine.steps() / factor;
    let rows: Vec<usize> = (0..fine.batch()).filter(|&p| fine.valid[p]).collect();
    let m = rows.len();
    let width = fine.steps() + 1;
    let fine_dt: Vec<f64> = (0..fine.steps()).map(|i| fine.grid.dt(i)).collect();
    let anchors = |p: usize, i: usize| fine.state(rows[p], i * factor).to_vec();

    let vector_error = |f: &Arc<dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync>, dim: usize| -> Result<Estimate> {
        let mut total = vec![0.0; m];
        for k in 0..dim {
            let values: Vec<f64> = rows
                .par_iter()
                .flat_map_iter(|&p| {
                    let mut buf = vec![0.0; dim];
                    (0..width)
                        .map(|n| {
                            f(fine.grid.t(n), fine.state(p, n), &mut buf);
                            buf[k]
                        })
                        .collect::<Vec<f64>>()
                })
                .collect();
            let est = time_projection_error_paths(&values, m, coarse, factor, &fine_dt, &anchors, q, degree, ridge)?;
            for (t, v) in total.iter_mut().zip(est) {
                *t += v;
            }
        }
        Ok(Estimate::from_samples(total))
    };
    let r2_z = processes.z.as_ref().map(|f| vector_error(f, d)).transpose()?;
    let r2_l = processes.l.as_ref().map(|f| vector_error(f, q)).transpose()?;

    let (r2_u, r2_u_tail) = match &processes.u {
        None => (None, None),
        Some(u) => {
            let (nodes, weights) = legendre_nodes();
            let mut total = vec![0.0; m];
            let mut tail = vec![0.0; m];
            for (j, cell) in partition.cells().iter().enumerate() {
                // quadrature nodes and ν-weights over the cell
                let pts: Vec<(Vec<f64>, f64)> = if cell.hi.is_finite() {
                    let side = partition.measure().axes()[cell.axis].side(cell.sign);
                    let half = 0.5 * (cell.hi - cell.lo);
                    let mid = 0.5 * (cell.hi + cell.lo);
                    nodes
                        .iter()
                        .zip(&weights)
                        .map(|(x, w)| {
                            let r = mid + half * x;
                            let mut e = vec![0.0; q];
                            e[cell.axis] = cell.sign * r;
                            (e, w * half * side.density(r))
                        })
                        .collect()
                } else {
                    vec![(partition.representative(j).to_vec(), cell.mass)]
                };
                let wsum: f64 = pts.iter().map(|p| p.1).sum();
                let u_cell = |p: usize, n: usize| -> f64 {
                    let x = fine.state(p, n);
                    let t = fine.grid.t(n);
                    pts.iter().map(|(e, w)| u(t, x, e) * w).sum::<f64>() / wsum
                };
                let u_sq = |p: usize, n: usize, pi: f64| -> f64 {
                    let x = fine.state(p, n);
                    let t = fine.grid.t(n);
                    pts.iter().map(|(e, w)| (u(t, x, e) - pi).powi(2) * w).sum::<f64>()
                };
                let mut contrib = vec![0.0; m];
                for i in 0..coarse {
                    let a: Vec<f64> = (0..m).flat_map(|p| anchors(p, i)).collect();
                    let lo = i * factor;
                    let samples: Vec<f64> =
                        rows.par_iter().flat_map_iter(|&p| (lo..=lo + factor).map(move |n| u_cell(p, n))).collect();
                    let proj = project_time(&a, q, &samples, factor + 1, degree, ridge)?;
                    let add: Vec<f64> = (0..m)
                        .into_par_iter()
                        .map(|r| {
                            let pi = proj.predict(&a[r * q..(r + 1) * q]);
                            (0..factor)
                                .map(|k| 0.5 * fine_dt[lo + k] * (u_sq(rows[r], lo + k, pi) + u_sq(rows[r], lo + k + 1, pi)))
                                .sum::<f64>()
                        })
                        .collect();
                    for (c, v) in contrib.iter_mut().zip(add) {
                        *c += v;
                    }
                }
                for r in 0..m {
                    total[r] += contrib[r];
                    if !cell.hi.is_finite() {
                        tail[r] += contrib[r];
                    }
                }
            }
            (Some(Estimate::from_samples(total)), Some(Estimate::from_samples(tail)))
        }
    };
    Ok(ProjectionErrors { r2_z, r2_l, r2_u, r2_u_tail })
}

/// Same as [`time_projection_error`] but returning the per-path sums.
#[allow(clippy::too_many_arguments)]
fn time_projection_error_paths(
    values: &[f64],
    batch: usize,
    coarse_steps: usize,
    factor: usize,
    fine_dt: &[f64],
    anchors: &dyn Fn(usize, usize) -> Vec<f64>,
    q: usize,
    degree: u32,
    ridge: f64,
) -> Result<Vec<f64>> {
    let width = coarse_steps * factor + 1;
    let mut per_path = vec![0.0; batch];
    for i in 0..coarse_steps {
        let a: Vec<f64> = (0..batch).flat_map(|p| anchors(p, i)).collect();
        let lo = i * factor;
        let samples: Vec<f64> = (0..batch).flat_map(|p| values[p * width + lo..=p * width + lo + factor].to_vec()).collect();
        let proj = project_time(&a, q, &samples, factor + 1, degree, ridge)?;
        for (p, acc) in per_path.iter_mut().enumerate() {
            let pi = proj.predict(&a[p * q..(p + 1) * q]);
            let v = &samples[p * (factor + 1)..(p + 1) * (factor + 1)];
            for k in 0..factor {
                *acc += 0.5 * fine_dt[lo + k] * ((v[k] - pi).powi(2) + (v[k + 1] - pi).powi(2));
            }
        }
    }
    Ok(per_path)
}

/// `E|Σ_j u_j Ñ_{i,j}|²` over the paths of `increments` at step `i`,
/// alongside the isometry value `Δt_i Σ_j u_j² λ_j`.
pub fn compensated_isometry(increments: &IncrementBatch, step: usize, u: &[f64]) -> Result<(Estimate, f64)> {
    if u.len() != increments.masses.len() {
        return Err(Error::Dimension(format!("{} weights for {} cells", u.len(), increments.masses.len())));
    }
    let dt = increments.dt[step];
    let expected = dt * u.iter().zip(&increments.masses).map(|(a, l)| a * a * l).sum::<f64>();
    let comp_mean: f64 = u.iter().zip(&increments.masses).map(|(a, l)| a * l * dt).sum();
    let squares: Vec<f64> = (0..increments.batch)
        .into_par_iter()
        .map(|p| {
            let s: f64 = increments.step(p, step).jump_cells.iter().map(|&j| u[j as usize]).sum();
            (s - comp_mean).powi(2)
        })
        .collect();
    Ok((Estimate::from_samples(squares), expected))
}
