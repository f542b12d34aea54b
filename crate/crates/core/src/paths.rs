//! Driving noise and the jump-adapted Euler scheme for the truncated forward
//! SDE, simulated path by path with one random stream per path.

use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::levy::{psd_sqrt, JumpPartition};
use crate::rng::{stream, Purpose};

/// Time nodes `0 = t_0 < … < t_N = T`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    nodes: Vec<f64>,
}

impl TimeGrid {
    pub fn uniform(horizon: f64, steps: usize) -> Result<Self> {
        if !(horizon > 0.0) && steps > 0 {
            return Err(Error::InvalidArgument(format!("horizon must be positive, got {horizon}")));
        }
        let nodes = (0..=steps).map(|i| horizon * i as f64 / steps.max(1) as f64).collect();
        Ok(TimeGrid { nodes })
    }

    pub fn from_nodes(nodes: Vec<f64>) -> Result<Self> {
        if nodes.first() != Some(&0.0) {
            return Err(Error::InvalidArgument("time grid must start at 0".into()));
        }
        if nodes.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidArgument("time nodes must be strictly increasing".into()));
        }
        Ok(TimeGrid { nodes })
    }

    pub fn steps(&self) -> usize {
        self.nodes.len() - 1
    }
    pub fn t(&self, i: usize) -> f64 {
        self.nodes[i]
    }
    pub fn dt(&self, i: usize) -> f64 {
        self.nodes[i + 1] - self.nodes[i]
    }
    pub fn max_dt(&self) -> f64 {
        (0..self.steps()).map(|i| self.dt(i)).fold(0.0, f64::max)
    }
    pub fn horizon(&self) -> f64 {
        *self.nodes.last().expect("grid has nodes")
    }
    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    /// Every step split into `factor` equal substeps.
    pub fn refine(&self, factor: usize) -> TimeGrid {
        let mut nodes = vec![0.0];
        for i in 0..self.steps() {
            for k in 1..=factor {
                nodes.push(self.t(i) + self.dt(i) * k as f64 / factor as f64);
            }
        }
        TimeGrid { nodes }
    }
}

pub type JumpMap = Arc<dyn Fn(&[f64], &[f64], &mut [f64]) + Send + Sync>;
pub type StateMap = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;
pub type ScalarMap = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
/// `(x, ε, out)` ↦ `∫_{|e|>ε} β(x,e) ν(de)`.
pub type CompensatorMap = Arc<dyn Fn(&[f64], f64, &mut [f64]) + Send + Sync>;

#[derive(Clone)]
pub struct JumpCoefficients {
    /// `β(x, e)` written into `out` (length q).
    pub beta: JumpMap,
    /// `D_eβ(x, 0)`, q×q row-major.
    pub d_beta0: Option<StateMap>,
    pub gamma: ScalarMap,
    pub d_gamma0: Option<Vec<f64>>,
    pub compensator: Option<CompensatorMap>,
    /// `β` does not depend on `x`.
    pub state_independent: bool,
}

impl JumpCoefficients {
    pub fn d_beta0_at(&self, x: &[f64], out: &mut [f64]) {
        if let Some(f) = &self.d_beta0 {
            f(x, out);
            return;
        }
        let q = x.len();
        let step = 1e-6 * (1.0 + x.iter().map(|v| v * v).sum::<f64>().sqrt());
        let mut e = vec![0.0; q];
        let (mut up, mut down) = (vec![0.0; q], vec![0.0; q]);
        for k in 0..q {
            e[k] = step;
            (self.beta)(x, &e, &mut up);
            e[k] = -step;
            (self.beta)(x, &e, &mut down);
            e[k] = 0.0;
            for r in 0..q {
                out[r * q + k] = (up[r] - down[r]) / (2.0 * step);
            }
        }
    }

    pub fn d_gamma0_vec(&self, q: usize) -> Vec<f64> {
        if let Some(v) = &self.d_gamma0 {
            return v.clone();
        }
        let step = 1e-6;
        let mut e = vec![0.0; q];
        (0..q)
            .map(|k| {
                e[k] = step;
                let up = (self.gamma)(&e);
                e[k] = -step;
                let down = (self.gamma)(&e);
                e[k] = 0.0;
                (up - down) / (2.0 * step)
            })
            .collect()
    }
}

/// Driver `f(t, x, y, z, p) = source(t, x) + core(t, x, y, z, p)`. The split
/// lets expensive state-only parts be evaluated once per path and step.
pub trait Driver: Send + Sync {
    fn source(&self, _t: f64, _x: &[f64]) -> Result<f64> {
        Ok(0.0)
    }

    fn has_source(&self) -> bool {
        false
    }

    fn core(&self, t: f64, x: &[f64], y: f64, z: &[f64], p: f64) -> f64;

    /// `(∂_y, ∂_p)` of the core, with `∂_z` written into `dz`.
    fn core_partials(&self, t: f64, x: &[f64], y: f64, z: &[f64], p: f64, dz: &mut [f64]) -> (f64, f64) {
        let h = 1e-6;
        let fy = (self.core(t, x, y + h, z, p) - self.core(t, x, y - h, z, p)) / (2.0 * h);
        let fp = (self.core(t, x, y, z, p + h) - self.core(t, x, y, z, p - h)) / (2.0 * h);
        let mut zz = z.to_vec();
        for k in 0..z.len() {
            zz[k] = z[k] + h;
            let up = self.core(t, x, y, &zz, p);
            zz[k] = z[k] - h;
            let down = self.core(t, x, y, &zz, p);
            zz[k] = z[k];
            dz[k] = (up - down) / (2.0 * h);
        }
        (fy, fp)
    }

    fn eval(&self, t: f64, x: &[f64], y: f64, z: &[f64], p: f64) -> Result<f64> {
        Ok(self.source(t, x)? + self.core(t, x, y, z, p))
    }

    /// Lipschitz constant in `y`, when known.
    fn lipschitz_y(&self) -> Option<f64> {
        None
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroDriver;

impl Driver for ZeroDriver {
    fn core(&self, _: f64, _: &[f64], _: f64, _: &[f64], _: f64) -> f64 {
        0.0
    }
    fn core_partials(&self, _: f64, _: &[f64], _: f64, _: &[f64], _: f64, dz: &mut [f64]) -> (f64, f64) {
        dz.fill(0.0);
        (0.0, 0.0)
    }
    fn lipschitz_y(&self) -> Option<f64> {
        Some(0.0)
    }
}

/// `f = a_y·y + a_z·z + a_p·p + c`.
#[derive(Debug, Clone, Default)]
pub struct LinearDriver {
    pub a_y: f64,
    pub a_z: Vec<f64>,
    pub a_p: f64,
    pub c: f64,
}

impl Driver for LinearDriver {
    fn core(&self, _: f64, _: &[f64], y: f64, z: &[f64], p: f64) -> f64 {
        self.a_y * y + self.a_z.iter().zip(z).map(|(a, b)| a * b).sum::<f64>() + self.a_p * p + self.c
    }
    fn core_partials(&self, _: f64, _: &[f64], _: f64, _: &[f64], _: f64, dz: &mut [f64]) -> (f64, f64) {
        for (k, v) in dz.iter_mut().enumerate() {
            *v = self.a_z.get(k).copied().unwrap_or(0.0);
        }
        (self.a_y, self.a_p)
    }
    fn lipschitz_y(&self) -> Option<f64> {
        Some(self.a_y.abs())
    }
}

/// How jumps move the forward state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ForwardJumps {
    /// Sampled jump sizes.
    #[default]
    Exact,
    /// Each jump replaced by its cell representative.
    Representatives,
}

#[derive(Clone)]
pub struct ModelCoefficients {
    pub q: usize,
    pub d: usize,
    pub drift: StateMap,
    /// `σ(x)`, q×d row-major.
    pub diffusion: StateMap,
    pub jump: JumpCoefficients,
    pub driver: Arc<dyn Driver>,
    pub terminal: ScalarMap,
    pub zeta: bool,
    pub forward_jumps: ForwardJumps,
}

impl ModelCoefficients {
    pub fn zeta_factor(&self) -> f64 {
        if self.zeta { 1.0 } else { 0.0 }
    }

    pub fn diffusion_at(&self, x: &[f64]) -> Vec<f64> {
        let mut s = vec![0.0; self.q * self.d];
        (self.diffusion)(x, &mut s);
        s
    }

    /// `∫_{E^ε} β(x,e) ν(de)`, exact when the model provides it, otherwise on
    /// the partition cells.
    pub fn compensator(&self, partition: &JumpPartition, x: &[f64], out: &mut [f64]) {
        if let Some(exact) = &self.jump.compensator {
            exact(x, partition.epsilon(), out);
            return;
        }
        out.fill(0.0);
        let mut b = vec![0.0; self.q];
        for (j, cell) in partition.cells().iter().enumerate() {
            (self.jump.beta)(x, partition.representative(j), &mut b);
            for (o, v) in out.iter_mut().zip(&b) {
                *o += v * cell.mass;
            }
        }
    }
}

/// All driving increments of a batch. Arrays are path-major: entry
/// `(p, i)` is step `i` of path `p`.
#[derive(Debug, Clone, PartialEq)]
pub struct IncrementBatch {
    pub batch: usize,
    pub steps: usize,
    pub d: usize,
    pub q: usize,
    pub dt: Vec<f64>,
    /// `λ_j` of the partition the jumps were binned into.
    pub masses: Vec<f64>,
    pub dw: Vec<f64>,
    pub dw_tilde: Vec<f64>,
    /// Offsets into `jump_cells`/`jump_sizes`, length `batch·steps + 1`.
    pub jump_offsets: Vec<usize>,
    pub jump_cells: Vec<u32>,
    /// Signed radius along the cell's axis.
    pub jump_sizes: Vec<f64>,
}

/// Increments of one path over one step.
#[derive(Debug, Clone, Copy)]
pub struct StepNoise<'a> {
    pub dt: f64,
    pub dw: &'a [f64],
    pub dw_tilde: &'a [f64],
    pub jump_cells: &'a [u32],
    pub jump_sizes: &'a [f64],
}

impl IncrementBatch {
    pub fn step(&self, path: usize, i: usize) -> StepNoise<'_> {
        let k = path * self.steps + i;
        let (a, b) = (self.jump_offsets[k], self.jump_offsets[k + 1]);
        StepNoise {
            dt: self.dt[i],
            dw: &self.dw[k * self.d..(k + 1) * self.d],
            dw_tilde: &self.dw_tilde[k * self.q..(k + 1) * self.q],
            jump_cells: &self.jump_cells[a..b],
            jump_sizes: &self.jump_sizes[a..b],
        }
    }

    /// `N_{i,j}` per cell.
    pub fn counts(&self, path: usize, i: usize) -> Vec<u32> {
        let mut c = vec![0; self.masses.len()];
        for &j in self.step(path, i).jump_cells {
            c[j as usize] += 1;
        }
        c
    }

    /// `Ñ_{i,j} = N_{i,j} − λ_j Δt_i`.
    pub fn compensated_counts(&self, path: usize, i: usize) -> Vec<f64> {
        let dt = self.dt[i];
        self.counts(path, i)
            .iter()
            .zip(&self.masses)
            .map(|(&n, &l)| n as f64 - l * dt)
            .collect()
    }
}

fn draw_path_noise<R: Rng>(
    rng: &mut R,
    grid: &TimeGrid,
    partition: &JumpPartition,
    d: usize,
    q: usize,
    dw: &mut Vec<f64>,
    dwt: &mut Vec<f64>,
    counts: &mut Vec<usize>,
    cells: &mut Vec<usize>,
    sizes: &mut Vec<f64>,
) {
    for i in 0..grid.steps() {
        let sd = grid.dt(i).sqrt();
        for _ in 0..d {
            dw.push(sd * rng.sample::<f64, _>(StandardNormal));
        }
        for _ in 0..q {
            dwt.push(sd * rng.sample::<f64, _>(StandardNormal));
        }
        counts.push(partition.sample_into(grid.dt(i), rng, cells, sizes));
    }
}

/// Draws `ΔW`, `ΔW̃` and the binned jumps for every path and step. Path `p`
/// uses its own stream, so the result does not depend on the thread count.
pub fn generate_increments(grid: &TimeGrid, partition: &JumpPartition, d: usize, q: usize, batch: usize, seed: u64) -> Result<IncrementBatch> {
    if batch == 0 {
        return Err(Error::InvalidArgument("batch must be at least 1".into()));
    }
    if partition.dim() != q {
        return Err(Error::Dimension(format!("partition has dimension {}, model has q = {q}", partition.dim())));
    }
    struct PathNoise {
        dw: Vec<f64>,
        dwt: Vec<f64>,
        counts: Vec<usize>,
        cells: Vec<usize>,
        sizes: Vec<f64>,
    }
    let per_path: Vec<PathNoise> = (0..batch)
        .into_par_iter()
        .map(|p| {
            let mut rng = stream(seed, Purpose::Paths, p as u64);
            let n = grid.steps();
            let mut pn = PathNoise {
                dw: Vec::with_capacity(n * d),
                dwt: Vec::with_capacity(n * q),
                counts: Vec::with_capacity(n),
                cells: Vec::new(),
                sizes: Vec::new(),
            };
            draw_path_noise(&mut rng, grid, partition, d, q, &mut pn.dw, &mut pn.dwt, &mut pn.counts, &mut pn.cells, &mut pn.sizes);
            pn
        })
        .collect();
    let steps = grid.steps();
    let mut inc = IncrementBatch {
        batch,
        steps,
        d,
        q,
        dt: (0..steps).map(|i| grid.dt(i)).collect(),
        masses: partition.cells().iter().map(|c| c.mass).collect(),
        dw: Vec::with_capacity(batch * steps * d),
        dw_tilde: Vec::with_capacity(batch * steps * q),
        jump_offsets: Vec::with_capacity(batch * steps + 1),
        jump_cells: Vec::new(),
        jump_sizes: Vec::new(),
    };
    inc.jump_offsets.push(0);
    for pn in per_path {
        inc.dw.extend_from_slice(&pn.dw);
        inc.dw_tilde.extend_from_slice(&pn.dwt);
        let mut at = *inc.jump_offsets.last().expect("offsets start at 0");
        for c in pn.counts {
            at += c;
            inc.jump_offsets.push(at);
        }
        inc.jump_cells.extend(pn.cells.iter().map(|&c| c as u32));
        inc.jump_sizes.extend_from_slice(&pn.sizes);
    }
    Ok(inc)
}

/// Per-step quantities shared by all Euler steps of a simulation.
pub struct EulerContext<'a> {
    pub coeffs: &'a ModelCoefficients,
    pub partition: &'a JumpPartition,
    /// `Σ_ε^{1/2}`, q×q row-major.
    pub sigma_sqrt: &'a [f64],
    /// Compensator, when it does not depend on the state.
    pub fixed_compensator: Option<Vec<f64>>,
}

impl<'a> EulerContext<'a> {
    pub fn new(coeffs: &'a ModelCoefficients, partition: &'a JumpPartition, sigma_sqrt: &'a [f64]) -> Self {
        let fixed_compensator = coeffs.jump.state_independent.then(|| {
            let mut c = vec![0.0; coeffs.q];
            coeffs.compensator(partition, &vec![0.0; coeffs.q], &mut c);
            c
        });
        EulerContext { coeffs, partition, sigma_sqrt, fixed_compensator }
    }
}

/// `x' = x + bΔt + σΔW + ζ D_eβ(x,0) Σ_ε^{1/2} ΔW̃ + Σ_jumps β(x,e) − Δt ∫_{E^ε} β(x,e) ν(de)`.
pub fn euler_step(ctx: &EulerContext<'_>, x: &[f64], noise: &StepNoise<'_>, out: &mut [f64]) {
    let c = ctx.coeffs;
    let (q, d) = (c.q, c.d);
    let mut buf = vec![0.0; q * d.max(q)];
    let mut v = vec![0.0; q];
    out.copy_from_slice(x);

    (c.drift)(x, &mut v);
    for k in 0..q {
        out[k] += v[k] * noise.dt;
    }
    (c.diffusion)(x, &mut buf[..q * d]);
    for r in 0..q {
        out[r] += (0..d).map(|k| buf[r * d + k] * noise.dw[k]).sum::<f64>();
    }
    if c.zeta {
        let g: Vec<f64> = (0..q)
            .map(|r| (0..q).map(|k| ctx.sigma_sqrt[r * q + k] * noise.dw_tilde[k]).sum())
            .collect();
        c.jump.d_beta0_at(x, &mut buf[..q * q]);
        for r in 0..q {
            out[r] += (0..q).map(|k| buf[r * q + k] * g[k]).sum::<f64>();
        }
    }
    let mut e = vec![0.0; q];
    for (&cell, &size) in noise.jump_cells.iter().zip(noise.jump_sizes) {
        let jump_vec: &[f64] = match c.forward_jumps {
            ForwardJumps::Exact => {
                e.fill(0.0);
                e[ctx.partition.cells()[cell as usize].axis] = size;
                &e
            }
            ForwardJumps::Representatives => ctx.partition.representative(cell as usize),
        };
        (c.jump.beta)(x, jump_vec, &mut v);
        for k in 0..q {
            out[k] += v[k];
        }
    }
    match &ctx.fixed_compensator {
        Some(comp) => {
            for k in 0..q {
                out[k] -= noise.dt * comp[k];
            }
        }
        None => {
            c.compensator(ctx.partition, x, &mut v);
            for k in 0..q {
                out[k] -= noise.dt * v[k];
            }
        }
    }
}

/// Simulated states plus the increments that generated them.
#[derive(Debug, Clone, PartialEq)]
pub struct PathBatch {
    pub grid: TimeGrid,
    pub q: usize,
    /// `batch × (N+1) × q`, path-major.
    pub states: Vec<f64>,
    pub increments: IncrementBatch,
    pub valid: Vec<bool>,
    pub seed: u64,
    pub fingerprint: String,
    /// `Σ_ε^{1/2}` used by the simulation, q×q row-major.
    pub sigma_sqrt: Vec<f64>,
}

impl PathBatch {
    pub fn batch(&self) -> usize {
        self.valid.len()
    }
    pub fn steps(&self) -> usize {
        self.grid.steps()
    }
    pub fn state(&self, path: usize, i: usize) -> &[f64] {
        let k = (path * (self.steps() + 1) + i) * self.q;
        &self.states[k..k + self.q]
    }
    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    /// SHA-256 over the grid, states and all increments.
    pub fn compute_fingerprint(&self) -> String {
        let mut h = Sha256::new();
        let floats = |h: &mut Sha256, v: &[f64]| v.iter().for_each(|x| h.update(x.to_le_bytes()));
        floats(&mut h, self.grid.nodes());
        floats(&mut h, &self.states);
        let inc = &self.increments;
        floats(&mut h, &inc.dw);
        floats(&mut h, &inc.dw_tilde);
        floats(&mut h, &inc.jump_sizes);
        inc.jump_cells.iter().for_each(|c| h.update(c.to_le_bytes()));
        inc.jump_offsets.iter().for_each(|o| h.update((*o as u64).to_le_bytes()));
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Row-major `Σ_ε^{1/2}` for the partition's cutoff.
pub fn sigma_sqrt_for(partition: &JumpPartition) -> Result<Vec<f64>> {
    let s = psd_sqrt(&partition.small_jump_covariance()?);
    let q = partition.dim();
    Ok((0..q * q).map(|k| s[(k / q, k % q)]).collect())
}

/// Runs the Euler scheme on given increments.
pub fn simulate_with_increments(
    coeffs: &ModelCoefficients,
    grid: &TimeGrid,
    partition: &JumpPartition,
    x0: &[f64],
    increments: IncrementBatch,
    seed: u64,
) -> Result<PathBatch> {
    let q = coeffs.q;
    if x0.len() != q || partition.dim() != q || increments.q != q || increments.d != coeffs.d {
        return Err(Error::Dimension(format!(
            "inconsistent dimensions: q={q}, d={}, x0 has {}, partition has {}",
            coeffs.d,
            x0.len(),
            partition.dim()
        )));
    }
    if increments.steps != grid.steps() {
        return Err(Error::Dimension("increments and time grid disagree on N".into()));
    }
    let sigma_sqrt = sigma_sqrt_for(partition)?;
    let ctx = EulerContext::new(coeffs, partition, &sigma_sqrt);
    let n = grid.steps();
    let batch = increments.batch;
    let rows: Vec<(Vec<f64>, bool)> = (0..batch)
        .into_par_iter()
        .map(|p| {
            let mut row = Vec::with_capacity((n + 1) * q);
            row.extend_from_slice(x0);
            let mut next = vec![0.0; q];
            let mut ok = true;
            for i in 0..n {
                if ok {
                    euler_step(&ctx, &row[i * q..(i + 1) * q], &increments.step(p, i), &mut next);
                    ok = next.iter().all(|v| v.is_finite());
                }
                if ok {
                    row.extend_from_slice(&next);
                } else {
                    row.extend(std::iter::repeat_n(f64::NAN, q));
                }
            }
            (row, ok)
        })
        .collect();
    let invalid = rows.iter().filter(|(_, ok)| !ok).count();
    if invalid as f64 > 1e-3 * batch as f64 {
        return Err(Error::InvalidPaths { invalid, total: batch });
    }
    let mut states = Vec::with_capacity(batch * (n + 1) * q);
    let mut valid = Vec::with_capacity(batch);
    for (row, ok) in rows {
        states.extend_from_slice(&row);
        valid.push(ok);
    }
    let mut paths = PathBatch {
        grid: grid.clone(),
        q,
        states,
        increments,
        valid,
        seed,
        fingerprint: String::new(),
        sigma_sqrt,
    };
    paths.fingerprint = paths.compute_fingerprint();
    Ok(paths)
}

/// Draws increments from `seed` and simulates the forward scheme.
pub fn simulate_forward(
    coeffs: &ModelCoefficients,
    grid: &TimeGrid,
    partition: &JumpPartition,
    x0: &[f64],
    batch: usize,
    seed: u64,
) -> Result<PathBatch> {
    let inc = generate_increments(grid, partition, coeffs.d, coeffs.q, batch, seed)?;
    simulate_with_increments(coeffs, grid, partition, x0, inc, seed)
}
