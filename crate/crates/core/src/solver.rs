//! Multi-step deep BSDE solver: per-step networks for `(Y, Z, L, U)`, the
//! residual functional `F`, the step loss with frozen tail, and the backward
//! training loop.

use ndarray::{s, Array2, ArrayView2};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::levy::JumpPartition;
use crate::nn::{AdamConfig, AdamState, Mlp, MlpGrad};
use crate::paths::{simulate_forward, ModelCoefficients, PathBatch, ScalarMap, TimeGrid};
use crate::rng::{stream, subseed, Purpose};
use crate::stats::Estimate;

#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    pub batch: usize,
    /// Epochs for the first trained step (cold start).
    pub epochs: usize,
    /// Epochs for warm-started steps; `None` uses `epochs`.
    pub warm_epochs: Option<usize>,
    pub minibatch: usize,
    pub lr: f64,
    pub validation_fraction: f64,
    /// Draw a fresh path batch every epoch instead of a fixed cloud.
    pub resample: bool,
    pub shard_size: usize,
    pub hidden_layers: usize,
    /// Hidden width; `None` means `20 + q`.
    pub width: Option<usize>,
    pub warm_start: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            batch: 8192,
            epochs: 200,
            warm_epochs: None,
            minibatch: 512,
            lr: 3e-3,
            validation_fraction: 0.1,
            resample: false,
            shard_size: 128,
            hidden_layers: 2,
            width: None,
            warm_start: true,
        }
    }
}

impl SolverConfig {
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(format!("{self:?}").as_bytes());
        hex_digest(h)
    }
}

fn hex_digest(h: Sha256) -> String {
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// The four regressors of one time step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepNetworks {
    pub y: Mlp,
    pub z: Mlp,
    /// Present exactly when ζ = 1.
    pub w: Option<Mlp>,
    /// Input `(x, e)`.
    pub u: Mlp,
}

impl StepNetworks {
    pub fn widths(q: usize, d: usize, hidden_layers: usize, width: usize) -> [Vec<usize>; 4] {
        let make = |n_in: usize, n_out: usize| {
            let mut w = vec![n_in];
            w.extend(std::iter::repeat_n(width, hidden_layers));
            w.push(n_out);
            w
        };
        [make(q, 1), make(q, d), make(q, q), make(2 * q, 1)]
    }

    pub fn he_init(q: usize, d: usize, zeta: bool, hidden_layers: usize, width: usize, seed: u64, step: usize) -> Result<Self> {
        let [wy, wz, ww, wu] = Self::widths(q, d, hidden_layers, width);
        let mut rng = stream(seed, Purpose::NetInit, step as u64);
        let y = Mlp::he_init(&wy, &mut rng)?;
        let z = Mlp::he_init(&wz, &mut rng)?;
        let w = if zeta { Some(Mlp::he_init(&ww, &mut rng)?) } else { None };
        let u = Mlp::he_init(&wu, &mut rng)?;
        Ok(StepNetworks { y, z, w, u })
    }

    pub fn zeros(q: usize, d: usize, zeta: bool, hidden_layers: usize, width: usize) -> Result<Self> {
        let [wy, wz, ww, wu] = Self::widths(q, d, hidden_layers, width);
        Ok(StepNetworks {
            y: Mlp::zeros(&wy)?,
            z: Mlp::zeros(&wz)?,
            w: if zeta { Some(Mlp::zeros(&ww)?) } else { None },
            u: Mlp::zeros(&wu)?,
        })
    }

    fn nets(&self) -> Vec<&Mlp> {
        let mut v = vec![&self.y, &self.z];
        if let Some(w) = &self.w {
            v.push(w);
        }
        v.push(&self.u);
        v
    }

    fn nets_mut(&mut self) -> Vec<&mut Mlp> {
        let mut v = vec![&mut self.y, &mut self.z];
        if let Some(w) = &mut self.w {
            v.push(w);
        }
        v.push(&mut self.u);
        v
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.nets().iter().flat_map(|n| n.to_flat()).collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        let mut at = 0;
        for net in self.nets_mut() {
            let n = net.param_count();
            let chunk = flat.get(at..at + n).ok_or_else(|| Error::Format("parameter vector too short".into()))?;
            net.set_flat(chunk)?;
            at += n;
        }
        if at != flat.len() {
            return Err(Error::Format("parameter vector too long".into()));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.nets().iter().map(|n| n.param_count()).sum()
    }

    /// `U(x, e_j)` for every cell representative.
    pub fn u_at_representatives(&self, x: &[f64], partition: &JumpPartition) -> Vec<f64> {
        let q = x.len();
        let cells = partition.len();
        let mut input = Array2::zeros((cells, 2 * q));
        for j in 0..cells {
            input.slice_mut(s![j, ..q]).assign(&ndarray::ArrayView1::from(x));
            input.slice_mut(s![j, q..]).assign(&ndarray::ArrayView1::from(partition.representative(j)));
        }
        self.u.forward(input.view()).column(0).to_vec()
    }
}

/// Step-independent quantities entering `F`.
#[derive(Debug, Clone)]
pub struct JumpQuadrature {
    /// `λ_j`
    pub masses: Vec<f64>,
    /// `γ_j λ_j`
    pub gamma_weights: Vec<f64>,
    /// `Dγ(0)ᵀ Σ_ε^{1/2}`
    pub c_w: Vec<f64>,
    /// `(x, e_j)` input columns for `e`.
    pub representatives: Vec<f64>,
}

impl JumpQuadrature {
    pub fn new(coeffs: &ModelCoefficients, partition: &JumpPartition, sigma_sqrt: &[f64]) -> Self {
        let q = coeffs.q;
        let dg = coeffs.jump.d_gamma0_vec(q);
        let c_w = (0..q).map(|k| (0..q).map(|r| dg[r] * sigma_sqrt[r * q + k]).sum()).collect();
        JumpQuadrature {
            masses: partition.cells().iter().map(|c| c.mass).collect(),
            gamma_weights: partition.cells().iter().map(|c| c.gamma_avg * c.mass).collect(),
            c_w,
            representatives: partition.representatives_flat().to_vec(),
        }
    }

    pub fn cells(&self) -> usize {
        self.masses.len()
    }
}

/// Frozen part of the step-`i` residual, per path:
/// `g(X_N) + Σ_{l>i} F(t_l, X_l, frozen nets)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualTail {
    pub step: usize,
    pub values: Vec<f64>,
}

impl ResidualTail {
    pub fn terminal(coeffs: &ModelCoefficients, paths: &PathBatch) -> Self {
        let n = paths.steps();
        let values = (0..paths.batch())
            .map(|p| if paths.valid[p] { (coeffs.terminal)(paths.state(p, n)) } else { f64::NAN })
            .collect();
        ResidualTail { step: n.saturating_sub(1), values }
    }

    /// Tail for step `i − 1` from the tail of step `i` and the frozen `F_i`.
    pub fn advance(&self, f_values: &[f64]) -> ResidualTail {
        ResidualTail {
            step: self.step.saturating_sub(1),
            values: self.values.iter().zip(f_values).map(|(a, b)| a + b).collect(),
        }
    }
}

/// Dense per-step data for the valid paths.
struct StepData {
    step: usize,
    t: f64,
    dt: f64,
    x: Array2<f64>,
    dw: Array2<f64>,
    dwt: Array2<f64>,
    /// `Ñ_j` per path and cell.
    ncomp: Array2<f64>,
    source: Vec<f64>,
    tail: Vec<f64>,
}

/// Driver source `h(t_i, X_i)` for every path and step, `batch × N`.
pub fn precompute_source(coeffs: &ModelCoefficients, paths: &PathBatch) -> Result<Vec<f64>> {
    let n = paths.steps();
    if !coeffs.driver.has_source() {
        return Ok(vec![0.0; paths.batch() * n]);
    }
    let rows: Vec<Result<Vec<f64>>> = (0..paths.batch())
        .into_par_iter()
        .map(|p| {
            (0..n)
                .map(|i| if paths.valid[p] { coeffs.driver.source(paths.grid.t(i), paths.state(p, i)) } else { Ok(0.0) })
                .collect()
        })
        .collect();
    let mut out = Vec::with_capacity(paths.batch() * n);
    for r in rows {
        out.extend(r?);
    }
    Ok(out)
}

fn step_data(paths: &PathBatch, rows: &[usize], step: usize, source: &[f64], tail: &[f64]) -> StepData {
    let (q, d, n) = (paths.q, paths.increments.d, paths.steps());
    let cells = paths.increments.masses.len();
    let m = rows.len();
    let dt = paths.grid.dt(step);
    let mut data = StepData {
        step,
        t: paths.grid.t(step),
        dt,
        x: Array2::zeros((m, q)),
        dw: Array2::zeros((m, d)),
        dwt: Array2::zeros((m, q)),
        ncomp: Array2::zeros((m, cells)),
        source: Vec::with_capacity(m),
        tail: Vec::with_capacity(m),
    };
    for (r, &p) in rows.iter().enumerate() {
        let noise = paths.increments.step(p, step);
        for k in 0..q {
            data.x[(r, k)] = paths.state(p, step)[k];
            data.dwt[(r, k)] = noise.dw_tilde[k];
        }
        for k in 0..d {
            data.dw[(r, k)] = noise.dw[k];
        }
        for j in 0..cells {
            data.ncomp[(r, j)] = -paths.increments.masses[j] * dt;
        }
        for &j in noise.jump_cells {
            data.ncomp[(r, j as usize)] += 1.0;
        }
        data.source.push(source[p * n + step]);
        data.tail.push(tail[p]);
    }
    data
}

/// Network outputs and `F` for a block of rows.
struct Evaluated {
    y: Array2<f64>,
    z: Array2<f64>,
    w: Option<Array2<f64>>,
    p: Vec<f64>,
    f: Vec<f64>,
}

struct Problem<'a> {
    coeffs: &'a ModelCoefficients,
    quad: &'a JumpQuadrature,
    data: StepData,
}

impl Problem<'_> {
    fn u_input(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        let q = self.coeffs.q;
        let cells = self.quad.cells();
        let mut input = Array2::zeros((x.nrows() * cells, 2 * q));
        for r in 0..x.nrows() {
            for j in 0..cells {
                let row = r * cells + j;
                for k in 0..q {
                    input[(row, k)] = x[(r, k)];
                    input[(row, q + k)] = self.quad.representatives[j * q + k];
                }
            }
        }
        input
    }

    /// Outputs and `F` on rows `lo..hi` of the step data.
    fn evaluate(&self, nets: &StepNetworks, lo: usize, hi: usize, caches: bool) -> (Evaluated, Option<[Option<crate::nn::ForwardCache>; 4]>) {
        let q = self.coeffs.q;
        let cells = self.quad.cells();
        let x = self.data.x.slice(s![lo..hi, ..]);
        let uin = self.u_input(x);
        let (y, z, w, u, cache) = if caches {
            let cy = nets.y.forward_cached(x);
            let cz = nets.z.forward_cached(x);
            let cw = nets.w.as_ref().map(|w| w.forward_cached(x));
            let cu = nets.u.forward_cached(uin.view());
            let (y, z, u) = (cy.output().clone(), cz.output().clone(), cu.output().clone());
            let w = cw.as_ref().map(|c| c.output().clone());
            (y, z, w, u, Some([Some(cy), Some(cz), cw, Some(cu)]))
        } else {
            (nets.y.forward(x), nets.z.forward(x), nets.w.as_ref().map(|w| w.forward(x)), nets.u.forward(uin.view()), None)
        };
        let u = u.into_shape_with_order((hi - lo, cells)).expect("one U value per row and cell");
        let zeta = self.coeffs.zeta_factor();
        let dt = self.data.dt;
        let mut pv = Vec::with_capacity(hi - lo);
        let mut fv = Vec::with_capacity(hi - lo);
        for r in 0..hi - lo {
            let g = lo + r;
            let mut p: f64 = (0..cells).map(|j| u[(r, j)] * self.quad.gamma_weights[j]).sum();
            let mut pair = 0.0;
            if let Some(w) = &w {
                p += zeta * (0..q).map(|k| self.quad.c_w[k] * w[(r, k)]).sum::<f64>();
                pair += zeta * (0..q).map(|k| w[(r, k)] * self.data.dwt[(g, k)]).sum::<f64>();
            }
            let zrow = z.row(r);
            pair += zrow.iter().zip(self.data.dw.row(g)).map(|(a, b)| a * b).sum::<f64>();
            pair += (0..cells).map(|j| u[(r, j)] * self.data.ncomp[(g, j)]).sum::<f64>();
            let xr = self.data.x.row(g);
            let xs = xr.as_slice().expect("row-major state");
            let f = self.data.source[g]
                + self.coeffs.driver.core(self.data.t, xs, y[(r, 0)], zrow.as_slice().expect("row-major"), p);
            pv.push(p);
            fv.push(f * dt - pair);
        }
        (Evaluated { y, z, w, p: pv, f: fv }, cache)
    }

    fn residuals(&self, nets: &StepNetworks, lo: usize, hi: usize) -> Vec<f64> {
        let (ev, _) = self.evaluate(nets, lo, hi, false);
        (0..hi - lo).map(|r| ev.y[(r, 0)] - self.data.tail[lo + r] - ev.f[r]).collect()
    }

    fn f_values(&self, nets: &StepNetworks) -> Vec<f64> {
        self.evaluate(nets, 0, self.data.x.nrows(), false).0.f
    }

    /// Sum of squared residuals over rows `lo..hi` and the gradient of
    /// `Σ r² · scale`.
    fn loss_grad(&self, nets: &StepNetworks, lo: usize, hi: usize, scale: f64) -> (f64, Vec<MlpGrad>) {
        let q = self.coeffs.q;
        let d = self.coeffs.d;
        let cells = self.quad.cells();
        let zeta = self.coeffs.zeta_factor();
        let dt = self.data.dt;
        let (ev, caches) = self.evaluate(nets, lo, hi, true);
        let [cy, cz, cw, cu] = caches.expect("caches requested");
        let b = hi - lo;
        let mut gy = Array2::zeros((b, 1));
        let mut gz = Array2::zeros((b, d));
        let mut gw = Array2::zeros((b, q));
        let mut gu = Array2::zeros((b * cells, 1));
        let mut sum_sq = 0.0;
        let mut fz = vec![0.0; d];
        for r in 0..b {
            let g = lo + r;
            let res = ev.y[(r, 0)] - self.data.tail[g] - ev.f[r];
            sum_sq += res * res;
            let gr = 2.0 * res * scale;
            let xr = self.data.x.row(g);
            let zrow = ev.z.row(r);
            let (fy, fp) = self.coeffs.driver.core_partials(
                self.data.t,
                xr.as_slice().expect("row-major"),
                ev.y[(r, 0)],
                zrow.as_slice().expect("row-major"),
                ev.p[r],
                &mut fz,
            );
            gy[(r, 0)] = gr * (1.0 - fy * dt);
            for k in 0..d {
                gz[(r, k)] = gr * (self.data.dw[(g, k)] - fz[k] * dt);
            }
            if ev.w.is_some() {
                for k in 0..q {
                    gw[(r, k)] = gr * zeta * (self.data.dwt[(g, k)] - fp * dt * self.quad.c_w[k]);
                }
            }
            for j in 0..cells {
                gu[(r * cells + j, 0)] = gr * (self.data.ncomp[(g, j)] - fp * dt * self.quad.gamma_weights[j]);
            }
        }
        let mut grads = vec![
            nets.y.backward(cy.as_ref().expect("y cache"), gy.view()).0,
            nets.z.backward(cz.as_ref().expect("z cache"), gz.view()).0,
        ];
        if let (Some(w), Some(c)) = (&nets.w, &cw) {
            grads.push(w.backward(c, gw.view()).0);
        }
        grads.push(nets.u.backward(cu.as_ref().expect("u cache"), gu.view()).0);
        (sum_sq, grads)
    }

    /// Mean squared residual and its gradient over `rows`, reduced over
    /// fixed-size shards in index order.
    fn minibatch(&self, nets: &StepNetworks, lo: usize, hi: usize, shard: usize) -> (f64, Vec<f64>) {
        let scale = 1.0 / (hi - lo) as f64;
        let bounds: Vec<(usize, usize)> = (lo..hi).step_by(shard).map(|a| (a, (a + shard).min(hi))).collect();
        let parts: Vec<(f64, Vec<MlpGrad>)> = bounds.par_iter().map(|&(a, b)| self.loss_grad(nets, a, b, scale)).collect();
        let mut total = 0.0;
        let mut acc: Option<Vec<MlpGrad>> = None;
        for (l, g) in parts {
            total += l;
            match &mut acc {
                None => acc = Some(g),
                Some(a) => a.iter_mut().zip(&g).for_each(|(x, y)| x.add_assign(y)),
            }
        }
        let flat = acc.expect("non-empty minibatch").iter().flat_map(|g| g.to_flat()).collect();
        (total * scale, flat)
    }

    fn mean_loss(&self, nets: &StepNetworks, lo: usize, hi: usize) -> f64 {
        if hi <= lo {
            return f64::NAN;
        }
        let r = self.residuals(nets, lo, hi);
        r.iter().map(|v| v * v).sum::<f64>() / r.len() as f64
    }
}

/// `F(t_i, X_i, nets)` for every path (NaN for invalid paths).
pub fn residual_f(
    step: usize,
    paths: &PathBatch,
    nets: &StepNetworks,
    coeffs: &ModelCoefficients,
    quad: &JumpQuadrature,
    source: &[f64],
) -> Vec<f64> {
    let rows: Vec<usize> = (0..paths.batch()).filter(|&p| paths.valid[p]).collect();
    let zeros = vec![0.0; paths.batch()];
    let problem = Problem { coeffs, quad, data: step_data(paths, &rows, step, source, &zeros) };
    let vals = problem.f_values(nets);
    let mut out = vec![f64::NAN; paths.batch()];
    for (r, p) in rows.into_iter().enumerate() {
        out[p] = vals[r];
    }
    out
}

/// Empirical `ℛ_i` over the valid paths.
pub fn loss_ri(
    step: usize,
    paths: &PathBatch,
    tail: &ResidualTail,
    nets: &StepNetworks,
    coeffs: &ModelCoefficients,
    quad: &JumpQuadrature,
    source: &[f64],
) -> Result<f64> {
    if tail.step != step {
        return Err(Error::Contract(format!("tail belongs to step {}, loss requested for step {step}", tail.step)));
    }
    let rows: Vec<usize> = (0..paths.batch()).filter(|&p| paths.valid[p]).collect();
    let problem = Problem { coeffs, quad, data: step_data(paths, &rows, step, source, &tail.values) };
    Ok(problem.mean_loss(nets, 0, rows.len()))
}

/// Loss trace of one trained step.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct StepHistory {
    pub train: Vec<f64>,
    pub validation: Vec<f64>,
    /// Epoch whose parameters were kept (0 = initialisation).
    pub best_epoch: usize,
}

struct Split {
    train: Vec<usize>,
    validation: Vec<usize>,
}

fn split_paths(paths: &PathBatch, fraction: f64, seed: u64) -> Split {
    let mut rows: Vec<usize> = (0..paths.batch()).filter(|&p| paths.valid[p]).collect();
    rows.shuffle(&mut stream(seed, Purpose::Split, 0));
    let n_val = ((rows.len() as f64) * fraction).floor() as usize;
    let validation = rows.split_off(rows.len() - n_val);
    Split { train: rows, validation }
}

fn cosine_lr(base: f64, k: usize, total: usize) -> f64 {
    if total <= 1 {
        return base;
    }
    0.5 * base * (1.0 + (std::f64::consts::PI * k as f64 / (total - 1) as f64).cos())
}

/// Adam state carried across the epochs of one time step.
struct Trainer {
    adam: AdamState,
    updates: usize,
    total_updates: usize,
    lr: f64,
    minibatch: usize,
    shard: usize,
    last_finite: f64,
}

impl Trainer {
    fn new(nets: &StepNetworks, config: &SolverConfig, n_train: usize, epochs: usize) -> Self {
        let minibatch = config.minibatch.max(1).min(n_train.max(1));
        Trainer {
            adam: AdamState::new(AdamConfig { lr: config.lr, ..Default::default() }, nets.param_count()),
            updates: 0,
            total_updates: epochs * n_train.div_ceil(minibatch),
            lr: config.lr,
            minibatch,
            shard: config.shard_size.max(1),
            last_finite: f64::NAN,
        }
    }

    /// One pass over the first `n_train` rows in the order given; returns
    /// the mean minibatch loss.
    fn epoch(&mut self, problem: &Problem<'_>, n_train: usize, order: &[usize], nets: &mut StepNetworks) -> Result<f64> {
        let permuted = Problem { coeffs: problem.coeffs, quad: problem.quad, data: permute_rows(&problem.data, order) };
        let mut epoch_loss = 0.0;
        for lo in (0..n_train).step_by(self.minibatch) {
            let hi = (lo + self.minibatch).min(n_train);
            let (loss, grad) = permuted.minibatch(nets, lo, hi, self.shard);
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Divergence { step: problem.data.step, last_finite_loss: self.last_finite });
            }
            self.last_finite = loss;
            epoch_loss += loss * (hi - lo) as f64;
            let mut flat = nets.to_flat();
            let lr = cosine_lr(self.lr, self.updates, self.total_updates);
            self.adam.update(&mut flat, &grad, lr)?;
            nets.set_flat(&flat)?;
            self.updates += 1;
        }
        Ok(epoch_loss / n_train.max(1) as f64)
    }
}

/// Trains the step-`i` networks on a fixed path cloud and returns the
/// parameters with the lowest validation loss.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    step: usize,
    paths: &PathBatch,
    tail: &ResidualTail,
    init: StepNetworks,
    epochs: usize,
    coeffs: &ModelCoefficients,
    quad: &JumpQuadrature,
    source: &[f64],
    config: &SolverConfig,
    seed: u64,
) -> Result<(StepNetworks, StepHistory)> {
    if tail.step != step {
        return Err(Error::Contract(format!("tail belongs to step {}, training step {step}", tail.step)));
    }
    let split = split_paths(paths, config.validation_fraction, seed);
    let n_train = split.train.len();
    let mut rows = split.train;
    rows.extend_from_slice(&split.validation);
    let n_all = rows.len();
    let problem = Problem { coeffs, quad, data: step_data(paths, &rows, step, source, &tail.values) };
    let select = |nets: &StepNetworks| {
        if n_all > n_train { problem.mean_loss(nets, n_train, n_all) } else { problem.mean_loss(nets, 0, n_train) }
    };

    let mut nets = init;
    let mut best = nets.clone();
    let mut history = StepHistory::default();
    let mut best_val = select(&nets);
    history.validation.push(best_val);
    history.train.push(problem.mean_loss(&nets, 0, n_train));

    let mut trainer = Trainer::new(&nets, config, n_train, epochs);
    trainer.last_finite = history.train[0];
    let mut shuffle_rng = stream(seed, Purpose::Shuffle, step as u64);
    let mut order: Vec<usize> = (0..n_train).collect();
    for _ in 0..epochs {
        order.shuffle(&mut shuffle_rng);
        history.train.push(trainer.epoch(&problem, n_train, &order, &mut nets)?);
        let v = select(&nets);
        if !v.is_finite() {
            return Err(Error::Divergence { step, last_finite_loss: trainer.last_finite });
        }
        history.validation.push(v);
        if v < best_val {
            best_val = v;
            best = nets.clone();
            history.best_epoch = history.validation.len() - 1;
        }
    }
    Ok((best, history))
}

fn permute_rows(data: &StepData, order: &[usize]) -> StepData {
    let n_total = data.x.nrows();
    let mut idx: Vec<usize> = order.to_vec();
    idx.extend(order.len()..n_total);
    let pick = |a: &Array2<f64>| a.select(ndarray::Axis(0), &idx);
    StepData {
        step: data.step,
        t: data.t,
        dt: data.dt,
        x: pick(&data.x),
        dw: pick(&data.dw),
        dwt: pick(&data.dwt),
        ncomp: pick(&data.ncomp),
        source: idx.iter().map(|&i| data.source[i]).collect(),
        tail: idx.iter().map(|&i| data.tail[i]).collect(),
    }
}

/// Network outputs at one state.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub y: f64,
    pub z: Option<Vec<f64>>,
    pub l: Option<Vec<f64>>,
    /// `U(x, e_j)` at every representative.
    pub u: Option<Vec<f64>>,
}

#[derive(Clone)]
pub struct TrainedSolution {
    pub grid: TimeGrid,
    /// Networks for steps `0..N`.
    pub steps: Vec<StepNetworks>,
    pub history: Vec<StepHistory>,
    /// Final `ℛ_i` on all valid paths.
    pub final_losses: Vec<f64>,
    pub config_fingerprint: String,
    pub x0: Vec<f64>,
    pub y0: f64,
    /// Standard deviation of the step-0 residual over `√M`.
    pub y0_std_error: f64,
    pub z0: Vec<f64>,
    terminal: ScalarMap,
    partition: JumpPartition,
}

impl std::fmt::Debug for TrainedSolution {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TrainedSolution")
            .field("steps", &self.steps.len())
            .field("y0", &self.y0)
            .field("z0", &self.z0)
            .field("fingerprint", &self.fingerprint())
            .finish()
    }
}

impl TrainedSolution {
    /// SHA-256 over every network parameter and the config fingerprint.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.config_fingerprint.as_bytes());
        for s in &self.steps {
            for v in s.to_flat() {
                h.update(v.to_le_bytes());
            }
        }
        hex_digest(h)
    }

    pub fn partition(&self) -> &JumpPartition {
        &self.partition
    }

    pub fn evaluate(&self, i: usize, x: &[f64]) -> Result<Evaluation> {
        let n = self.steps.len();
        if i > n {
            return Err(Error::IndexOutOfRange { index: i, last: n });
        }
        if i == n {
            return Ok(Evaluation { y: (self.terminal)(x), z: None, l: None, u: None });
        }
        let nets = &self.steps[i];
        Ok(Evaluation {
            y: nets.y.eval(x)?[0],
            z: Some(nets.z.eval(x)?),
            l: nets.w.as_ref().map(|w| w.eval(x)).transpose()?,
            u: Some(nets.u_at_representatives(x, &self.partition)),
        })
    }

    pub fn from_parts(
        grid: TimeGrid,
        steps: Vec<StepNetworks>,
        coeffs: &ModelCoefficients,
        partition: &JumpPartition,
        x0: &[f64],
    ) -> Result<Self> {
        let mut s = TrainedSolution {
            grid,
            steps,
            history: Vec::new(),
            final_losses: Vec::new(),
            config_fingerprint: String::new(),
            x0: x0.to_vec(),
            y0: f64::NAN,
            y0_std_error: f64::NAN,
            z0: Vec::new(),
            terminal: coeffs.terminal.clone(),
            partition: partition.clone(),
        };
        if !s.steps.is_empty() {
            let e = s.evaluate(0, x0)?;
            s.y0 = e.y;
            s.z0 = e.z.unwrap_or_default();
        } else {
            s.y0 = (coeffs.terminal)(x0);
        }
        Ok(s)
    }
}

/// Result of a backward run including the frozen tails, kept for
/// diagnostics.
#[derive(Debug, Clone)]
pub struct Algorithm1Run {
    pub solution: TrainedSolution,
    /// `tails[i]` is the tail used to train step `i`.
    pub tails: Vec<ResidualTail>,
    /// `f_values[i]` is the frozen `F_i` per path.
    pub f_values: Vec<Vec<f64>>,
}

/// Simulates the forward paths and runs the backward loop.
pub fn run_algorithm1(
    coeffs: &ModelCoefficients,
    grid: &TimeGrid,
    partition: &JumpPartition,
    x0: &[f64],
    config: &SolverConfig,
    seed: u64,
) -> Result<Algorithm1Run> {
    let paths = simulate_forward(coeffs, grid, partition, x0, config.batch, seed)?;
    run_algorithm1_on_paths(coeffs, partition, &paths, x0, config, seed)
}

/// Backward loop `i = N−1, …, 0` on a given path cloud.
pub fn run_algorithm1_on_paths(
    coeffs: &ModelCoefficients,
    partition: &JumpPartition,
    paths: &PathBatch,
    x0: &[f64],
    config: &SolverConfig,
    seed: u64,
) -> Result<Algorithm1Run> {
    let n = paths.steps();
    let quad = JumpQuadrature::new(coeffs, partition, &paths.sigma_sqrt);
    let width = config.width.unwrap_or(20 + coeffs.q);
    let source = precompute_source(coeffs, paths)?;
    let mut tail = ResidualTail::terminal(coeffs, paths);
    let mut steps: Vec<Option<StepNetworks>> = vec![None; n];
    let mut history = vec![StepHistory::default(); n];
    let mut final_losses = vec![f64::NAN; n];
    let mut tails = vec![ResidualTail { step: 0, values: Vec::new() }; n];
    let mut f_values = vec![Vec::new(); n];
    let mut y0_std_error = f64::NAN;
    for i in (0..n).rev() {
        let warm = config.warm_start && i + 1 < n;
        let (init, epochs) = if warm {
            (steps[i + 1].clone().expect("later step trained"), config.warm_epochs.unwrap_or(config.epochs))
        } else {
            let mut nets = StepNetworks::he_init(coeffs.q, coeffs.d, coeffs.zeta, config.hidden_layers, width, seed, i)?;
            let valid: Vec<f64> = tail.values.iter().copied().filter(|v| v.is_finite()).collect();
            let mean = valid.iter().sum::<f64>() / valid.len().max(1) as f64;
            let last = nets.y.layers.len() - 1;
            nets.y.layers[last].bias[0] = mean;
            (nets, config.epochs)
        };
        let (nets, hist) = if config.resample {
            train_step_resampled(i, paths, init, epochs, coeffs, partition, &quad, &steps, x0, config, seed)?
        } else {
            train_step(i, paths, &tail, init, epochs, coeffs, &quad, &source, config, subseed(seed, Purpose::Split, i as u64))?
        };
        final_losses[i] = loss_ri(i, paths, &tail, &nets, coeffs, &quad, &source)?;
        let f = residual_f(i, paths, &nets, coeffs, &quad, &source);
        if i == 0 {
            y0_std_error = y0_spread(nets.y.eval(x0)?[0], paths, &tail.values, &f);
        }
        let next = tail.advance(&f);
        tails[i] = std::mem::replace(&mut tail, next);
        f_values[i] = f;
        steps[i] = Some(nets);
        history[i] = hist;
    }
    let steps: Vec<StepNetworks> = steps.into_iter().map(|s| s.expect("every step trained")).collect();
    let mut solution = TrainedSolution::from_parts(paths.grid.clone(), steps, coeffs, partition, x0)?;
    solution.history = history;
    solution.final_losses = final_losses;
    solution.config_fingerprint = format!("{}:{}:{}", config.fingerprint(), seed, paths.fingerprint);
    solution.y0_std_error = y0_std_error;
    Ok(Algorithm1Run { solution, tails, f_values })
}

/// Standard error of `Ŷ_0` from the total residual `Ŷ_0 − tail_0 − F_0`.
fn y0_spread(y0: f64, paths: &PathBatch, tail: &[f64], f: &[f64]) -> f64 {
    Estimate::from_samples((0..paths.batch()).filter(|&p| paths.valid[p]).map(|p| y0 - tail[p] - f[p])).std_error
}

impl TrainedSolution {
    /// Recomputes the `Ŷ_0` standard error on a path cloud, e.g. for
    /// networks loaded from disk.
    pub fn y0_std_error_on(&self, coeffs: &ModelCoefficients, partition: &JumpPartition, paths: &PathBatch) -> Result<f64> {
        if self.grid != paths.grid {
            return Err(Error::Dimension("paths and networks use different time grids".into()));
        }
        let Some(first) = self.steps.first() else { return Ok(0.0) };
        let quad = JumpQuadrature::new(coeffs, partition, &paths.sigma_sqrt);
        let source = precompute_source(coeffs, paths)?;
        let frozen: Vec<Option<StepNetworks>> = self.steps.iter().cloned().map(Some).collect();
        let tail = tail_from_scratch(0, paths, &frozen, coeffs, &quad, &source);
        let f = residual_f(0, paths, first, coeffs, &quad, &source);
        Ok(y0_spread(first.y.eval(&self.x0)?[0], paths, &tail.values, &f))
    }
}

/// Tail for step `i` computed from scratch with the frozen later networks.
pub fn tail_from_scratch(
    step: usize,
    paths: &PathBatch,
    frozen: &[Option<StepNetworks>],
    coeffs: &ModelCoefficients,
    quad: &JumpQuadrature,
    source: &[f64],
) -> ResidualTail {
    let mut tail = ResidualTail::terminal(coeffs, paths);
    for l in (step + 1..paths.steps()).rev() {
        let nets = frozen[l].as_ref().expect("later networks frozen");
        let f = residual_f(l, paths, nets, coeffs, quad, source);
        tail = tail.advance(&f);
    }
    tail
}

/// Training with a fresh path batch per epoch; tails are recomputed from the
/// frozen later networks on each batch, and selection uses the reference
/// cloud.
#[allow(clippy::too_many_arguments)]
fn train_step_resampled(
    step: usize,
    reference_paths: &PathBatch,
    init: StepNetworks,
    epochs: usize,
    coeffs: &ModelCoefficients,
    partition: &JumpPartition,
    quad: &JumpQuadrature,
    frozen: &[Option<StepNetworks>],
    x0: &[f64],
    config: &SolverConfig,
    seed: u64,
) -> Result<(StepNetworks, StepHistory)> {
    let mut nets = init;
    let mut history = StepHistory::default();
    let source = precompute_source(coeffs, reference_paths)?;
    let tail = tail_from_scratch(step, reference_paths, frozen, coeffs, quad, &source);
    let mut best_val = loss_ri(step, reference_paths, &tail, &nets, coeffs, quad, &source)?;
    history.validation.push(best_val);
    let mut best = nets.clone();
    let batch = reference_paths.batch();
    let mut trainer = Trainer::new(&nets, config, batch, epochs);
    let mut shuffle_rng = stream(seed, Purpose::Shuffle, step as u64);
    for epoch in 0..epochs {
        let s = subseed(seed, Purpose::Resample, (step * epochs + epoch) as u64);
        let fresh = simulate_forward(coeffs, &reference_paths.grid, partition, x0, batch, s)?;
        let fresh_source = precompute_source(coeffs, &fresh)?;
        let fresh_tail = tail_from_scratch(step, &fresh, frozen, coeffs, quad, &fresh_source);
        let rows: Vec<usize> = (0..fresh.batch()).filter(|&p| fresh.valid[p]).collect();
        let problem = Problem { coeffs, quad, data: step_data(&fresh, &rows, step, &fresh_source, &fresh_tail.values) };
        let mut order: Vec<usize> = (0..rows.len()).collect();
        order.shuffle(&mut shuffle_rng);
        history.train.push(trainer.epoch(&problem, rows.len(), &order, &mut nets)?);
        let v = loss_ri(step, reference_paths, &tail, &nets, coeffs, quad, &source)?;
        if !v.is_finite() {
            return Err(Error::Divergence { step, last_finite_loss: trainer.last_finite });
        }
        history.validation.push(v);
        if v < best_val {
            best_val = v;
            best = nets.clone();
            history.best_epoch = epoch + 1;
        }
    }
    Ok((best, history))
}
