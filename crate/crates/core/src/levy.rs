//! Lévy measures with singular small-jump behaviour, the small-jump
//! covariance `Σ_ε`, jump-space partitions of `{|e| > ε}` and compound-Poisson
//! sampling on those partitions.
//!
//! Measures in more than one dimension are supported through independent
//! coordinate components: the measure lives on the coordinate axes and each
//! axis carries its own one-sided radial densities. Every jump then moves a
//! single coordinate, and `Σ_ε` is diagonal.

use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Poisson};

use crate::error::{Error, Result};
use crate::quadrature::{integrate, integrate_radial, DEFAULT_REL_TOL};

/// Density of `ν` along one half-axis as a function of the jump radius `r > 0`.
#[derive(Clone)]
pub enum RadialDensity {
    /// `scale · r^{-1-α}` for `r <= r_max`.
    PowerLaw { scale: f64, alpha: f64, r_max: f64 },
    /// `scale · r^{-1-α} · exp(-rate · r)` for `r <= r_max` (`r_max` may be infinite).
    TemperedPowerLaw { scale: f64, alpha: f64, rate: f64, r_max: f64 },
    /// Piecewise-constant density; finite activity.
    Table { bins: Vec<TableBin> },
    Custom { density: Arc<dyn Fn(f64) -> f64 + Send + Sync>, r_max: f64 },
    Zero,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TableBin {
    pub lo: f64,
    pub hi: f64,
    pub density: f64,
}

impl fmt::Debug for RadialDensity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RadialDensity::PowerLaw { scale, alpha, r_max } => {
                write!(f, "PowerLaw(scale={scale}, alpha={alpha}, r_max={r_max})")
            }
            RadialDensity::TemperedPowerLaw { scale, alpha, rate, r_max } => {
                write!(f, "TemperedPowerLaw(scale={scale}, alpha={alpha}, rate={rate}, r_max={r_max})")
            }
            RadialDensity::Table { bins } => write!(f, "Table({} bins)", bins.len()),
            RadialDensity::Custom { r_max, .. } => write!(f, "Custom(r_max={r_max})"),
            RadialDensity::Zero => write!(f, "Zero"),
        }
    }
}

impl RadialDensity {
    pub fn density(&self, r: f64) -> f64 {
        if r <= 0.0 || r > self.support_max() {
            return 0.0;
        }
        match self {
            RadialDensity::PowerLaw { scale, alpha, .. } => scale * r.powf(-1.0 - alpha),
            RadialDensity::TemperedPowerLaw { scale, alpha, rate, .. } => {
                scale * r.powf(-1.0 - alpha) * (-rate * r).exp()
            }
            RadialDensity::Table { bins } => bins
                .iter()
                .find(|b| r > b.lo && r <= b.hi)
                .map_or(0.0, |b| b.density),
            RadialDensity::Custom { density, .. } => density(r),
            RadialDensity::Zero => 0.0,
        }
    }

    pub fn support_max(&self) -> f64 {
        match self {
            RadialDensity::PowerLaw { r_max, .. }
            | RadialDensity::TemperedPowerLaw { r_max, .. }
            | RadialDensity::Custom { r_max, .. } => *r_max,
            RadialDensity::Table { bins } => bins.iter().map(|b| b.hi).fold(0.0, f64::max),
            RadialDensity::Zero => 0.0,
        }
    }

    fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        match self {
            RadialDensity::PowerLaw { scale, alpha, r_max } => {
                if !(*scale >= 0.0 && *alpha > 0.0 && *alpha < 2.0 && *r_max > 0.0 && r_max.is_finite()) {
                    return bad(format!("power law needs scale >= 0, alpha in (0,2), finite r_max > 0: {self:?}"));
                }
            }
            RadialDensity::TemperedPowerLaw { scale, alpha, rate, r_max } => {
                if !(*scale >= 0.0 && *alpha > 0.0 && *alpha < 2.0 && *rate >= 0.0 && *r_max > 0.0) {
                    return bad(format!("tempered power law parameters out of range: {self:?}"));
                }
                if *rate == 0.0 && r_max.is_infinite() {
                    return bad("untempered power law needs a finite r_max".into());
                }
            }
            RadialDensity::Table { bins } => {
                for b in bins {
                    if !(b.lo >= 0.0 && b.hi > b.lo && b.hi.is_finite() && b.density >= 0.0) {
                        return bad(format!("bad table bin {b:?}"));
                    }
                }
                for w in bins.windows(2) {
                    if w[1].lo < w[0].hi {
                        return bad("table bins must be sorted and non-overlapping".into());
                    }
                }
            }
            RadialDensity::Custom { r_max, .. } => {
                if !(*r_max > 0.0 && r_max.is_finite()) {
                    return bad("custom densities need a finite support radius".into());
                }
            }
            RadialDensity::Zero => {}
        }
        Ok(())
    }

    /// `∫_a^b r^k m(r) dr` for `0 <= a <= b <= ∞`.
    pub fn moment(&self, k: i32, a: f64, b: f64) -> Result<f64> {
        let b = b.min(self.support_max());
        if b <= a {
            return Ok(0.0);
        }
        match self {
            RadialDensity::PowerLaw { scale, alpha, .. } => {
                let p = k as f64 - alpha;
                if a == 0.0 && p <= 0.0 {
                    return Ok(f64::INFINITY);
                }
                if p.abs() < 1e-14 {
                    Ok(scale * (b / a).ln())
                } else {
                    Ok(scale * (b.powf(p) - a.powf(p)) / p)
                }
            }
            RadialDensity::Table { bins } => Ok(bins
                .iter()
                .map(|bin| {
                    let lo = bin.lo.max(a);
                    let hi = bin.hi.min(b);
                    if hi <= lo {
                        0.0
                    } else if k == -1 {
                        bin.density * (hi / lo).ln()
                    } else {
                        let p = (k + 1) as f64;
                        bin.density * (hi.powf(p) - lo.powf(p)) / p
                    }
                })
                .sum()),
            RadialDensity::Zero => Ok(0.0),
            _ => self.integrate_with(|r| r.powi(k), a, b),
        }
    }

    /// `∫_a^b φ(r) m(r) dr` by singularity-aware quadrature.
    pub fn integrate_with<F: Fn(f64) -> f64>(&self, phi: F, a: f64, b: f64) -> Result<f64> {
        self.integrate_with_tol(phi, a, b, 0.0)
    }

    /// As [`RadialDensity::integrate_with`] with an absolute tolerance floor.
    pub fn integrate_with_tol<F: Fn(f64) -> f64>(&self, phi: F, a: f64, b: f64, abs_tol: f64) -> Result<f64> {
        let b = b.min(self.support_max());
        if b <= a {
            return Ok(0.0);
        }
        match self {
            RadialDensity::Zero => Ok(0.0),
            RadialDensity::Table { bins } => {
                let mut total = 0.0;
                for bin in bins {
                    let lo = bin.lo.max(a);
                    let hi = bin.hi.min(b);
                    if hi > lo {
                        total += bin.density
                            * integrate(&phi, lo, hi, DEFAULT_REL_TOL, abs_tol.max(1e-300))?.value;
                    }
                }
                Ok(total)
            }
            _ => Ok(integrate_radial(|r| phi(r) * self.density(r), a, b, DEFAULT_REL_TOL, abs_tol)?.value),
        }
    }

    /// Draws a radius from `m` restricted to `(a, b]` (`b` may be infinite).
    pub fn sample<R: Rng + ?Sized>(&self, a: f64, b: f64, rng: &mut R) -> f64 {
        let b = b.min(self.support_max());
        match self {
            RadialDensity::PowerLaw { alpha, .. } => power_law_inverse_cdf(*alpha, a, b, rng.random()),
            RadialDensity::TemperedPowerLaw { alpha, rate, .. } => loop {
                // power-law proposal, exponential acceptance
                let r = power_law_inverse_cdf(*alpha, a, b, rng.random());
                if rng.random::<f64>() <= (-rate * (r - a)).exp() {
                    break r;
                }
            },
            RadialDensity::Table { bins } => {
                let masses: Vec<f64> = bins
                    .iter()
                    .map(|bin| bin.density * (bin.hi.min(b) - bin.lo.max(a)).max(0.0))
                    .collect();
                let total: f64 = masses.iter().sum();
                let mut u = rng.random::<f64>() * total;
                let mut chosen = masses.iter().rposition(|m| *m > 0.0).unwrap_or(0);
                for (k, m) in masses.iter().enumerate() {
                    if u < *m {
                        chosen = k;
                        break;
                    }
                    u -= m;
                }
                let lo = bins[chosen].lo.max(a);
                let hi = bins[chosen].hi.min(b);
                lo + (hi - lo) * (1.0 - rng.random::<f64>())
            }
            RadialDensity::Custom { .. } => {
                // numerical inverse CDF by bisection
                let total = self.moment(0, a, b).unwrap_or(0.0);
                let target = rng.random::<f64>() * total;
                let (mut lo, mut hi) = (a, b);
                for _ in 0..60 {
                    let mid = 0.5 * (lo + hi);
                    if self.moment(0, a, mid).unwrap_or(0.0) < target {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                0.5 * (lo + hi)
            }
            RadialDensity::Zero => a,
        }
    }
}

fn power_law_inverse_cdf(alpha: f64, a: f64, b: f64, u: f64) -> f64 {
    let lo = a.powf(-alpha);
    let hi = if b.is_finite() { b.powf(-alpha) } else { 0.0 };
    let r = (lo - u * (lo - hi)).powf(-1.0 / alpha);
    r.clamp(a, b)
}

/// Both half-axis densities of one coordinate.
#[derive(Debug, Clone)]
pub struct AxisDensity {
    pub positive: RadialDensity,
    pub negative: RadialDensity,
}

impl AxisDensity {
    pub fn symmetric(density: RadialDensity) -> Self {
        AxisDensity { positive: density.clone(), negative: density }
    }

    pub fn side(&self, sign: f64) -> &RadialDensity {
        if sign > 0.0 { &self.positive } else { &self.negative }
    }
}

/// Lévy measure `ν` on `ℝ^q \ {0}`.
#[derive(Debug, Clone)]
pub struct LevyMeasure {
    axes: Vec<AxisDensity>,
    alpha: Option<f64>,
}

impl LevyMeasure {
    pub fn new(axes: Vec<AxisDensity>, alpha: Option<f64>) -> Result<Self> {
        if axes.is_empty() {
            return Err(Error::InvalidArgument("Lévy measure needs at least one dimension".into()));
        }
        if let Some(a) = alpha {
            if !(a > 0.0 && a < 2.0) {
                return Err(Error::InvalidArgument(format!("stability index {a} outside (0,2)")));
            }
        }
        let measure = LevyMeasure { axes, alpha };
        for (_, _, side) in measure.sides() {
            side.validate()?;
            // ∫ (r² ∧ 1) m(r) dr < ∞
            let near = side.moment(2, 0.0, 1.0)?;
            let far = side.moment(0, 1.0, f64::INFINITY)?;
            if !(near + far).is_finite() {
                return Err(Error::InvalidArgument("∫(|e|²∧1)ν(de) is not finite".into()));
            }
            if let Some(a) = alpha {
                check_stability_bound(side, a)?;
            }
        }
        Ok(measure)
    }

    /// One-dimensional `m(e) = scale·|e|^{-1-α}` on `0 < |e| <= r_max`.
    pub fn symmetric_power_law(dim: usize, scale: f64, alpha: f64, r_max: f64) -> Result<Self> {
        let side = RadialDensity::PowerLaw { scale, alpha, r_max };
        Self::new(vec![AxisDensity::symmetric(side); dim], Some(alpha))
    }

    pub fn symmetric_tempered(dim: usize, scale: f64, alpha: f64, rate: f64, r_max: f64) -> Result<Self> {
        let side = RadialDensity::TemperedPowerLaw { scale, alpha, rate, r_max };
        Self::new(vec![AxisDensity::symmetric(side); dim], Some(alpha))
    }

    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    pub fn alpha(&self) -> Option<f64> {
        self.alpha
    }

    pub fn axes(&self) -> &[AxisDensity] {
        &self.axes
    }

    /// `(axis, sign, density)` for every half-axis.
    pub fn sides(&self) -> impl Iterator<Item = (usize, f64, &RadialDensity)> {
        self.axes
            .iter()
            .enumerate()
            .flat_map(|(k, ax)| [(k, 1.0, &ax.positive), (k, -1.0, &ax.negative)])
    }

    pub fn support_max(&self) -> f64 {
        self.sides().map(|(_, _, s)| s.support_max()).fold(0.0, f64::max)
    }

    /// Density of a one-dimensional measure at `e`.
    pub fn density_1d(&self, e: f64) -> f64 {
        let ax = &self.axes[0];
        if e > 0.0 { ax.positive.density(e) } else { ax.negative.density(-e) }
    }

    /// `ν({|e| > r})`.
    /// `∫ (|e|² ∧ 1) ν(de)`.
    pub fn activity_scale(&self) -> Result<f64> {
        self.sides().map(|(_, _, s)| Ok(s.moment(2, 0.0, 1.0)? + s.moment(0, 1.0, f64::INFINITY)?)).sum()
    }

    pub fn tail_mass(&self, r: f64) -> Result<f64> {
        self.sides().map(|(_, _, s)| s.moment(0, r, f64::INFINITY)).sum()
    }

    /// `∫_{lo < |e| <= hi} φ(e) ν(de)` with `φ` evaluated on jump vectors.
    pub fn integrate_vector<F: Fn(&[f64]) -> f64>(&self, phi: F, lo: f64, hi: f64) -> Result<f64> {
        self.integrate_vector_tol(phi, lo, hi, 0.0)
    }

    pub fn integrate_vector_tol<F: Fn(&[f64]) -> f64>(&self, phi: F, lo: f64, hi: f64, abs_tol: f64) -> Result<f64> {
        let q = self.dim();
        let mut total = 0.0;
        for (axis, sign, side) in self.sides() {
            total += side.integrate_with_tol(
                |r| {
                    let mut e = vec![0.0; q];
                    e[axis] = sign * r;
                    phi(&e)
                },
                lo,
                hi,
                abs_tol,
            )?;
        }
        Ok(total)
    }
}

fn check_stability_bound(side: &RadialDensity, alpha: f64) -> Result<()> {
    let ratio = |r: f64| side.density(r) * r.powf(1.0 + alpha);
    let reference = (0..=10).map(|k| ratio(0.1 + 0.09 * k as f64)).fold(0.0, f64::max);
    for k in 1..=10 {
        let r = 10f64.powi(-k);
        let v = ratio(r);
        if !v.is_finite() || v > 1e3 * reference.max(1e-300) && v > 0.0 {
            return Err(Error::InvalidArgument(format!(
                "density violates m(e) <= C|e|^(-1-{alpha}) near the origin (ratio {v:.3e} at |e| = {r:.0e})"
            )));
        }
    }
    Ok(())
}

/// `Σ_ε = ∫_{|e|<=ε} e eᵀ ν(de)`.
pub fn small_jump_covariance(measure: &LevyMeasure, epsilon: f64) -> Result<DMatrix<f64>> {
    if !(epsilon > 0.0) {
        return Err(Error::InvalidArgument(format!("epsilon must be positive, got {epsilon}")));
    }
    let q = measure.dim();
    let mut sigma = DMatrix::zeros(q, q);
    for (axis, _, side) in measure.sides() {
        sigma[(axis, axis)] += side.moment(2, 0.0, epsilon)?;
    }
    Ok(sigma)
}

/// `σ_ε² = ∫_{|e|<=ε} |e|² ν(de) = tr Σ_ε`.
pub fn truncation_variance(measure: &LevyMeasure, epsilon: f64) -> Result<f64> {
    Ok(small_jump_covariance(measure, epsilon)?.trace())
}

/// Symmetric PSD square root; negative eigenvalues from rounding are clamped.
pub fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| l.max(0.0).sqrt()));
    &eig.eigenvectors * d * eig.eigenvectors.transpose()
}

/// Radius beyond which `ν` restricted to `{|e| > ε}` has relative mass `10⁻⁶`.
pub fn default_working_radius(measure: &LevyMeasure, epsilon: f64) -> Result<f64> {
    let total = measure.tail_mass(epsilon)?;
    if total == 0.0 {
        return Ok(epsilon * 2.0);
    }
    let target = 1e-6 * total;
    let mut hi = measure.support_max();
    if hi.is_infinite() {
        hi = epsilon.max(1.0);
        while measure.tail_mass(hi)? > target {
            hi *= 2.0;
        }
    }
    let mut lo = epsilon;
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if measure.tail_mass(mid)? > target {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-12 * hi {
            break;
        }
    }
    Ok(hi.max(epsilon * (1.0 + 1e-9)))
}

/// One cell `K_j`: the radii `(lo, hi]` on half-axis `sign · axis`.
#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub axis: usize,
    pub sign: f64,
    pub lo: f64,
    pub hi: f64,
    /// `λ_j = ν(K_j)`
    pub mass: f64,
    /// Radius of the representative `e_j`.
    pub radius: f64,
    /// `γ_j`, the ν-average of γ over the cell.
    pub gamma_avg: f64,
    pub tail: bool,
}

impl Cell {
    pub fn representative(&self, dim: usize) -> Vec<f64> {
        let mut e = vec![0.0; dim];
        e[self.axis] = self.sign * self.radius;
        e
    }

    pub fn contains(&self, e: &[f64]) -> bool {
        let on_axis = e.iter().enumerate().all(|(k, v)| k == self.axis || *v == 0.0);
        let x = e[self.axis] * self.sign;
        on_axis && x > self.lo && x <= self.hi
    }

    pub fn diameter(&self) -> f64 {
        self.hi - self.lo
    }
}

/// Finite partition of `E^ε = {|e| > ε}` into cells plus tail cells beyond
/// the working radius.
#[derive(Debug, Clone)]
pub struct JumpPartition {
    measure: LevyMeasure,
    epsilon: f64,
    h: f64,
    r_work: f64,
    cells: Vec<Cell>,
    cumulative: Vec<f64>,
    total_mass: f64,
    representatives: Vec<f64>,
}

/// Maps radii in `[ε, upper]` to a coordinate that is logarithmic up to
/// `pivot` and linear beyond it, with matching slope at the pivot.
struct CellCoordinate {
    epsilon: f64,
    pivot: f64,
}

impl CellCoordinate {
    fn forward(&self, r: f64) -> f64 {
        if r <= self.pivot {
            (r / self.epsilon).ln()
        } else {
            (self.pivot / self.epsilon).ln() + (r - self.pivot) / self.pivot
        }
    }

    fn inverse(&self, s: f64) -> f64 {
        let s_pivot = (self.pivot / self.epsilon).ln();
        if s <= s_pivot {
            self.epsilon * s.exp()
        } else {
            self.pivot + (s - s_pivot) * self.pivot
        }
    }
}

/// Builds the cells of `E^ε`: geometric near `ε`, uniform beyond radius 1,
/// with a tail cell `(R_work, ∞)` on every half-axis that still carries mass.
/// Boundaries sit at multiples of `h` in the cell coordinate, so halving `h`
/// refines the partition.
pub fn build_partition<G>(measure: &LevyMeasure, epsilon: f64, h: f64, r_work: f64, gamma: G) -> Result<JumpPartition>
where
    G: Fn(&[f64]) -> f64,
{
    if !(epsilon > 0.0 && epsilon < r_work) {
        return Err(Error::InvalidArgument(format!("need 0 < epsilon < R_work, got epsilon={epsilon}, R_work={r_work}")));
    }
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!("refinement parameter h must be positive, got {h}")));
    }
    let q = measure.dim();
    let mut cells = Vec::new();
    for (axis, sign, side) in measure.sides() {
        let upper = r_work.min(side.support_max());
        let mut raw: Vec<(f64, f64, bool)> = Vec::new();
        if upper > epsilon {
            let coord = CellCoordinate { epsilon, pivot: 1f64.clamp(epsilon, upper) };
            let span = coord.forward(upper);
            let full = (span / h * (1.0 + 1e-12)).floor() as usize;
            let mut edges: Vec<f64> = (0..=full).map(|k| coord.inverse(k as f64 * h)).collect();
            if span - full as f64 * h > 1e-9 * h {
                edges.push(upper);
            } else {
                *edges.last_mut().expect("at least one edge") = upper;
            }
            edges[0] = epsilon;
            raw.extend(edges.windows(2).map(|w| (w[0], w[1], false)));
        }
        if side.support_max() > r_work {
            raw.push((r_work.max(epsilon), f64::INFINITY, true));
        }
        let mut side_cells: Vec<Cell> = Vec::new();
        for (lo, hi, tail) in raw {
            let mass = side.moment(0, lo, hi)?;
            side_cells.push(Cell { axis, sign, lo, hi, mass, radius: 0.0, gamma_avg: 0.0, tail });
        }
        // merge massless cells into a neighbour
        let mut merged: Vec<Cell> = Vec::new();
        let mut pending_lo: Option<f64> = None;
        for mut c in side_cells {
            if c.mass <= 0.0 {
                if let Some(prev) = merged.last_mut() {
                    prev.hi = c.hi;
                    prev.tail |= c.tail;
                } else {
                    pending_lo.get_or_insert(c.lo);
                }
                continue;
            }
            if let Some(lo) = pending_lo.take() {
                c.lo = lo;
            }
            merged.push(c);
        }
        for c in merged.iter_mut() {
            let first = side.moment(1, c.lo, c.hi)?;
            let bary = first / c.mass;
            c.radius = if bary.is_finite() {
                bary.clamp(c.lo, c.hi)
            } else if c.hi.is_finite() {
                0.5 * (c.lo + c.hi)
            } else {
                2.0 * c.lo
            };
            let avg = side.integrate_with(
                |r| {
                    let mut e = vec![0.0; q];
                    e[axis] = sign * r;
                    gamma(&e)
                },
                c.lo,
                c.hi,
            )?;
            c.gamma_avg = avg / c.mass;
        }
        cells.extend(merged);
    }
    let mut cumulative = Vec::with_capacity(cells.len());
    let mut acc = 0.0;
    for c in &cells {
        acc += c.mass;
        cumulative.push(acc);
    }
    let representatives = cells.iter().flat_map(|c| c.representative(q)).collect();
    Ok(JumpPartition {
        measure: measure.clone(),
        epsilon,
        h,
        r_work,
        cells,
        cumulative,
        total_mass: acc,
        representatives,
    })
}

/// Realised jumps over one time step, binned into the partition cells.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct JumpRealization {
    /// Cell of each jump.
    pub cells: Vec<usize>,
    /// Signed radius of each jump along its cell's axis.
    pub sizes: Vec<f64>,
    /// `N_j` per cell.
    pub counts: Vec<u32>,
}

impl JumpPartition {
    pub fn measure(&self) -> &LevyMeasure {
        &self.measure
    }
    pub fn dim(&self) -> usize {
        self.measure.dim()
    }
    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }
    pub fn h(&self) -> f64 {
        self.h
    }
    pub fn r_work(&self) -> f64 {
        self.r_work
    }
    pub fn cells(&self) -> &[Cell] {
        &self.cells
    }
    pub fn len(&self) -> usize {
        self.cells.len()
    }
    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }
    /// `Λ = Σ_j λ_j`.
    pub fn total_mass(&self) -> f64 {
        self.total_mass
    }
    /// Representative `e_j` as a slice of length `q`.
    pub fn representative(&self, j: usize) -> &[f64] {
        let q = self.dim();
        &self.representatives[j * q..(j + 1) * q]
    }
    pub fn representatives_flat(&self) -> &[f64] {
        &self.representatives
    }
    pub fn tail_mass(&self) -> f64 {
        self.cells.iter().filter(|c| c.tail).map(|c| c.mass).sum()
    }
    /// `k_h = min_j λ_j γ_j²`.
    pub fn k_h(&self) -> f64 {
        self.cells.iter().map(|c| c.mass * c.gamma_avg * c.gamma_avg).fold(f64::INFINITY, f64::min)
    }
    pub fn small_jump_covariance(&self) -> Result<DMatrix<f64>> {
        small_jump_covariance(&self.measure, self.epsilon)
    }
    /// Number of cells containing the jump vector `e`.
    pub fn cells_containing(&self, e: &[f64]) -> usize {
        self.cells.iter().filter(|c| c.contains(e)).count()
    }
    /// Cell index of a signed radius on `axis`.
    pub fn locate(&self, axis: usize, signed_radius: f64) -> Option<usize> {
        let sign = signed_radius.signum();
        let r = signed_radius.abs();
        self.cells.iter().position(|c| c.axis == axis && c.sign == sign && r > c.lo && r <= c.hi)
    }

    /// Samples `N ~ Poisson(Λ dt)` jumps from `ν` restricted to `E^ε`.
    pub fn sample_jumps<R: Rng + ?Sized>(&self, dt: f64, rng: &mut R) -> JumpRealization {
        let mut real = JumpRealization { counts: vec![0; self.cells.len()], ..Default::default() };
        self.sample_into(dt, rng, &mut real.cells, &mut real.sizes);
        for &j in &real.cells {
            real.counts[j] += 1;
        }
        real
    }

    /// Appends the jumps of one step to `cells` / `sizes`; returns the count.
    pub fn sample_into<R: Rng + ?Sized>(&self, dt: f64, rng: &mut R, cells: &mut Vec<usize>, sizes: &mut Vec<f64>) -> usize {
        let rate = self.total_mass * dt;
        if !(rate > 0.0) {
            return 0;
        }
        let n = Poisson::new(rate).map(|p| p.sample(rng) as usize).unwrap_or(0);
        for _ in 0..n {
            let u = rng.random::<f64>() * self.total_mass;
            let j = self.cumulative.partition_point(|&c| c <= u).min(self.cells.len() - 1);
            let c = &self.cells[j];
            let r = self.measure.axes()[c.axis].side(c.sign).sample(c.lo, c.hi, rng);
            cells.push(j);
            sizes.push(c.sign * r);
        }
        n
    }
}

/// `R²_γ(h) = Σ_j ∫_{K_j} |γ(e) − γ_j|² ν(de)`.
pub fn gamma_quadrature_error<G: Fn(&[f64]) -> f64>(partition: &JumpPartition, gamma: G) -> Result<f64> {
    Ok(gamma_quadrature_error_by_cell(partition, gamma)?.iter().sum())
}

/// Per-cell contributions to `R²_γ(h)`; tail cells included. The cell
/// averages are recomputed for the `gamma` given here.
pub fn gamma_quadrature_error_by_cell<G: Fn(&[f64]) -> f64>(partition: &JumpPartition, gamma: G) -> Result<Vec<f64>> {
    let q = partition.dim();
    partition
        .cells
        .iter()
        .map(|c| {
            let side = partition.measure.axes()[c.axis].side(c.sign);
            let at = |r: f64| {
                let mut e = vec![0.0; q];
                e[c.axis] = c.sign * r;
                gamma(&e)
            };
            let avg = side.integrate_with(at, c.lo, c.hi)? / c.mass;
            side.integrate_with(|r| (at(r) - avg).powi(2), c.lo, c.hi)
        })
        .collect()
}
