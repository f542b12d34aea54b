//! Nonlocal operators `𝒥`, `ℬ` and the generator by quadrature, and the
//! manufactured-solution driver built from them.

use std::sync::Arc;

use nalgebra::DMatrix;

use crate::error::Result;
use crate::levy::{small_jump_covariance, LevyMeasure};
use crate::paths::{Driver, JumpCoefficients, ModelCoefficients, StateMap};

/// Inner radius below which jump integrals use a second-order Taylor expansion.
pub const DEFAULT_INNER_RADIUS: f64 = 1e-3;

/// A function `u(t, x)`; derivatives default to central differences.
pub trait SpaceTimeFunction: Send + Sync {
    fn value(&self, t: f64, x: &[f64]) -> f64;

    fn gradient(&self, t: f64, x: &[f64], out: &mut [f64]) {
        let mut y = x.to_vec();
        for k in 0..x.len() {
            let h = 1e-6 * (1.0 + x[k].abs());
            y[k] = x[k] + h;
            let up = self.value(t, &y);
            y[k] = x[k] - h;
            let down = self.value(t, &y);
            y[k] = x[k];
            out[k] = (up - down) / (2.0 * h);
        }
    }

    /// Row-major `q × q`.
    fn hessian(&self, t: f64, x: &[f64], out: &mut [f64]) {
        let q = x.len();
        let mut y = x.to_vec();
        let f0 = self.value(t, x);
        for a in 0..q {
            let ha = 1e-4 * (1.0 + x[a].abs());
            for b in a..q {
                let hb = 1e-4 * (1.0 + x[b].abs());
                let v = if a == b {
                    y[a] = x[a] + ha;
                    let up = self.value(t, &y);
                    y[a] = x[a] - ha;
                    let down = self.value(t, &y);
                    y[a] = x[a];
                    (up - 2.0 * f0 + down) / (ha * ha)
                } else {
                    let mut corner = |sa: f64, sb: f64| {
                        y[a] = x[a] + sa * ha;
                        y[b] = x[b] + sb * hb;
                        let v = self.value(t, &y);
                        y[a] = x[a];
                        y[b] = x[b];
                        v
                    };
                    (corner(1.0, 1.0) - corner(1.0, -1.0) - corner(-1.0, 1.0) + corner(-1.0, -1.0)) / (4.0 * ha * hb)
                };
                out[a * q + b] = v;
                out[b * q + a] = v;
            }
        }
    }

    fn time_derivative(&self, t: f64, x: &[f64]) -> f64 {
        let h = 1e-6 * (1.0 + t.abs());
        (self.value(t + h, x) - self.value(t - h, x)) / (2.0 * h)
    }

    fn as_cosine(&self) -> Option<&CosineSolution> {
        None
    }
}

/// `u(t, x) = offset + amplitude · cos(frequency · Σ_k x_k + time_rate · t)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CosineSolution {
    pub offset: f64,
    pub amplitude: f64,
    pub frequency: f64,
    pub time_rate: f64,
}

impl CosineSolution {
    pub fn phase(&self, t: f64, x: &[f64]) -> f64 {
        self.frequency * x.iter().sum::<f64>() + self.time_rate * t
    }
}

impl SpaceTimeFunction for CosineSolution {
    fn value(&self, t: f64, x: &[f64]) -> f64 {
        self.offset + self.amplitude * self.phase(t, x).cos()
    }
    fn gradient(&self, t: f64, x: &[f64], out: &mut [f64]) {
        out.fill(-self.amplitude * self.frequency * self.phase(t, x).sin());
    }
    fn hessian(&self, t: f64, x: &[f64], out: &mut [f64]) {
        out.fill(-self.amplitude * self.frequency * self.frequency * self.phase(t, x).cos());
    }
    fn time_derivative(&self, t: f64, x: &[f64]) -> f64 {
        -self.amplitude * self.time_rate * self.phase(t, x).sin()
    }
    fn as_cosine(&self) -> Option<&CosineSolution> {
        Some(self)
    }
}

/// Wraps a closure; derivatives by finite differences.
pub struct FnSolution<F>(pub F);

impl<F: Fn(f64, &[f64]) -> f64 + Send + Sync> SpaceTimeFunction for FnSolution<F> {
    fn value(&self, t: f64, x: &[f64]) -> f64 {
        (self.0)(t, x)
    }
}

/// Absolute quadrature floor at the roundoff level of `u(x+β) − u(x)`.
fn roundoff_floor(measure: &LevyMeasure, u0: f64, grad: &[f64]) -> Result<f64> {
    let g: f64 = grad.iter().map(|v| v.abs()).sum();
    Ok(1e-12 * (1.0 + u0.abs() + g) * measure.activity_scale()?)
}

fn matvec_col(m: &[f64], q: usize, col: usize) -> Vec<f64> {
    (0..q).map(|r| m[r * q + col]).collect()
}

fn quad_form(h: &[f64], v: &[f64]) -> f64 {
    let q = v.len();
    (0..q).map(|a| (0..q).map(|b| v[a] * h[a * q + b] * v[b]).sum::<f64>()).sum()
}

/// `∫_{|e|>ε} [u(x+β(x,e)) − u(x) − ∇u·β(x,e)] ν(de)`; `ε = 0` is the full
/// operator. Below `inner` the integrand is replaced by its second-order
/// expansion `½ (D_eβ e)ᵀ D²u (D_eβ e)`, exact for `β` linear in `e`.
pub fn apply_nonlocal_j(
    u: &dyn SpaceTimeFunction,
    t: f64,
    x: &[f64],
    jump: &JumpCoefficients,
    measure: &LevyMeasure,
    epsilon: f64,
    inner: f64,
) -> Result<f64> {
    let q = x.len();
    let u0 = u.value(t, x);
    let mut grad = vec![0.0; q];
    u.gradient(t, x, &mut grad);
    let lo = epsilon.max(inner);
    let tol = roundoff_floor(measure, u0, &grad)?;
    let direct = measure.integrate_vector_tol(
        |e| {
            let mut b = vec![0.0; q];
            let mut y = vec![0.0; q];
            (jump.beta)(x, e, &mut b);
            for k in 0..q {
                y[k] = x[k] + b[k];
            }
            let lin: f64 = grad.iter().zip(&b).map(|(g, v)| g * v).sum();
            u.value(t, &y) - u0 - lin
        },
        lo,
        f64::INFINITY,
        tol,
    )?;
    let mut taylor = 0.0;
    if epsilon < inner {
        let mut hess = vec![0.0; q * q];
        u.hessian(t, x, &mut hess);
        let mut db = vec![0.0; q * q];
        jump.d_beta0_at(x, &mut db);
        for (axis, _, side) in measure.sides() {
            let v = matvec_col(&db, q, axis);
            taylor += 0.5 * quad_form(&hess, &v) * side.moment(2, epsilon, inner)?;
        }
    }
    Ok(direct + taylor)
}

/// `∫_{|e|>ε} [u(x+β(x,e)) − u(x)] γ(e) ν(de) + ζ Dγ(0)ᵀ Σ_ε D_eβ(x,0)ᵀ ∇u`.
pub fn apply_nonlocal_b(
    u: &dyn SpaceTimeFunction,
    t: f64,
    x: &[f64],
    jump: &JumpCoefficients,
    measure: &LevyMeasure,
    epsilon: f64,
    zeta: bool,
    inner: f64,
) -> Result<f64> {
    let q = x.len();
    let u0 = u.value(t, x);
    let mut grad = vec![0.0; q];
    u.gradient(t, x, &mut grad);
    let lo = epsilon.max(inner);
    let tol = roundoff_floor(measure, u0, &grad)?;
    let direct = measure.integrate_vector_tol(
        |e| {
            let mut b = vec![0.0; q];
            let mut y = vec![0.0; q];
            (jump.beta)(x, e, &mut b);
            for k in 0..q {
                y[k] = x[k] + b[k];
            }
            (u.value(t, &y) - u0) * (jump.gamma)(e)
        },
        lo,
        f64::INFINITY,
        tol,
    )?;
    let mut db = vec![0.0; q * q];
    jump.d_beta0_at(x, &mut db);
    let mut taylor = 0.0;
    if epsilon < inner {
        let mut hess = vec![0.0; q * q];
        u.hessian(t, x, &mut hess);
        for (axis, sign, side) in measure.sides() {
            let v = matvec_col(&db, q, axis);
            let slope: f64 = grad.iter().zip(&v).map(|(g, c)| g * c).sum();
            let curv = 0.5 * quad_form(&hess, &v);
            let gamma_at = |r: f64| {
                let mut e = vec![0.0; q];
                e[axis] = sign * r;
                (jump.gamma)(&e)
            };
            let m1 = side.integrate_with(|r| r * gamma_at(r), epsilon, inner)?;
            let m2 = side.integrate_with(|r| r * r * gamma_at(r), epsilon, inner)?;
            taylor += sign * slope * m1 + curv * m2;
        }
    }
    let mut comp = 0.0;
    if zeta && epsilon > 0.0 {
        let sigma = small_jump_covariance(measure, epsilon)?;
        let dg = jump.d_gamma0_vec(q);
        // Dβᵀ∇u
        let w: Vec<f64> = (0..q).map(|k| (0..q).map(|r| db[r * q + k] * grad[r]).sum()).collect();
        for a in 0..q {
            for c in 0..q {
                comp += dg[a] * sigma[(a, c)] * w[c];
            }
        }
    }
    Ok(direct + taylor + comp)
}

/// Local part `b·∇u + ½ tr((σσᵀ + ζ σ_ε σ_εᵀ) D²u)` with `σ_ε = D_eβ(x,0) Σ_ε^{1/2}`.
pub fn apply_local(
    u: &dyn SpaceTimeFunction,
    t: f64,
    x: &[f64],
    drift: &StateMap,
    diffusion: &StateMap,
    d: usize,
    jump: &JumpCoefficients,
    sigma_eps: Option<&DMatrix<f64>>,
) -> f64 {
    let q = x.len();
    let mut grad = vec![0.0; q];
    u.gradient(t, x, &mut grad);
    let mut hess = vec![0.0; q * q];
    u.hessian(t, x, &mut hess);
    let mut b = vec![0.0; q];
    drift(x, &mut b);
    let mut s = vec![0.0; q * d];
    diffusion(x, &mut s);
    let mut a = vec![0.0; q * q];
    for r in 0..q {
        for c in 0..q {
            a[r * q + c] = (0..d).map(|k| s[r * d + k] * s[c * d + k]).sum();
        }
    }
    if let Some(sig) = sigma_eps {
        let mut db = vec![0.0; q * q];
        jump.d_beta0_at(x, &mut db);
        // Dβ Σ_ε Dβᵀ
        for r in 0..q {
            for c in 0..q {
                let mut v = 0.0;
                for k in 0..q {
                    for l in 0..q {
                        v += db[r * q + k] * sig[(k, l)] * db[c * q + l];
                    }
                }
                a[r * q + c] += v;
            }
        }
    }
    let drift_term: f64 = b.iter().zip(&grad).map(|(u, v)| u * v).sum();
    let trace: f64 = (0..q * q).map(|k| a[k] * hess[k]).sum();
    drift_term + 0.5 * trace
}

/// Which equation a manufactured solution is built against: the truncated
/// equation at `epsilon > 0` with compensation flag `zeta`, or the full
/// equation when `epsilon == 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EquationSpec {
    pub epsilon: f64,
    pub zeta: bool,
    pub inner: f64,
}

impl EquationSpec {
    pub fn truncated(epsilon: f64, zeta: bool) -> Self {
        EquationSpec { epsilon, zeta, inner: DEFAULT_INNER_RADIUS }
    }
    pub fn full() -> Self {
        EquationSpec { epsilon: 0.0, zeta: false, inner: DEFAULT_INNER_RADIUS }
    }
}

/// Model pieces the generator needs.
#[derive(Clone)]
pub struct GeneratorParts {
    pub q: usize,
    pub d: usize,
    pub drift: StateMap,
    pub diffusion: StateMap,
    pub jump: JumpCoefficients,
    pub measure: LevyMeasure,
}

impl GeneratorParts {
    pub fn from_model(coeffs: &ModelCoefficients, measure: &LevyMeasure) -> Self {
        GeneratorParts {
            q: coeffs.q,
            d: coeffs.d,
            drift: coeffs.drift.clone(),
            diffusion: coeffs.diffusion.clone(),
            jump: coeffs.jump.clone(),
            measure: measure.clone(),
        }
    }
}

/// `ℒ̃^ε[u](t, x)`.
pub fn generator(u: &dyn SpaceTimeFunction, t: f64, x: &[f64], parts: &GeneratorParts, eq: &EquationSpec) -> Result<f64> {
    let sigma = if eq.zeta && eq.epsilon > 0.0 { Some(small_jump_covariance(&parts.measure, eq.epsilon)?) } else { None };
    let local = apply_local(u, t, x, &parts.drift, &parts.diffusion, parts.d, &parts.jump, sigma.as_ref());
    Ok(local + apply_nonlocal_j(u, t, x, &parts.jump, &parts.measure, eq.epsilon, eq.inner)?)
}

/// Constants `A = ∫(cos ωS − 1)ν`, `B = ∫(sin ωS − ωS)ν` with `S = Σ_k β_k(e)`,
/// so that `𝒥u = amplitude·(A cos θ − B sin θ)` for a cosine solution and a
/// state-independent `β`.
#[derive(Debug, Clone, Copy, PartialEq)]
struct PhaseConstants {
    a: f64,
    b: f64,
}

/// `f(t,x,y,z,p) = h(t,x) + κ sin y` with `h = −(∂_t u* + ℒ̃^ε u*) − κ sin u*`,
/// so that `u*` solves the equation selected by `spec`.
pub struct ManufacturedDriver {
    pub solution: Arc<dyn SpaceTimeFunction>,
    pub kappa: f64,
    pub spec: EquationSpec,
    parts: GeneratorParts,
    sigma_eps: Option<DMatrix<f64>>,
    phase: Option<PhaseConstants>,
}

impl ManufacturedDriver {
    pub fn new(solution: Arc<dyn SpaceTimeFunction>, kappa: f64, parts: GeneratorParts, spec: EquationSpec) -> Result<Self> {
        let sigma_eps =
            if spec.zeta && spec.epsilon > 0.0 { Some(small_jump_covariance(&parts.measure, spec.epsilon)?) } else { None };
        let phase = match solution.as_cosine() {
            Some(c) if parts.jump.state_independent && c.amplitude != 0.0 && c.frequency != 0.0 => {
                // probe 𝒥 at phases 0 and π/2
                let q = parts.q;
                let mut x = vec![0.0; q];
                let at0 = apply_nonlocal_j(c, 0.0, &x, &parts.jump, &parts.measure, spec.epsilon, spec.inner)?;
                x[0] = std::f64::consts::FRAC_PI_2 / c.frequency;
                let at90 = apply_nonlocal_j(c, 0.0, &x, &parts.jump, &parts.measure, spec.epsilon, spec.inner)?;
                Some(PhaseConstants { a: at0 / c.amplitude, b: -at90 / c.amplitude })
            }
            _ => None,
        };
        Ok(ManufacturedDriver { solution, kappa, spec, parts, sigma_eps, phase })
    }

    /// `ℒ̃^ε[u*](t, x)`.
    pub fn generator_at(&self, t: f64, x: &[f64]) -> Result<f64> {
        let u = self.solution.as_ref();
        let local = apply_local(u, t, x, &self.parts.drift, &self.parts.diffusion, self.parts.d, &self.parts.jump, self.sigma_eps.as_ref());
        let nonlocal = match (self.phase, u.as_cosine()) {
            (Some(pc), Some(c)) => {
                let th = c.phase(t, x);
                c.amplitude * (pc.a * th.cos() - pc.b * th.sin())
            }
            _ => apply_nonlocal_j(u, t, x, &self.parts.jump, &self.parts.measure, self.spec.epsilon, self.spec.inner)?,
        };
        Ok(local + nonlocal)
    }
}

impl Driver for ManufacturedDriver {
    fn source(&self, t: f64, x: &[f64]) -> Result<f64> {
        let u = self.solution.as_ref();
        let v = u.value(t, x);
        Ok(-(u.time_derivative(t, x) + self.generator_at(t, x)?) - self.kappa * v.sin())
    }
    fn has_source(&self) -> bool {
        true
    }
    fn core(&self, _: f64, _: &[f64], y: f64, _: &[f64], _: f64) -> f64 {
        self.kappa * y.sin()
    }
    fn core_partials(&self, _: f64, _: &[f64], y: f64, _: &[f64], _: f64, dz: &mut [f64]) -> (f64, f64) {
        dz.fill(0.0);
        (self.kappa * y.cos(), 0.0)
    }
    fn lipschitz_y(&self) -> Option<f64> {
        Some(self.kappa.abs())
    }
}

/// `∂_t u + ℒ̃^ε u + f(t, x, u, σᵀ∇u, ℬ^ε u)` evaluated through the generic
/// quadrature route with inner radius `inner`.
pub fn pde_residual(
    u: &dyn SpaceTimeFunction,
    driver: &dyn Driver,
    t: f64,
    x: &[f64],
    parts: &GeneratorParts,
    eq: &EquationSpec,
) -> Result<f64> {
    let q = parts.q;
    let d = parts.d;
    let gen = generator(u, t, x, parts, eq)?;
    let mut grad = vec![0.0; q];
    u.gradient(t, x, &mut grad);
    let mut s = vec![0.0; q * d];
    (parts.diffusion)(x, &mut s);
    let z: Vec<f64> = (0..d).map(|k| (0..q).map(|r| s[r * d + k] * grad[r]).sum()).collect();
    let p = apply_nonlocal_b(u, t, x, &parts.jump, &parts.measure, eq.epsilon, eq.zeta, eq.inner)?;
    Ok(u.time_derivative(t, x) + gen + driver.eval(t, x, u.value(t, x), &z, p)?)
}
