//! Closed-form coefficient families used by the configurations and tests.

use std::sync::Arc;

use crate::error::Result;
use crate::levy::LevyMeasure;
use crate::reference::operators::{CosineSolution, EquationSpec, GeneratorParts, ManufacturedDriver, SpaceTimeFunction};
use crate::paths::{
    CompensatorMap, Driver, ForwardJumps, JumpCoefficients, ModelCoefficients, ScalarMap, StateMap, ZeroDriver,
};

pub fn zero_drift() -> StateMap {
    Arc::new(|_: &[f64], out: &mut [f64]| out.fill(0.0))
}

pub fn constant_drift(b: Vec<f64>) -> StateMap {
    Arc::new(move |_: &[f64], out: &mut [f64]| out.copy_from_slice(&b))
}

/// `b(x) = −κ(x − m)` componentwise.
pub fn ou_drift(kappa: f64, mean: f64) -> StateMap {
    Arc::new(move |x: &[f64], out: &mut [f64]| {
        for (o, v) in out.iter_mut().zip(x) {
            *o = -kappa * (v - mean);
        }
    })
}

/// Constant `σ`, q×d row-major.
pub fn constant_diffusion(sigma: Vec<f64>) -> StateMap {
    Arc::new(move |_: &[f64], out: &mut [f64]| out.copy_from_slice(&sigma))
}

/// `σ = s·I` for `q = d`.
pub fn scalar_diffusion(q: usize, s: f64) -> StateMap {
    let mut m = vec![0.0; q * q];
    for k in 0..q {
        m[k * q + k] = s;
    }
    constant_diffusion(m)
}

pub fn gamma_min1(scale: f64) -> ScalarMap {
    Arc::new(move |e: &[f64]| scale * e.iter().map(|v| v * v).sum::<f64>().sqrt().min(1.0))
}

pub fn gamma_zero() -> ScalarMap {
    Arc::new(|_: &[f64]| 0.0)
}

/// `∫_{|e|>ε} e ν(de)` per coordinate.
fn first_moment_beyond(measure: &LevyMeasure, epsilon: f64) -> Vec<f64> {
    let mut m = vec![0.0; measure.dim()];
    for (axis, sign, side) in measure.sides() {
        m[axis] += sign * side.moment(1, epsilon, f64::INFINITY).unwrap_or(f64::NAN);
    }
    m
}

/// `β(x, e) = c·e`, with exact compensator `c ∫_{|e|>ε} e ν(de)`.
pub fn additive_jumps(measure: &LevyMeasure, c: f64, gamma: ScalarMap, d_gamma0: Option<Vec<f64>>) -> JumpCoefficients {
    let q = measure.dim();
    let m = measure.clone();
    let compensator: CompensatorMap = Arc::new(move |_: &[f64], eps: f64, out: &mut [f64]| {
        for (o, v) in out.iter_mut().zip(first_moment_beyond(&m, eps)) {
            *o = c * v;
        }
    });
    JumpCoefficients {
        beta: Arc::new(move |_: &[f64], e: &[f64], out: &mut [f64]| {
            for (o, v) in out.iter_mut().zip(e) {
                *o = c * v;
            }
        }),
        d_beta0: Some(Arc::new(move |_: &[f64], out: &mut [f64]| {
            out.fill(0.0);
            for k in 0..q {
                out[k * q + k] = c;
            }
        })),
        gamma,
        d_gamma0,
        compensator: Some(compensator),
        state_independent: true,
    }
}

/// `β(x, e)_k = (a + c·x_k)·e_k`: jump size scales with the state.
pub fn state_scaled_jumps(measure: &LevyMeasure, a: f64, c: f64, gamma: ScalarMap, d_gamma0: Option<Vec<f64>>) -> JumpCoefficients {
    let q = measure.dim();
    let m = measure.clone();
    let compensator: CompensatorMap = Arc::new(move |x: &[f64], eps: f64, out: &mut [f64]| {
        for ((o, v), xk) in out.iter_mut().zip(first_moment_beyond(&m, eps)).zip(x) {
            *o = (a + c * xk) * v;
        }
    });
    JumpCoefficients {
        beta: Arc::new(move |x: &[f64], e: &[f64], out: &mut [f64]| {
            for k in 0..out.len() {
                out[k] = (a + c * x[k]) * e[k];
            }
        }),
        d_beta0: Some(Arc::new(move |x: &[f64], out: &mut [f64]| {
            out.fill(0.0);
            for k in 0..q {
                out[k * q + k] = a + c * x[k];
            }
        })),
        gamma,
        d_gamma0,
        compensator: Some(compensator),
        state_independent: false,
    }
}

pub fn terminal_sum() -> ScalarMap {
    Arc::new(|x: &[f64]| x.iter().sum())
}

pub fn terminal_constant(k: f64) -> ScalarMap {
    Arc::new(move |_: &[f64]| k)
}

/// `q = d = 1`, `b = 0`, constant `σ`, `β(x,e) = e`, `γ = 1∧|e|`, `f = 0`,
/// `g(x) = x`. The solution is `u(t,x) = x` for every truncation level.
pub fn martingale_model(measure: &LevyMeasure, sigma: f64, zeta: bool) -> ModelCoefficients {
    ModelCoefficients {
        q: 1,
        d: 1,
        drift: zero_drift(),
        diffusion: constant_diffusion(vec![sigma]),
        jump: additive_jumps(measure, 1.0, gamma_min1(1.0), Some(vec![0.0])),
        driver: Arc::new(ZeroDriver) as Arc<dyn Driver>,
        terminal: terminal_sum(),
        zeta,
        forward_jumps: ForwardJumps::Exact,
    }
}

/// One-dimensional problem with `u*(t,x) = solution`, additive jumps `β = e`,
/// `γ = 1∧|e|`, constant `σ`, `b = 0`, `g = u*(T, ·)` and the driver
/// `h(t,x) + κ sin y` manufactured against the equation `spec`.
pub fn manufactured_model(
    measure: &LevyMeasure,
    sigma: f64,
    zeta: bool,
    solution: CosineSolution,
    kappa: f64,
    horizon: f64,
    spec: EquationSpec,
) -> Result<ModelCoefficients> {
    let q = measure.dim();
    let mut coeffs = ModelCoefficients {
        q,
        d: q,
        drift: zero_drift(),
        diffusion: scalar_diffusion(q, sigma),
        jump: additive_jumps(measure, 1.0, gamma_min1(1.0), Some(vec![0.0; q])),
        driver: Arc::new(ZeroDriver) as Arc<dyn Driver>,
        terminal: Arc::new(move |x: &[f64]| solution.value(horizon, x)),
        zeta,
        forward_jumps: ForwardJumps::Exact,
    };
    let parts = GeneratorParts::from_model(&coeffs, measure);
    coeffs.driver = Arc::new(ManufacturedDriver::new(Arc::new(solution), kappa, parts, spec)?);
    Ok(coeffs)
}
