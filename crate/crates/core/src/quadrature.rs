//! Adaptive Gauss–Legendre quadrature, with a logarithmic substitution for
//! integrands that are singular at the origin or extend to infinity.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::sync::OnceLock;

use crate::error::{Error, Result};

pub const DEFAULT_REL_TOL: f64 = 1e-10;
const MAX_PANELS: usize = 20_000;
const GL_ORDER: usize = 10;

/// Integral value with the accumulated error estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quadrature {
    pub value: f64,
    pub error: f64,
}

fn legendre_rule(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

fn rule() -> &'static (Vec<f64>, Vec<f64>) {
    static RULE: OnceLock<(Vec<f64>, Vec<f64>)> = OnceLock::new();
    RULE.get_or_init(|| legendre_rule(GL_ORDER))
}

/// Nodes and weights of the fixed rule on `[-1, 1]`.
pub fn legendre_nodes() -> (Vec<f64>, Vec<f64>) {
    rule().clone()
}

/// Fixed-order Gauss–Legendre on `[a, b]`.
pub fn gauss_legendre<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> f64 {
    let (nodes, weights) = rule();
    let half = 0.5 * (b - a);
    let mid = 0.5 * (a + b);
    nodes.iter().zip(weights).map(|(x, w)| w * f(mid + half * x)).sum::<f64>() * half
}

struct Panel {
    a: f64,
    b: f64,
    value: f64,
    error: f64,
}

impl PartialEq for Panel {
    fn eq(&self, other: &Self) -> bool {
        self.error == other.error
    }
}
impl Eq for Panel {}
impl PartialOrd for Panel {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Panel {
    fn cmp(&self, other: &Self) -> Ordering {
        self.error.total_cmp(&other.error)
    }
}

fn panel<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, coarse: f64) -> (Panel, f64, f64) {
    let m = 0.5 * (a + b);
    let left = gauss_legendre(f, a, m);
    let right = gauss_legendre(f, m, b);
    let value = left + right;
    (Panel { a, b, value, error: (value - coarse).abs() }, left, right)
}

/// Globally adaptive integration of `f` over `[a, b]` to relative tolerance
/// `rel_tol` (with an absolute floor `abs_tol`).
pub fn integrate<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, rel_tol: f64, abs_tol: f64) -> Result<Quadrature> {
    if a == b {
        return Ok(Quadrature { value: 0.0, error: 0.0 });
    }
    if !(a.is_finite() && b.is_finite()) {
        return Err(Error::InvalidArgument(format!("finite bounds required, got [{a}, {b}]")));
    }
    let (lo, hi, sign) = if a < b { (a, b, 1.0) } else { (b, a, -1.0) };
    let coarse = gauss_legendre(&f, lo, hi);
    let mut heap = BinaryHeap::new();
    let (p, _, _) = panel(&f, lo, hi, coarse);
    let mut total = p.value;
    let mut total_err = p.error;
    heap.push(p);
    loop {
        if !total.is_finite() {
            return Err(Error::Quadrature { achieved: f64::INFINITY, tolerance: rel_tol });
        }
        if total_err <= (rel_tol * total.abs()).max(abs_tol) {
            return Ok(Quadrature { value: sign * total, error: total_err });
        }
        if heap.len() >= MAX_PANELS {
            return Err(Error::Quadrature {
                achieved: total_err / total.abs().max(f64::MIN_POSITIVE),
                tolerance: rel_tol,
            });
        }
        let worst = heap.pop().expect("non-empty heap");
        total -= worst.value;
        total_err -= worst.error;
        let m = 0.5 * (worst.a + worst.b);
        // the halves of the parent's refined estimate become the children's coarse values
        let left_coarse = gauss_legendre(&f, worst.a, m);
        let right_coarse = worst.value - left_coarse;
        for (a, b, c) in [(worst.a, m, left_coarse), (m, worst.b, right_coarse)] {
            let (child, _, _) = panel(&f, a, b, c);
            total += child.value;
            total_err += child.error;
            heap.push(child);
        }
        total_err = total_err.max(0.0);
    }
}

/// `∫_a^b f(e) de` for `0 < a < b` through `e = exp(s)`.
pub fn integrate_log<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, rel_tol: f64) -> Result<Quadrature> {
    if !(a > 0.0 && b >= a) {
        return Err(Error::InvalidArgument(format!("log substitution needs 0 < a <= b, got [{a}, {b}]")));
    }
    if b == a {
        return Ok(Quadrature { value: 0.0, error: 0.0 });
    }
    integrate(|s: f64| { let e = s.exp(); f(e) * e }, a.ln(), b.ln(), rel_tol, 0.0)
}

/// `∫_lo^hi f(e) de` on `0 <= lo < hi <= ∞`, stepping unit chunks in `s = ln e`
/// towards the origin and towards infinity until the chunks become negligible.
/// `abs_tol` is an absolute floor for integrands that cancel to roundoff.
pub fn integrate_radial<F: Fn(f64) -> f64>(f: F, lo: f64, hi: f64, rel_tol: f64, abs_tol: f64) -> Result<Quadrature> {
    if !(lo >= 0.0 && hi >= lo) {
        return Err(Error::InvalidArgument(format!("radial range must satisfy 0 <= lo <= hi, got [{lo}, {hi}]")));
    }
    if lo == hi {
        return Ok(Quadrature { value: 0.0, error: 0.0 });
    }
    let g = |s: f64| {
        let e = s.exp();
        let v = f(e) * e;
        if v.is_finite() { v } else { 0.0 }
    };
    let mut value = 0.0;
    let mut error = 0.0;
    // bounded core
    let core_lo = if lo > 0.0 { lo } else if hi.is_finite() { hi * 0.5 } else { 1.0 };
    let core_hi = if hi.is_finite() { hi } else { core_lo.max(1.0) * 2.0 };
    if core_hi > core_lo {
        let q = integrate(g, core_lo.ln(), core_hi.ln(), rel_tol, abs_tol)?;
        value += q.value;
        error += q.error;
    }
    let mut negligible = 0;
    if lo == 0.0 {
        let mut upper = core_lo.ln();
        for _ in 0..800 {
            let q = integrate(g, upper - 1.0, upper, rel_tol, (1e-3 * abs_tol).max(1e-300))?;
            value += q.value;
            error += q.error;
            upper -= 1.0;
            if q.value.abs() <= (1e-3 * rel_tol * value.abs()).max(1e-3 * abs_tol) || q.value == 0.0 {
                negligible += 1;
                if negligible >= 4 {
                    break;
                }
            } else {
                negligible = 0;
            }
        }
    }
    negligible = 0;
    if hi.is_infinite() {
        let mut lower = core_hi.ln();
        for _ in 0..800 {
            let q = integrate(g, lower, lower + 1.0, rel_tol, (1e-3 * abs_tol).max(1e-300))?;
            value += q.value;
            error += q.error;
            lower += 1.0;
            if q.value.abs() <= (1e-3 * rel_tol * value.abs()).max(1e-3 * abs_tol) || q.value == 0.0 {
                negligible += 1;
                if negligible >= 4 {
                    break;
                }
            } else {
                negligible = 0;
            }
        }
    }
    Ok(Quadrature { value, error })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn legendre_rule_integrates_polynomials_exactly() {
        let q = gauss_legendre(&|x: f64| x.powi(19) + 3.0 * x.powi(4), -1.0, 1.0);
        assert!((q - 1.2).abs() < 1e-14);
    }

    #[test]
    fn adaptive_handles_sqrt_singularity() {
        let q = integrate(|x: f64| x.sqrt(), 0.0, 1.0, 1e-10, 0.0).unwrap();
        assert!((q.value - 2.0 / 3.0).abs() < 1e-9);
    }

    #[test]
    fn radial_singular_power() {
        // ∫_0^0.1 e^2 e^{-1.5} de = 0.1^1.5 / 1.5
        let q = integrate_radial(|e: f64| e.powf(0.5), 0.0, 0.1, 1e-10, 0.0).unwrap();
        assert!((q.value - 0.1f64.powf(1.5) / 1.5).abs() < 1e-12);
    }

    #[test]
    fn radial_to_infinity() {
        let q = integrate_radial(|e: f64| (-e).exp(), 1.0, f64::INFINITY, 1e-10, 0.0).unwrap();
        assert!((q.value - (-1.0f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn non_convergence_is_reported() {
        let err = integrate(|x: f64| (1.0 / x).sin() / x, 1e-12, 1.0, 1e-14, 0.0);
        assert!(matches!(err, Err(Error::Quadrature { .. })));
    }
}
