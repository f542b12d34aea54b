//! Global polynomial least squares on standardized states.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Monomials of degree `<= degree` in standardized coordinates. Coordinates
/// that are constant over the anchor cloud are dropped.
#[derive(Debug, Clone, PartialEq)]
pub struct PolynomialBasis {
    q: usize,
    mean: Vec<f64>,
    scale: Vec<f64>,
    exponents: Vec<Vec<u32>>,
}

fn monomials(active: &[usize], q: usize, degree: u32) -> Vec<Vec<u32>> {
    let mut out = vec![vec![0; q]];
    let mut frontier = vec![vec![0u32; q]];
    for _ in 0..degree {
        let mut next = Vec::new();
        for m in &frontier {
            // extend only at or after the last raised coordinate to avoid duplicates
            let last = active.iter().rposition(|&k| m[k] > 0).unwrap_or(0);
            for &k in &active[last..] {
                let mut e = m.clone();
                e[k] += 1;
                next.push(e);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

impl PolynomialBasis {
    /// `anchors` is row-major `n × q`.
    pub fn new(anchors: &[f64], q: usize, degree: u32) -> Self {
        let n = (anchors.len() / q.max(1)).max(1);
        let mut mean = vec![0.0; q];
        let mut scale = vec![0.0; q];
        for k in 0..q {
            let col = anchors.iter().skip(k).step_by(q);
            let m = col.clone().sum::<f64>() / n as f64;
            let v = col.map(|x| (x - m) * (x - m)).sum::<f64>() / n as f64;
            mean[k] = m;
            scale[k] = v.sqrt();
        }
        let active: Vec<usize> = (0..q).filter(|&k| scale[k] > 1e-12 * (1.0 + mean[k].abs())).collect();
        let exponents = if active.is_empty() { vec![vec![0; q]] } else { monomials(&active, q, degree) };
        PolynomialBasis { q, mean, scale, exponents }
    }

    pub fn len(&self) -> usize {
        self.exponents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.exponents.is_empty()
    }

    pub fn features_into(&self, x: &[f64], out: &mut [f64]) {
        let z: Vec<f64> = (0..self.q)
            .map(|k| if self.scale[k] > 0.0 { (x[k] - self.mean[k]) / self.scale[k] } else { 0.0 })
            .collect();
        for (o, e) in out.iter_mut().zip(&self.exponents) {
            *o = e.iter().zip(&z).map(|(&p, &v)| v.powi(p as i32)).product();
        }
    }

    pub fn features(&self, x: &[f64]) -> Vec<f64> {
        let mut f = vec![0.0; self.len()];
        self.features_into(x, &mut f);
        f
    }

    pub fn design(&self, anchors: &[f64]) -> DMatrix<f64> {
        let n = anchors.len() / self.q;
        let mut m = DMatrix::zeros(n, self.len());
        let mut f = vec![0.0; self.len()];
        for r in 0..n {
            self.features_into(&anchors[r * self.q..(r + 1) * self.q], &mut f);
            for (c, v) in f.iter().enumerate() {
                m[(r, c)] = *v;
            }
        }
        m
    }
}

/// Factorised ridge normal equations for a fixed design; many targets can
/// be fitted against one factorisation.
#[derive(Debug, Clone)]
pub struct LeastSquares {
    design: DMatrix<f64>,
    gram: DMatrix<f64>,
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    pub ridge: f64,
    /// The requested ridge was too small for a stable factorisation.
    pub ridge_fallback: bool,
}

/// Fitted coefficients with diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct Fit {
    pub coef: Vec<f64>,
    pub std_errors: Vec<f64>,
    pub residual_variance: f64,
    /// `‖b − A c‖ / ‖b‖` of the normal equations after refinement.
    pub normal_residual: f64,
}

impl LeastSquares {
    pub fn new(design: DMatrix<f64>, ridge: f64) -> Result<Self> {
        let n = design.nrows().max(1) as f64;
        let gram_raw = design.transpose() * &design;
        let mut ridge_used = ridge;
        for attempt in 0..8 {
            let mut gram = gram_raw.clone();
            for k in 1..gram.nrows() {
                gram[(k, k)] += ridge_used * n;
            }
            if gram.nrows() > 0 {
                gram[(0, 0)] += 1e-300;
            }
            if let Some(chol) = gram.clone().cholesky() {
                let diag_ok = (0..gram.nrows()).all(|k| chol.l()[(k, k)] > 1e-10 * gram[(k, k)].abs().sqrt());
                if diag_ok || attempt == 7 {
                    return Ok(LeastSquares { design, gram, chol, ridge: ridge_used, ridge_fallback: attempt > 0 });
                }
            }
            ridge_used = if ridge_used > 0.0 { ridge_used * 1e3 } else { 1e-10 };
        }
        Err(Error::Contract("regression normal equations are singular".into()))
    }

    pub fn fit(&self, target: &[f64]) -> Fit {
        let y = DVector::from_column_slice(target);
        let rhs = self.design.transpose() * &y;
        let mut c = self.chol.solve(&rhs);
        let rhs_norm = rhs.norm().max(f64::MIN_POSITIVE);
        let mut rel = (&rhs - &self.gram * &c).norm() / rhs_norm;
        for _ in 0..5 {
            if rel < 1e-10 {
                break;
            }
            let r = &rhs - &self.gram * &c;
            c += self.chol.solve(&r);
            rel = (&rhs - &self.gram * &c).norm() / rhs_norm;
        }
        let resid = &y - &self.design * &c;
        let n = self.design.nrows();
        let p = self.design.ncols();
        let dof = n.saturating_sub(p).max(1) as f64;
        let sigma2 = resid.norm_squared() / dof;
        let inv = self.chol.inverse();
        let std_errors = (0..p).map(|k| (sigma2 * inv[(k, k)]).max(0.0).sqrt()).collect();
        Fit {
            coef: c.iter().copied().collect(),
            std_errors,
            residual_variance: resid.norm_squared() / n.max(1) as f64,
            normal_residual: rel,
        }
    }

    pub fn design(&self) -> &DMatrix<f64> {
        &self.design
    }
}

/// Polynomial regression of a scalar target on states.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisRegression {
    pub basis: PolynomialBasis,
    pub fit: Fit,
    pub ridge_fallback: bool,
}

impl BasisRegression {
    pub fn fit(anchors: &[f64], q: usize, target: &[f64], degree: u32, ridge: f64) -> Result<Self> {
        let basis = PolynomialBasis::new(anchors, q, degree);
        let ls = LeastSquares::new(basis.design(anchors), ridge)?;
        let fit = ls.fit(target);
        Ok(BasisRegression { basis, fit, ridge_fallback: ls.ridge_fallback })
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        self.basis.features(x).iter().zip(&self.fit.coef).map(|(a, b)| a * b).sum()
    }
}

/// A basis and factorisation shared by several regressions on the same anchors.
#[derive(Debug, Clone)]
pub struct SharedRegression {
    pub basis: PolynomialBasis,
    pub ls: LeastSquares,
}

impl SharedRegression {
    pub fn new(anchors: &[f64], q: usize, degree: u32, ridge: f64) -> Result<Self> {
        let basis = PolynomialBasis::new(anchors, q, degree);
        let ls = LeastSquares::new(basis.design(anchors), ridge)?;
        Ok(SharedRegression { basis, ls })
    }

    pub fn fit(&self, target: &[f64]) -> Vec<f64> {
        self.ls.fit(target).coef
    }

    pub fn predict(&self, coef: &[f64], x: &[f64]) -> f64 {
        self.basis.features(x).iter().zip(coef).map(|(a, b)| a * b).sum()
    }

    /// Fitted values at the anchors.
    pub fn fitted(&self, coef: &[f64]) -> Vec<f64> {
        let c = DVector::from_column_slice(coef);
        (self.ls.design() * c).iter().copied().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn monomial_count() {
        let x: Vec<f64> = (0..60).map(|k| (k as f64 * 0.37).sin()).collect();
        assert_eq!(PolynomialBasis::new(&x, 1, 3).len(), 4);
        assert_eq!(PolynomialBasis::new(&x, 2, 3).len(), 10);
        assert_eq!(PolynomialBasis::new(&x, 3, 3).len(), 20);
    }

    #[test]
    fn constant_anchors_reduce_to_mean() {
        let x = vec![1.0; 10];
        let y: Vec<f64> = (0..10).map(|k| k as f64).collect();
        let r = BasisRegression::fit(&x, 1, &y, 3, 1e-8).unwrap();
        assert_eq!(r.basis.len(), 1);
        assert!((r.predict(&[1.0]) - 4.5).abs() < 1e-12);
    }

    #[test]
    fn cubic_is_reproduced() {
        let x: Vec<f64> = (0..50).map(|k| -1.0 + 0.04 * k as f64).collect();
        let y: Vec<f64> = x.iter().map(|v| 1.0 - 2.0 * v + 0.5 * v * v * v).collect();
        let r = BasisRegression::fit(&x, 1, &y, 3, 0.0).unwrap();
        for v in [-0.7, 0.1, 0.9] {
            assert!((r.predict(&[v]) - (1.0 - 2.0 * v + 0.5 * v * v * v)).abs() < 1e-9);
        }
        assert!(r.fit.normal_residual < 1e-10);
    }
}
