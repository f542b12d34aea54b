//! ReLU multilayer perceptrons with reverse-mode gradients and Adam.
//!
//! Batches are row-major `batch × width` matrices and every layer computes
//! `a ↦ a·P + β`.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `fan_in × fan_out`
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Layer>,
}

/// Gradient with the same layout as the network parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrad {
    pub layers: Vec<Layer>,
}

/// Pre-activations of a forward pass, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    inputs: Vec<Array2<f64>>,
    output: Array2<f64>,
}

impl ForwardCache {
    pub fn output(&self) -> &Array2<f64> {
        &self.output
    }
}

impl Mlp {
    /// `widths = [n_in, m, …, m, n_out]`; all parameters zero.
    pub fn zeros(widths: &[usize]) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::InvalidArgument(format!("bad layer widths {widths:?}")));
        }
        let layers = widths
            .windows(2)
            .map(|w| Layer { weights: Array2::zeros((w[0], w[1])), bias: Array1::zeros(w[1]) })
            .collect();
        Ok(Mlp { layers })
    }

    /// Weights `N(0, 2/fan_in)`, biases zero.
    pub fn he_init<R: Rng + ?Sized>(widths: &[usize], rng: &mut R) -> Result<Self> {
        let mut net = Self::zeros(widths)?;
        for layer in &mut net.layers {
            let fan_in = layer.weights.nrows() as f64;
            let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive variance");
            layer.weights.mapv_inplace(|_| normal.sample(rng));
        }
        Ok(net)
    }

    pub fn n_in(&self) -> usize {
        self.layers[0].weights.nrows()
    }

    pub fn n_out(&self) -> usize {
        self.layers.last().expect("at least one layer").weights.ncols()
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.n_in()];
        w.extend(self.layers.iter().map(|l| l.weights.ncols()));
        w
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// Evaluates a single input vector.
    pub fn eval(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.n_in() {
            return Err(Error::Contract(format!("input has {} entries, network expects {}", x.len(), self.n_in())));
        }
        let view = ArrayView2::from_shape((1, x.len()), x).expect("row vector");
        Ok(self.forward(view).into_raw_vec_and_offset().0)
    }

    pub fn forward(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        let last = self.layers.len() - 1;
        let mut a = x.to_owned();
        for (l, layer) in self.layers.iter().enumerate() {
            a = a.dot(&layer.weights) + &layer.bias;
            if l < last {
                a.mapv_inplace(|v| v.max(0.0));
            }
        }
        a
    }

    pub fn forward_cached(&self, x: ArrayView2<'_, f64>) -> ForwardCache {
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut a = x.to_owned();
        for (l, layer) in self.layers.iter().enumerate() {
            let z = a.dot(&layer.weights) + &layer.bias;
            inputs.push(a);
            a = if l < last { z.mapv(|v| v.max(0.0)) } else { z };
        }
        ForwardCache { inputs, output: a }
    }

    /// Gradient of `Σ_b ⟨cot_b, net(x_b)⟩`; also returns the input cotangent.
    pub fn backward(&self, cache: &ForwardCache, cotangent: ArrayView2<'_, f64>) -> (MlpGrad, Array2<f64>) {
        let mut grads: Vec<Layer> = Vec::with_capacity(self.layers.len());
        let mut delta = cotangent.to_owned();
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let input = &cache.inputs[l];
            grads.push(Layer { weights: input.t().dot(&delta), bias: delta.sum_axis(Axis(0)) });
            let mut back = delta.dot(&layer.weights.t());
            if l > 0 {
                // the stored input is post-ReLU, so zero exactly where the pre-activation was <= 0
                back.zip_mut_with(input, |g, a| {
                    if *a <= 0.0 {
                        *g = 0.0
                    }
                });
            }
            delta = back;
        }
        grads.reverse();
        (MlpGrad { layers: grads }, delta)
    }

    pub fn grad(&self, x: ArrayView2<'_, f64>, cotangent: ArrayView2<'_, f64>) -> Result<MlpGrad> {
        if x.ncols() != self.n_in() || cotangent.ncols() != self.n_out() || x.nrows() != cotangent.nrows() {
            return Err(Error::Contract("input/cotangent shapes do not match the network".into()));
        }
        let cache = self.forward_cached(x);
        Ok(self.backward(&cache, cotangent).0)
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            v.extend(l.weights.iter());
            v.extend(l.bias.iter());
        }
        v
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::Format(format!("expected {} parameters, got {}", self.param_count(), flat.len())));
        }
        let mut it = flat.iter().copied();
        for l in &mut self.layers {
            l.weights.iter_mut().for_each(|w| *w = it.next().expect("length checked"));
            l.bias.iter_mut().for_each(|b| *b = it.next().expect("length checked"));
        }
        Ok(())
    }
}

impl MlpGrad {
    pub fn zeros_like(net: &Mlp) -> Self {
        MlpGrad {
            layers: net
                .layers
                .iter()
                .map(|l| Layer { weights: Array2::zeros(l.weights.raw_dim()), bias: Array1::zeros(l.bias.len()) })
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &MlpGrad) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weights += &b.weights;
            a.bias += &b.bias;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for l in &mut self.layers {
            l.weights *= s;
            l.bias *= s;
        }
    }

    pub fn to_flat(&self) -> Vec<f64> {
        Mlp { layers: self.layers.clone() }.to_flat()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamState {
    pub fn new(config: AdamConfig, n_params: usize) -> Self {
        AdamState { config, step: 0, m: vec![0.0; n_params], v: vec![0.0; n_params] }
    }

    /// One bias-corrected update of `params` with learning rate `lr`.
    pub fn update(&mut self, params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Contract("Adam state, parameters and gradients differ in length".into()));
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps, .. } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for k in 0..params.len() {
            let g = grads[k];
            self.m[k] = beta1 * self.m[k] + (1.0 - beta1) * g;
            self.v[k] = beta2 * self.v[k] + (1.0 - beta2) * g * g;
            let m_hat = self.m[k] / c1;
            let v_hat = self.v[k] / c2;
            params[k] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }

    pub fn step_net(&mut self, net: &mut Mlp, grad: &MlpGrad, lr: f64) -> Result<()> {
        let mut flat = net.to_flat();
        self.update(&mut flat, &grad.to_flat(), lr)?;
        net.set_flat(&flat)
    }
}
