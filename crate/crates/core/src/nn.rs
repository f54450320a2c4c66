//! Small dense networks: activations, multilayer perceptrons with
//! hand-written reverse mode, and Adam with per-epoch exponential decay.
//!
//! Batches are stored column-wise: an `in x batch` matrix maps to an
//! `out x batch` matrix.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("network needs at least an input and an output width")]
    TooFewLayers,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Mish,
    Relu,
    Silu,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Mish => mish(x),
            Activation::Relu => x.max(0.0),
            Activation::Silu => x * sigmoid(x),
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Mish => mish_derivative(x),
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Silu => {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Mish => "mish",
            Activation::Relu => "relu",
            Activation::Silu => "silu",
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "mish" => Ok(Activation::Mish),
            "relu" => Ok(Activation::Relu),
            "silu" | "swish" => Ok(Activation::Silu),
            other => Err(format!("unknown activation `{other}` (mish, relu, silu)")),
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `x * tanh(softplus(x))`.
///
/// Evaluated as `x n / (n + 2)` with `n = e^x (e^x + 2)`, which equals
/// `tanh(ln(1 + e^x))` but costs a single exponential.
pub fn mish(x: f64) -> f64 {
    if x > 20.0 {
        return x * softplus(x).tanh();
    }
    let ex = x.exp();
    let n = ex * (ex + 2.0);
    x * n / (n + 2.0)
}

/// Closed-form derivative `e^x w / d^2` with
/// `w = 4(x+1) + 4e^{2x} + e^{3x} + e^x(4x+6)` and `d = (e^x+1)^2 + 1`.
///
/// Above `x = 20` the powers of `e^x` are large enough to lose precision, so
/// the equivalent `tanh(sp) + x sech^2(sp) sigmoid(x)` is used instead.
pub fn mish_derivative(x: f64) -> f64 {
    if x > 20.0 {
        let t = softplus(x).tanh();
        return t + x * (1.0 - t * t) * sigmoid(x);
    }
    let ex = x.exp();
    let omega = 4.0 * (x + 1.0) + 4.0 * ex * ex + ex * ex * ex + ex * (4.0 * x + 6.0);
    let delta = (ex + 1.0) * (ex + 1.0) + 1.0;
    ex * omega / (delta * delta)
}

/// One affine map `W a + b`; `weight` is `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
}

impl Layer {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: DMatrix::zeros(fan_out, fan_in),
            bias: DVector::zeros(fan_out),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.ncols()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.nrows()
    }

    fn affine(&self, input: &DMatrix<f64>) -> DMatrix<f64> {
        let mut z = &self.weight * input;
        for mut col in z.column_iter_mut() {
            col += &self.bias;
        }
        z
    }
}

/// Multilayer perceptron with a shared hidden activation and linear output.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<Layer>,
    activation: Activation,
}

/// Intermediate values kept by [`Mlp::forward_traced`] for the backward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    /// Input to each layer; `inputs[0]` is the network input.
    inputs: Vec<DMatrix<f64>>,
    /// Pre-activation of each hidden layer.
    pre: Vec<DMatrix<f64>>,
    output: DMatrix<f64>,
}

impl Trace {
    pub fn output(&self) -> &DMatrix<f64> {
        &self.output
    }
}

impl Mlp {
    /// Glorot-uniform weights, zero biases.
    pub fn new<R: Rng + ?Sized>(widths: &[usize], activation: Activation, rng: &mut R) -> Result<Self, NnError> {
        let mut mlp = Self::zeros(widths, activation)?;
        for layer in &mut mlp.layers {
            let bound = (6.0 / (layer.fan_in() + layer.fan_out()) as f64).sqrt();
            for w in layer.weight.iter_mut() {
                *w = rng.gen_range(-bound..=bound);
            }
        }
        Ok(mlp)
    }

    pub fn zeros(widths: &[usize], activation: Activation) -> Result<Self, NnError> {
        if widths.len() < 2 {
            return Err(NnError::TooFewLayers);
        }
        let layers = widths.windows(2).map(|w| Layer::zeros(w[0], w[1])).collect();
        Ok(Self { layers, activation })
    }

    /// Assembles a network from explicit layers, checking that widths chain.
    pub fn from_layers(layers: Vec<Layer>, activation: Activation) -> Result<Self, NnError> {
        if layers.is_empty() {
            return Err(NnError::TooFewLayers);
        }
        for pair in layers.windows(2) {
            if pair[0].fan_out() != pair[1].fan_in() {
                return Err(NnError::DimensionMismatch {
                    expected: pair[0].fan_out(),
                    got: pair[1].fan_in(),
                });
            }
        }
        for l in &layers {
            if l.bias.len() != l.fan_out() {
                return Err(NnError::DimensionMismatch {
                    expected: l.fan_out(),
                    got: l.bias.len(),
                });
            }
        }
        Ok(Self { layers, activation })
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn widths(&self) -> Vec<usize> {
        std::iter::once(self.input_width())
            .chain(self.layers.iter().map(Layer::fan_out))
            .collect()
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().expect("nonempty").fan_out()
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    fn check_input(&self, input: &DMatrix<f64>) -> Result<(), NnError> {
        if input.nrows() != self.input_width() {
            return Err(NnError::DimensionMismatch {
                expected: self.input_width(),
                got: input.nrows(),
            });
        }
        Ok(())
    }

    pub fn forward(&self, input: &DMatrix<f64>) -> Result<DMatrix<f64>, NnError> {
        self.check_input(input)?;
        let last = self.layers.len() - 1;
        let mut a = self.layers[0].affine(input);
        if last > 0 {
            a.apply(|z| *z = self.activation.apply(*z));
        }
        for (i, layer) in self.layers.iter().enumerate().skip(1) {
            a = layer.affine(&a);
            if i < last {
                a.apply(|z| *z = self.activation.apply(*z));
            }
        }
        Ok(a)
    }

    /// Single-sample convenience wrapper around [`Mlp::forward`].
    pub fn forward_one(&self, input: &[f64]) -> Result<Vec<f64>, NnError> {
        let x = DMatrix::from_column_slice(input.len(), 1, input);
        Ok(self.forward(&x)?.as_slice().to_vec())
    }

    pub fn forward_traced(&self, input: &DMatrix<f64>) -> Result<Trace, NnError> {
        self.check_input(input)?;
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(last);
        let mut a = input.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let z = layer.affine(&a);
            inputs.push(a);
            if i < last {
                a = z.map(|v| self.activation.apply(v));
                pre.push(z);
            } else {
                a = z;
            }
        }
        Ok(Trace {
            inputs,
            pre,
            output: a,
        })
    }

    /// Reverse pass: parameter gradients and the gradient with respect to
    /// the input, given `upstream = dL/d(output)`.
    pub fn backward(&self, trace: &Trace, upstream: &DMatrix<f64>) -> Result<(MlpGrads, DMatrix<f64>), NnError> {
        if upstream.shape() != trace.output.shape() {
            return Err(NnError::DimensionMismatch {
                expected: trace.output.nrows(),
                got: upstream.nrows(),
            });
        }
        let n = self.layers.len();
        let mut grads: Vec<Layer> = Vec::with_capacity(n);
        let mut delta = upstream.clone();
        for i in (0..n).rev() {
            if i < n - 1 {
                let act = self.activation;
                delta.zip_apply(&trace.pre[i], |d, z| *d *= act.derivative(z));
            }
            let weight = &delta * trace.inputs[i].transpose();
            let bias = DVector::from_iterator(delta.nrows(), delta.row_iter().map(|r| r.sum()));
            grads.push(Layer { weight, bias });
            delta = self.layers[i].weight.transpose() * &delta;
        }
        grads.reverse();
        Ok((MlpGrads { layers: grads }, delta))
    }

    /// Forward then backward in one call.
    pub fn gradient(&self, input: &DMatrix<f64>, upstream: &DMatrix<f64>) -> Result<(MlpGrads, DMatrix<f64>), NnError> {
        let trace = self.forward_traced(input)?;
        self.backward(&trace, upstream)
    }

    /// Parameter tensors in a fixed order: weight then bias, layer by layer.
    pub fn params(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.as_slice(), l.bias.as_slice()])
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weight.as_mut_slice(), l.bias.as_mut_slice()])
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.params().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

/// Gradients shaped like the layers of an [`Mlp`].
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads {
    pub layers: Vec<Layer>,
}

impl MlpGrads {
    pub fn zeros_like(mlp: &Mlp) -> Self {
        Self {
            layers: mlp.layers.iter().map(|l| Layer::zeros(l.fan_in(), l.fan_out())).collect(),
        }
    }

    pub fn tensors(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.as_slice(), l.bias.as_slice()])
            .collect()
    }

    pub fn scale(&mut self, factor: f64) {
        for l in &mut self.layers {
            l.weight *= factor;
            l.bias *= factor;
        }
    }

    pub fn add_assign(&mut self, other: &MlpGrads) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight += &b.weight;
            a.bias += &b.bias;
        }
    }
}

/// Adam moments and learning-rate schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub base_lr: f64,
    pub lr: f64,
    /// Multiplicative learning-rate decay applied by [`AdamState::decay_epoch`].
    pub gamma: f64,
    pub step: u64,
    pub epoch: u32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    /// Moments sized for tensors of the given lengths.
    pub fn new(tensor_lens: &[usize], lr: f64, gamma: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            base_lr: lr,
            lr,
            gamma,
            step: 0,
            epoch: 0,
            m: tensor_lens.iter().map(|&n| vec![0.0; n]).collect(),
            v: tensor_lens.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// Bias-corrected Adam update of every tensor in place.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) {
        assert_eq!(params.len(), self.m.len(), "tensor count");
        assert_eq!(grads.len(), self.m.len(), "tensor count");
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps, lr) = (self.beta1, self.beta2, self.eps, self.lr);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            assert_eq!(p.len(), g.len(), "tensor shape");
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }

    /// Ends an epoch: `lr <- lr * gamma`.
    pub fn decay_epoch(&mut self) {
        self.epoch += 1;
        self.lr *= self.gamma;
    }
}
