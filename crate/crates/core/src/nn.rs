//! Small dense feedforward networks with hand-written reverse-mode
//! gradients and an AdamW optimizer.
//!
//! Everything runs on `f64` in row-major batches (`batch × features`).
//! Weights are stored `out × in`, so a layer computes `x · Wᵀ + b`.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
    Sigmoid,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Identity => z,
            Activation::Sigmoid => sigmoid(z),
        }
    }

    /// Derivative expressed through the activation output.
    fn derivative_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
            Activation::Sigmoid => a * (1.0 - a),
        }
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetSpec {
    pub layer_sizes: Vec<usize>,
    pub activations: Vec<Activation>,
    pub seed: u64,
}

impl NetSpec {
    pub fn new(layer_sizes: Vec<usize>, activations: Vec<Activation>, seed: u64) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return Err(Error::Config(
                "a network needs at least input and output sizes".into(),
            ));
        }
        if layer_sizes.contains(&0) {
            return Err(Error::Config("layer sizes must be positive".into()));
        }
        if activations.len() != layer_sizes.len() - 1 {
            return Err(Error::Config(format!(
                "{} layers need {} activations, got {}",
                layer_sizes.len() - 1,
                layer_sizes.len() - 1,
                activations.len()
            )));
        }
        Ok(NetSpec {
            layer_sizes,
            activations,
            seed,
        })
    }

    /// relu on every hidden layer, `output` on the last.
    pub fn relu_hidden(layer_sizes: Vec<usize>, output: Activation, seed: u64) -> Result<Self> {
        let n = layer_sizes.len().saturating_sub(1);
        let mut acts = vec![Activation::Relu; n];
        if let Some(last) = acts.last_mut() {
            *last = output;
        }
        Self::new(layer_sizes, acts, seed)
    }
}

/// One affine layer followed by an activation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl LayerGrad {
    pub fn zeros_like(layer: &Layer) -> Self {
        LayerGrad {
            weight: Array2::zeros(layer.weight.raw_dim()),
            bias: Array1::zeros(layer.bias.raw_dim()),
        }
    }

    pub fn slices(&self) -> [&[f64]; 2] {
        [
            self.weight.as_slice().expect("standard layout"),
            self.bias.as_slice().expect("standard layout"),
        ]
    }
}

/// Sparse binary input: each row lists the positions holding a one.
#[derive(Debug, Clone, Copy)]
pub struct OneHotBatch<'a> {
    pub width: usize,
    pub active: &'a [Vec<usize>],
}

impl Layer {
    /// Glorot-uniform weights, zero bias.
    pub fn init<R: Rng>(
        fan_in: usize,
        fan_out: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let weight = Array2::from_shape_simple_fn((fan_out, fan_in), || {
            (2.0 * rng.random::<f64>() - 1.0) * limit
        });
        Layer {
            weight,
            bias: Array1::zeros(fan_out),
            activation,
        }
    }

    pub fn zeros(fan_in: usize, fan_out: usize, activation: Activation) -> Self {
        Layer {
            weight: Array2::zeros((fan_out, fan_in)),
            bias: Array1::zeros(fan_out),
            activation,
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.ncols()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.nrows()
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut z = standard(x.dot(&self.weight.t()));
        z += &self.bias;
        let act = self.activation;
        z.mapv_inplace(|v| act.apply(v));
        z
    }

    pub fn forward_onehot(&self, input: OneHotBatch<'_>) -> Array2<f64> {
        let mut z = Array2::zeros((input.active.len(), self.fan_out()));
        let wt = self.weight.t();
        for (mut row, active) in z.axis_iter_mut(Axis(0)).zip(input.active) {
            row.assign(&self.bias);
            for &c in active {
                row += &wt.row(c);
            }
        }
        let act = self.activation;
        z.mapv_inplace(|v| act.apply(v));
        z
    }

    /// Turn the upstream gradient on this layer's output into the gradient
    /// on its pre-activation.
    fn delta(&self, output: &Array2<f64>, upstream: &Array2<f64>) -> Array2<f64> {
        let act = self.activation;
        match act {
            Activation::Identity => upstream.clone(),
            _ => {
                let mut d = upstream.clone();
                d.zip_mut_with(output, |g, &a| *g *= act.derivative_from_output(a));
                d
            }
        }
    }

    /// Gradients for a dense batch. Returns (parameter grads, input grad).
    pub fn backward(
        &self,
        input: ArrayView2<f64>,
        output: &Array2<f64>,
        upstream: &Array2<f64>,
    ) -> (LayerGrad, Array2<f64>) {
        let delta = self.delta(output, upstream);
        let grad = LayerGrad {
            weight: standard(delta.t().dot(&input)),
            bias: delta.sum_axis(Axis(0)),
        };
        let dx = standard(delta.dot(&self.weight));
        (grad, dx)
    }

    /// Parameter gradients for a one-hot batch (no input gradient).
    pub fn backward_onehot(
        &self,
        input: OneHotBatch<'_>,
        output: &Array2<f64>,
        upstream: &Array2<f64>,
    ) -> LayerGrad {
        let delta = self.delta(output, upstream);
        let mut wt = Array2::<f64>::zeros((self.fan_in(), self.fan_out()));
        for (d, active) in delta.axis_iter(Axis(0)).zip(input.active) {
            for &c in active {
                let mut col = wt.row_mut(c);
                col += &d;
            }
        }
        LayerGrad {
            weight: wt.t().as_standard_layout().into_owned(),
            bias: delta.sum_axis(Axis(0)),
        }
    }

    pub fn param_slices_mut(&mut self) -> [&mut [f64]; 2] {
        [
            self.weight.as_slice_mut().expect("standard layout"),
            self.bias.as_slice_mut().expect("standard layout"),
        ]
    }
}

// matmul results may come back column-major; parameters and grads are
// handed to the optimiser as flat row-major slices.
fn standard(a: Array2<f64>) -> Array2<f64> {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().into_owned()
    }
}

/// Network parameters, layer by layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Net {
    pub layers: Vec<Layer>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetGrads {
    pub layers: Vec<LayerGrad>,
}

impl NetGrads {
    pub fn slices(&self) -> Vec<&[f64]> {
        self.layers.iter().flat_map(|g| g.slices()).collect()
    }
}

impl Net {
    pub fn init(spec: &NetSpec) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        Self::init_with_rng(spec, &mut rng)
    }

    /// Draw layers in order from a caller-owned generator.
    pub fn init_with_rng<R: Rng>(spec: &NetSpec, rng: &mut R) -> Self {
        let layers = spec
            .layer_sizes
            .windows(2)
            .zip(&spec.activations)
            .map(|(w, &act)| Layer::init(w[0], w[1], act, rng))
            .collect();
        Net { layers }
    }

    pub fn input_size(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn output_size(&self) -> usize {
        self.layers.last().expect("non-empty net").fan_out()
    }

    /// Per-layer outputs for a dense batch, final output last.
    pub fn forward_batch(&self, x: ArrayView2<f64>) -> Result<Vec<Array2<f64>>> {
        if x.ncols() != self.input_size() {
            return Err(Error::Shape {
                expected: self.input_size(),
                got: x.ncols(),
            });
        }
        let mut outs: Vec<Array2<f64>> = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let next = match outs.last() {
                Some(prev) => layer.forward(prev.view()),
                None => layer.forward(x),
            };
            outs.push(next);
        }
        Ok(outs)
    }

    pub fn forward_onehot(&self, input: OneHotBatch<'_>) -> Result<Vec<Array2<f64>>> {
        if input.width != self.input_size() {
            return Err(Error::Shape {
                expected: self.input_size(),
                got: input.width,
            });
        }
        if let Some(&bad) = input.active.iter().flatten().find(|&&c| c >= input.width) {
            return Err(Error::Shape {
                expected: input.width,
                got: bad + 1,
            });
        }
        let mut outs = vec![self.layers[0].forward_onehot(input)];
        for layer in &self.layers[1..] {
            let next = layer.forward(outs.last().expect("first layer").view());
            outs.push(next);
        }
        Ok(outs)
    }

    /// Single-sample forward pass.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<Array1<f64>>> {
        let view = ArrayView2::from_shape((1, x.len()), x).expect("row view");
        Ok(self
            .forward_batch(view)?
            .into_iter()
            .map(|a| a.row(0).to_owned())
            .collect())
    }

    /// Reverse pass for a dense batch given the cached per-layer outputs.
    pub fn backward_batch(
        &self,
        x: ArrayView2<f64>,
        outs: &[Array2<f64>],
        upstream: Array2<f64>,
    ) -> Result<(NetGrads, Array2<f64>)> {
        let last = outs.last().ok_or(Error::Empty("layer outputs"))?;
        if upstream.dim() != last.dim() {
            return Err(Error::Shape {
                expected: last.ncols(),
                got: upstream.ncols(),
            });
        }
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut up = upstream;
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let input = if i == 0 { x } else { outs[i - 1].view() };
            let (g, dx) = layer.backward(input, &outs[i], &up);
            grads.push(g);
            up = dx;
        }
        grads.reverse();
        Ok((NetGrads { layers: grads }, up))
    }

    pub fn backward_onehot(
        &self,
        input: OneHotBatch<'_>,
        outs: &[Array2<f64>],
        upstream: Array2<f64>,
    ) -> Result<NetGrads> {
        let last = outs.last().ok_or(Error::Empty("layer outputs"))?;
        if upstream.dim() != last.dim() {
            return Err(Error::Shape {
                expected: last.ncols(),
                got: upstream.ncols(),
            });
        }
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut up = upstream;
        for i in (1..self.layers.len()).rev() {
            let (g, dx) = self.layers[i].backward(outs[i - 1].view(), &outs[i], &up);
            grads.push(g);
            up = dx;
        }
        grads.push(self.layers[0].backward_onehot(input, &outs[0], &up));
        grads.reverse();
        Ok(NetGrads { layers: grads })
    }

    /// Gradients of `output · upstream` for a single sample.
    pub fn grad(&self, x: &[f64], upstream: &[f64]) -> Result<(NetGrads, Vec<f64>)> {
        if upstream.len() != self.output_size() {
            return Err(Error::Shape {
                expected: self.output_size(),
                got: upstream.len(),
            });
        }
        let view = ArrayView2::from_shape((1, x.len()), x).expect("row view");
        let outs = self.forward_batch(view)?;
        let up = Array2::from_shape_vec((1, upstream.len()), upstream.to_vec()).expect("row");
        let (g, dx) = self.backward_batch(view, &outs, up)?;
        Ok((g, dx.row(0).to_vec()))
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.param_slices_mut())
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// AdamW with decoupled weight decay and bias-corrected moments.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW {
            config,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    /// Update each parameter tensor with its gradient. Tensors must be
    /// passed in the same order and with the same shapes on every call.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Shape {
                expected: params.len(),
                got: grads.len(),
            });
        }
        if self.first.is_empty() {
            self.first = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.second = self.first.clone();
        }
        if self.first.len() != params.len() {
            return Err(Error::Shape {
                expected: self.first.len(),
                got: params.len(),
            });
        }
        self.step += 1;
        let AdamWConfig {
            lr,
            beta1,
            beta2,
            epsilon,
            weight_decay,
        } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        let decay = 1.0 - lr * weight_decay;
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.first[k], &mut self.second[k]);
            if p.len() != g.len() || m.len() != p.len() {
                return Err(Error::Shape {
                    expected: m.len(),
                    got: g.len(),
                });
            }
            for i in 0..p.len() {
                let gi = g[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] = p[i] * decay - lr * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
        Ok(())
    }
}

/// Mean binary cross-entropy on logits; `targets` may be soft (in [0, 1]).
pub fn bce_with_logits(logits: &[f64], targets: &[f64]) -> f64 {
    assert_eq!(logits.len(), targets.len());
    if logits.is_empty() {
        return 0.0;
    }
    let sum: f64 = logits
        .iter()
        .zip(targets)
        .map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
        .sum();
    sum / logits.len() as f64
}

/// Gradient of `scale · bce_with_logits` with respect to the logits.
pub fn bce_with_logits_grad(logits: &[f64], targets: &[f64], scale: f64) -> Vec<f64> {
    assert_eq!(logits.len(), targets.len());
    let k = scale / logits.len() as f64;
    logits
        .iter()
        .zip(targets)
        .map(|(&z, &y)| (sigmoid(z) - y) * k)
        .collect()
}

/// Mean squared difference over entries.
pub fn mse(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    if a.is_empty() {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

/// Gradient of `scale · mse(a, b)` with respect to `a`.
pub fn mse_grad(a: &[f64], b: &[f64], scale: f64) -> Vec<f64> {
    assert_eq!(a.len(), b.len());
    let k = 2.0 * scale / a.len() as f64;
    a.iter().zip(b).map(|(x, y)| (x - y) * k).collect()
}

/// Shuffle `rows` and cut it into consecutive minibatches.
pub fn epoch_batches<R: Rng>(rows: &[usize], batch_size: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut order = rows.to_vec();
    order.shuffle(rng);
    order
        .chunks(batch_size.max(1))
        .map(<[usize]>::to_vec)
        .collect()
}
