//! Feed-forward encoder, linear regression head and explicit backpropagation.
//!
//! Layer indices are zero-based and refer to the *post-activation* output of
//! that layer, so the last index is the embedding. The raw input has its own
//! entry in [`ActivationTrace`] and its own gradient routine
//! ([`grad_wrt_input`]).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{ensure_len, invalid, Error, Result};
use crate::tensor::{axpy, dot, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Relu => v.max(0.0),
            Activation::Identity => v,
        }
    }

    /// Derivative expressed through the post-activation value. The ReLU
    /// subgradient at zero is zero.
    #[inline]
    fn derivative_from_output(self, out: f64) -> f64 {
        match self {
            Activation::Relu => {
                if out > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    /// `out × in`
    pub weights: Matrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn new(weights: Matrix, bias: Vec<f64>, activation: Activation) -> Result<Self> {
        ensure_len("layer bias", weights.rows(), bias.len())?;
        if bias.iter().any(|b| !b.is_finite()) || !weights.is_finite() {
            return Err(Error::NonFinite("layer parameters"));
        }
        Ok(Self {
            weights,
            bias,
            activation,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.rows()
    }

    /// Applies the layer to one vector.
    fn apply(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(
            self.weights
                .iter_rows()
                .zip(&self.bias)
                .map(|(w, b)| self.activation.apply(dot(w, x) + b)),
        );
    }

    /// Applies the layer to every row of `x`.
    fn apply_batch(&self, x: &Matrix) -> Matrix {
        let (n, out_dim) = (x.rows(), self.output_dim());
        let mut data = Vec::with_capacity(n * out_dim);
        for row in x.iter_rows() {
            for (w, b) in self.weights.iter_rows().zip(&self.bias) {
                data.push(self.activation.apply(dot(w, row) + b));
            }
        }
        Matrix::from_raw(n, out_dim, data)
    }
}

/// Stack of dense layers mapping flattened scene features to an embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpEncoder {
    layers: Vec<DenseLayer>,
}

/// Per-layer post-activation outputs for one batch, plus the input.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTrace {
    pub input: Matrix,
    pub layers: Vec<Matrix>,
}

impl ActivationTrace {
    /// The final layer's output.
    pub fn embedding(&self) -> &Matrix {
        self.layers.last().unwrap_or(&self.input)
    }

    pub fn layer(&self, index: usize) -> Result<&Matrix> {
        self.layers.get(index).ok_or(Error::InvalidLayer {
            index,
            layers: self.layers.len(),
        })
    }
}

impl MlpEncoder {
    pub fn new(layers: Vec<DenseLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(invalid("layers", "encoder needs at least one layer"));
        }
        for pair in layers.windows(2) {
            ensure_len("layer chaining", pair[0].output_dim(), pair[1].input_dim())?;
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn embedding_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim()
    }

    /// Output width of layer `index`.
    pub fn layer_width(&self, index: usize) -> Result<usize> {
        self.check_layer(index)?;
        Ok(self.layers[index].output_dim())
    }

    pub(crate) fn check_layer(&self, index: usize) -> Result<()> {
        if index < self.layers.len() {
            Ok(())
        } else {
            Err(Error::InvalidLayer {
                index,
                layers: self.layers.len(),
            })
        }
    }

    /// Runs the batch through every layer and keeps each output.
    pub fn forward(&self, batch: &Matrix) -> Result<ActivationTrace> {
        ensure_len("forward input width", self.input_dim(), batch.cols())?;
        let mut layers = Vec::with_capacity(self.layers.len());
        let mut current = batch;
        for layer in &self.layers {
            layers.push(layer.apply_batch(current));
            current = layers.last().expect("just pushed");
        }
        Ok(ActivationTrace {
            input: batch.clone(),
            layers,
        })
    }

    /// Final-layer output only.
    pub fn embed(&self, batch: &Matrix) -> Result<Matrix> {
        ensure_len("forward input width", self.input_dim(), batch.cols())?;
        let mut current = batch.clone();
        for layer in &self.layers {
            current = layer.apply_batch(&current);
        }
        Ok(current)
    }

    /// Per-layer outputs for a single input vector.
    pub fn forward_one(&self, x: &[f64]) -> Result<Vec<Vec<f64>>> {
        ensure_len("forward input width", self.input_dim(), x.len())?;
        let mut outs: Vec<Vec<f64>> = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let mut out = Vec::new();
            layer.apply(if i == 0 { x } else { &outs[i - 1] }, &mut out);
            outs.push(out);
        }
        Ok(outs)
    }

    /// Continues the forward pass from the post-activation of layer `from`.
    /// Returns the outputs of layers `from+1..`.
    fn forward_from(&self, from: usize, activation: &[f64]) -> Vec<Vec<f64>> {
        let mut outs: Vec<Vec<f64>> = Vec::with_capacity(self.layers.len() - from - 1);
        for (k, layer) in self.layers[from + 1..].iter().enumerate() {
            let mut out = Vec::new();
            layer.apply(if k == 0 { activation } else { &outs[k - 1] }, &mut out);
            outs.push(out);
        }
        outs
    }

    /// Backpropagates `upstream` (gradient w.r.t. the output of layer `top`)
    /// down to the output of layer `bottom` (or the input when `bottom` is
    /// `None`). `outputs[l]` must hold the post-activation of layer `l` for
    /// every `l` in the traversed range.
    fn backprop_vector<'a>(
        &self,
        outputs: &dyn Fn(usize) -> &'a [f64],
        top: usize,
        bottom: Option<usize>,
        upstream: Vec<f64>,
    ) -> Vec<f64> {
        let stop = bottom.map_or(0, |b| b + 1);
        let mut grad = upstream;
        for l in (stop..=top).rev() {
            let layer = &self.layers[l];
            let out = outputs(l);
            let mut next = vec![0.0; layer.input_dim()];
            for (o, w_row) in layer.weights.iter_rows().enumerate() {
                let g = grad[o] * layer.activation.derivative_from_output(out[o]);
                if g != 0.0 {
                    axpy(g, w_row, &mut next);
                }
            }
            grad = next;
        }
        grad
    }

    /// Batch backpropagation of `grad_embedding` (rows aligned with the trace)
    /// into parameter gradients, flattened in [`MlpEncoder::params`] order.
    pub fn backward(&self, trace: &ActivationTrace, grad_embedding: &Matrix) -> Result<Vec<f64>> {
        let n = trace.input.rows();
        ensure_len("backward batch", n, grad_embedding.rows())?;
        ensure_len("backward width", self.embedding_dim(), grad_embedding.cols())?;
        let mut grads: Vec<(Vec<f64>, Vec<f64>)> = self
            .layers
            .iter()
            .map(|l| (vec![0.0; l.weights.rows() * l.weights.cols()], vec![0.0; l.bias.len()]))
            .collect();
        let mut upstream = grad_embedding.clone();
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let out = &trace.layers[l];
            let input = if l == 0 { &trace.input } else { &trace.layers[l - 1] };
            let (in_dim, out_dim) = (layer.input_dim(), layer.output_dim());
            let (gw, gb) = &mut grads[l];
            let mut down = Matrix::zeros(n, in_dim);
            for b in 0..n {
                let x = input.row(b);
                let o_row = out.row(b);
                let up_row = upstream.row(b);
                for o in 0..out_dim {
                    let g = up_row[o] * layer.activation.derivative_from_output(o_row[o]);
                    if g == 0.0 {
                        continue;
                    }
                    gb[o] += g;
                    axpy(g, x, &mut gw[o * in_dim..(o + 1) * in_dim]);
                    if l > 0 {
                        axpy(g, layer.weights.row(o), down.row_mut(b));
                    }
                }
            }
            upstream = down;
        }
        Ok(grads.into_iter().flat_map(|(w, b)| w.into_iter().chain(b)).collect())
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.rows() * l.weights.cols() + l.bias.len())
            .sum()
    }

    /// All parameters flattened: per layer, weights row-major then bias.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(l.weights.data());
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        ensure_len("set_params", self.param_count(), params.len())?;
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite("encoder parameters"));
        }
        let mut offset = 0;
        for l in &mut self.layers {
            let nw = l.weights.rows() * l.weights.cols();
            l.weights.data_mut().copy_from_slice(&params[offset..offset + nw]);
            offset += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&params[offset..offset + nb]);
            offset += nb;
        }
        Ok(())
    }

    /// SHA-256 over the parameter bit patterns, hex encoded.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        for l in &self.layers {
            hasher.update([l.activation as u8]);
            hasher.update((l.weights.rows() as u64).to_le_bytes());
            hasher.update((l.weights.cols() as u64).to_le_bytes());
        }
        for p in self.params() {
            hasher.update(p.to_bits().to_le_bytes());
        }
        to_hex(&hasher.finalize())
    }

    /// Re-checks the invariants, e.g. after deserialization.
    pub fn validate(&self) -> Result<()> {
        let rebuilt = Self::new(self.layers.clone())?;
        for l in &rebuilt.layers {
            DenseLayer::new(l.weights.clone(), l.bias.clone(), l.activation)?;
        }
        Ok(())
    }
}

pub(crate) fn to_hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Uniform fan-in initialization, `U(-s, s)` with `s = sqrt(6 / fan_in)`,
/// zero biases. Hidden layers use ReLU and the last layer is linear.
pub fn init_encoder(sizes: &[usize], seed: u64) -> Result<MlpEncoder> {
    if sizes.len() < 2 {
        return Err(invalid("sizes", "need an input width and at least one layer width"));
    }
    if sizes.contains(&0) {
        return Err(invalid("sizes", "layer widths must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let last = sizes.len() - 2;
    let layers = sizes
        .windows(2)
        .enumerate()
        .map(|(i, pair)| {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let s = (6.0 / fan_in as f64).sqrt();
            let data = (0..fan_in * fan_out).map(|_| rng.random_range(-s..s)).collect();
            DenseLayer {
                weights: Matrix::from_raw(fan_out, fan_in, data),
                bias: vec![0.0; fan_out],
                activation: if i == last {
                    Activation::Identity
                } else {
                    Activation::Relu
                },
            }
        })
        .collect();
    MlpEncoder::new(layers)
}

/// Single-output linear regression head over the embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearHead {
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl LinearHead {
    pub fn new(weights: Vec<f64>, bias: f64) -> Result<Self> {
        if !bias.is_finite() || weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::NonFinite("head parameters"));
        }
        Ok(Self { weights, bias })
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            weights: vec![0.0; dim],
            bias: 0.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    /// `w · e + b`
    pub fn output(&self, embedding: &[f64]) -> Result<f64> {
        ensure_len("head input", self.weights.len(), embedding.len())?;
        Ok(dot(&self.weights, embedding) + self.bias)
    }

    /// Predictions for every row of an embedding matrix.
    pub fn predict(&self, embeddings: &Matrix) -> Result<Vec<f64>> {
        ensure_len("head input", self.weights.len(), embeddings.cols())?;
        Ok(embeddings
            .iter_rows()
            .map(|r| dot(&self.weights, r) + self.bias)
            .collect())
    }
}

pub fn head_output(head: &LinearHead, embedding: &[f64]) -> Result<f64> {
    head.output(embedding)
}

/// Scalar model output `h(f_l = a)` when layer `layer` is forced to `a`.
pub fn output_from_layer(encoder: &MlpEncoder, head: &LinearHead, layer: usize, activation: &[f64]) -> Result<f64> {
    encoder.check_layer(layer)?;
    ensure_len("layer activation", encoder.layers[layer].output_dim(), activation.len())?;
    let outs = encoder.forward_from(layer, activation);
    head.output(outs.last().map_or(activation, |v| v.as_slice()))
}

/// Gradient of the head output with respect to the post-activation of
/// `layer`, evaluated at an arbitrary activation vector for that layer.
pub fn grad_at_layer_activation(
    encoder: &MlpEncoder,
    head: &LinearHead,
    layer: usize,
    activation: &[f64],
) -> Result<Vec<f64>> {
    encoder.check_layer(layer)?;
    ensure_len("layer activation", encoder.layers[layer].output_dim(), activation.len())?;
    ensure_len("head input", encoder.embedding_dim(), head.dim())?;
    let top = encoder.num_layers() - 1;
    if layer == top {
        return Ok(head.weights.clone());
    }
    let outs = encoder.forward_from(layer, activation);
    let lookup = |l: usize| outs[l - layer - 1].as_slice();
    Ok(encoder.backprop_vector(&lookup, top, Some(layer), head.weights.clone()))
}

/// Gradient of the head output with respect to layer `layer`'s output for input `x`.
pub fn grad_wrt_layer(encoder: &MlpEncoder, head: &LinearHead, x: &[f64], layer: usize) -> Result<Vec<f64>> {
    encoder.check_layer(layer)?;
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("input"));
    }
    let outs = encoder.forward_one(x)?;
    grad_at_layer_activation(encoder, head, layer, &outs[layer])
}

/// Gradient of the head output with respect to the raw input.
pub fn grad_wrt_input(encoder: &MlpEncoder, head: &LinearHead, x: &[f64]) -> Result<Vec<f64>> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("input"));
    }
    ensure_len("head input", encoder.embedding_dim(), head.dim())?;
    let outs = encoder.forward_one(x)?;
    let lookup = |l: usize| outs[l].as_slice();
    Ok(encoder.backprop_vector(&lookup, encoder.num_layers() - 1, None, head.weights.clone()))
}
