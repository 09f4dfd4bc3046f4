//! Feed-forward networks built from affine, ReLU and layer-normalization
//! layers, with a recorded tape for reverse-mode differentiation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::matrix::Matrix;
use crate::error::{Error, Result};

const LAYER_NORM_EPS: f64 = 1e-5;

/// A trainable array together with its gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor {
    pub values: Vec<f64>,
    pub grad: Vec<f64>,
    pub shape: (usize, usize),
    pub frozen: bool,
    /// Whether weight decay applies (affine weights only).
    pub decay: bool,
}

impl ParamTensor {
    pub fn new(values: Vec<f64>, shape: (usize, usize), decay: bool) -> Self {
        debug_assert_eq!(values.len(), shape.0 * shape.1);
        let grad = vec![0.0; values.len()];
        ParamTensor {
            values,
            grad,
            shape,
            frozen: false,
            decay,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Serializable description of one layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Affine { inputs: usize, outputs: usize },
    Relu,
    LayerNorm { width: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    /// `y = x·W + b`, `W` stored `inputs × outputs`.
    Affine { weight: ParamTensor, bias: ParamTensor },
    Relu,
    LayerNorm { gain: ParamTensor, bias: ParamTensor },
}

impl Layer {
    pub fn spec(&self) -> LayerSpec {
        match self {
            Layer::Affine { weight, .. } => LayerSpec::Affine {
                inputs: weight.shape.0,
                outputs: weight.shape.1,
            },
            Layer::Relu => LayerSpec::Relu,
            Layer::LayerNorm { gain, .. } => LayerSpec::LayerNorm { width: gain.shape.1 },
        }
    }

    fn params_mut(&mut self) -> Vec<&mut ParamTensor> {
        match self {
            Layer::Affine { weight, bias } => vec![weight, bias],
            Layer::LayerNorm { gain, bias } => vec![gain, bias],
            Layer::Relu => Vec::new(),
        }
    }

    fn params(&self) -> Vec<&ParamTensor> {
        match self {
            Layer::Affine { weight, bias } => vec![weight, bias],
            Layer::LayerNorm { gain, bias } => vec![gain, bias],
            Layer::Relu => Vec::new(),
        }
    }
}

/// Per-layer values kept from the forward pass.
#[derive(Debug, Clone)]
enum Cache {
    Input(Matrix),
    Norm { xhat: Matrix, inv_std: Vec<f64> },
}

#[derive(Debug, Clone)]
pub struct Network {
    layers: Vec<Layer>,
    tape: Option<Vec<Cache>>,
}

impl PartialEq for Network {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers
    }
}

impl Network {
    /// Builds a network from layer specs with He-uniform affine weights,
    /// zero biases, and unit layer-norm gains.
    pub fn new<R: Rng + ?Sized>(specs: &[LayerSpec], rng: &mut R) -> Result<Self> {
        let mut layers = Vec::with_capacity(specs.len());
        let mut width: Option<usize> = None;
        for spec in specs {
            let layer = match *spec {
                LayerSpec::Affine { inputs, outputs } => {
                    check_width(width, inputs)?;
                    width = Some(outputs);
                    let bound = (6.0 / inputs.max(1) as f64).sqrt();
                    let w = (0..inputs * outputs)
                        .map(|_| rng.random_range(-bound..bound))
                        .collect();
                    Layer::Affine {
                        weight: ParamTensor::new(w, (inputs, outputs), true),
                        bias: ParamTensor::new(vec![0.0; outputs], (1, outputs), false),
                    }
                }
                LayerSpec::LayerNorm { width: w } => {
                    check_width(width, w)?;
                    Layer::LayerNorm {
                        gain: ParamTensor::new(vec![1.0; w], (1, w), false),
                        bias: ParamTensor::new(vec![0.0; w], (1, w), false),
                    }
                }
                LayerSpec::Relu => Layer::Relu,
            };
            layers.push(layer);
        }
        Ok(Network { layers, tape: None })
    }

    /// Multilayer perceptron `in → hidden… → out` where every hidden affine
    /// layer is followed by layer normalization and ReLU.
    pub fn mlp<R: Rng + ?Sized>(dims: &[usize], rng: &mut R) -> Result<Self> {
        Network::new(&mlp_specs(dims), rng)
    }

    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        let mut width: Option<usize> = None;
        for l in &layers {
            match l.spec() {
                LayerSpec::Affine { inputs, outputs } => {
                    check_width(width, inputs)?;
                    width = Some(outputs);
                }
                LayerSpec::LayerNorm { width: w } => check_width(width, w)?,
                LayerSpec::Relu => {}
            }
        }
        Ok(Network { layers, tape: None })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(Layer::spec).collect()
    }

    pub fn input_dim(&self) -> Option<usize> {
        self.layers.iter().find_map(|l| match l.spec() {
            LayerSpec::Affine { inputs, .. } => Some(inputs),
            LayerSpec::LayerNorm { width } => Some(width),
            LayerSpec::Relu => None,
        })
    }

    pub fn output_dim(&self) -> Option<usize> {
        self.layers.iter().rev().find_map(|l| match l.spec() {
            LayerSpec::Affine { outputs, .. } => Some(outputs),
            LayerSpec::LayerNorm { width } => Some(width),
            LayerSpec::Relu => None,
        })
    }

    /// Parameters in a fixed order (layer order, weight before bias).
    pub fn params_mut(&mut self) -> Vec<&mut ParamTensor> {
        self.layers.iter_mut().flat_map(Layer::params_mut).collect()
    }

    pub fn params(&self) -> Vec<&ParamTensor> {
        self.layers.iter().flat_map(Layer::params).collect()
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        for p in self.params_mut() {
            p.frozen = frozen;
        }
    }

    pub fn is_frozen(&self) -> bool {
        self.params().iter().all(|p| p.frozen)
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    /// Sets every parameter (weights, biases, gains) to zero.
    pub fn zero_weights(&mut self) {
        for p in self.params_mut() {
            p.values.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn has_tape(&self) -> bool {
        self.tape.is_some()
    }

    pub fn clear_tape(&mut self) {
        self.tape = None;
    }

    /// Forward pass without recording; usable through a shared reference.
    pub fn infer(&self, input: &Matrix) -> Result<Matrix> {
        self.run(input, None)
    }

    /// Forward pass that records the tape for a following `backward`.
    pub fn forward(&mut self, input: &Matrix) -> Result<Matrix> {
        let mut tape = Vec::with_capacity(self.layers.len());
        let out = self.run(input, Some(&mut tape))?;
        self.tape = Some(tape);
        Ok(out)
    }

    fn run(&self, input: &Matrix, mut tape: Option<&mut Vec<Cache>>) -> Result<Matrix> {
        if let Some(d) = self.input_dim() {
            if d != input.cols() {
                return Err(Error::Dimension(format!(
                    "network expects {d} input columns, got {}",
                    input.cols()
                )));
            }
        }
        let mut x = input.clone();
        for layer in &self.layers {
            x = match layer {
                Layer::Affine { weight, bias } => {
                    let w = Matrix::from_vec(weight.shape.0, weight.shape.1, weight.values.clone())?;
                    let mut y = x.matmul(&w)?;
                    for r in 0..y.rows() {
                        for (v, b) in y.row_mut(r).iter_mut().zip(&bias.values) {
                            *v += b;
                        }
                    }
                    if let Some(t) = tape.as_deref_mut() {
                        t.push(Cache::Input(x));
                    }
                    y
                }
                Layer::Relu => {
                    let y = x.map(|v| v.max(0.0));
                    if let Some(t) = tape.as_deref_mut() {
                        t.push(Cache::Input(x));
                    }
                    y
                }
                Layer::LayerNorm { gain, bias } => {
                    let (rows, cols) = x.shape();
                    let mut xhat = Matrix::zeros(rows, cols);
                    let mut inv_std = Vec::with_capacity(rows);
                    let mut y = Matrix::zeros(rows, cols);
                    for r in 0..rows {
                        let row = x.row(r);
                        let mean = row.iter().sum::<f64>() / cols as f64;
                        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
                        let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                        inv_std.push(is);
                        let xh = xhat.row_mut(r);
                        for (h, v) in xh.iter_mut().zip(row) {
                            *h = (v - mean) * is;
                        }
                        let yr = y.row_mut(r);
                        for c in 0..cols {
                            yr[c] = xhat[(r, c)] * gain.values[c] + bias.values[c];
                        }
                    }
                    if let Some(t) = tape.as_deref_mut() {
                        t.push(Cache::Norm { xhat, inv_std });
                    }
                    y
                }
            };
        }
        Ok(x)
    }

    /// Back-propagates `upstream` (gradient of a scalar w.r.t. the output of
    /// the last `forward`), accumulating gradients into non-frozen parameters.
    /// Returns the gradient w.r.t. the network input and consumes the tape.
    pub fn backward(&mut self, upstream: &Matrix) -> Result<Matrix> {
        let tape = self
            .tape
            .take()
            .ok_or_else(|| Error::State("backward called without a recorded forward".into()))?;
        let mut g = upstream.clone();
        for (layer, cache) in self.layers.iter_mut().zip(tape).rev() {
            g = match (layer, cache) {
                (Layer::Affine { weight, bias }, Cache::Input(x)) => {
                    if g.rows() != x.rows() || g.cols() != weight.shape.1 {
                        return Err(Error::Dimension(format!(
                            "upstream gradient {}x{} does not match layer output {}x{}",
                            g.rows(),
                            g.cols(),
                            x.rows(),
                            weight.shape.1
                        )));
                    }
                    if !weight.frozen {
                        let gw = x.t_matmul(&g)?;
                        for (a, b) in weight.grad.iter_mut().zip(gw.as_slice()) {
                            *a += b;
                        }
                    }
                    if !bias.frozen {
                        for r in 0..g.rows() {
                            for (a, b) in bias.grad.iter_mut().zip(g.row(r)) {
                                *a += b;
                            }
                        }
                    }
                    let w = Matrix::from_vec(weight.shape.0, weight.shape.1, weight.values.clone())?;
                    g.matmul_t(&w)?
                }
                (Layer::Relu, Cache::Input(x)) => {
                    let mut out = g;
                    for (o, v) in out.as_mut_slice().iter_mut().zip(x.as_slice()) {
                        if *v <= 0.0 {
                            *o = 0.0;
                        }
                    }
                    out
                }
                (Layer::LayerNorm { gain, bias }, Cache::Norm { xhat, inv_std }) => {
                    let (rows, cols) = xhat.shape();
                    let mut out = Matrix::zeros(rows, cols);
                    for r in 0..rows {
                        let gr = g.row(r);
                        let xr = xhat.row(r);
                        if !gain.frozen {
                            for c in 0..cols {
                                gain.grad[c] += gr[c] * xr[c];
                            }
                        }
                        if !bias.frozen {
                            for c in 0..cols {
                                bias.grad[c] += gr[c];
                            }
                        }
                        let dxhat: Vec<f64> = (0..cols).map(|c| gr[c] * gain.values[c]).collect();
                        let mean_d = dxhat.iter().sum::<f64>() / cols as f64;
                        let mean_dx =
                            dxhat.iter().zip(xr).map(|(d, x)| d * x).sum::<f64>() / cols as f64;
                        let o = out.row_mut(r);
                        for c in 0..cols {
                            o[c] = inv_std[r] * (dxhat[c] - mean_d - xr[c] * mean_dx);
                        }
                    }
                    out
                }
                _ => return Err(Error::State("tape does not match network layers".into())),
            };
        }
        Ok(g)
    }

    /// Flattened copy of every parameter value, in `params()` order.
    pub fn flat_values(&self) -> Vec<f64> {
        self.params().iter().flat_map(|p| p.values.iter().copied()).collect()
    }

    /// Flattened copy of every gradient, in `params()` order.
    pub fn flat_grads(&self) -> Vec<f64> {
        self.params().iter().flat_map(|p| p.grad.iter().copied()).collect()
    }

    /// Overwrites every parameter from a flat vector in `params()` order.
    pub fn set_flat_values(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::Dimension(format!(
                "{} values for {} parameters",
                flat.len(),
                self.num_params()
            )));
        }
        let mut off = 0;
        for p in self.params_mut() {
            let n = p.len();
            p.values.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }
}

fn check_width(prev: Option<usize>, next: usize) -> Result<()> {
    match prev {
        Some(w) if w != next => Err(Error::Dimension(format!(
            "layer expects width {next}, previous layer produces {w}"
        ))),
        _ => Ok(()),
    }
}

/// Layer specs for `in → hidden… → out` with LayerNorm + ReLU after every
/// hidden affine layer.
pub fn mlp_specs(dims: &[usize]) -> Vec<LayerSpec> {
    let mut specs = Vec::new();
    for (i, w) in dims.windows(2).enumerate() {
        specs.push(LayerSpec::Affine {
            inputs: w[0],
            outputs: w[1],
        });
        if i + 2 < dims.len() {
            specs.push(LayerSpec::LayerNorm { width: w[1] });
            specs.push(LayerSpec::Relu);
        }
    }
    specs
}
