//! Feedforward trunk: layer specs, Glorot-uniform initialization, taped
//! forward pass, backpropagation and the Γ-scaled SGD step.
//!
//! Activations travel as `batch × features` matrices; image-shaped layers
//! interpret each row as a channel-major `c × h × w` volume.
//!
//! Reductions run in a fixed order so runs are bit-reproducible:
//! - dense output `z_j = (Σ_i w_ji·a_i, i ascending, from 0.0) + b_j`;
//! - parameter gradients accumulate over the batch in sample order;
//! - input deltas sum over output units in ascending order.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::Matrix;
use crate::rng::SplitMix64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite activation in layer {layer}")]
    NonFiniteActivation { layer: usize },
    #[error("non-finite gradient in layer {layer}")]
    NonFiniteGradient { layer: usize },
    #[error("tape was recorded before the latest parameter update")]
    StaleTape,
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

/// One layer of the architecture description.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    Dense {
        #[serde(rename = "in")]
        inputs: usize,
        out: usize,
    },
    Conv2d {
        in_ch: usize,
        out_ch: usize,
        k: usize,
        #[serde(default = "default_stride")]
        stride: usize,
    },
    Relu,
    MaxPool {
        k: usize,
    },
    Flatten,
}

fn default_stride() -> usize {
    1
}

/// Per-sample tensor shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Shape {
    Flat(usize),
    Image { c: usize, h: usize, w: usize },
}

impl Shape {
    pub fn from_dims(dims: &[usize]) -> Result<Self, NnError> {
        match *dims {
            [n] => Ok(Shape::Flat(n)),
            [c, h, w] => Ok(Shape::Image { c, h, w }),
            _ => Err(NnError::ShapeMismatch(format!(
                "input shape {dims:?} must have 1 or 3 dimensions"
            ))),
        }
    }

    pub fn size(&self) -> usize {
        match *self {
            Shape::Flat(n) => n,
            Shape::Image { c, h, w } => c * h * w,
        }
    }
}

/// Input shape plus ordered layers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input: Vec<usize>,
    pub layers: Vec<LayerSpec>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    spec: LayerSpec,
    input: Shape,
    output: Shape,
    weights: Matrix,
    biases: Vec<f64>,
}

impl Layer {
    fn build(spec: &LayerSpec, input: Shape) -> Result<Self, NnError> {
        let mismatch = |msg: String| Err(NnError::ShapeMismatch(msg));
        let (output, w_rows, w_cols, n_bias) = match *spec {
            LayerSpec::Dense { inputs, out } => {
                if inputs == 0 || out == 0 {
                    return mismatch("dense layer with zero width".into());
                }
                if input.size() != inputs {
                    return mismatch(format!(
                        "dense layer expects {inputs} inputs, previous layer yields {}",
                        input.size()
                    ));
                }
                (Shape::Flat(out), out, inputs, out)
            }
            LayerSpec::Conv2d {
                in_ch,
                out_ch,
                k,
                stride,
            } => {
                let Shape::Image { c, h, w } = input else {
                    return mismatch("conv2d needs an image-shaped input".into());
                };
                if c != in_ch {
                    return mismatch(format!("conv2d expects {in_ch} channels, got {c}"));
                }
                if k == 0 || stride == 0 || out_ch == 0 || k > h || k > w {
                    return mismatch(format!("conv2d k={k} stride={stride} on {h}x{w}"));
                }
                let out = Shape::Image {
                    c: out_ch,
                    h: (h - k) / stride + 1,
                    w: (w - k) / stride + 1,
                };
                (out, out_ch, in_ch * k * k, out_ch)
            }
            LayerSpec::Relu => (input, 0, 0, 0),
            LayerSpec::MaxPool { k } => {
                let Shape::Image { c, h, w } = input else {
                    return mismatch("max_pool needs an image-shaped input".into());
                };
                if k == 0 || k > h || k > w {
                    return mismatch(format!("max_pool k={k} on {h}x{w}"));
                }
                (Shape::Image { c, h: h / k, w: w / k }, 0, 0, 0)
            }
            LayerSpec::Flatten => (Shape::Flat(input.size()), 0, 0, 0),
        };
        Ok(Self {
            spec: spec.clone(),
            input,
            output,
            weights: Matrix::zeros(w_rows, w_cols),
            biases: vec![0.0; n_bias],
        })
    }

    pub fn spec(&self) -> &LayerSpec {
        &self.spec
    }

    pub fn input_shape(&self) -> Shape {
        self.input
    }

    pub fn output_shape(&self) -> Shape {
        self.output
    }

    pub fn weights(&self) -> &Matrix {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut Matrix {
        &mut self.weights
    }

    pub fn biases(&self) -> &[f64] {
        &self.biases
    }

    pub fn biases_mut(&mut self) -> &mut [f64] {
        &mut self.biases
    }

    pub fn has_params(&self) -> bool {
        !self.biases.is_empty()
    }

    fn fans(&self) -> (usize, usize) {
        match self.spec {
            LayerSpec::Dense { inputs, out } => (inputs, out),
            LayerSpec::Conv2d { in_ch, out_ch, k, .. } => (in_ch * k * k, out_ch * k * k),
            _ => (0, 0),
        }
    }
}

/// Ordered layer stack. `version` increments on every parameter update so
/// tapes recorded earlier can be detected.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    spec: NetworkSpec,
    layers: Vec<Layer>,
    version: u64,
}

/// Activations of one forward pass, kept for backpropagation.
#[derive(Debug, Clone)]
pub struct TapedBatch {
    version: u64,
    input: Matrix,
    outputs: Vec<Matrix>,
    /// Flat source index of each pooled maximum, per max-pool layer.
    argmax: Vec<Vec<usize>>,
}

impl TapedBatch {
    pub fn input(&self) -> &Matrix {
        &self.input
    }

    /// Output of the final layer (the raw head input).
    pub fn output(&self) -> &Matrix {
        self.outputs.last().unwrap_or(&self.input)
    }

    pub fn layer_output(&self, l: usize) -> &Matrix {
        &self.outputs[l]
    }

    pub fn batch_size(&self) -> usize {
        self.input.rows()
    }

    fn layer_input(&self, l: usize) -> &Matrix {
        if l == 0 {
            &self.input
        } else {
            &self.outputs[l - 1]
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weights: Matrix,
    pub biases: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGrad>,
    /// ∂φ/∂input for every sample of the batch.
    pub input_delta: Matrix,
}

/// Builds a network with Glorot-uniform weights and zero biases.
///
/// Weights of every parameterized layer are drawn in layer order, row-major,
/// from `U(−√(6/(fan_in+fan_out)), +√(6/(fan_in+fan_out)))` using a single
/// SplitMix64 stream seeded with `seed`.
pub fn init_params(spec: &NetworkSpec, seed: u64) -> Result<Network, NnError> {
    let mut shape = Shape::from_dims(&spec.input)?;
    if shape.size() == 0 {
        return Err(NnError::ShapeMismatch("empty input shape".into()));
    }
    let mut rng = SplitMix64::new(seed);
    let mut layers = Vec::with_capacity(spec.layers.len());
    for ls in &spec.layers {
        let mut layer = Layer::build(ls, shape)?;
        let (fan_in, fan_out) = layer.fans();
        if fan_in + fan_out > 0 {
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for w in layer.weights.as_mut_slice() {
                *w = rng.uniform(-limit, limit);
            }
        }
        shape = layer.output;
        layers.push(layer);
    }
    Ok(Network {
        spec: spec.clone(),
        layers,
        version: 0,
    })
}

impl Network {
    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn input_size(&self) -> usize {
        self.layers
            .first()
            .map(|l| l.input.size())
            .unwrap_or_else(|| Shape::from_dims(&self.spec.input).map_or(0, |s| s.size()))
    }

    pub fn output_size(&self) -> usize {
        self.layers.last().map_or_else(|| self.input_size(), |l| l.output.size())
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.as_slice().len() + l.biases.len())
            .sum()
    }

    /// Parameter blocks in layer order: weights then biases of each
    /// parameterized layer.
    pub fn parameter_blocks(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .filter(|l| l.has_params())
            .flat_map(|l| [l.weights.as_slice(), l.biases.as_slice()])
            .collect()
    }

    /// Overwrites all parameters from blocks laid out as in
    /// [`Network::parameter_blocks`].
    pub fn load_parameter_blocks(&mut self, blocks: &[Vec<f64>]) -> Result<(), NnError> {
        let expected = self.parameter_blocks().len();
        if blocks.len() != expected {
            return Err(NnError::ShapeMismatch(format!(
                "{} parameter blocks supplied, network has {expected}",
                blocks.len()
            )));
        }
        let mut it = blocks.iter();
        for layer in self.layers.iter_mut().filter(|l| l.has_params()) {
            for dst in [layer.weights.as_mut_slice(), layer.biases.as_mut_slice()] {
                let src = it.next().expect("block count checked above");
                if src.len() != dst.len() {
                    return Err(NnError::ShapeMismatch(format!(
                        "parameter block of length {} where {} expected",
                        src.len(),
                        dst.len()
                    )));
                }
                if src.iter().any(|x| !x.is_finite()) {
                    return Err(NnError::InvalidParameter("non-finite parameter".into()));
                }
                dst.copy_from_slice(src);
            }
        }
        self.version += 1;
        Ok(())
    }

    /// Runs the batch (`rows = samples`) through every layer and keeps the
    /// intermediate outputs.
    pub fn forward(&self, batch: &Matrix) -> Result<TapedBatch, NnError> {
        if batch.cols() != self.input_size() {
            return Err(NnError::ShapeMismatch(format!(
                "input has {} features, network expects {}",
                batch.cols(),
                self.input_size()
            )));
        }
        let mut outputs: Vec<Matrix> = Vec::with_capacity(self.layers.len());
        let mut argmax = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate() {
            let input = outputs.last().unwrap_or(batch);
            let mut pooled = Vec::new();
            let out = match layer.spec {
                LayerSpec::Dense { .. } => dense_forward(layer, input),
                LayerSpec::Conv2d { .. } => conv_forward(layer, input),
                LayerSpec::Relu => relu_forward(input),
                LayerSpec::MaxPool { k } => {
                    let (out, idx) = pool_forward(layer, k, input);
                    pooled = idx;
                    out
                }
                LayerSpec::Flatten => input.clone(),
            };
            if !out.is_finite() {
                return Err(NnError::NonFiniteActivation { layer: l });
            }
            outputs.push(out);
            argmax.push(pooled);
        }
        Ok(TapedBatch {
            version: self.version,
            input: batch.clone(),
            outputs,
            argmax,
        })
    }

    /// Convenience forward pass that drops the tape.
    pub fn predict(&self, batch: &Matrix) -> Result<Matrix, NnError> {
        let tape = self.forward(batch)?;
        Ok(tape.output().clone())
    }

    /// Backpropagates `output_grad` (∂φ/∂output, one row per sample) through
    /// the tape. Parameter gradients are summed over the batch.
    pub fn backward(&self, tape: &TapedBatch, output_grad: &Matrix) -> Result<Gradients, NnError> {
        if tape.version != self.version {
            return Err(NnError::StaleTape);
        }
        let out = tape.output();
        if output_grad.rows() != out.rows() || output_grad.cols() != out.cols() {
            return Err(NnError::ShapeMismatch(format!(
                "output gradient is {}x{}, output is {}x{}",
                output_grad.rows(),
                output_grad.cols(),
                out.rows(),
                out.cols()
            )));
        }
        let mut grads: Vec<LayerGrad> = self
            .layers
            .iter()
            .map(|l| LayerGrad {
                weights: Matrix::zeros(l.weights.rows(), l.weights.cols()),
                biases: vec![0.0; l.biases.len()],
            })
            .collect();
        let mut delta = output_grad.clone();
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let input = tape.layer_input(l);
            delta = match layer.spec {
                LayerSpec::Dense { .. } => dense_backward(layer, input, &delta, &mut grads[l]),
                LayerSpec::Conv2d { .. } => conv_backward(layer, input, &delta, &mut grads[l]),
                LayerSpec::Relu => relu_backward(input, &delta),
                LayerSpec::MaxPool { .. } => pool_backward(layer, &tape.argmax[l], &delta),
                LayerSpec::Flatten => delta,
            };
        }
        Ok(Gradients {
            layers: grads,
            input_delta: delta,
        })
    }

    /// `θ ← θ − (η·Γ)·∂φ/∂θ` for every parameter.
    pub fn sgd_update(&mut self, grads: &Gradients, eta: f64, gamma: f64) -> Result<(), NnError> {
        if !(eta > 0.0 && eta.is_finite()) {
            return Err(NnError::InvalidParameter(format!("learning rate {eta}")));
        }
        if !(0.0..=1.0).contains(&gamma) {
            return Err(NnError::InvalidParameter(format!("gamma {gamma} outside [0, 1]")));
        }
        if grads.layers.len() != self.layers.len() {
            return Err(NnError::ShapeMismatch("gradient/layer count".into()));
        }
        for (l, (layer, g)) in self.layers.iter().zip(&grads.layers).enumerate() {
            if g.weights.as_slice().len() != layer.weights.as_slice().len()
                || g.biases.len() != layer.biases.len()
            {
                return Err(NnError::ShapeMismatch(format!("gradient shape for layer {l}")));
            }
            if !g.weights.is_finite() || g.biases.iter().any(|x| !x.is_finite()) {
                return Err(NnError::NonFiniteGradient { layer: l });
            }
        }
        let step = eta * gamma;
        for (layer, g) in self.layers.iter_mut().zip(&grads.layers) {
            for (w, dw) in layer.weights.as_mut_slice().iter_mut().zip(g.weights.as_slice()) {
                *w -= step * dw;
            }
            for (b, db) in layer.biases.iter_mut().zip(&g.biases) {
                *b -= step * db;
            }
        }
        self.version += 1;
        Ok(())
    }
}

fn dense_forward(layer: &Layer, input: &Matrix) -> Matrix {
    let w = &layer.weights;
    let (n_out, n_in) = (w.rows(), w.cols());
    let mut out = Matrix::zeros(input.rows(), n_out);
    for n in 0..input.rows() {
        let a = input.row(n);
        let z = out.row_mut(n);
        for j in 0..n_out {
            let wj = w.row(j);
            let mut s = 0.0;
            for i in 0..n_in {
                s += wj[i] * a[i];
            }
            z[j] = s + layer.biases[j];
        }
    }
    out
}

fn dense_backward(layer: &Layer, input: &Matrix, delta: &Matrix, grad: &mut LayerGrad) -> Matrix {
    let w = &layer.weights;
    let (n_out, n_in) = (w.rows(), w.cols());
    for n in 0..input.rows() {
        let a = input.row(n);
        let d = delta.row(n);
        for j in 0..n_out {
            let gw = grad.weights.row_mut(j);
            for i in 0..n_in {
                gw[i] += d[j] * a[i];
            }
            grad.biases[j] += d[j];
        }
    }
    let mut prev = Matrix::zeros(input.rows(), n_in);
    for n in 0..input.rows() {
        let d = delta.row(n);
        let p = prev.row_mut(n);
        for j in 0..n_out {
            let wj = w.row(j);
            for i in 0..n_in {
                p[i] += wj[i] * d[j];
            }
        }
    }
    prev
}

fn relu_forward(input: &Matrix) -> Matrix {
    let mut out = input.clone();
    for x in out.as_mut_slice() {
        *x = if *x > 0.0 { *x } else { 0.0 };
    }
    out
}

fn relu_backward(input: &Matrix, delta: &Matrix) -> Matrix {
    let mut prev = delta.clone();
    for (d, &z) in prev.as_mut_slice().iter_mut().zip(input.as_slice()) {
        if z <= 0.0 {
            *d = 0.0;
        }
    }
    prev
}

fn image_dims(s: Shape) -> (usize, usize, usize) {
    match s {
        Shape::Image { c, h, w } => (c, h, w),
        Shape::Flat(n) => (n, 1, 1),
    }
}

fn conv_forward(layer: &Layer, input: &Matrix) -> Matrix {
    let LayerSpec::Conv2d { k, stride, .. } = layer.spec else {
        unreachable!("conv_forward on non-conv layer")
    };
    let (ic_n, ih, iw) = image_dims(layer.input);
    let (oc_n, oh, ow) = image_dims(layer.output);
    let mut out = Matrix::zeros(input.rows(), layer.output.size());
    for n in 0..input.rows() {
        let x = input.row(n);
        let y = out.row_mut(n);
        for oc in 0..oc_n {
            let wk = layer.weights.row(oc);
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = 0.0;
                    for ic in 0..ic_n {
                        for ky in 0..k {
                            let row = (ic * ih + oy * stride + ky) * iw + ox * stride;
                            let wrow = (ic * k + ky) * k;
                            for kx in 0..k {
                                s += wk[wrow + kx] * x[row + kx];
                            }
                        }
                    }
                    y[(oc * oh + oy) * ow + ox] = s + layer.biases[oc];
                }
            }
        }
    }
    out
}

fn conv_backward(layer: &Layer, input: &Matrix, delta: &Matrix, grad: &mut LayerGrad) -> Matrix {
    let LayerSpec::Conv2d { k, stride, .. } = layer.spec else {
        unreachable!("conv_backward on non-conv layer")
    };
    let (ic_n, ih, iw) = image_dims(layer.input);
    let (oc_n, oh, ow) = image_dims(layer.output);
    let mut prev = Matrix::zeros(input.rows(), layer.input.size());
    for n in 0..input.rows() {
        let x = input.row(n);
        let d = delta.row(n);
        for oc in 0..oc_n {
            for oy in 0..oh {
                for ox in 0..ow {
                    let g = d[(oc * oh + oy) * ow + ox];
                    grad.biases[oc] += g;
                    if g == 0.0 {
                        continue;
                    }
                    for ic in 0..ic_n {
                        for ky in 0..k {
                            let row = (ic * ih + oy * stride + ky) * iw + ox * stride;
                            let wrow = (ic * k + ky) * k;
                            for kx in 0..k {
                                grad.weights.row_mut(oc)[wrow + kx] += g * x[row + kx];
                                prev.row_mut(n)[row + kx] += g * layer.weights.row(oc)[wrow + kx];
                            }
                        }
                    }
                }
            }
        }
    }
    prev
}

fn pool_forward(layer: &Layer, k: usize, input: &Matrix) -> (Matrix, Vec<usize>) {
    let (c_n, ih, iw) = image_dims(layer.input);
    let (_, oh, ow) = image_dims(layer.output);
    let size = layer.output.size();
    let mut out = Matrix::zeros(input.rows(), size);
    let mut idx = vec![0usize; input.rows() * size];
    for n in 0..input.rows() {
        let x = input.row(n);
        for c in 0..c_n {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_at = 0;
                    for ky in 0..k {
                        for kx in 0..k {
                            let at = (c * ih + oy * k + ky) * iw + ox * k + kx;
                            if x[at] > best {
                                best = x[at];
                                best_at = at;
                            }
                        }
                    }
                    let o = (c * oh + oy) * ow + ox;
                    out[(n, o)] = best;
                    idx[n * size + o] = best_at;
                }
            }
        }
    }
    (out, idx)
}

fn pool_backward(layer: &Layer, argmax: &[usize], delta: &Matrix) -> Matrix {
    let size = layer.output.size();
    let mut prev = Matrix::zeros(delta.rows(), layer.input.size());
    for n in 0..delta.rows() {
        for o in 0..size {
            prev[(n, argmax[n * size + o])] += delta[(n, o)];
        }
    }
    prev
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dense_relu_spec() -> NetworkSpec {
        NetworkSpec {
            input: vec![2],
            layers: vec![LayerSpec::Dense { inputs: 2, out: 2 }, LayerSpec::Relu],
        }
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let spec = NetworkSpec {
            input: vec![2],
            layers: vec![LayerSpec::Dense { inputs: 2, out: 3 }],
        };
        let a = init_params(&spec, 7).unwrap();
        let b = init_params(&spec, 7).unwrap();
        let bits = |n: &Network| -> Vec<u64> {
            n.layers()[0].weights().as_slice().iter().map(|x| x.to_bits()).collect()
        };
        assert_eq!(bits(&a), bits(&b));
        assert_ne!(bits(&a), bits(&init_params(&spec, 8).unwrap()));
        assert!(a.layers()[0].biases().iter().all(|&b| b == 0.0));
    }

    #[test]
    fn init_rejects_bad_shapes() {
        let spec = NetworkSpec {
            input: vec![3],
            layers: vec![LayerSpec::Dense { inputs: 2, out: 3 }],
        };
        assert!(matches!(init_params(&spec, 0), Err(NnError::ShapeMismatch(_))));
        let spec = NetworkSpec {
            input: vec![4],
            layers: vec![LayerSpec::Conv2d {
                in_ch: 1,
                out_ch: 1,
                k: 2,
                stride: 1,
            }],
        };
        assert!(matches!(init_params(&spec, 0), Err(NnError::ShapeMismatch(_))));
    }

    #[test]
    fn identity_weights_relu() {
        let mut net = init_params(&dense_relu_spec(), 0).unwrap();
        *net.layers_mut()[0].weights_mut() = Matrix::identity(2);
        let out = net.predict(&Matrix::from_rows(&[[3.0, -4.0]]).unwrap()).unwrap();
        assert_eq!(out.row(0), &[3.0, 0.0]);
    }

    #[test]
    fn bias_passthrough() {
        let mut net = init_params(&dense_relu_spec(), 0).unwrap();
        net.layers_mut()[0].biases_mut().copy_from_slice(&[1.0, 2.0]);
        let out = net.predict(&Matrix::zeros(1, 2)).unwrap();
        assert_eq!(out.row(0), &[1.0, 2.0]);
    }

    #[test]
    fn single_dense_weight_grad_is_outer_product() {
        let spec = NetworkSpec {
            input: vec![3],
            layers: vec![LayerSpec::Dense { inputs: 3, out: 2 }],
        };
        let net = init_params(&spec, 1).unwrap();
        let a = Matrix::from_rows(&[[1.0, -2.0, 0.5]]).unwrap();
        let g = Matrix::from_rows(&[[0.25, -3.0]]).unwrap();
        let tape = net.forward(&a).unwrap();
        let grads = net.backward(&tape, &g).unwrap();
        for j in 0..2 {
            for i in 0..3 {
                assert_eq!(grads.layers[0].weights[(j, i)], g[(0, j)] * a[(0, i)]);
            }
        }
        assert_eq!(grads.layers[0].biases, vec![0.25, -3.0]);
    }

    #[test]
    fn dead_relu_blocks_gradient() {
        let mut net = init_params(&dense_relu_spec(), 3).unwrap();
        net.layers_mut()[0].biases_mut().copy_from_slice(&[-100.0, -100.0]);
        let x = Matrix::from_rows(&[[0.5, 0.2], [-0.1, 0.3]]).unwrap();
        let tape = net.forward(&x).unwrap();
        let grads = net.backward(&tape, &Matrix::from_rows(&[[1.0, 1.0], [1.0, 1.0]]).unwrap()).unwrap();
        assert!(grads.input_delta.as_slice().iter().all(|&d| d == 0.0));
        assert!(grads.layers[0].weights.as_slice().iter().all(|&d| d == 0.0));
    }

    #[test]
    fn stale_tape_is_rejected() {
        let mut net = init_params(&dense_relu_spec(), 3).unwrap();
        let x = Matrix::from_rows(&[[0.5, 0.2]]).unwrap();
        let tape = net.forward(&x).unwrap();
        let grads = net.backward(&tape, &Matrix::zeros(1, 2)).unwrap();
        net.sgd_update(&grads, 0.1, 1.0).unwrap();
        assert_eq!(net.backward(&tape, &Matrix::zeros(1, 2)).unwrap_err(), NnError::StaleTape);
    }

    #[test]
    fn output_grad_shape_is_checked() {
        let net = init_params(&dense_relu_spec(), 3).unwrap();
        let tape = net.forward(&Matrix::zeros(2, 2)).unwrap();
        assert!(matches!(
            net.backward(&tape, &Matrix::zeros(1, 2)),
            Err(NnError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn sgd_arithmetic() {
        let spec = NetworkSpec {
            input: vec![1],
            layers: vec![LayerSpec::Dense { inputs: 1, out: 1 }],
        };
        let mut net = init_params(&spec, 0).unwrap();
        net.layers_mut()[0].weights_mut()[(0, 0)] = 1.0;
        let grads = Gradients {
            layers: vec![LayerGrad {
                weights: Matrix::from_rows(&[[0.5]]).unwrap(),
                biases: vec![0.5],
            }],
            input_delta: Matrix::zeros(1, 1),
        };
        let before = net.clone();
        net.sgd_update(&grads, 0.1, 0.0).unwrap();
        assert_eq!(net.layers()[0].weights(), before.layers()[0].weights());
        net.sgd_update(&grads, 0.1, 0.8).unwrap();
        assert!((net.layers()[0].weights()[(0, 0)] - 0.96).abs() < 1e-15);
        assert!((net.layers()[0].biases()[0] + 0.04).abs() < 1e-15);
    }

    #[test]
    fn sgd_rejects_bad_inputs() {
        let mut net = init_params(&dense_relu_spec(), 0).unwrap();
        let tape = net.forward(&Matrix::zeros(1, 2)).unwrap();
        let mut grads = net.backward(&tape, &Matrix::zeros(1, 2)).unwrap();
        assert!(matches!(net.sgd_update(&grads, 0.0, 1.0), Err(NnError::InvalidParameter(_))));
        assert!(matches!(net.sgd_update(&grads, 0.1, 1.5), Err(NnError::InvalidParameter(_))));
        grads.layers[0].weights[(0, 0)] = f64::NAN;
        assert_eq!(
            net.sgd_update(&grads, 0.1, 1.0).unwrap_err(),
            NnError::NonFiniteGradient { layer: 0 }
        );
    }

    #[test]
    fn conv_and_pool_shapes() {
        let spec = NetworkSpec {
            input: vec![1, 6, 6],
            layers: vec![
                LayerSpec::Conv2d {
                    in_ch: 1,
                    out_ch: 2,
                    k: 3,
                    stride: 1,
                },
                LayerSpec::Relu,
                LayerSpec::MaxPool { k: 2 },
                LayerSpec::Flatten,
                LayerSpec::Dense { inputs: 8, out: 3 },
            ],
        };
        let net = init_params(&spec, 5).unwrap();
        assert_eq!(net.layers()[0].output_shape(), Shape::Image { c: 2, h: 4, w: 4 });
        assert_eq!(net.layers()[2].output_shape(), Shape::Image { c: 2, h: 2, w: 2 });
        assert_eq!(net.output_size(), 3);
        let out = net.predict(&Matrix::zeros(4, 36)).unwrap();
        assert_eq!((out.rows(), out.cols()), (4, 3));
    }

    #[test]
    fn non_finite_input_is_reported() {
        let net = init_params(&dense_relu_spec(), 0).unwrap();
        let x = Matrix::from_rows(&[[f64::INFINITY, 0.0]]).unwrap();
        assert!(matches!(net.forward(&x), Err(NnError::NonFiniteActivation { layer: 0 })));
    }

    #[test]
    fn layer_spec_json() {
        let spec: Vec<LayerSpec> = serde_json::from_str(
            r#"[{"type":"dense","in":4,"out":2},{"type":"relu"},{"type":"conv2d","in_ch":1,"out_ch":4,"k":3}]"#,
        )
        .unwrap();
        assert_eq!(spec[0], LayerSpec::Dense { inputs: 4, out: 2 });
        assert_eq!(
            spec[2],
            LayerSpec::Conv2d {
                in_ch: 1,
                out_ch: 4,
                k: 3,
                stride: 1
            }
        );
        assert!(serde_json::from_str::<LayerSpec>(r#"{"type":"dense","in":4,"out":2,"bias":0}"#).is_err());
    }
}
