//! Minimal feedforward network engine.
//!
//! An [`Mlp`] is an ordered list of dense layers `a = act(W x + b)` with weights of shape
//! `(out, in)`. Everything is `f64`; forward passes are pure and initialization is fully
//! determined by the seed. [`Mlp::backward`] returns exact gradients with respect to every
//! parameter and with respect to the input batch, which is what both split training and
//! input-space optimization need.
//!
//! ReLU uses subgradient 0 at exactly 0.

use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::Rng;

use crate::matrix::Matrix;
use crate::rng::{self, Rng64};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    None,
    Identity,
    Relu,
}

impl Activation {
    pub fn code(self) -> u8 {
        match self {
            Activation::None => 0,
            Activation::Identity => 1,
            Activation::Relu => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Activation::None),
            1 => Some(Activation::Identity),
            2 => Some(Activation::Relu),
            _ => None,
        }
    }

    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::None | Activation::Identity => z,
            Activation::Relu => {
                if z > 0.0 {
                    z
                } else {
                    0.0
                }
            }
        }
    }

    #[inline]
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::None | Activation::Identity => 1.0,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// Dense layer. `weights` is `(out, in)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weights: Matrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Layer {
    pub fn new(weights: Matrix, bias: Vec<f64>, activation: Activation) -> Result<Self> {
        if bias.len() != weights.rows() {
            return Err(Error::shape(format!(
                "bias length {} does not match {} output rows",
                bias.len(),
                weights.rows()
            )));
        }
        Ok(Self { weights, bias, activation })
    }

    pub fn in_dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.rows()
    }
}

/// Parameters of a multi-layer perceptron plus the seed it was initialized from.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<Layer>,
    seed: u64,
}

/// Per-layer values retained by [`Mlp::forward`] for backpropagation.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    input: Matrix,
    pre: Vec<Matrix>,
    post: Vec<Matrix>,
}

impl ForwardTrace {
    pub fn depth(&self) -> usize {
        self.pre.len()
    }

    pub fn input(&self) -> &Matrix {
        &self.input
    }

    pub fn pre_activations(&self) -> &[Matrix] {
        &self.pre
    }

    pub fn activations(&self) -> &[Matrix] {
        &self.post
    }
}

/// Parameter gradients, shaped like the network.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(mlp: &Mlp) -> Self {
        Self {
            weights: mlp.layers.iter().map(|l| Matrix::zeros(l.out_dim(), l.in_dim())).collect(),
            biases: mlp.layers.iter().map(|l| vec![0.0; l.out_dim()]).collect(),
        }
    }

    fn is_finite(&self) -> bool {
        self.weights.iter().all(Matrix::is_finite) && self.biases.iter().flatten().all(|v| v.is_finite())
    }
}

/// A batch of inputs with optional class labels.
#[derive(Debug, Clone)]
pub struct Batch {
    pub inputs: Matrix,
    pub labels: Option<Vec<usize>>,
}

impl Batch {
    pub fn new(inputs: Matrix, labels: Option<Vec<usize>>, num_classes: usize) -> Result<Self> {
        if inputs.rows() == 0 {
            return Err(Error::shape("batch must contain at least one row"));
        }
        if let Some(labels) = &labels {
            if labels.len() != inputs.rows() {
                return Err(Error::shape(format!("{} labels for {} rows", labels.len(), inputs.rows())));
            }
            if let Some(bad) = labels.iter().find(|&&y| y >= num_classes) {
                return Err(Error::config(format!("label {bad} outside [0, {num_classes})")));
            }
        }
        Ok(Self { inputs, labels })
    }
}

impl Mlp {
    pub fn new(layers: Vec<Layer>, seed: u64) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::shape("network needs at least one layer"));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::shape(format!(
                    "layer {} outputs {} values but layer {} expects {}",
                    i,
                    pair[0].out_dim(),
                    i + 1,
                    pair[1].in_dim()
                )));
            }
        }
        for (i, l) in layers.iter().enumerate() {
            if !l.weights.is_finite() || l.bias.iter().any(|b| !b.is_finite()) {
                return Err(Error::NonFinite(format!("parameters of layer {i}")));
            }
        }
        Ok(Self { layers, seed })
    }

    /// Builds a network with layer widths `dims` (input first). Hidden layers use `hidden`,
    /// the last layer uses `output`. Weights and biases are uniform in `±1/sqrt(fan_in)`.
    pub fn seeded(dims: &[usize], hidden: Activation, output: Activation, seed: u64) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::shape("need at least input and output widths"));
        }
        if dims.contains(&0) {
            return Err(Error::shape("layer widths must be positive"));
        }
        let mut rng = rng::seeded(seed);
        let n_layers = dims.len() - 1;
        let layers = (0..n_layers)
            .map(|i| {
                let (fan_in, fan_out) = (dims[i], dims[i + 1]);
                let bound = 1.0 / (fan_in as f64).sqrt();
                let w: Vec<f64> = (0..fan_in * fan_out).map(|_| rng.random_range(-bound..=bound)).collect();
                let b: Vec<f64> = (0..fan_out).map(|_| rng.random_range(-bound..=bound)).collect();
                let act = if i + 1 == n_layers { output } else { hidden };
                Layer::new(Matrix::from_vec(fan_out, fan_in, w)?, b, act)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(layers, seed)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    /// Widths of every layer boundary, input first.
    pub fn dims(&self) -> Vec<usize> {
        std::iter::once(self.input_dim()).chain(self.layers.iter().map(Layer::out_dim)).collect()
    }

    /// Stacks `next` after `self`.
    pub fn then(&self, next: &Mlp) -> Result<Mlp> {
        let mut layers = self.layers.clone();
        layers.extend(next.layers.iter().cloned());
        Mlp::new(layers, self.seed)
    }

    /// Number of trainable scalars.
    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.as_slice().len() + l.bias.len()).sum()
    }

    pub fn forward(&self, inputs: &Matrix) -> Result<(Matrix, ForwardTrace)> {
        if inputs.cols() != self.input_dim() {
            return Err(Error::shape(format!(
                "layer 0 expects {} inputs, batch has {}",
                self.input_dim(),
                inputs.cols()
            )));
        }
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut post: Vec<Matrix> = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let x = post.last().unwrap_or(inputs);
            let z = affine(layer, x);
            let mut a = z.clone();
            for v in a.as_mut_slice() {
                *v = layer.activation.apply(*v);
            }
            pre.push(z);
            post.push(a);
        }
        let out = post.last().cloned().expect("at least one layer");
        Ok((
            out,
            ForwardTrace {
                input: inputs.clone(),
                pre,
                post,
            },
        ))
    }

    /// Forward pass for one sample without keeping a trace.
    pub fn predict(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::shape(format!("layer 0 expects {} inputs, got {}", self.input_dim(), x.len())));
        }
        let mut cur = x.to_vec();
        for layer in &self.layers {
            let w = &layer.weights;
            cur = (0..layer.out_dim())
                .map(|o| {
                    let z = layer.bias[o] + dot(w.row(o), &cur);
                    layer.activation.apply(z)
                })
                .collect();
        }
        Ok(cur)
    }

    /// Forward pass over every row of `inputs`, without traces.
    pub fn predict_batch(&self, inputs: &Matrix) -> Result<Matrix> {
        Ok(self.forward(inputs)?.0)
    }

    /// Backpropagates `output_grad` (dL/d outputs, one row per sample) through `trace`.
    ///
    /// Returns gradients of `L` with respect to every parameter (summed over the batch) and
    /// with respect to each input row.
    pub fn backward(&self, trace: &ForwardTrace, output_grad: &Matrix) -> Result<(Gradients, Matrix)> {
        if trace.depth() != self.layers.len() {
            return Err(Error::shape(format!("trace has {} layers, network has {}", trace.depth(), self.layers.len())));
        }
        for (i, (layer, z)) in self.layers.iter().zip(&trace.pre).enumerate() {
            if z.cols() != layer.out_dim() {
                return Err(Error::shape(format!("trace does not match layer {i}")));
            }
        }
        let n = trace.input.rows();
        if output_grad.rows() != n || output_grad.cols() != self.output_dim() {
            return Err(Error::shape(format!(
                "output gradient is {}x{}, expected {}x{}",
                output_grad.rows(),
                output_grad.cols(),
                n,
                self.output_dim()
            )));
        }

        let mut grads = Gradients::zeros_like(self);
        let mut upstream = output_grad.clone();
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let z = &trace.pre[l];
            let x = if l == 0 { &trace.input } else { &trace.post[l - 1] };
            let (out_dim, in_dim) = (layer.out_dim(), layer.in_dim());

            let mut dz = upstream;
            for (g, &zv) in dz.as_mut_slice().iter_mut().zip(z.as_slice()) {
                *g *= layer.activation.derivative(zv);
            }

            let dw = grads.weights[l].as_mut_slice();
            let db = &mut grads.biases[l];
            let mut dx = Matrix::zeros(n, in_dim);
            for r in 0..n {
                let dz_row = dz.row(r);
                let x_row = x.row(r);
                let dx_row = dx.row_mut(r);
                for o in 0..out_dim {
                    let g = dz_row[o];
                    if g == 0.0 {
                        continue;
                    }
                    db[o] += g;
                    let w_row = layer.weights.row(o);
                    let dw_row = &mut dw[o * in_dim..(o + 1) * in_dim];
                    for i in 0..in_dim {
                        dw_row[i] += g * x_row[i];
                        dx_row[i] += g * w_row[i];
                    }
                }
            }
            upstream = dx;
        }
        Ok((grads, upstream))
    }

    /// In-place `p -= lr * g`. Leaves the network untouched if any gradient is non-finite.
    pub fn apply_sgd(&mut self, grads: &Gradients, lr: f64) -> Result<()> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::config(format!("learning rate {lr} must be finite and >= 0")));
        }
        if grads.weights.len() != self.layers.len()
            || grads
                .weights
                .iter()
                .zip(&self.layers)
                .any(|(g, l)| g.rows() != l.out_dim() || g.cols() != l.in_dim())
            || grads.biases.iter().zip(&self.layers).any(|(g, l)| g.len() != l.out_dim())
        {
            return Err(Error::shape("gradients do not match network shape"));
        }
        if !grads.is_finite() {
            return Err(Error::NonFinite("gradient".into()));
        }
        for (layer, (gw, gb)) in self.layers.iter_mut().zip(grads.weights.iter().zip(&grads.biases)) {
            for (p, g) in layer.weights.as_mut_slice().iter_mut().zip(gw.as_slice()) {
                *p -= lr * g;
            }
            for (p, g) in layer.bias.iter_mut().zip(gb) {
                *p -= lr * g;
            }
        }
        Ok(())
    }

    /// Functional form of [`Mlp::apply_sgd`].
    pub fn sgd_update(&self, grads: &Gradients, lr: f64) -> Result<Mlp> {
        let mut next = self.clone();
        next.apply_sgd(grads, lr)?;
        Ok(next)
    }

    /// Writes the binary checkpoint: `"VTNN"`, u16 version, u16 layer count, then per layer
    /// u32 rows, u32 cols, u8 activation code, row-major f64 weights and f64 biases.
    /// All integers and floats are little-endian.
    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        let count = u16::try_from(self.layers.len()).map_err(|_| Error::Checkpoint("too many layers".into()))?;
        w.write_all(&count.to_le_bytes())?;
        for layer in &self.layers {
            let rows = u32::try_from(layer.out_dim()).map_err(|_| Error::Checkpoint("layer too wide".into()))?;
            let cols = u32::try_from(layer.in_dim()).map_err(|_| Error::Checkpoint("layer too wide".into()))?;
            w.write_all(&rows.to_le_bytes())?;
            w.write_all(&cols.to_le_bytes())?;
            w.write_all(&[layer.activation.code()])?;
            for v in layer.weights.as_slice().iter().chain(&layer.bias) {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    /// Reads a checkpoint written by [`Mlp::write_checkpoint`]. The seed is not persisted
    /// and comes back as 0.
    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Mlp> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = read_u16(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let count = read_u16(&mut r)? as usize;
        let mut layers = Vec::with_capacity(count);
        for _ in 0..count {
            let rows = read_u32(&mut r)? as usize;
            let cols = read_u32(&mut r)? as usize;
            let mut code = [0u8; 1];
            r.read_exact(&mut code)?;
            let activation = Activation::from_code(code[0]).ok_or_else(|| Error::Checkpoint(format!("unknown activation code {}", code[0])))?;
            let weights = read_f64s(&mut r, rows * cols)?;
            let bias = read_f64s(&mut r, rows)?;
            layers.push(Layer::new(Matrix::from_vec(rows, cols, weights)?, bias, activation)?);
        }
        Mlp::new(layers, 0)
    }
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"VTNN";
const CHECKPOINT_VERSION: u16 = 1;

pub(crate) fn read_u16<R: Read>(r: &mut R) -> Result<u16> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)?;
    Ok(u16::from_le_bytes(b))
}

pub(crate) fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_f64s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(n);
    let mut b = [0u8; 8];
    for _ in 0..n {
        r.read_exact(&mut b)?;
        out.push(f64::from_le_bytes(b));
    }
    Ok(out)
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn affine(layer: &Layer, x: &Matrix) -> Matrix {
    let mut z = Matrix::zeros(x.rows(), layer.out_dim());
    for r in 0..x.rows() {
        let xr = x.row(r);
        let zr = z.row_mut(r);
        for (o, zv) in zr.iter_mut().enumerate() {
            *zv = layer.bias[o] + dot(layer.weights.row(o), xr);
        }
    }
    z
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Cross-entropy of `softmax(logits)` against `label`, with its gradient w.r.t. the logits.
pub fn softmax_cross_entropy(logits: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    if logits.len() < 2 {
        return Err(Error::config("cross-entropy needs at least two classes"));
    }
    if label >= logits.len() {
        return Err(Error::config(format!("label {label} outside [0, {})", logits.len())));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_sum = logits.iter().map(|&l| (l - max).exp()).sum::<f64>().ln() + max;
    let loss = log_sum - logits[label];
    let mut grad = softmax(logits);
    grad[label] -= 1.0;
    Ok((loss, grad))
}

/// Mean over rows of the squared L2 reconstruction error, with gradient w.r.t. `x_rec`.
pub fn mse_loss(x: &Matrix, x_rec: &Matrix) -> Result<(f64, Matrix)> {
    if x.rows() != x_rec.rows() || x.cols() != x_rec.cols() {
        return Err(Error::shape(format!(
            "reconstruction is {}x{}, input is {}x{}",
            x_rec.rows(),
            x_rec.cols(),
            x.rows(),
            x.cols()
        )));
    }
    let n = x.rows().max(1) as f64;
    let mut grad = Matrix::zeros(x.rows(), x.cols());
    let mut loss = 0.0;
    for ((g, &a), &b) in grad.as_mut_slice().iter_mut().zip(x.as_slice()).zip(x_rec.as_slice()) {
        let d = b - a;
        loss += d * d;
        *g = 2.0 * d / n;
    }
    Ok((loss / n, grad))
}

/// Minibatch SGD settings shared by the training loops.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

/// Mean cross-entropy and accuracy of `mlp` on a labeled batch.
pub fn evaluate_classifier(mlp: &Mlp, inputs: &Matrix, labels: &[usize]) -> Result<(f64, f64)> {
    let logits = mlp.predict_batch(inputs)?;
    let mut loss = 0.0;
    let mut correct = 0usize;
    for (row, &y) in logits.iter_rows().zip(labels) {
        loss += softmax_cross_entropy(row, y)?.0;
        if crate::matrix::argmax(row) == y {
            correct += 1;
        }
    }
    let n = labels.len().max(1) as f64;
    Ok((loss / n, correct as f64 / n))
}

/// Trains `mlp` as a softmax classifier with shuffled minibatch SGD on the mean
/// cross-entropy. Returns the full-batch loss before training followed by the loss after
/// each epoch.
pub fn train_classifier(mlp: &mut Mlp, batch: &Batch, cfg: &SgdConfig, rng: &mut Rng64) -> Result<Vec<f64>> {
    let labels = batch.labels.as_ref().ok_or_else(|| Error::config("classifier training needs labels"))?;
    if cfg.batch_size == 0 {
        return Err(Error::config("batch size must be positive"));
    }
    let n = batch.inputs.rows();
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = vec![evaluate_classifier(mlp, &batch.inputs, labels)?.0];
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        for chunk in order.chunks(cfg.batch_size) {
            let x = batch.inputs.select_rows(chunk);
            let (logits, trace) = mlp.forward(&x)?;
            let mut g = Matrix::zeros(chunk.len(), mlp.output_dim());
            let scale = 1.0 / chunk.len() as f64;
            for (r, &i) in chunk.iter().enumerate() {
                let (_, grad) = softmax_cross_entropy(logits.row(r), labels[i])?;
                for (dst, src) in g.row_mut(r).iter_mut().zip(grad) {
                    *dst = src * scale;
                }
            }
            let (grads, _) = mlp.backward(&trace, &g)?;
            mlp.apply_sgd(&grads, cfg.lr)?;
        }
        history.push(evaluate_classifier(mlp, &batch.inputs, labels)?.0);
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layer(rows: &[&[f64]], bias: &[f64], act: Activation) -> Layer {
        Layer::new(Matrix::from_rows(rows).unwrap(), bias.to_vec(), act).unwrap()
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let net = Mlp::new(vec![layer(&[&[1.0, 0.0], &[0.0, 1.0]], &[0.0, 0.0], Activation::Identity)], 0).unwrap();
        let (out, trace) = net.forward(&Matrix::row_vector(&[1.0, 2.0])).unwrap();
        assert_eq!(out.row(0), &[1.0, 2.0]);
        assert_eq!(trace.depth(), 1);
    }

    #[test]
    fn affine_relu_by_hand() {
        let net = Mlp::new(vec![layer(&[&[2.0, 0.0], &[0.0, 3.0]], &[1.0, -1.0], Activation::Relu)], 0).unwrap();
        let (out, trace) = net.forward(&Matrix::row_vector(&[1.0, -1.0])).unwrap();
        assert_eq!(trace.pre_activations()[0].row(0), &[3.0, -4.0]);
        assert_eq!(out.row(0), &[3.0, 0.0]);
        assert_eq!(net.predict(&[1.0, -1.0]).unwrap(), vec![3.0, 0.0]);
    }

    #[test]
    fn stacked_identities_compose_to_identity() {
        let id = || layer(&[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0], &[0.0, 0.0, 1.0]], &[0.0; 3], Activation::Identity);
        let net = Mlp::new(vec![id(), id()], 0).unwrap();
        let x = [0.25, -7.5, 3.0];
        assert_eq!(net.predict(&x).unwrap(), x.to_vec());
    }

    #[test]
    fn dimension_mismatch_names_layer() {
        let a = layer(&[&[1.0, 0.0]], &[0.0], Activation::Relu);
        let b = layer(&[&[1.0, 0.0]], &[0.0], Activation::Relu);
        let err = Mlp::new(vec![a, b], 0).unwrap_err().to_string();
        assert!(err.contains("layer 1"), "{err}");
        let net = Mlp::seeded(&[3, 2], Activation::Relu, Activation::Identity, 1).unwrap();
        let err = net.forward(&Matrix::row_vector(&[1.0])).unwrap_err().to_string();
        assert!(err.contains("layer 0"), "{err}");
    }

    #[test]
    fn identity_backward_is_outer_product() {
        let net = Mlp::new(vec![layer(&[&[1.0, 0.0], &[0.0, 1.0]], &[0.0, 0.0], Activation::Identity)], 0).unwrap();
        let x = Matrix::row_vector(&[2.0, -3.0]);
        let (_, trace) = net.forward(&x).unwrap();
        let g = Matrix::row_vector(&[0.5, 4.0]);
        let (grads, dx) = net.backward(&trace, &g).unwrap();
        assert_eq!(dx.row(0), &[0.5, 4.0]);
        assert_eq!(grads.weights[0].as_slice(), &[1.0, -1.5, 8.0, -12.0]);
        assert_eq!(grads.biases[0], vec![0.5, 4.0]);
    }

    #[test]
    fn relu_at_zero_has_zero_gradient() {
        let net = Mlp::new(vec![layer(&[&[1.0]], &[0.0], Activation::Relu)], 0).unwrap();
        let (_, trace) = net.forward(&Matrix::row_vector(&[0.0])).unwrap();
        let (_, dx) = net.backward(&trace, &Matrix::row_vector(&[1.0])).unwrap();
        assert_eq!(dx.row(0), &[0.0]);
    }

    #[test]
    fn backward_rejects_foreign_trace() {
        let a = Mlp::seeded(&[2, 3, 2], Activation::Relu, Activation::Identity, 1).unwrap();
        let b = Mlp::seeded(&[2, 2], Activation::Relu, Activation::Identity, 1).unwrap();
        let (_, trace) = b.forward(&Matrix::row_vector(&[1.0, 1.0])).unwrap();
        assert!(a.backward(&trace, &Matrix::row_vector(&[1.0, 1.0])).is_err());
    }

    #[test]
    fn sgd_arithmetic_and_zero_lr() {
        let mut net = Mlp::new(vec![layer(&[&[1.0]], &[1.0], Activation::Identity)], 0).unwrap();
        let grads = Gradients {
            weights: vec![Matrix::row_vector(&[0.5])],
            biases: vec![vec![0.5]],
        };
        assert_eq!(net.sgd_update(&grads, 0.0).unwrap(), net);
        net.apply_sgd(&grads, 0.1).unwrap();
        assert!((net.layers()[0].weights.get(0, 0) - 0.95).abs() < 1e-15);
        assert!((net.layers()[0].bias[0] - 0.95).abs() < 1e-15);
    }

    #[test]
    fn sgd_rejects_non_finite_gradient() {
        let mut net = Mlp::seeded(&[1, 1], Activation::Relu, Activation::Identity, 3).unwrap();
        let before = net.clone();
        let mut grads = Gradients::zeros_like(&net);
        grads.biases[0][0] = f64::NAN;
        assert!(matches!(net.apply_sgd(&grads, 0.1), Err(Error::NonFinite(_))));
        assert_eq!(net, before);
    }

    #[test]
    fn two_updates_equal_one_summed_update() {
        let net = Mlp::seeded(&[3, 4, 2], Activation::Relu, Activation::Identity, 9).unwrap();
        let mut g = Gradients::zeros_like(&net);
        for (i, v) in g.weights[0].as_mut_slice().iter_mut().enumerate() {
            *v = (i as f64 * 0.37).sin();
        }
        let twice = net.sgd_update(&g, 0.125).unwrap().sgd_update(&g, 0.125).unwrap();
        let once = net.sgd_update(&g, 0.25).unwrap();
        for (a, b) in twice.layers()[0].weights.as_slice().iter().zip(once.layers()[0].weights.as_slice()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn cross_entropy_closed_form() {
        let (loss, grad) = softmax_cross_entropy(&[0.0, 0.0], 0).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((grad[0] + 0.5).abs() < 1e-12 && (grad[1] - 0.5).abs() < 1e-12);
        let (loss, grad) = softmax_cross_entropy(&[1000.0, 0.0], 0).unwrap();
        assert!(loss.is_finite() && loss.abs() < 1e-12);
        assert!(grad.iter().all(|g| g.is_finite()));
        assert!(softmax_cross_entropy(&[1.0], 0).is_err());
        assert!(softmax_cross_entropy(&[1.0, 2.0], 2).is_err());
    }

    #[test]
    fn mse_cases() {
        let x = Matrix::row_vector(&[1.0, 0.0]);
        assert_eq!(mse_loss(&x, &x).unwrap().0, 0.0);
        let (loss, grad) = mse_loss(&x, &Matrix::row_vector(&[0.0, 0.0])).unwrap();
        assert_eq!(loss, 1.0);
        assert_eq!(grad.row(0), &[-2.0, 0.0]);
        assert!(mse_loss(&x, &Matrix::row_vector(&[0.0])).is_err());
    }

    #[test]
    fn seeded_init_is_reproducible_and_bounded() {
        let a = Mlp::seeded(&[10, 8, 3], Activation::Relu, Activation::Identity, 42).unwrap();
        let b = Mlp::seeded(&[10, 8, 3], Activation::Relu, Activation::Identity, 42).unwrap();
        let c = Mlp::seeded(&[10, 8, 3], Activation::Relu, Activation::Identity, 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        let bound = 1.0 / 10f64.sqrt();
        assert!(a.layers()[0].weights.as_slice().iter().all(|w| w.abs() <= bound));
    }

    #[test]
    fn checkpoint_round_trip() {
        let net = Mlp::seeded(&[4, 5, 2], Activation::Relu, Activation::Identity, 5).unwrap();
        let mut buf = Vec::new();
        net.write_checkpoint(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"VTNN");
        assert_eq!(&buf[4..8], &[1, 0, 2, 0]);
        assert_eq!(buf.len(), 8 + 2 * 9 + 8 * (4 * 5 + 5 + 5 * 2 + 2));
        let back = Mlp::read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(back.layers(), net.layers());
        buf[0] = b'X';
        assert!(Mlp::read_checkpoint(buf.as_slice()).is_err());
    }

    #[test]
    fn training_reduces_loss() {
        let inputs = Matrix::from_rows(&[[-2.0, 0.1], [-1.5, -0.3], [2.0, 0.2], [1.7, -0.1]]).unwrap();
        let batch = Batch::new(inputs, Some(vec![0, 0, 1, 1]), 2).unwrap();
        let mut net = Mlp::seeded(&[2, 4, 2], Activation::Relu, Activation::Identity, 11).unwrap();
        let cfg = SgdConfig {
            epochs: 50,
            lr: 0.1,
            batch_size: 2,
        };
        let hist = train_classifier(&mut net, &batch, &cfg, &mut rng::seeded(1)).unwrap();
        assert_eq!(hist.len(), 51);
        assert!(hist[50] < hist[0]);
        assert!(Batch::new(Matrix::row_vector(&[1.0]), Some(vec![3]), 2).is_err());
    }
}
