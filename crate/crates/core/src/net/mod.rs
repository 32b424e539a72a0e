//! Fully connected ReLU networks with exact forward and backward passes.
//!
//! Layer `l` maps `x ↦ x W_l + b_l` with `W_l` stored `in x out`; ReLU sits
//! between hidden layers and nothing follows the last one. The last weight
//! matrix is the optimum-shifting target `V` (`m x n`, `m` penultimate width,
//! `n` outputs).

mod checkpoint;
mod loss;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::linalg::{matmul, matmul_nt, matmul_tn, LinalgError, Matrix};

pub use checkpoint::{Checkpoint, CHECKPOINT_SCHEMA_VERSION};
pub use loss::{
    accuracy, argmax, loss_and_logit_grad, loss_from_logits, loss_second_derivative_diag, softmax,
    LossKind, Targets,
};

#[derive(Debug, thiserror::Error)]
pub enum NetError {
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("invalid architecture: {0}")]
    Architecture(String),
    #[error("label {label} at sample {index} is outside 0..{classes}")]
    InvalidLabel { index: usize, label: usize, classes: usize },
    #[error("invalid targets: {0}")]
    InvalidTargets(String),
    #[error("checkpoint line {line}: {reason}")]
    Checkpoint { line: usize, reason: String },
    #[error("checkpoint I/O: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, NetError>;

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `in x out`.
    pub weight: Matrix,
    /// Length `out`.
    pub bias: Vec<f64>,
}

impl Layer {
    pub fn in_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.cols()
    }

    fn param_count(&self) -> usize {
        self.weight.rows() * self.weight.cols() + self.bias.len()
    }

    fn affine(&self, x: &Matrix) -> Result<Matrix> {
        let mut out = matmul(x, &self.weight)?;
        for i in 0..out.rows() {
            for (o, b) in out.row_mut(i).iter_mut().zip(&self.bias) {
                *o += b;
            }
        }
        out.check_finite()?;
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    layers: Vec<Layer>,
}

/// Per-hidden-layer activations captured during a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub pre: Vec<Matrix>,
    pub post: Vec<Matrix>,
    /// ReLU indicators: 1 where the pre-activation is strictly positive.
    pub masks: Vec<Matrix>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Forward {
    pub logits: Matrix,
    pub trace: Option<ForwardTrace>,
}

/// Gradients with the same layout as the model parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vec<f64>>,
}

impl Gradients {
    /// Concatenates every layer's weight (row-major) then bias, in layer order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w.as_slice());
            out.extend_from_slice(b);
        }
        out
    }
}

impl MlpModel {
    /// Builds a network with the given layer widths (`dims[0]` is the input
    /// width) using Glorot-uniform weights and zero biases.
    pub fn new(dims: &[usize], seed: u64) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(NetError::Architecture(format!(
                "need at least two positive widths, got {dims:?}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = dims
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                Layer {
                    weight: Matrix::from_fn(fan_in, fan_out, |_, _| rng.random_range(-limit..limit)),
                    bias: vec![0.0; fan_out],
                }
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(NetError::Architecture("no layers".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.out_dim() {
                return Err(NetError::Architecture(format!(
                    "layer {i}: bias length {} != output width {}",
                    l.bias.len(),
                    l.out_dim()
                )));
            }
            if l.bias.iter().any(|b| !b.is_finite()) {
                return Err(NetError::Architecture(format!("layer {i}: non-finite bias")));
            }
        }
        for (i, w) in layers.windows(2).enumerate() {
            if w[0].out_dim() != w[1].in_dim() {
                return Err(NetError::Architecture(format!(
                    "layer {i} outputs {} but layer {} expects {}",
                    w[0].out_dim(),
                    i + 1,
                    w[1].in_dim()
                )));
            }
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Layer widths, input first.
    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.layers[0].in_dim()];
        d.extend(self.layers.iter().map(Layer::out_dim));
        d
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    /// Width `m` of the features feeding the final layer.
    pub fn feature_dim(&self) -> usize {
        self.final_layer().in_dim()
    }

    pub fn final_layer(&self) -> &Layer {
        &self.layers[self.layers.len() - 1]
    }

    /// The final-layer weight `V`.
    pub fn final_weight(&self) -> &Matrix {
        &self.final_layer().weight
    }

    /// Replaces `V`; the shape must match.
    pub fn set_final_weight(&mut self, v: Matrix) -> Result<()> {
        let last = self.layers.len() - 1;
        let current = &self.layers[last].weight;
        if v.shape() != current.shape() {
            return Err(LinalgError::Shape {
                op: "set_final_weight",
                left: current.shape(),
                right: v.shape(),
            }
            .into());
        }
        v.check_finite()?;
        self.layers[last].weight = v;
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    /// Parameters flattened in the same order as [`Gradients::flatten`].
    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(l.weight.as_slice());
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn set_params_flat(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(NetError::Architecture(format!(
                "expected {} parameters, got {}",
                self.param_count(),
                params.len()
            )));
        }
        if let Some(k) = params.iter().position(|x| !x.is_finite()) {
            return Err(NetError::Architecture(format!("non-finite parameter at {k}")));
        }
        let mut offset = 0;
        for l in &mut self.layers {
            let nw = l.weight.rows() * l.weight.cols();
            l.weight.as_mut_slice().copy_from_slice(&params[offset..offset + nw]);
            offset += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&params[offset..offset + nb]);
            offset += nb;
        }
        Ok(())
    }

    /// Range of `V` inside the flat parameter vector.
    pub fn final_weight_range(&self) -> std::ops::Range<usize> {
        let before: usize = self.layers[..self.layers.len() - 1]
            .iter()
            .map(Layer::param_count)
            .sum();
        let v = self.final_weight();
        before..before + v.rows() * v.cols()
    }

    pub fn forward(&self, inputs: &Matrix, capture: bool) -> Result<Forward> {
        if inputs.cols() != self.input_dim() {
            return Err(LinalgError::Shape {
                op: "forward",
                left: inputs.shape(),
                right: self.layers[0].weight.shape(),
            }
            .into());
        }
        let mut trace = capture.then(|| ForwardTrace {
            pre: Vec::new(),
            post: Vec::new(),
            masks: Vec::new(),
        });
        let last = self.layers.len() - 1;
        let mut x = inputs.clone();
        for layer in &self.layers[..last] {
            let pre = layer.affine(&x)?;
            let mask = Matrix::from_fn(pre.rows(), pre.cols(), |i, j| {
                if pre.get(i, j) > 0.0 {
                    1.0
                } else {
                    0.0
                }
            });
            let post = hadamard(&pre, &mask);
            if let Some(t) = trace.as_mut() {
                t.pre.push(pre);
                t.masks.push(mask);
                t.post.push(post.clone());
            }
            x = post;
        }
        let logits = self.layers[last].affine(&x)?;
        Ok(Forward { logits, trace })
    }

    pub fn logits(&self, inputs: &Matrix) -> Result<Matrix> {
        Ok(self.forward(inputs, false)?.logits)
    }

    /// Penultimate activations: the rows of the input matrix `A` seen by `V`.
    pub fn features(&self, inputs: &Matrix) -> Result<Matrix> {
        let forward = self.forward(inputs, true)?;
        let trace = forward.trace.expect("capture requested");
        Ok(trace.post.last().cloned().unwrap_or_else(|| inputs.clone()))
    }

    /// Batch-mean loss and exact gradients for every weight and bias.
    pub fn loss_and_grad(&self, inputs: &Matrix, targets: &Targets, kind: LossKind) -> Result<(f64, Gradients)> {
        let forward = self.forward(inputs, true)?;
        let trace = forward.trace.expect("capture requested");
        let (loss, mut delta) = loss_and_logit_grad(&forward.logits, targets, kind)?;

        let depth = self.layers.len();
        let mut weights = Vec::with_capacity(depth);
        let mut biases = Vec::with_capacity(depth);
        for l in (0..depth).rev() {
            let input = if l == 0 { inputs } else { &trace.post[l - 1] };
            weights.push(matmul_tn(input, &delta)?);
            biases.push(column_sums(&delta));
            if l > 0 {
                let back = matmul_nt(&delta, &self.layers[l].weight)?;
                delta = hadamard(&back, &trace.masks[l - 1]);
            }
        }
        weights.reverse();
        biases.reverse();
        Ok((loss, Gradients { weights, biases }))
    }

    pub fn loss(&self, inputs: &Matrix, targets: &Targets, kind: LossKind) -> Result<f64> {
        loss_from_logits(&self.logits(inputs)?, targets, kind)
    }
}

fn hadamard(a: &Matrix, b: &Matrix) -> Matrix {
    Matrix::from_fn(a.rows(), a.cols(), |i, j| a.get(i, j) * b.get(i, j))
}

fn column_sums(m: &Matrix) -> Vec<f64> {
    let mut out = vec![0.0; m.cols()];
    for i in 0..m.rows() {
        for (o, x) in out.iter_mut().zip(m.row(i)) {
            *o += x;
        }
    }
    out
}
