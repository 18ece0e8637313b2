//! Minimal dense tensor engine over `f64`.
//!
//! Tensors are contiguous row-major buffers with an explicit shape and an
//! optional gradient buffer of the same shape. All differentiable
//! computation is recorded on an explicit operation tape ([`Tape`]) and
//! differentiated in reverse; [`grad_check`] validates any recorded
//! computation against central finite differences.

mod checkpoint;
mod gradcheck;
mod tape;

pub use checkpoint::{load_named, save_named, CheckpointError};
pub use gradcheck::{grad_check, GradCheckError, GradReport, FD_STEP};
pub use tape::{LayerNormIds, LinearIds, MlpIds, Tape, TensorId};

use thiserror::Error;

/// Default layer normalization epsilon.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Errors produced by tensor construction and tensor operations.
#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: dimension mismatch between shapes {left:?} and {right:?}")]
    DimMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: empty input")]
    Empty { op: &'static str },
    #[error("shape {shape:?} does not describe a buffer of {len} elements")]
    ShapeLen { shape: Vec<usize>, len: usize },
    #[error("shape {shape:?} has a zero extent")]
    ZeroExtent { shape: Vec<usize> },
    #[error("{op}: non-finite input value")]
    NonFinite { op: &'static str },
    #[error("mlp layer {index}: output width {out} does not match input width {next_in} of layer {}", index + 1)]
    MlpChain {
        index: usize,
        out: usize,
        next_in: usize,
    },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
}

/// A dense row-major tensor of `f64` with an optional gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    /// Builds a tensor from a shape and a row-major buffer.
    ///
    /// Every extent must be positive, the buffer length must equal the
    /// shape product, and every element must be finite.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        if shape.iter().any(|&d| d == 0) {
            return Err(TensorError::ZeroExtent { shape });
        }
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(TensorError::ShapeLen {
                shape,
                len: data.len(),
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(TensorError::NonFinite { op: "Tensor::new" });
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
        })
    }

    /// Crate-internal constructor that skips validation; used where the
    /// buffer is already known to match the shape (e.g. detaching tape
    /// nodes, whose values may legitimately be non-finite and are
    /// reported through the tape instead).
    pub(crate) fn from_raw(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            shape,
            data,
            grad: None,
        }
    }

    /// All-zeros tensor of the given shape.
    pub fn zeros(shape: Vec<usize>) -> Self {
        assert!(
            shape.iter().all(|&d| d > 0),
            "zeros: every extent must be positive, got {shape:?}"
        );
        let len = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; len],
            grad: None,
        }
    }

    /// One-dimensional tensor holding `data`.
    pub fn vector(data: Vec<f64>) -> Self {
        Tensor::new(vec![data.len()], data).expect("vector: finite non-empty data")
    }

    /// Two-dimensional tensor from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        assert!(!rows.is_empty(), "from_rows: need at least one row");
        let cols = rows[0].len();
        assert!(
            rows.iter().all(|r| r.len() == cols),
            "from_rows: ragged rows"
        );
        let data: Vec<f64> = rows.iter().flatten().copied().collect();
        Tensor::new(vec![rows.len(), cols], data).expect("from_rows: finite data")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Number of rows when viewed as a matrix (a vector is one row).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            1 => 1,
            2 => self.shape[0],
            _ => panic!("rows: tensor of rank {} is not a matrix", self.shape.len()),
        }
    }

    /// Number of columns when viewed as a matrix.
    pub fn cols(&self) -> usize {
        match self.shape.len() {
            1 => self.shape[0],
            2 => self.shape[1],
            _ => panic!("cols: tensor of rank {} is not a matrix", self.shape.len()),
        }
    }

    /// Element of a rank-2 tensor.
    pub fn at(&self, i: usize, j: usize) -> f64 {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[i * self.shape[1] + j]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Accumulated gradient, if any has been deposited.
    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Adds `delta` into the gradient buffer, allocating zeros on first use.
    pub fn accumulate_grad(&mut self, delta: &[f64]) {
        assert_eq!(delta.len(), self.data.len(), "accumulate_grad: length");
        let grad = self.grad.get_or_insert_with(|| vec![0.0; self.data.len()]);
        for (g, d) in grad.iter_mut().zip(delta) {
            *g += *d;
        }
    }

    /// Scales the gradient buffer in place (no-op when absent).
    pub fn scale_grad(&mut self, factor: f64) {
        if let Some(grad) = self.grad.as_mut() {
            for g in grad.iter_mut() {
                *g *= factor;
            }
        }
    }

    /// Clears the gradient buffer.
    pub fn zero_grad(&mut self) {
        self.grad = None;
    }
}

/// Parameters of one affine layer: `y = x · weight + bias`.
///
/// `weight` is `d_in × d_out`, `bias` is `[d_out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl LinearParams {
    pub fn new(weight: Tensor, bias: Tensor) -> Result<Self, TensorError> {
        if weight.shape().len() != 2 || bias.shape().len() != 1 {
            return Err(TensorError::Invalid {
                op: "LinearParams::new",
                msg: format!(
                    "expected rank-2 weight and rank-1 bias, got {:?} and {:?}",
                    weight.shape(),
                    bias.shape()
                ),
            });
        }
        if weight.shape()[1] != bias.shape()[0] {
            return Err(TensorError::DimMismatch {
                op: "LinearParams::new",
                left: weight.shape().to_vec(),
                right: bias.shape().to_vec(),
            });
        }
        Ok(LinearParams { weight, bias })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[1]
    }
}

/// Parameters of layer normalization along the last (channel) axis.
///
/// `gain` and `bias` are `[d]`; `eps` stabilizes the variance.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams {
    pub gain: Tensor,
    pub bias: Tensor,
    pub eps: f64,
}

impl LayerNormParams {
    /// Identity normalization parameters: unit gain, zero bias.
    pub fn identity(dim: usize) -> Self {
        LayerNormParams {
            gain: Tensor::vector(vec![1.0; dim]),
            bias: Tensor::vector(vec![0.0; dim]),
            eps: LAYER_NORM_EPS,
        }
    }

    pub fn dim(&self) -> usize {
        self.gain.shape()[0]
    }
}

/// A multi-layer perceptron: alternating affine layers and ReLU, with the
/// final layer affine only.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<LinearParams>,
}

impl Mlp {
    pub fn new(layers: Vec<LinearParams>) -> Result<Self, TensorError> {
        for i in 0..layers.len().saturating_sub(1) {
            if layers[i].out_dim() != layers[i + 1].in_dim() {
                return Err(TensorError::MlpChain {
                    index: i,
                    out: layers[i].out_dim(),
                    next_in: layers[i + 1].in_dim(),
                });
            }
        }
        Ok(Mlp { layers })
    }

    pub fn in_dim(&self) -> usize {
        self.layers.first().expect("mlp has layers").in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().expect("mlp has layers").out_dim()
    }
}

/// Matrix product of two rank-2 tensors (or row-vector left operands).
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
    let mut tape = Tape::new();
    let ia = tape.leaf(a);
    let ib = tape.leaf(b);
    let out = tape.matmul(ia, ib)?;
    Ok(tape.tensor(out))
}

/// Row-wise numerically stable softmax.
pub fn row_softmax(x: &Tensor) -> Tensor {
    let mut tape = Tape::new();
    let ix = tape.leaf(x);
    let out = tape.row_softmax(ix);
    tape.tensor(out)
}

/// Layer normalization along the channel (last) axis of each row.
pub fn layer_norm(x: &Tensor, params: &LayerNormParams) -> Result<Tensor, TensorError> {
    let mut tape = Tape::new();
    let ix = tape.leaf(x);
    let ig = tape.leaf(&params.gain);
    let ib = tape.leaf(&params.bias);
    let out = tape.layer_norm(ix, ig, ib, params.eps)?;
    Ok(tape.tensor(out))
}

/// Channel-wise max over the rows of a set, with per-channel argmax
/// indices (ties resolved to the lowest row index).
pub fn max_pool_set(x: &Tensor) -> Result<(Tensor, Vec<usize>), TensorError> {
    let mut tape = Tape::new();
    let ix = tape.leaf(x);
    let out = tape.max_pool_set(ix)?;
    let argmax = tape.max_pool_argmax(out).to_vec();
    Ok((tape.tensor(out), argmax))
}

/// Runs an MLP forward: affine + ReLU for every hidden layer, final layer
/// affine only.
pub fn mlp_forward(x: &Tensor, mlp: &Mlp) -> Result<Tensor, TensorError> {
    let mut tape = Tape::new();
    let ix = tape.leaf(x);
    let ids = tape.load_mlp(mlp);
    let out = tape.mlp_forward(ix, &ids)?;
    Ok(tape.tensor(out))
}
