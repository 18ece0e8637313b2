//! Reverse-mode automatic differentiation on an explicit operation tape.
//!
//! Every forward operation appends a node holding its output buffer and
//! enough bookkeeping to run the backward step. [`Tape::backward`] walks
//! the nodes in reverse and accumulates gradients into per-node buffers.
//! A tape is single-threaded by construction; independent tapes may be
//! used concurrently.

use super::{LayerNormParams, LinearParams, Mlp, Tensor, TensorError};

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

impl TensorId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Tape ids of one affine layer.
#[derive(Debug, Clone, Copy)]
pub struct LinearIds {
    pub weight: TensorId,
    pub bias: TensorId,
}

/// Tape ids of one layer-norm.
#[derive(Debug, Clone, Copy)]
pub struct LayerNormIds {
    pub gain: TensorId,
    pub bias: TensorId,
    pub eps: f64,
}

/// Tape ids of an MLP.
#[derive(Debug, Clone)]
pub struct MlpIds {
    pub layers: Vec<LinearIds>,
}

enum Op {
    Leaf,
    MatMul {
        a: TensorId,
        b: TensorId,
    },
    Transpose {
        x: TensorId,
    },
    Add {
        a: TensorId,
        b: TensorId,
    },
    /// Broadcast-add a `[d]` row vector onto every row of an `n×d` matrix.
    AddRow {
        x: TensorId,
        row: TensorId,
    },
    Scale {
        x: TensorId,
        c: f64,
    },
    Relu {
        x: TensorId,
    },
    Exp {
        x: TensorId,
    },
    RowSoftmax {
        x: TensorId,
    },
    LayerNorm {
        x: TensorId,
        gain: TensorId,
        bias: TensorId,
        /// Normalized activations, cached for the backward step.
        xhat: Vec<f64>,
        /// Per-row `1 / sqrt(var + eps)`.
        inv_std: Vec<f64>,
    },
    MaxPoolSet {
        x: TensorId,
        argmax: Vec<usize>,
    },
    SelectRows {
        x: TensorId,
        indices: Vec<usize>,
    },
    ConcatRows {
        parts: Vec<TensorId>,
    },
    ConcatCols {
        parts: Vec<TensorId>,
    },
    Reshape {
        x: TensorId,
    },
    WeightedSum {
        x: TensorId,
        weights: Vec<f64>,
    },
    SumAll {
        x: TensorId,
    },
    SmoothL1 {
        pred: TensorId,
        target: Vec<f64>,
        row_weights: Vec<f64>,
        denom: f64,
    },
    BceWithLogits {
        logits: TensorId,
        targets: Vec<f64>,
        weights: Vec<f64>,
        denom: f64,
    },
    SoftmaxCrossEntropy {
        logits: TensorId,
        classes: Vec<usize>,
        row_weights: Vec<f64>,
        denom: f64,
    },
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    op: Op,
}

/// Recorded forward computation with reverse-mode gradients.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    /// Per-node gradient buffers; empty buffers mean "zero / not reached".
    grads: Vec<Vec<f64>>,
    /// First node whose output contained a non-finite value, if any.
    nonfinite: Option<(usize, &'static str)>,
    ran_backward: bool,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Copies a tensor's values onto the tape as a leaf.
    pub fn leaf(&mut self, t: &Tensor) -> TensorId {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, "leaf")
    }

    /// Records a leaf directly from a shape and buffer.
    pub fn leaf_raw(&mut self, shape: Vec<usize>, data: Vec<f64>) -> TensorId {
        let len: usize = shape.iter().product();
        assert_eq!(len, data.len(), "leaf_raw: shape/buffer mismatch");
        self.push(shape, data, Op::Leaf, "leaf")
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn value(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].data
    }

    /// The recorded value of a single-element tensor.
    pub fn scalar(&self, id: TensorId) -> f64 {
        let node = &self.nodes[id.0];
        assert_eq!(node.data.len(), 1, "scalar: node has {} elements", node.data.len());
        node.data[0]
    }

    /// Detaches a recorded value into an owned tensor (no gradient).
    pub fn tensor(&self, id: TensorId) -> Tensor {
        Tensor::from_raw(self.nodes[id.0].shape.clone(), self.nodes[id.0].data.clone())
    }

    /// First operation that produced a non-finite output, if any.
    pub fn first_nonfinite(&self) -> Option<(usize, &'static str)> {
        self.nonfinite
    }

    // ---- forward operations -------------------------------------------

    /// Matrix product `a · b` of an `m×k` and a `k×n` tensor.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::DimMismatch {
                op: "matmul",
                left: sa.clone(),
                right: sb.clone(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        matmul_kernel(
            &self.nodes[a.0].data,
            &self.nodes[b.0].data,
            m,
            k,
            n,
            &mut out,
        );
        Ok(self.push(vec![m, n], out, Op::MatMul { a, b }, "matmul"))
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose(&mut self, x: TensorId) -> TensorId {
        let shape = &self.nodes[x.0].shape;
        assert_eq!(shape.len(), 2, "transpose: rank-2 input required");
        let (n, d) = (shape[0], shape[1]);
        let src = &self.nodes[x.0].data;
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            for j in 0..d {
                out[j * n + i] = src[i * d + j];
            }
        }
        self.push(vec![d, n], out, Op::Transpose { x }, "transpose")
    }

    /// Element-wise sum of two tensors of identical shape.
    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(TensorError::DimMismatch {
                op: "add",
                left: self.nodes[a.0].shape.clone(),
                right: self.nodes[b.0].shape.clone(),
            });
        }
        let out: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(shape, out, Op::Add { a, b }, "add"))
    }

    /// Adds a `[d]` row vector to every row of an `n×d` matrix.
    pub fn add_row(&mut self, x: TensorId, row: TensorId) -> Result<TensorId, TensorError> {
        let (sx, sr) = (&self.nodes[x.0].shape, &self.nodes[row.0].shape);
        if sx.len() != 2 || sr.len() != 1 || sx[1] != sr[0] {
            return Err(TensorError::DimMismatch {
                op: "add_row",
                left: sx.clone(),
                right: sr.clone(),
            });
        }
        let (n, d) = (sx[0], sx[1]);
        let mut out = Vec::with_capacity(n * d);
        for i in 0..n {
            for j in 0..d {
                out.push(self.nodes[x.0].data[i * d + j] + self.nodes[row.0].data[j]);
            }
        }
        Ok(self.push(vec![n, d], out, Op::AddRow { x, row }, "add_row"))
    }

    /// Multiplies every element by a constant.
    pub fn scale(&mut self, x: TensorId, c: f64) -> TensorId {
        let out: Vec<f64> = self.nodes[x.0].data.iter().map(|v| v * c).collect();
        let shape = self.nodes[x.0].shape.clone();
        self.push(shape, out, Op::Scale { x, c }, "scale")
    }

    /// Rectified linear unit; the subgradient at 0 is taken as 0.
    pub fn relu(&mut self, x: TensorId) -> TensorId {
        let out: Vec<f64> = self.nodes[x.0].data.iter().map(|v| v.max(0.0)).collect();
        let shape = self.nodes[x.0].shape.clone();
        self.push(shape, out, Op::Relu { x }, "relu")
    }

    /// Element-wise exponential.
    pub fn exp(&mut self, x: TensorId) -> TensorId {
        let out: Vec<f64> = self.nodes[x.0].data.iter().map(|v| v.exp()).collect();
        let shape = self.nodes[x.0].shape.clone();
        self.push(shape, out, Op::Exp { x }, "exp")
    }

    /// Numerically stable softmax along each row (max subtraction).
    pub fn row_softmax(&mut self, x: TensorId) -> TensorId {
        let shape = self.nodes[x.0].shape.clone();
        let (n, d) = as_matrix(&shape);
        let src = &self.nodes[x.0].data;
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            let row = &src[i * d..(i + 1) * d];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..d {
                let e = (row[j] - max).exp();
                out[i * d + j] = e;
                sum += e;
            }
            for j in 0..d {
                out[i * d + j] /= sum;
            }
        }
        self.push(shape, out, Op::RowSoftmax { x }, "row_softmax")
    }

    /// Layer normalization along the channel axis of each row, with
    /// learned gain and bias and population (biased) variance.
    pub fn layer_norm(
        &mut self,
        x: TensorId,
        gain: TensorId,
        bias: TensorId,
        eps: f64,
    ) -> Result<TensorId, TensorError> {
        let sx = self.nodes[x.0].shape.clone();
        if sx.len() != 2 {
            return Err(TensorError::Invalid {
                op: "layer_norm",
                msg: format!("rank-2 input required, got shape {sx:?}"),
            });
        }
        let (n, d) = (sx[0], sx[1]);
        for (pid, what) in [(gain, "gain"), (bias, "bias")] {
            let sp = &self.nodes[pid.0].shape;
            if sp.len() != 1 || sp[0] != d {
                return Err(TensorError::DimMismatch {
                    op: "layer_norm",
                    left: sx.clone(),
                    right: sp.clone(),
                });
            }
            let _ = what;
        }
        let src = &self.nodes[x.0].data;
        let g = &self.nodes[gain.0].data;
        let b = &self.nodes[bias.0].data;
        let mut out = vec![0.0; n * d];
        let mut xhat = vec![0.0; n * d];
        let mut inv_std = vec![0.0; n];
        for i in 0..n {
            let row = &src[i * d..(i + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..d {
                let xh = (row[j] - mean) * is;
                xhat[i * d + j] = xh;
                out[i * d + j] = g[j] * xh + b[j];
            }
        }
        Ok(self.push(
            vec![n, d],
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            "layer_norm",
        ))
    }

    /// Channel-wise max over the rows of an `n×d` set, producing a `[d]`
    /// vector. Ties resolve to the lowest row index, and the backward step
    /// routes each channel's gradient to that single row.
    pub fn max_pool_set(&mut self, x: TensorId) -> Result<TensorId, TensorError> {
        let sx = &self.nodes[x.0].shape;
        if sx.len() != 2 {
            return Err(TensorError::Invalid {
                op: "max_pool_set",
                msg: format!("rank-2 input required, got shape {sx:?}"),
            });
        }
        let (n, d) = (sx[0], sx[1]);
        if n == 0 {
            return Err(TensorError::Empty { op: "max_pool_set" });
        }
        let src = &self.nodes[x.0].data;
        let mut out = vec![f64::NEG_INFINITY; d];
        let mut argmax = vec![0usize; d];
        for i in 0..n {
            for j in 0..d {
                let v = src[i * d + j];
                if v > out[j] {
                    out[j] = v;
                    argmax[j] = i;
                }
            }
        }
        Ok(self.push(vec![d], out, Op::MaxPoolSet { x, argmax }, "max_pool_set"))
    }

    /// Per-channel argmax rows recorded by a [`Tape::max_pool_set`] node.
    pub fn max_pool_argmax(&self, pooled: TensorId) -> &[usize] {
        match &self.nodes[pooled.0].op {
            Op::MaxPoolSet { argmax, .. } => argmax,
            _ => panic!("max_pool_argmax: node was not produced by max_pool_set"),
        }
    }

    /// Gathers rows of an `n×d` matrix by index (repeats allowed); the
    /// backward step scatter-adds gradients back to the source rows.
    pub fn select_rows(&mut self, x: TensorId, indices: &[usize]) -> Result<TensorId, TensorError> {
        let sx = &self.nodes[x.0].shape;
        if sx.len() != 2 {
            return Err(TensorError::Invalid {
                op: "select_rows",
                msg: format!("rank-2 input required, got shape {sx:?}"),
            });
        }
        if indices.is_empty() {
            return Err(TensorError::Empty { op: "select_rows" });
        }
        let (n, d) = (sx[0], sx[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(TensorError::Invalid {
                op: "select_rows",
                msg: format!("row index {bad} out of range for {n} rows"),
            });
        }
        let src = &self.nodes[x.0].data;
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        Ok(self.push(
            vec![indices.len(), d],
            out,
            Op::SelectRows {
                x,
                indices: indices.to_vec(),
            },
            "select_rows",
        ))
    }

    /// Stacks parts vertically. Rank-1 parts count as single rows; all
    /// parts must share the same width.
    pub fn concat_rows(&mut self, parts: &[TensorId]) -> Result<TensorId, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::Empty { op: "concat_rows" });
        }
        let width = self.nodes[parts[0].0].shape.last().copied().unwrap();
        let mut rows = 0usize;
        for &p in parts {
            let s = &self.nodes[p.0].shape;
            if s.len() > 2 || *s.last().unwrap() != width {
                return Err(TensorError::DimMismatch {
                    op: "concat_rows",
                    left: self.nodes[parts[0].0].shape.clone(),
                    right: s.clone(),
                });
            }
            rows += if s.len() == 1 { 1 } else { s[0] };
        }
        let mut out = Vec::with_capacity(rows * width);
        for &p in parts {
            out.extend_from_slice(&self.nodes[p.0].data);
        }
        Ok(self.push(
            vec![rows, width],
            out,
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
            "concat_rows",
        ))
    }

    /// Concatenates parts along the channel axis. All parts must be
    /// rank-1 (result rank-1) or all rank-2 with equal row counts.
    pub fn concat_cols(&mut self, parts: &[TensorId]) -> Result<TensorId, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::Empty { op: "concat_cols" });
        }
        let rank = self.nodes[parts[0].0].shape.len();
        for &p in parts {
            if self.nodes[p.0].shape.len() != rank {
                return Err(TensorError::DimMismatch {
                    op: "concat_cols",
                    left: self.nodes[parts[0].0].shape.clone(),
                    right: self.nodes[p.0].shape.clone(),
                });
            }
        }
        match rank {
            1 => {
                let mut out = Vec::new();
                for &p in parts {
                    out.extend_from_slice(&self.nodes[p.0].data);
                }
                let total = out.len();
                Ok(self.push(
                    vec![total],
                    out,
                    Op::ConcatCols {
                        parts: parts.to_vec(),
                    },
                    "concat_cols",
                ))
            }
            2 => {
                let n = self.nodes[parts[0].0].shape[0];
                let mut width = 0usize;
                for &p in parts {
                    let s = &self.nodes[p.0].shape;
                    if s[0] != n {
                        return Err(TensorError::DimMismatch {
                            op: "concat_cols",
                            left: self.nodes[parts[0].0].shape.clone(),
                            right: s.clone(),
                        });
                    }
                    width += s[1];
                }
                let mut out = Vec::with_capacity(n * width);
                for i in 0..n {
                    for &p in parts {
                        let d = self.nodes[p.0].shape[1];
                        out.extend_from_slice(&self.nodes[p.0].data[i * d..(i + 1) * d]);
                    }
                }
                Ok(self.push(
                    vec![n, width],
                    out,
                    Op::ConcatCols {
                        parts: parts.to_vec(),
                    },
                    "concat_cols",
                ))
            }
            r => Err(TensorError::Invalid {
                op: "concat_cols",
                msg: format!("rank-{r} parts are not supported"),
            }),
        }
    }

    /// Reinterprets a tensor under a new shape of equal element count.
    pub fn reshape(&mut self, x: TensorId, shape: Vec<usize>) -> Result<TensorId, TensorError> {
        let len: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(TensorError::ZeroExtent { shape });
        }
        if len != self.nodes[x.0].data.len() {
            return Err(TensorError::ShapeLen {
                shape,
                len: self.nodes[x.0].data.len(),
            });
        }
        let data = self.nodes[x.0].data.clone();
        Ok(self.push(shape, data, Op::Reshape { x }, "reshape"))
    }

    /// Scalar dot product with a constant weight vector.
    pub fn weighted_sum(&mut self, x: TensorId, weights: &[f64]) -> Result<TensorId, TensorError> {
        if weights.len() != self.nodes[x.0].data.len() {
            return Err(TensorError::DimMismatch {
                op: "weighted_sum",
                left: self.nodes[x.0].shape.clone(),
                right: vec![weights.len()],
            });
        }
        let s: f64 = self.nodes[x.0]
            .data
            .iter()
            .zip(weights)
            .map(|(v, w)| v * w)
            .sum();
        Ok(self.push(
            vec![1],
            vec![s],
            Op::WeightedSum {
                x,
                weights: weights.to_vec(),
            },
            "weighted_sum",
        ))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum_all(&mut self, x: TensorId) -> TensorId {
        let s: f64 = self.nodes[x.0].data.iter().sum();
        self.push(vec![1], vec![s], Op::SumAll { x }, "sum_all")
    }

    /// Smooth-L1 loss between `pred` (`n×d`) and a constant target,
    /// averaged over the weighted rows: rows with weight 0 contribute
    /// nothing, and a zero total weight yields a zero loss.
    pub fn smooth_l1_loss(
        &mut self,
        pred: TensorId,
        target: &[f64],
        row_weights: &[f64],
    ) -> Result<TensorId, TensorError> {
        let sp = &self.nodes[pred.0].shape;
        if sp.len() != 2 {
            return Err(TensorError::Invalid {
                op: "smooth_l1_loss",
                msg: format!("rank-2 prediction required, got shape {sp:?}"),
            });
        }
        let (n, d) = (sp[0], sp[1]);
        if target.len() != n * d || row_weights.len() != n {
            return Err(TensorError::DimMismatch {
                op: "smooth_l1_loss",
                left: sp.clone(),
                right: vec![target.len(), row_weights.len()],
            });
        }
        let wsum: f64 = row_weights.iter().sum();
        let denom = if wsum > 0.0 { wsum * d as f64 } else { 1.0 };
        let mut acc = 0.0;
        for i in 0..n {
            if row_weights[i] == 0.0 {
                continue;
            }
            let mut row = 0.0;
            for j in 0..d {
                let delta = self.nodes[pred.0].data[i * d + j] - target[i * d + j];
                row += smooth_l1(delta);
            }
            acc += row_weights[i] * row;
        }
        Ok(self.push(
            vec![1],
            vec![acc / denom],
            Op::SmoothL1 {
                pred,
                target: target.to_vec(),
                row_weights: row_weights.to_vec(),
                denom,
            },
            "smooth_l1_loss",
        ))
    }

    /// Weighted mean binary cross-entropy over logits (shape `[n]` or
    /// `n×1`) against constant 0/1 targets, computed in the stable logit
    /// form. The mean is taken over the total weight, so uniform weights
    /// of 1.0 give the plain mean; a zero total falls back to 1 to keep
    /// the value finite.
    pub fn bce_with_logits_loss(
        &mut self,
        logits: TensorId,
        targets: &[f64],
        weights: &[f64],
    ) -> Result<TensorId, TensorError> {
        let n = self.nodes[logits.0].data.len();
        let shape_ok = match self.nodes[logits.0].shape.as_slice() {
            [_] => true,
            [_, 1] => true,
            _ => false,
        };
        if !shape_ok || targets.len() != n || weights.len() != n {
            return Err(TensorError::DimMismatch {
                op: "bce_with_logits_loss",
                left: self.nodes[logits.0].shape.clone(),
                right: vec![targets.len(), weights.len()],
            });
        }
        let wsum: f64 = weights.iter().sum();
        let denom = if wsum > 0.0 { wsum } else { 1.0 };
        let mut acc = 0.0;
        for ((z, y), w) in self.nodes[logits.0].data.iter().zip(targets).zip(weights) {
            acc += w * (z.max(0.0) - z * y + (-z.abs()).exp().ln_1p());
        }
        Ok(self.push(
            vec![1],
            vec![acc / denom],
            Op::BceWithLogits {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                denom,
            },
            "bce_with_logits_loss",
        ))
    }

    /// Weighted mean categorical cross-entropy of `n×c` logits against
    /// constant class indices; rows with weight 0 contribute nothing.
    pub fn softmax_cross_entropy_loss(
        &mut self,
        logits: TensorId,
        classes: &[usize],
        row_weights: &[f64],
    ) -> Result<TensorId, TensorError> {
        let sl = &self.nodes[logits.0].shape;
        if sl.len() != 2 {
            return Err(TensorError::Invalid {
                op: "softmax_cross_entropy_loss",
                msg: format!("rank-2 logits required, got shape {sl:?}"),
            });
        }
        let (n, c) = (sl[0], sl[1]);
        if classes.len() != n || row_weights.len() != n {
            return Err(TensorError::DimMismatch {
                op: "softmax_cross_entropy_loss",
                left: sl.clone(),
                right: vec![classes.len(), row_weights.len()],
            });
        }
        if let Some(&bad) = classes.iter().find(|&&k| k >= c) {
            return Err(TensorError::Invalid {
                op: "softmax_cross_entropy_loss",
                msg: format!("class index {bad} out of range for {c} classes"),
            });
        }
        let wsum: f64 = row_weights.iter().sum();
        let denom = if wsum > 0.0 { wsum } else { 1.0 };
        let mut acc = 0.0;
        for i in 0..n {
            if row_weights[i] == 0.0 {
                continue;
            }
            let row = &self.nodes[logits.0].data[i * c..(i + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
            acc += row_weights[i] * (lse - row[classes[i]]);
        }
        Ok(self.push(
            vec![1],
            vec![acc / denom],
            Op::SoftmaxCrossEntropy {
                logits,
                classes: classes.to_vec(),
                row_weights: row_weights.to_vec(),
                denom,
            },
            "softmax_cross_entropy_loss",
        ))
    }

    // ---- parameter loading and composite layers ------------------------

    pub fn load_linear(&mut self, params: &LinearParams) -> LinearIds {
        LinearIds {
            weight: self.leaf(&params.weight),
            bias: self.leaf(&params.bias),
        }
    }

    pub fn load_layer_norm(&mut self, params: &LayerNormParams) -> LayerNormIds {
        LayerNormIds {
            gain: self.leaf(&params.gain),
            bias: self.leaf(&params.bias),
            eps: params.eps,
        }
    }

    pub fn load_mlp(&mut self, mlp: &Mlp) -> MlpIds {
        MlpIds {
            layers: mlp.layers.iter().map(|l| self.load_linear(l)).collect(),
        }
    }

    /// Affine layer: `x · weight + bias`.
    pub fn linear(&mut self, x: TensorId, ids: &LinearIds) -> Result<TensorId, TensorError> {
        let y = self.matmul(x, ids.weight)?;
        self.add_row(y, ids.bias)
    }

    /// MLP forward: affine + ReLU for all but the last layer, which stays
    /// affine. Layer widths must chain.
    pub fn mlp_forward(&mut self, x: TensorId, mlp: &MlpIds) -> Result<TensorId, TensorError> {
        if mlp.layers.is_empty() {
            return Err(TensorError::Empty { op: "mlp_forward" });
        }
        for i in 0..mlp.layers.len() - 1 {
            let out = self.shape(mlp.layers[i].weight)[1];
            let next_in = self.shape(mlp.layers[i + 1].weight)[0];
            if out != next_in {
                return Err(TensorError::MlpChain {
                    index: i,
                    out,
                    next_in,
                });
            }
        }
        let mut h = x;
        let last = mlp.layers.len() - 1;
        for (i, layer) in mlp.layers.iter().enumerate() {
            h = self.linear(h, layer)?;
            if i != last {
                h = self.relu(h);
            }
        }
        Ok(h)
    }

    /// Layer-norm driven by a loaded id bundle.
    pub fn layer_norm_with(
        &mut self,
        x: TensorId,
        ids: &LayerNormIds,
    ) -> Result<TensorId, TensorError> {
        self.layer_norm(x, ids.gain, ids.bias, ids.eps)
    }

    // ---- backward ------------------------------------------------------

    /// Runs reverse-mode accumulation from a scalar loss node.
    pub fn backward(&mut self, loss: TensorId) -> Result<(), TensorError> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(TensorError::Invalid {
                op: "backward",
                msg: format!(
                    "loss must be a scalar, got shape {:?}",
                    self.nodes[loss.0].shape
                ),
            });
        }
        self.grads = vec![Vec::new(); self.nodes.len()];
        self.grads[loss.0] = vec![1.0];
        for id in (0..=loss.0).rev() {
            if self.grads[id].is_empty() {
                continue;
            }
            let g = std::mem::take(&mut self.grads[id]);
            self.backward_node(id, &g);
            self.grads[id] = g;
        }
        self.ran_backward = true;
        Ok(())
    }

    /// Gradient of the most recent backward pass for `id` (zeros if the
    /// node was not reached).
    pub fn grad(&self, id: TensorId) -> Vec<f64> {
        assert!(self.ran_backward, "grad: run backward first");
        if self.grads[id.0].is_empty() {
            vec![0.0; self.nodes[id.0].data.len()]
        } else {
            self.grads[id.0].clone()
        }
    }

    fn backward_node(&mut self, id: usize, g: &[f64]) {
        // Split borrows: nodes are read-only here, grads are written.
        let Tape { nodes, grads, .. } = self;
        fn acc(grads: &mut [Vec<f64>], tid: TensorId, len: usize) -> &mut Vec<f64> {
            if grads[tid.0].is_empty() {
                grads[tid.0] = vec![0.0; len];
            }
            &mut grads[tid.0]
        }
        match &nodes[id].op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (m, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                let n = nodes[b.0].shape[1];
                let (adata, bdata) = (&nodes[a.0].data, &nodes[b.0].data);
                {
                    let da = acc(grads, *a, m * k);
                    // dA = G · Bᵀ
                    for i in 0..m {
                        for kk in 0..k {
                            let mut s = 0.0;
                            let grow = &g[i * n..(i + 1) * n];
                            let brow = &bdata[kk * n..(kk + 1) * n];
                            for j in 0..n {
                                s += grow[j] * brow[j];
                            }
                            da[i * k + kk] += s;
                        }
                    }
                }
                {
                    let db = acc(grads, *b, k * n);
                    // dB = Aᵀ · G
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for kk in 0..k {
                            let av = adata[i * k + kk];
                            if av != 0.0 {
                                let dbrow = &mut db[kk * n..(kk + 1) * n];
                                for j in 0..n {
                                    dbrow[j] += av * grow[j];
                                }
                            }
                        }
                    }
                }
            }
            Op::Transpose { x } => {
                let (d, n) = (nodes[id].shape[0], nodes[id].shape[1]);
                let dx = acc(grads, *x, n * d);
                for i in 0..d {
                    for j in 0..n {
                        dx[j * d + i] += g[i * n + j];
                    }
                }
            }
            Op::Add { a, b } => {
                let len = g.len();
                {
                    let da = acc(grads, *a, len);
                    for (dv, gv) in da.iter_mut().zip(g) {
                        *dv += gv;
                    }
                }
                let db = acc(grads, *b, len);
                for (dv, gv) in db.iter_mut().zip(g) {
                    *dv += gv;
                }
            }
            Op::AddRow { x, row } => {
                let (n, d) = (nodes[id].shape[0], nodes[id].shape[1]);
                {
                    let dx = acc(grads, *x, n * d);
                    for (dv, gv) in dx.iter_mut().zip(g) {
                        *dv += gv;
                    }
                }
                let drow = acc(grads, *row, d);
                for i in 0..n {
                    for j in 0..d {
                        drow[j] += g[i * d + j];
                    }
                }
            }
            Op::Scale { x, c } => {
                let c = *c;
                let dx = acc(grads, *x, g.len());
                for (dv, gv) in dx.iter_mut().zip(g) {
                    *dv += c * gv;
                }
            }
            Op::Relu { x } => {
                let src = &nodes[x.0].data;
                let dx = acc(grads, *x, g.len());
                for i in 0..g.len() {
                    if src[i] > 0.0 {
                        dx[i] += g[i];
                    }
                }
            }
            Op::Exp { x } => {
                let out = &nodes[id].data;
                let dx = acc(grads, *x, g.len());
                for i in 0..g.len() {
                    dx[i] += g[i] * out[i];
                }
            }
            Op::RowSoftmax { x } => {
                let (n, d) = as_matrix(&nodes[id].shape);
                let s = &nodes[id].data;
                let dx = acc(grads, *x, n * d);
                for i in 0..n {
                    let srow = &s[i * d..(i + 1) * d];
                    let grow = &g[i * d..(i + 1) * d];
                    let dot: f64 = srow.iter().zip(grow).map(|(sv, gv)| sv * gv).sum();
                    for j in 0..d {
                        dx[i * d + j] += srow[j] * (grow[j] - dot);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let (n, d) = (nodes[id].shape[0], nodes[id].shape[1]);
                let gdata = &nodes[gain.0].data;
                {
                    let dgain = acc(grads, *gain, d);
                    for i in 0..n {
                        for j in 0..d {
                            dgain[j] += g[i * d + j] * xhat[i * d + j];
                        }
                    }
                }
                {
                    let dbias = acc(grads, *bias, d);
                    for i in 0..n {
                        for j in 0..d {
                            dbias[j] += g[i * d + j];
                        }
                    }
                }
                let dx = acc(grads, *x, n * d);
                for i in 0..n {
                    let xh = &xhat[i * d..(i + 1) * d];
                    let grow = &g[i * d..(i + 1) * d];
                    let mut sum_dxhat = 0.0;
                    let mut sum_dxhat_xhat = 0.0;
                    for j in 0..d {
                        let dxh = grow[j] * gdata[j];
                        sum_dxhat += dxh;
                        sum_dxhat_xhat += dxh * xh[j];
                    }
                    let inv_d = 1.0 / d as f64;
                    for j in 0..d {
                        let dxh = grow[j] * gdata[j];
                        dx[i * d + j] +=
                            inv_std[i] * (dxh - inv_d * sum_dxhat - xh[j] * inv_d * sum_dxhat_xhat);
                    }
                }
            }
            Op::MaxPoolSet { x, argmax } => {
                let d = nodes[id].shape[0];
                let dx = acc(grads, *x, nodes[x.0].data.len());
                for j in 0..d {
                    dx[argmax[j] * d + j] += g[j];
                }
            }
            Op::SelectRows { x, indices } => {
                let d = nodes[id].shape[1];
                let dx = acc(grads, *x, nodes[x.0].data.len());
                for (i, &src_row) in indices.iter().enumerate() {
                    for j in 0..d {
                        dx[src_row * d + j] += g[i * d + j];
                    }
                }
            }
            Op::ConcatRows { parts } => {
                let parts = parts.clone();
                let mut offset = 0usize;
                for p in parts {
                    let len = nodes[p.0].data.len();
                    let dp = acc(grads, p, len);
                    for i in 0..len {
                        dp[i] += g[offset + i];
                    }
                    offset += len;
                }
            }
            Op::ConcatCols { parts } => {
                let parts = parts.clone();
                if nodes[id].shape.len() == 1 {
                    let mut offset = 0usize;
                    for p in parts {
                        let len = nodes[p.0].data.len();
                        let dp = acc(grads, p, len);
                        for i in 0..len {
                            dp[i] += g[offset + i];
                        }
                        offset += len;
                    }
                } else {
                    let n = nodes[id].shape[0];
                    let width = nodes[id].shape[1];
                    let mut col = 0usize;
                    for p in parts {
                        let d = nodes[p.0].shape[1];
                        let dp = acc(grads, p, n * d);
                        for i in 0..n {
                            for j in 0..d {
                                dp[i * d + j] += g[i * width + col + j];
                            }
                        }
                        col += d;
                    }
                }
            }
            Op::Reshape { x } => {
                let dx = acc(grads, *x, g.len());
                for (dv, gv) in dx.iter_mut().zip(g) {
                    *dv += gv;
                }
            }
            Op::WeightedSum { x, weights } => {
                let g0 = g[0];
                let weights = weights.clone();
                let dx = acc(grads, *x, weights.len());
                for (dv, w) in dx.iter_mut().zip(&weights) {
                    *dv += g0 * w;
                }
            }
            Op::SumAll { x } => {
                let g0 = g[0];
                let dx = acc(grads, *x, nodes[x.0].data.len());
                for dv in dx.iter_mut() {
                    *dv += g0;
                }
            }
            Op::SmoothL1 {
                pred,
                target,
                row_weights,
                denom,
            } => {
                let g0 = g[0];
                let (n, d) = (nodes[pred.0].shape[0], nodes[pred.0].shape[1]);
                let pdata = &nodes[pred.0].data;
                let scale = g0 / denom;
                let dp = acc(grads, *pred, n * d);
                for i in 0..n {
                    if row_weights[i] == 0.0 {
                        continue;
                    }
                    for j in 0..d {
                        let delta = pdata[i * d + j] - target[i * d + j];
                        dp[i * d + j] += scale * row_weights[i] * delta.clamp(-1.0, 1.0);
                    }
                }
            }
            Op::BceWithLogits {
                logits,
                targets,
                weights,
                denom,
            } => {
                let g0 = g[0];
                let n = targets.len();
                let zdata = &nodes[logits.0].data;
                let dz = acc(grads, *logits, n);
                for i in 0..n {
                    dz[i] += g0 * weights[i] * (sigmoid(zdata[i]) - targets[i]) / denom;
                }
            }
            Op::SoftmaxCrossEntropy {
                logits,
                classes,
                row_weights,
                denom,
            } => {
                let g0 = g[0];
                let (n, c) = (nodes[logits.0].shape[0], nodes[logits.0].shape[1]);
                let zdata = &nodes[logits.0].data;
                let scale = g0 / denom;
                let dz = acc(grads, *logits, n * c);
                for i in 0..n {
                    if row_weights[i] == 0.0 {
                        continue;
                    }
                    let row = &zdata[i * c..(i + 1) * c];
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let sum: f64 = row.iter().map(|z| (z - max).exp()).sum();
                    for j in 0..c {
                        let p = (row[j] - max).exp() / sum;
                        let y = if j == classes[i] { 1.0 } else { 0.0 };
                        dz[i * c + j] += scale * row_weights[i] * (p - y);
                    }
                }
            }
        }
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, name: &'static str) -> TensorId {
        if self.nonfinite.is_none() && !data.iter().all(|v| v.is_finite()) {
            self.nonfinite = Some((self.nodes.len(), name));
        }
        self.nodes.push(Node { shape, data, op });
        TensorId(self.nodes.len() - 1)
    }
}

/// Logistic sigmoid, stable on both tails.
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Smooth-L1 (Huber with unit transition): quadratic inside |δ| < 1,
/// linear outside.
pub fn smooth_l1(delta: f64) -> f64 {
    let a = delta.abs();
    if a < 1.0 {
        0.5 * delta * delta
    } else {
        a - 0.5
    }
}

fn as_matrix(shape: &[usize]) -> (usize, usize) {
    match shape {
        [d] => (1, *d),
        [n, d] => (*n, *d),
        _ => panic!("expected rank-1 or rank-2 tensor, got {shape:?}"),
    }
}

fn matmul_kernel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    // i-k-j loop order keeps both b and out rows hot in cache.
    for i in 0..m {
        for kk in 0..k {
            let av = a[i * k + kk];
            if av == 0.0 {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tensor2(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>())
    }

    #[test]
    fn matmul_two_by_two_fixture() {
        let a = tensor2(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let b = tensor2(&[&[5.0, 6.0], &[7.0, 8.0]]);
        let mut tape = Tape::new();
        let (ia, ib) = (tape.leaf(&a), tape.leaf(&b));
        let out = tape.matmul(ia, ib).unwrap();
        assert_eq!(tape.value(out), &[19.0, 22.0, 43.0, 50.0]);
        assert_eq!(tape.shape(out), &[2, 2]);
    }

    #[test]
    fn matmul_reports_both_shapes_on_mismatch() {
        let a = Tensor::zeros(vec![2, 3]);
        let b = Tensor::zeros(vec![4, 2]);
        let mut tape = Tape::new();
        let (ia, ib) = (tape.leaf(&a), tape.leaf(&b));
        match tape.matmul(ia, ib) {
            Err(TensorError::DimMismatch { left, right, .. }) => {
                assert_eq!(left, vec![2, 3]);
                assert_eq!(right, vec![4, 2]);
            }
            other => panic!("expected DimMismatch, got {other:?}"),
        }
    }

    #[test]
    fn softmax_uniform_row_splits_evenly() {
        let x = tensor2(&[&[0.0, 0.0]]);
        let mut tape = Tape::new();
        let ix = tape.leaf(&x);
        let out = tape.row_softmax(ix);
        assert_eq!(tape.value(out), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_survives_huge_logit_gap() {
        let x = tensor2(&[&[1000.0, 0.0]]);
        let mut tape = Tape::new();
        let ix = tape.leaf(&x);
        let out = tape.row_softmax(ix);
        let v = tape.value(out);
        assert!(v.iter().all(|p| p.is_finite()), "softmax overflowed: {v:?}");
        assert!(v[0] >= 1.0 - 1e-12 && v[0] <= 1.0);
        assert!(v[1] >= 0.0 && v[1] <= 1e-12);
        assert!((v[0] + v[1] - 1.0).abs() <= 1e-12);
        assert!(tape.first_nonfinite().is_none());
    }

    #[test]
    fn softmax_rows_sum_to_one_on_random_inputs() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let n = rng.gen_range(1..6);
            let d = rng.gen_range(1..7);
            let data: Vec<f64> = (0..n * d).map(|_| rng.gen_range(-30.0..30.0)).collect();
            let x = Tensor::new(vec![n, d], data).unwrap();
            let mut tape = Tape::new();
            let ix = tape.leaf(&x);
            let out = tape.row_softmax(ix);
            for i in 0..n {
                let s: f64 = tape.value(out)[i * d..(i + 1) * d].iter().sum();
                assert!((s - 1.0).abs() <= 1e-12, "row sum {s} off unity");
            }
        }
    }

    #[test]
    fn layer_norm_rows_have_zero_mean_unit_variance() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let d = 8;
        let data: Vec<f64> = (0..3 * d).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let x = Tensor::new(vec![3, d], data).unwrap();
        let mut tape = Tape::new();
        let ix = tape.leaf(&x);
        let gain = tape.leaf_raw(vec![d], vec![1.0; d]);
        let bias = tape.leaf_raw(vec![d], vec![0.0; d]);
        let out = tape.layer_norm(ix, gain, bias, 1e-12).unwrap();
        for i in 0..3 {
            let row = &tape.value(out)[i * d..(i + 1) * d];
            let mean: f64 = row.iter().sum::<f64>() / d as f64;
            let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            assert!(mean.abs() < 1e-9, "row mean {mean} not ~0");
            assert!((var - 1.0).abs() < 1e-6, "row variance {var} not ~1");
        }
    }

    #[test]
    fn layer_norm_tiny_eps_on_unit_row_is_identity() {
        let x = tensor2(&[&[1.0, -1.0]]);
        let mut tape = Tape::new();
        let ix = tape.leaf(&x);
        let gain = tape.leaf_raw(vec![2], vec![1.0, 1.0]);
        let bias = tape.leaf_raw(vec![2], vec![0.0, 0.0]);
        let out = tape.layer_norm(ix, gain, bias, 1e-10).unwrap();
        assert!((tape.value(out)[0] - 1.0).abs() < 1e-9);
        assert!((tape.value(out)[1] + 1.0).abs() < 1e-9);
    }

    #[test]
    fn max_pool_takes_channel_maxima_and_lowest_tied_row() {
        let x = tensor2(&[&[1.0, 5.0], &[3.0, 2.0]]);
        let mut tape = Tape::new();
        let ix = tape.leaf(&x);
        let out = tape.max_pool_set(ix).unwrap();
        assert_eq!(tape.value(out), &[3.0, 5.0]);
        assert_eq!(tape.max_pool_argmax(out), &[1, 0]);

        // Equal rows tie; the winner must be the lowest row index.
        let x = tensor2(&[&[2.0, 2.0], &[2.0, 2.0]]);
        let mut tape = Tape::new();
        let ix = tape.leaf(&x);
        let out = tape.max_pool_set(ix).unwrap();
        assert_eq!(tape.max_pool_argmax(out), &[0, 0]);
    }

    #[test]
    fn max_pool_backward_deposits_one_nonzero_per_channel() {
        let x = tensor2(&[&[1.0, 5.0], &[3.0, 2.0], &[0.0, 4.0]]);
        let mut tape = Tape::new();
        let ix = tape.leaf(&x);
        let pooled = tape.max_pool_set(ix).unwrap();
        let loss = tape.sum_all(pooled);
        tape.backward(loss).unwrap();
        let dx = tape.grad(ix);
        let nonzero: Vec<usize> = dx
            .iter()
            .enumerate()
            .filter(|(_, v)| **v != 0.0)
            .map(|(i, _)| i)
            .collect();
        // Row 1 wins channel 0, row 0 wins channel 1.
        assert_eq!(nonzero, vec![1, 2]);
        assert!(dx.iter().filter(|v| **v != 0.0).count() == 2);
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let x = Tensor::from_rows(&[vec![0.0, -1.0, 2.0]]);
        let mut tape = Tape::new();
        let ix = tape.leaf(&x);
        let y = tape.relu(ix);
        let loss = tape.sum_all(y);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(ix), vec![0.0, 0.0, 1.0]);
    }

    #[test]
    fn identity_linear_layer_is_identity() {
        let layer = LinearParams::new(
            Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]),
            Tensor::vector(vec![0.0, 0.0]),
        )
        .unwrap();
        let mlp = Mlp::new(vec![layer]).unwrap();
        let x = tensor2(&[&[3.0, -4.0], &[0.5, 0.25]]);
        let out = super::super::mlp_forward(&x, &mlp).unwrap();
        assert_eq!(out.data(), x.data());
    }

    #[test]
    fn mlp_hidden_layer_shapes_chain() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut linear = |i: usize, o: usize| {
            let w: Vec<f64> = (0..i * o).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..o).map(|_| rng.gen_range(-1.0..1.0)).collect();
            LinearParams::new(Tensor::new(vec![i, o], w).unwrap(), Tensor::vector(b)).unwrap()
        };
        let mlp = Mlp::new(vec![linear(2, 4), linear(4, 3)]).unwrap();
        let x = tensor2(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0]]);
        let out = super::super::mlp_forward(&x, &mlp).unwrap();
        assert_eq!(out.shape(), &[3, 3]);
    }

    #[test]
    fn select_rows_gathers_and_scatters() {
        let x = tensor2(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0]]);
        let mut tape = Tape::new();
        let ix = tape.leaf(&x);
        let sel = tape.select_rows(ix, &[2, 0, 2]).unwrap();
        assert_eq!(tape.value(sel), &[5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
        let loss = tape.sum_all(sel);
        tape.backward(loss).unwrap();
        // Row 2 was gathered twice, row 1 never.
        assert_eq!(tape.grad(ix), vec![1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
        assert!(matches!(
            tape.select_rows(ix, &[]),
            Err(TensorError::Empty { .. })
        ));
    }

    #[test]
    fn concat_rows_and_cols_roundtrip_values() {
        let a = tensor2(&[&[1.0, 2.0]]);
        let b = tensor2(&[&[3.0, 4.0], &[5.0, 6.0]]);
        let mut tape = Tape::new();
        let (ia, ib) = (tape.leaf(&a), tape.leaf(&b));
        let rows = tape.concat_rows(&[ia, ib]).unwrap();
        assert_eq!(tape.shape(rows), &[3, 2]);
        assert_eq!(tape.value(rows), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);

        let c = tensor2(&[&[7.0], &[8.0], &[9.0]]);
        let ic = tape.leaf(&c);
        let cols = tape.concat_cols(&[rows, ic]).unwrap();
        assert_eq!(tape.shape(cols), &[3, 3]);
        assert_eq!(
            tape.value(cols),
            &[1.0, 2.0, 7.0, 3.0, 4.0, 8.0, 5.0, 6.0, 9.0]
        );
    }

    #[test]
    fn loss_values_match_hand_computations() {
        let mut tape = Tape::new();

        // Smooth-L1: |δ| < 1 is quadratic, beyond is linear.
        let pred = tape.leaf_raw(vec![2, 1], vec![0.5, 2.0]);
        let l = tape
            .smooth_l1_loss(pred, &[0.0, 0.0], &[1.0, 1.0])
            .unwrap();
        // (0.5·0.25 + (2 − 0.5)) / 2 = (0.125 + 1.5) / 2
        assert!((tape.scalar(l) - 0.8125).abs() < 1e-15);

        // Binary cross-entropy at logit 0 is ln 2 regardless of target.
        let z = tape.leaf_raw(vec![2], vec![0.0, 0.0]);
        let l = tape.bce_with_logits_loss(z, &[1.0, 0.0], &[1.0, 1.0]).unwrap();
        assert!((tape.scalar(l) - std::f64::consts::LN_2).abs() < 1e-15);

        // Categorical cross-entropy of uniform logits is ln C.
        let z = tape.leaf_raw(vec![1, 4], vec![0.0; 4]);
        let l = tape.softmax_cross_entropy_loss(z, &[2], &[1.0]).unwrap();
        assert!((tape.scalar(l) - 4.0f64.ln()).abs() < 1e-12);

        // Zero row weights mean zero loss, not NaN.
        let pred = tape.leaf_raw(vec![2, 3], vec![9.0; 6]);
        let l = tape.smooth_l1_loss(pred, &[0.0; 6], &[0.0, 0.0]).unwrap();
        assert_eq!(tape.scalar(l), 0.0);
    }

    #[test]
    fn nonfinite_outputs_are_flagged_once() {
        let mut tape = Tape::new();
        let x = tape.leaf_raw(vec![1, 2], vec![800.0, 0.0]);
        let y = tape.exp(x); // overflows to +inf
        assert_eq!(tape.value(y)[0], f64::INFINITY);
        let (idx, name) = tape.first_nonfinite().expect("overflow must be flagged");
        assert_eq!(name, "exp");
        assert_eq!(idx, y.index());
    }
}
