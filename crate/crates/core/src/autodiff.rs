//! Define-by-run reverse-mode differentiation over dense `f64` tensors.
//!
//! A [`Graph`] records every operation as it is executed. Each node stores its
//! forward value plus whatever the backward rule needs; [`Graph::backward`]
//! walks the record in exact reverse creation order. Only the handful of
//! operators the forecasting network uses are provided, and shapes must match
//! exactly except for the bias add over the token (row) axis.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major array.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if shape.contains(&0) || expected != data.len() {
            return Err(Error::Dimension {
                op: "tensor",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
            return Err(Error::Dimension {
                op: "from_rows",
                lhs: vec![cols],
                rhs: vec![bad.len()],
            });
        }
        Self::new(vec![rows.len(), cols], rows.concat())
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

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rows(&self) -> usize {
        if self.shape.len() < 2 {
            1
        } else {
            self.shape[..self.shape.len() - 1].iter().product()
        }
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows()).map(|i| self.row(i).to_vec()).collect()
    }

    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::Dimension {
                op: "reshape",
                lhs: self.shape,
                rhs: shape,
            });
        }
        self.shape = shape;
        Ok(self)
    }

    fn matrix_dims(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            _ => Err(Error::Dimension {
                op,
                lhs: self.shape.clone(),
                rhs: vec![],
            }),
        }
    }
}

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Conv1d {
        input: Var,
        kernels: Var,
        bias: Var,
        stride: usize,
        // im2col patches, [l_out × c_in·k]
        patches: Vec<f64>,
    },
    AddRowBias(Var, Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        shift: Var,
        normed: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Relu(Var),
    Add(Var, Var),
    Scale(Var, f64),
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Reshape(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    Sum(Var),
    MseLoss {
        pred: Var,
        target: Var,
    },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::AddRowBias(a, b) => vec![*a, *b],
            Op::Transpose(x)
            | Op::SoftmaxRows(x)
            | Op::Relu(x)
            | Op::Scale(x, _)
            | Op::Reshape(x)
            | Op::SliceCols { x, .. }
            | Op::Dropout { x, .. }
            | Op::Sum(x) => vec![*x],
            Op::Conv1d {
                input, kernels, bias, ..
            } => vec![*input, *kernels, *bias],
            Op::LayerNorm { x, gain, shift, .. } => vec![*x, *gain, *shift],
            Op::Linear { x, w, b } => vec![*x, *w, *b],
            Op::ConcatRows(vs) | Op::ConcatCols(vs) => vs.clone(),
            Op::MseLoss { pred, target } => vec![*pred, *target],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
    grad: Option<Vec<f64>>,
}

/// Record of one forward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// c[m×n] += a[m×k] · b[k×n]
fn gemm_acc(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, bv) in c_row.iter_mut().zip(b_row) {
                *cv += aip * bv;
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        for l in 0..4 {
            acc[l] += a[4 * i + l] * b[4 * i + l];
        }
    }
    let mut tail = 0.0;
    for i in chunks * 4..a.len() {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// c[m×k] += a[m×n] · b[k×n]ᵀ
fn gemm_nt_acc(m: usize, n: usize, k: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    for i in 0..m {
        let a_row = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let b_row = &b[p * n..(p + 1) * n];
            c[i * k + p] += dot(a_row, b_row);
        }
    }
}

/// c[k×n] += a[m×k]ᵀ · b[m×n]
fn gemm_tn_acc(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    for i in 0..m {
        let b_row = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let c_row = &mut c[p * n..(p + 1) * n];
            for (cv, bv) in c_row.iter_mut().zip(b_row) {
                *cv += aip * bv;
            }
        }
    }
}

/// Lazily allocated gradient buffer of a tracked input.
fn slot<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
    if !nodes[v.0].tracked {
        return None;
    }
    let n = nodes[v.0].value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let tracked = op.inputs().iter().any(|v| self.nodes[v.0].tracked);
        self.nodes.push(Node {
            value,
            op,
            tracked,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf whose gradient is collected by [`Graph::backward`].
    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            tracked: true,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that takes no gradient (inputs, targets).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            tracked: false,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient of a tracked leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        node.grad.as_ref().map(|g| Tensor {
            shape: node.value.shape.clone(),
            data: g.clone(),
        })
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    /// Input node-ids of every recorded operation, in creation order.
    pub fn topology(&self) -> Vec<(usize, Vec<usize>)> {
        self.nodes
            .iter()
            .enumerate()
            .map(|(i, n)| (i, n.op.inputs().into_iter().map(Var::id).collect()))
            .collect()
    }

    fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    fn mismatch(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::Dimension {
            op,
            lhs: self.shape(a).to_vec(),
            rhs: self.shape(b).to_vec(),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).matrix_dims("matmul")?;
        let (k2, n) = self.value(b).matrix_dims("matmul")?;
        if k != k2 {
            return Err(self.mismatch("matmul", a, b));
        }
        let mut out = vec![0.0; m * n];
        gemm_acc(m, k, n, &self.value(a).data, &self.value(b).data, &mut out);
        Ok(self.push(
            Tensor {
                shape: vec![m, n],
                data: out,
            },
            Op::MatMul(a, b),
        ))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.value(x).matrix_dims("transpose")?;
        let src = &self.value(x).data;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        Ok(self.push(
            Tensor {
                shape: vec![c, r],
                data: out,
            },
            Op::Transpose(x),
        ))
    }

    /// Strided cross-correlation without padding, plus per-channel bias.
    ///
    /// `input` is `[c_in × len]`, `kernels` is `[c_out × c_in × k]`, `bias` is `[c_out]`.
    pub fn conv1d(&mut self, input: Var, kernels: Var, bias: Var, stride: usize) -> Result<Var> {
        let (c_in, len) = self.value(input).matrix_dims("conv1d")?;
        let (c_out, kc_in, k) = match self.shape(kernels) {
            [a, b, c] => (*a, *b, *c),
            _ => return Err(self.mismatch("conv1d", input, kernels)),
        };
        if kc_in != c_in || k > len || stride == 0 {
            return Err(self.mismatch("conv1d", input, kernels));
        }
        if self.shape(bias) != [c_out] {
            return Err(self.mismatch("conv1d bias", kernels, bias));
        }
        let l_out = (len - k) / stride + 1;
        let width = c_in * k;
        let x = &self.value(input).data;
        let mut patches = vec![0.0; l_out * width];
        for t in 0..l_out {
            for c in 0..c_in {
                let src = &x[c * len + t * stride..c * len + t * stride + k];
                patches[t * width + c * k..t * width + (c + 1) * k].copy_from_slice(src);
            }
        }
        // out[c_out × l_out] = K[c_out × width] · patchesᵀ
        let mut out = vec![0.0; c_out * l_out];
        gemm_nt_acc(c_out, width, l_out, &self.value(kernels).data, &patches, &mut out);
        let b = &self.value(bias).data;
        for (row, bo) in out.chunks_mut(l_out).zip(b) {
            row.iter_mut().for_each(|v| *v += bo);
        }
        Ok(self.push(
            Tensor {
                shape: vec![c_out, l_out],
                data: out,
            },
            Op::Conv1d {
                input,
                kernels,
                bias,
                stride,
                patches,
            },
        ))
    }

    /// `x[n × d] + bias[d]`, the only broadcast the graph allows.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (n, d) = self.value(x).matrix_dims("add_row_bias")?;
        if self.shape(bias) != [d] {
            return Err(self.mismatch("add_row_bias", x, bias));
        }
        let b = &self.value(bias).data;
        let mut out = self.value(x).data.clone();
        for row in out.chunks_mut(d) {
            row.iter_mut().zip(b).for_each(|(v, bv)| *v += bv);
        }
        Ok(self.push(
            Tensor {
                shape: vec![n, d],
                data: out,
            },
            Op::AddRowBias(x, bias),
        ))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (n, d) = self.value(x).matrix_dims("softmax_rows")?;
        let mut out = self.value(x).data.clone();
        for row in out.chunks_mut(d) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            row.iter_mut().for_each(|v| *v /= sum);
        }
        Ok(self.push(
            Tensor {
                shape: vec![n, d],
                data: out,
            },
            Op::SoftmaxRows(x),
        ))
    }

    /// Normalizes each row over the last axis, then applies `gain` and `shift`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, shift: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.cols();
        if d < 2 {
            return Err(Error::Contract(format!(
                "layer_norm over {d} feature(s) is degenerate; need at least 2"
            )));
        }
        if self.shape(gain) != [d] || self.shape(shift) != [d] {
            return Err(self.mismatch("layer_norm", x, gain));
        }
        let shape = xv.shape.clone();
        let rows = xv.rows();
        let mut normed = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; rows];
        for (r, (src, dst)) in xv.data.chunks(d).zip(normed.chunks_mut(d)).enumerate() {
            let mean = src.iter().sum::<f64>() / d as f64;
            let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for (o, v) in dst.iter_mut().zip(src) {
                *o = (v - mean) * is;
            }
        }
        let g = &self.value(gain).data;
        let s = &self.value(shift).data;
        let mut out = normed.clone();
        for row in out.chunks_mut(d) {
            for j in 0..d {
                row[j] = row[j] * g[j] + s[j];
            }
        }
        Ok(self.push(
            Tensor { shape, data: out },
            Op::LayerNorm {
                x,
                gain,
                shift,
                normed,
                inv_std,
            },
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let out = Tensor {
            shape: xv.shape.clone(),
            data: xv.data.iter().map(|v| v.max(0.0)).collect(),
        };
        self.push(out, Op::Relu(x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(self.mismatch("add", a, b));
        }
        let av = self.value(a);
        let data = av.data.iter().zip(&self.value(b).data).map(|(x, y)| x + y).collect();
        let shape = av.shape.clone();
        Ok(self.push(Tensor { shape, data }, Op::Add(a, b)))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let xv = self.value(x);
        let out = Tensor {
            shape: xv.shape.clone(),
            data: xv.data.iter().map(|v| v * factor).collect(),
        };
        self.push(out, Op::Scale(x, factor))
    }

    /// Affine map `x[n × in] · w[in × out] + b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (n, d_in) = self.value(x).matrix_dims("linear")?;
        let (w_in, d_out) = self.value(w).matrix_dims("linear")?;
        if d_in != w_in {
            return Err(self.mismatch("linear", x, w));
        }
        if self.shape(b) != [d_out] {
            return Err(self.mismatch("linear bias", w, b));
        }
        let mut out = Vec::with_capacity(n * d_out);
        for _ in 0..n {
            out.extend_from_slice(&self.value(b).data);
        }
        gemm_acc(n, d_in, d_out, &self.value(x).data, &self.value(w).data, &mut out);
        Ok(self.push(
            Tensor {
                shape: vec![n, d_out],
                data: out,
            },
            Op::Linear { x, w, b },
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape)?;
        Ok(self.push(value, Op::Reshape(x)))
    }

    /// Collapses any shape to `[1 × len]`.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        self.reshape(x, vec![1, n])
    }

    /// Stacks matrices with equal column count along the row axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat_rows of nothing".into()))?;
        let (_, d) = self.value(first).matrix_dims("concat_rows")?;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.value(p).matrix_dims("concat_rows")?;
            if c != d {
                return Err(self.mismatch("concat_rows", first, p));
            }
            rows += r;
            data.extend_from_slice(&self.value(p).data);
        }
        Ok(self.push(
            Tensor {
                shape: vec![rows, d],
                data,
            },
            Op::ConcatRows(parts.to_vec()),
        ))
    }

    /// Joins matrices with equal row count side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat_cols of nothing".into()))?;
        let (n, _) = self.value(first).matrix_dims("concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.value(p).matrix_dims("concat_cols")?;
            if r != n {
                return Err(self.mismatch("concat_cols", first, p));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(n * total);
        for i in 0..n {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data[i * w..(i + 1) * w]);
            }
        }
        Ok(self.push(
            Tensor {
                shape: vec![n, total],
                data,
            },
            Op::ConcatCols(parts.to_vec()),
        ))
    }

    /// Columns `start..start + width` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let (n, c) = self.value(x).matrix_dims("slice_cols")?;
        if width == 0 || start + width > c {
            return Err(Error::Dimension {
                op: "slice_cols",
                lhs: vec![n, c],
                rhs: vec![start, width],
            });
        }
        let src = &self.value(x).data;
        let mut data = Vec::with_capacity(n * width);
        for i in 0..n {
            data.extend_from_slice(&src[i * c + start..i * c + start + width]);
        }
        Ok(self.push(
            Tensor {
                shape: vec![n, width],
                data,
            },
            Op::SliceCols { x, start },
        ))
    }

    /// Inverted dropout: zeroes each entry with probability `rate` and rescales survivors.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, rng: &mut R) -> Var {
        if rate <= 0.0 {
            return x;
        }
        let keep = 1.0 / (1.0 - rate);
        let xv = self.value(x);
        let mask: Vec<f64> = (0..xv.len())
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let out = Tensor {
            shape: xv.shape.clone(),
            data: xv.data.iter().zip(&mask).map(|(v, m)| v * m).collect(),
        };
        self.push(out, Op::Dropout { x, mask })
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data.iter().sum();
        self.push(Tensor::scalar(total), Op::Sum(x))
    }

    /// Mean of squared residuals.
    pub fn mse_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        if self.shape(pred) != self.shape(target) {
            return Err(self.mismatch("mse_loss", pred, target));
        }
        let p = &self.value(pred).data;
        let t = &self.value(target).data;
        let mse = p.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / p.len() as f64;
        Ok(self.push(Tensor::scalar(mse), Op::MseLoss { pred, target }))
    }

    /// Accumulates d(loss)/d(leaf) into every tracked leaf reachable from `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].tracked {
                continue;
            }
            if matches!(self.nodes[id].op, Op::Leaf) {
                let node = &mut self.nodes[id];
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => node.grad = Some(g),
                }
                continue;
            }
            self.backprop_node(id, &g, &mut grads);
        }
        Ok(())
    }

    fn backprop_node(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let node = &nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (nodes[a.0].value.shape[0], nodes[a.0].value.shape[1]);
                let n = nodes[b.0].value.shape[1];
                if let Some(ga) = slot(nodes, grads, *a) {
                    gemm_nt_acc(m, n, k, g, &nodes[b.0].value.data, ga);
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    gemm_tn_acc(m, k, n, &nodes[a.0].value.data, g, gb);
                }
            }
            Op::Transpose(x) => {
                let (r, c) = (nodes[x.0].value.shape[0], nodes[x.0].value.shape[1]);
                if let Some(gx) = slot(nodes, grads, *x) {
                    for i in 0..r {
                        for j in 0..c {
                            gx[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Op::Conv1d {
                input,
                kernels,
                bias,
                stride,
                patches,
            } => {
                let ks = &nodes[kernels.0].value.shape;
                let (c_out, c_in, k) = (ks[0], ks[1], ks[2]);
                let len = nodes[input.0].value.shape[1];
                let l_out = node.value.shape[1];
                let width = c_in * k;
                if let Some(gk) = slot(nodes, grads, *kernels) {
                    // dK[c_out × width] += g[c_out × l_out] · patches[l_out × width]
                    gemm_acc(c_out, l_out, width, g, patches, gk);
                }
                if let Some(gb) = slot(nodes, grads, *bias) {
                    for (o, row) in g.chunks(l_out).enumerate() {
                        gb[o] += row.iter().sum::<f64>();
                    }
                }
                if let Some(gx) = slot(nodes, grads, *input) {
                    // dP[l_out × width] = gᵀ · K
                    let mut dp = vec![0.0; l_out * width];
                    gemm_tn_acc(c_out, l_out, width, g, &nodes[kernels.0].value.data, &mut dp);
                    for t in 0..l_out {
                        for c in 0..c_in {
                            let dst = &mut gx[c * len + t * stride..c * len + t * stride + k];
                            let src = &dp[t * width + c * k..t * width + (c + 1) * k];
                            dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
                        }
                    }
                }
            }
            Op::AddRowBias(x, b) => {
                let d = nodes[b.0].value.len();
                if let Some(gx) = slot(nodes, grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(a, v)| *a += v);
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    for row in g.chunks(d) {
                        gb.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                    }
                }
            }
            Op::SoftmaxRows(x) => {
                let d = node.value.cols();
                if let Some(gx) = slot(nodes, grads, *x) {
                    for ((y, gy), out) in node.value.data.chunks(d).zip(g.chunks(d)).zip(gx.chunks_mut(d)) {
                        let inner: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                        for j in 0..d {
                            out[j] += y[j] * (gy[j] - inner);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                shift,
                normed,
                inv_std,
            } => {
                let d = node.value.cols();
                let gain_v = &nodes[gain.0].value.data;
                if let Some(gg) = slot(nodes, grads, *gain) {
                    for (xh, gy) in normed.chunks(d).zip(g.chunks(d)) {
                        for j in 0..d {
                            gg[j] += gy[j] * xh[j];
                        }
                    }
                }
                if let Some(gs) = slot(nodes, grads, *shift) {
                    for gy in g.chunks(d) {
                        gs.iter_mut().zip(gy).for_each(|(a, v)| *a += v);
                    }
                }
                if let Some(gx) = slot(nodes, grads, *x) {
                    let df = d as f64;
                    for (r, ((xh, gy), out)) in normed.chunks(d).zip(g.chunks(d)).zip(gx.chunks_mut(d)).enumerate() {
                        let mut sum_dxh = 0.0;
                        let mut sum_dxh_xh = 0.0;
                        for j in 0..d {
                            let dxh = gy[j] * gain_v[j];
                            sum_dxh += dxh;
                            sum_dxh_xh += dxh * xh[j];
                        }
                        for j in 0..d {
                            let dxh = gy[j] * gain_v[j];
                            out[j] += inv_std[r] / df * (df * dxh - sum_dxh - xh[j] * sum_dxh_xh);
                        }
                    }
                }
            }
            Op::Relu(x) => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    for ((a, v), y) in gx.iter_mut().zip(g).zip(&node.value.data) {
                        if *y > 0.0 {
                            *a += v;
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(gv) = slot(nodes, grads, v) {
                        gv.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::Scale(x, f) => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(a, v)| *a += f * v);
                }
            }
            Op::Linear { x, w, b } => {
                let (n, d_in) = (nodes[x.0].value.shape[0], nodes[x.0].value.shape[1]);
                let d_out = nodes[w.0].value.shape[1];
                if let Some(gx) = slot(nodes, grads, *x) {
                    gemm_nt_acc(n, d_out, d_in, g, &nodes[w.0].value.data, gx);
                }
                if let Some(gw) = slot(nodes, grads, *w) {
                    gemm_tn_acc(n, d_in, d_out, &nodes[x.0].value.data, g, gw);
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    for row in g.chunks(d_out) {
                        gb.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(a, v)| *a += v);
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = nodes[p.0].value.len();
                    if let Some(gp) = slot(nodes, grads, *p) {
                        gp.iter_mut().zip(&g[offset..offset + n]).for_each(|(a, v)| *a += v);
                    }
                    offset += n;
                }
            }
            Op::ConcatCols(parts) => {
                let rows = node.value.shape[0];
                let total = node.value.shape[1];
                let mut col = 0;
                for p in parts {
                    let w = nodes[p.0].value.shape[1];
                    if let Some(gp) = slot(nodes, grads, *p) {
                        for i in 0..rows {
                            let src = &g[i * total + col..i * total + col + w];
                            gp[i * w..(i + 1) * w].iter_mut().zip(src).for_each(|(a, v)| *a += v);
                        }
                    }
                    col += w;
                }
            }
            Op::SliceCols { x, start } => {
                let c = nodes[x.0].value.shape[1];
                let (rows, w) = (node.value.shape[0], node.value.shape[1]);
                if let Some(gx) = slot(nodes, grads, *x) {
                    for i in 0..rows {
                        gx[i * c + start..i * c + start + w]
                            .iter_mut()
                            .zip(&g[i * w..(i + 1) * w])
                            .for_each(|(a, v)| *a += v);
                    }
                }
            }
            Op::Dropout { x, mask } => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    for ((a, v), m) in gx.iter_mut().zip(g).zip(mask) {
                        *a += v * m;
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    gx.iter_mut().for_each(|a| *a += g[0]);
                }
            }
            Op::MseLoss { pred, target } => {
                let n = nodes[pred.0].value.len() as f64;
                let p = &nodes[pred.0].value.data;
                let t = &nodes[target.0].value.data;
                if let Some(gp) = slot(nodes, grads, *pred) {
                    for ((a, pv), tv) in gp.iter_mut().zip(p).zip(t) {
                        *a += g[0] * 2.0 * (pv - tv) / n;
                    }
                }
                if let Some(gt) = slot(nodes, grads, *target) {
                    for ((a, pv), tv) in gt.iter_mut().zip(p).zip(t) {
                        *a -= g[0] * 2.0 * (pv - tv) / n;
                    }
                }
            }
        }
    }
}

/// Central finite-difference gradient of a scalar function.
///
/// Uses forward evaluations only, so it can serve as an oracle for [`Graph::backward`].
pub fn numerical_gradient<F>(mut f: F, x: &Tensor, h: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(&x.shape);
    for i in 0..x.len() {
        let orig = probe.data[i];
        probe.data[i] = orig + h;
        let up = f(&probe)?;
        probe.data[i] = orig - h;
        let down = f(&probe)?;
        probe.data[i] = orig;
        grad.data[i] = (up - down) / (2.0 * h);
    }
    Ok(grad)
}

/// `‖a − b‖ / max(‖a‖, ‖b‖, 1e-8)`.
///
/// The floor keeps gradients that vanish analytically (e.g. the key bias, which
/// softmax cancels) from comparing rounding noise against rounding noise.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&diff) / norm(a).max(norm(b)).max(1e-8)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn mat(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    /// Compares backward against central differences for the argument at `wrt`.
    fn grad_check<F>(inputs: &[Tensor], wrt: usize, build: F) -> f64
    where
        F: Fn(&mut Graph, &[Var]) -> Result<Var>,
    {
        let eval = |probe: &Tensor| -> Result<f64> {
            let mut g = Graph::new();
            let vars: Vec<Var> = inputs
                .iter()
                .enumerate()
                .map(|(i, t)| g.constant(if i == wrt { probe.clone() } else { t.clone() }))
                .collect();
            let out = build(&mut g, &vars)?;
            Ok(g.value(out).data()[0])
        };
        let numeric = numerical_gradient(eval, &inputs[wrt], 1e-4).unwrap();
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let out = build(&mut g, &vars).unwrap();
        g.backward(out).unwrap();
        let analytic = g.grad(vars[wrt]).unwrap();
        relative_error(analytic.data(), numeric.data())
    }

    // Weighted sum so that every output entry carries a distinct upstream gradient.
    fn weighted_sum(g: &mut Graph, x: Var, seed: u64) -> Result<Var> {
        let shape = g.value(x).shape().to_vec();
        let w = g.constant(random(&shape, seed));
        let n = g.value(x).len();
        let xf = g.reshape(x, vec![1, n])?;
        let wf = g.reshape(w, vec![n, 1])?;
        g.matmul(xf, wf)
    }

    #[test]
    fn matmul_identity_and_hand_values() {
        let mut g = Graph::new();
        let a = g.constant(mat(&[&[1.0, 0.0], &[0.0, 1.0]]));
        let b = g.constant(mat(&[&[3.0, 4.0], &[5.0, 6.0]]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[3.0, 4.0, 5.0, 6.0]);

        let a = g.constant(mat(&[&[1.0, 2.0]]));
        let b = g.constant(mat(&[&[3.0], &[4.0]]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let inputs = [random(&[4, 3], 1), random(&[3, 5], 2)];
        for wrt in 0..2 {
            let err = grad_check(&inputs, wrt, |g, v| {
                let c = g.matmul(v[0], v[1])?;
                Ok(g.sum(c))
            });
            assert!(err < 1e-4, "wrt {wrt}: {err}");
        }
    }

    #[test]
    fn conv1d_hand_values() {
        let mut g = Graph::new();
        let x = g.constant(mat(&[&[1.0, 2.0, 3.0, 4.0]]));
        let k = g.constant(Tensor::new(vec![1, 1, 1], vec![1.0]).unwrap());
        let b = g.constant(Tensor::vector(vec![0.0]));
        let y = g.conv1d(x, k, b, 1).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);

        let k2 = g.constant(Tensor::new(vec![1, 1, 2], vec![1.0, 1.0]).unwrap());
        let y = g.conv1d(x, k2, b, 2).unwrap();
        assert_eq!(g.value(y).data(), &[3.0, 7.0]);
    }

    #[test]
    fn conv1d_kernel_longer_than_input_is_rejected() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 3]));
        let k = g.constant(Tensor::zeros(&[1, 1, 4]));
        let b = g.constant(Tensor::zeros(&[1]));
        assert!(matches!(g.conv1d(x, k, b, 1), Err(Error::Dimension { .. })));
    }

    #[test]
    fn conv1d_gradients_match_finite_differences() {
        let inputs = [random(&[3, 96], 3), random(&[16, 3, 8], 4), random(&[16], 5)];
        for wrt in 0..3 {
            let err = grad_check(&inputs, wrt, |g, v| {
                let y = g.conv1d(v[0], v[1], v[2], 8)?;
                weighted_sum(g, y, 6)
            });
            assert!(err < 1e-4, "wrt {wrt}: {err}");
        }
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let x = g.constant(mat(&[&[0.0, 0.0]]));
        let y = g.softmax_rows(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);

        let x = g.constant(mat(&[&[1000.0, 1000.0, 1000.0]]));
        let y = g.softmax_rows(x).unwrap();
        for v in g.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_jvp_matches_finite_differences() {
        let err = grad_check(&[random(&[5, 7], 7)], 0, |g, v| {
            let y = g.softmax_rows(v[0])?;
            weighted_sum(g, y, 8)
        });
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn layer_norm_examples() {
        let eps = 1e-5;
        let mut g = Graph::new();
        let ones = g.constant(Tensor::vector(vec![1.0; 4]));
        let zeros = g.constant(Tensor::vector(vec![0.0; 4]));
        let x = g.constant(mat(&[&[1.0, 1.0, 1.0, 1.0]]));
        let y = g.layer_norm(x, ones, zeros, eps).unwrap();
        assert_eq!(g.value(y).data(), &[0.0; 4]);

        let gain = g.constant(Tensor::vector(vec![1.0; 2]));
        let shift = g.constant(Tensor::vector(vec![3.0; 2]));
        let x = g.constant(mat(&[&[-1.0, 1.0]]));
        let y = g.layer_norm(x, gain, shift, eps).unwrap();
        let s = 1.0 / (1.0 + eps).sqrt();
        assert!((g.value(y).data()[0] - (3.0 - s)).abs() < 1e-15);
        assert!((g.value(y).data()[1] - (3.0 + s)).abs() < 1e-15);
    }

    #[test]
    fn layer_norm_rejects_single_feature() {
        let mut g = Graph::new();
        let x = g.constant(mat(&[&[2.0]]));
        let p = g.constant(Tensor::vector(vec![1.0]));
        assert!(matches!(g.layer_norm(x, p, p, 1e-5), Err(Error::Contract(_))));
    }

    #[test]
    fn layer_norm_gradients_match_finite_differences() {
        let inputs = [random(&[3, 6], 9), random(&[6], 10), random(&[6], 11)];
        for wrt in 0..3 {
            let err = grad_check(&inputs, wrt, |g, v| {
                let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
                weighted_sum(g, y, 12)
            });
            assert!(err < 1e-4, "wrt {wrt}: {err}");
        }
    }

    #[test]
    fn elementwise_examples() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![-2.0, 3.0]));
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), &[0.0, 3.0]);

        let a = g.constant(Tensor::vector(vec![0.0, 0.0]));
        let b = g.constant(Tensor::vector(vec![1.0, 3.0]));
        let l = g.mse_loss(a, b).unwrap();
        assert_eq!(g.value(l).data(), &[5.0]);
        let l = g.mse_loss(b, b).unwrap();
        assert_eq!(g.value(l).data(), &[0.0]);
        let c = g.constant(Tensor::vector(vec![1.0; 3]));
        assert!(g.mse_loss(a, c).is_err());
        assert!(g.add(a, c).is_err());
    }

    #[test]
    fn composite_ops_gradients_match_finite_differences() {
        let inputs = [
            random(&[4, 6], 13),
            random(&[6, 3], 14),
            random(&[3], 15),
            random(&[4, 3], 16),
        ];
        for wrt in 0..4 {
            let err = grad_check(&inputs, wrt, |g, v| {
                let h = g.linear(v[0], v[1], v[2])?;
                let h = g.relu(h);
                let h = g.add(h, v[3])?;
                let left = g.slice_cols(h, 0, 2)?;
                let right = g.slice_cols(h, 2, 1)?;
                let swapped = g.concat_cols(&[right, left])?;
                let t = g.transpose(swapped)?;
                let stacked = g.concat_rows(&[t, t])?;
                let scaled = g.scale(stacked, 0.5);
                let f = g.flatten(scaled)?;
                let target = g.constant(Tensor::zeros(g.value(f).shape()));
                g.mse_loss(f, target)
            });
            assert!(err < 1e-4, "wrt {wrt}: {err}");
        }
    }

    #[test]
    fn row_bias_broadcast_gradient() {
        let inputs = [random(&[5, 4], 17), random(&[4], 18)];
        for wrt in 0..2 {
            let err = grad_check(&inputs, wrt, |g, v| {
                let y = g.add_row_bias(v[0], v[1])?;
                weighted_sum(g, y, 19)
            });
            assert!(err < 1e-4, "wrt {wrt}: {err}");
        }
    }

    #[test]
    fn dropout_gradient_uses_the_recorded_mask() {
        let x = random(&[6, 6], 20);
        let mut g = Graph::new();
        let v = g.param(x);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let y = g.dropout(v, 0.5, &mut rng);
        let s = g.sum(y);
        g.backward(s).unwrap();
        let grad = g.grad(v).unwrap();
        let out = g.value(y);
        for (gv, (ov, iv)) in grad.data().iter().zip(out.data().iter().zip(g.value(v).data())) {
            if *gv == 0.0 {
                assert_eq!(*ov, 0.0);
            } else {
                assert_eq!(*gv, 2.0);
                assert_eq!(*ov, 2.0 * iv);
            }
        }
    }

    #[test]
    fn backward_examples() {
        let mut g = Graph::new();
        let p = g.param(Tensor::vector(vec![2.5]));
        let s = g.sum(p);
        g.backward(s).unwrap();
        assert_eq!(g.grad(p).unwrap().data(), &[1.0]);

        let mut g = Graph::new();
        let pv = vec![1.0, -2.0, 0.5];
        let p = g.param(Tensor::new(vec![3, 1], pv.clone()).unwrap());
        let pt = g.transpose(p).unwrap();
        let q = g.matmul(pt, p).unwrap();
        let half = g.scale(q, 0.5);
        g.backward(half).unwrap();
        assert_eq!(g.grad(p).unwrap().data(), pv.as_slice());
    }

    #[test]
    fn backward_accumulates_until_zeroed() {
        let mut g = Graph::new();
        let p = g.param(Tensor::vector(vec![1.0, 2.0]));
        let s = g.sum(p);
        g.backward(s).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(p).unwrap().data(), &[2.0, 2.0]);
        g.zero_grad();
        assert!(g.grad(p).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut g = Graph::new();
        let p = g.param(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(g.backward(p), Err(Error::Contract(_))));
    }

    #[test]
    fn graph_is_topologically_ordered() {
        let mut g = Graph::new();
        let a = g.param(random(&[3, 3], 21));
        let b = g.matmul(a, a).unwrap();
        let c = g.softmax_rows(b).unwrap();
        let _ = g.add(c, a).unwrap();
        for (id, inputs) in g.topology() {
            assert!(inputs.iter().all(|&i| i < id));
        }
    }

    #[test]
    fn tensor_rejects_inconsistent_shape() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(vec![0, 2], vec![]).is_err());
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(values in prop::collection::vec(-50.0f64..50.0, 12)) {
            let mut g = Graph::new();
            let x = g.constant(Tensor::new(vec![3, 4], values).unwrap());
            let y = g.softmax_rows(x).unwrap();
            for row in g.value(y).to_rows() {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }

        #[test]
        fn layer_norm_rows_are_standardized(values in prop::collection::vec(-10.0f64..10.0, 16)) {
            let spread = values.iter().cloned().fold(f64::MIN, f64::max)
                - values.iter().cloned().fold(f64::MAX, f64::min);
            prop_assume!(spread > 0.5);
            let mut g = Graph::new();
            let x = g.constant(Tensor::new(vec![2, 8], values).unwrap());
            let one = g.constant(Tensor::vector(vec![1.0; 8]));
            let zero = g.constant(Tensor::vector(vec![0.0; 8]));
            let y = g.layer_norm(x, one, zero, 1e-12).unwrap();
            for row in g.value(y).to_rows() {
                let mean = row.iter().sum::<f64>() / 8.0;
                let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
                prop_assert!(mean.abs() < 1e-6);
                prop_assert!((var - 1.0).abs() < 1e-5);
            }
        }
    }
}
