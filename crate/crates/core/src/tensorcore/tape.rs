//! Eager reverse-mode tape.
//!
//! Every operation evaluates immediately and records enough state to run the
//! vector-Jacobian product later. Values on the tape are matrices; higher-rank
//! data (patch sets, batches) is folded into rows by the caller.

use std::collections::{BTreeMap, HashMap};

use super::{Array, ParamStore, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine { x: Var, scale: f64 },
    Sigmoid(Var),
    Gelu(Var),
    Exp(Var),
    Log(Var),
    SmoothL1(Var),
    Softmax { x: Var, axis: Axis },
    LogSumExpRows(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    GroupMax { x: Var, argmax: Vec<usize> },
    GroupMean { x: Var, group: usize },
    BroadcastRows(Var),
    RowSum(Var),
    SumAll(Var),
    MeanAll(Var),
    Concat { parts: Vec<Var>, axis: Axis },
    SliceCols { x: Var, start: usize },
    Gather { x: Var, index: Vec<usize> },
    Im2col { x: Var, kernel: usize },
    NormalizeRows { x: Var, norms: Vec<f64> },
    Transpose(Var),
    StopGrad,
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Affine { .. } => "affine",
            Op::Sigmoid(_) => "sigmoid",
            Op::Gelu(_) => "gelu",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::SmoothL1(_) => "smooth_l1",
            Op::Softmax { .. } => "softmax",
            Op::LogSumExpRows(_) => "logsumexp",
            Op::LayerNorm { .. } => "layer_norm",
            Op::GroupMax { .. } => "group_max",
            Op::GroupMean { .. } => "group_mean",
            Op::BroadcastRows(_) => "broadcast_rows",
            Op::RowSum(_) => "row_sum",
            Op::SumAll(_) => "sum",
            Op::MeanAll(_) => "mean",
            Op::Concat { .. } => "concat",
            Op::SliceCols { .. } => "slice_cols",
            Op::Gather { .. } => "gather",
            Op::Im2col { .. } => "im2col",
            Op::NormalizeRows { .. } => "normalize_rows",
            Op::Transpose(_) => "transpose",
            Op::StopGrad => "stop_gradient",
        }
    }
}

struct Node {
    value: Array,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug, Default)]
pub struct Gradients {
    params: BTreeMap<String, Array>,
    leaves: HashMap<Var, Array>,
}

impl Gradients {
    /// Gradient of a named parameter, `None` if it never reached the loss.
    pub fn param(&self, name: &str) -> Option<&Array> {
        self.params.get(name)
    }

    pub fn params(&self) -> &BTreeMap<String, Array> {
        &self.params
    }

    pub fn into_params(self) -> BTreeMap<String, Array> {
        self.params
    }

    /// Gradient of a non-parameter leaf created with [`Tape::input`].
    pub fn leaf(&self, v: Var) -> Option<&Array> {
        self.leaves.get(&v)
    }
}

/// Recording of one forward evaluation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_vars: BTreeMap<String, Var>,
    frozen_prefixes: Vec<String>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Parameters whose name starts with one of `prefixes` are recorded as
    /// constants and never receive gradients.
    pub fn with_frozen<S: Into<String>>(prefixes: impl IntoIterator<Item = S>) -> Self {
        Self {
            frozen_prefixes: prefixes.into_iter().map(Into::into).collect(),
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let a = &self.nodes[v.0].value;
        (a.rows(), a.cols())
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    fn push(&mut self, value: Array, op: Op, requires_grad: bool) -> Result<Var, TensorError> {
        let idx = self.nodes.len();
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: op.name(), node: idx, phase: "forward" });
        }
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(idx))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn check_matrix(&self, a: &Array, op: &'static str) -> Result<(), TensorError> {
        if a.shape().len() != 2 {
            return Err(self.shape_err(op, format!("expected a matrix, got shape {:?}", a.shape())));
        }
        Ok(())
    }

    fn shape_err(&self, op: &'static str, detail: String) -> TensorError {
        TensorError::Shape { op, node: self.nodes.len(), detail }
    }

    /// A constant input that never receives gradients.
    pub fn constant(&mut self, a: Array) -> Result<Var, TensorError> {
        self.check_matrix(&a, "leaf")?;
        self.push(a, Op::Leaf, false)
    }

    /// An input whose gradient is reported by [`Gradients::leaf`].
    pub fn input(&mut self, a: Array) -> Result<Var, TensorError> {
        self.check_matrix(&a, "leaf")?;
        self.push(a, Op::Leaf, true)
    }

    /// Records a named parameter once per tape; later calls reuse the node.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var, TensorError> {
        if let Some(&v) = self.param_vars.get(name) {
            return Ok(v);
        }
        let a = store.get(name).ok_or_else(|| TensorError::UnknownParam(name.to_string()))?;
        self.check_matrix(a, "leaf")?;
        let trainable = !self.frozen_prefixes.iter().any(|p| name.starts_with(p.as_str()));
        let v = self.push(a.clone(), Op::Leaf, trainable)?;
        self.param_vars.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.matmul_t(a, false, b, false)
    }

    /// `op(a) · op(b)` where `op` optionally transposes.
    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Result<Var, TensorError> {
        let (av, bv) = (self.value(a), self.value(b));
        let (_, k1) = dims(av, ta);
        let (k2, _) = dims(bv, tb);
        if k1 != k2 {
            return Err(self.shape_err(
                "matmul",
                format!("inner dimensions differ: {:?}{} x {:?}{}", av.shape(), t(ta), bv.shape(), t(tb)),
            ));
        }
        let out = gemm(av, ta, bv, tb);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::MatMul { a, b, ta, tb }, rg)
    }

    fn check_broadcast(&self, op: &'static str, a: Var, b: Var) -> Result<(), TensorError> {
        let (ra, ca) = self.shape(a);
        let (rb, cb) = self.shape(b);
        if (rb == ra || rb == 1) && (cb == ca || cb == 1) {
            Ok(())
        } else {
            Err(self.shape_err(op, format!("cannot broadcast [{rb}, {cb}] onto [{ra}, {ca}]")))
        }
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Array, TensorError> {
        self.check_broadcast(op, a, b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let (ra, ca) = (av.rows(), av.cols());
        let (rb, cb) = (bv.rows(), bv.cols());
        let mut out = Vec::with_capacity(ra * ca);
        for i in 0..ra {
            let bi = if rb == 1 { 0 } else { i };
            let arow = av.row(i);
            let brow = bv.row(bi);
            if cb == 1 {
                let s = brow[0];
                out.extend(arow.iter().map(|&x| f(x, s)));
            } else {
                out.extend(arow.iter().zip(brow).map(|(&x, &y)| f(x, y)));
            }
        }
        Ok(Array::from_parts(av.shape().to_vec(), out))
    }

    /// `a + b`, with `b` broadcast over rows and/or columns.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let out = self.binary("add", a, b, |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let out = self.binary("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let out = self.binary("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Mul(a, b), rg)
    }

    /// `scale * x + shift` with constant coefficients.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var, TensorError> {
        let out = self.value(x).map(|v| scale * v + shift);
        let rg = self.rg(x);
        self.push(out, Op::Affine { x, scale }, rg)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var, TensorError> {
        self.affine(x, s, 0.0)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var, TensorError> {
        let out = self.value(x).map(sigmoid);
        let rg = self.rg(x);
        self.push(out, Op::Sigmoid(x), rg)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var, TensorError> {
        let out = self.value(x).map(|v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_A * v * v * v)).tanh()));
        let rg = self.rg(x);
        self.push(out, Op::Gelu(x), rg)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var, TensorError> {
        let out = self.value(x).map(f64::exp);
        let rg = self.rg(x);
        self.push(out, Op::Exp(x), rg)
    }

    pub fn log(&mut self, x: Var) -> Result<Var, TensorError> {
        if self.value(x).data().iter().any(|&v| v <= 0.0) {
            return Err(TensorError::Domain { op: "log", node: self.nodes.len(), detail: "non-positive input".into() });
        }
        let out = self.value(x).map(f64::ln);
        let rg = self.rg(x);
        self.push(out, Op::Log(x), rg)
    }

    /// Elementwise smooth-L1 (Huber with threshold 1).
    pub fn smooth_l1(&mut self, x: Var) -> Result<Var, TensorError> {
        let out = self.value(x).map(|v| if v.abs() < 1.0 { 0.5 * v * v } else { v.abs() - 0.5 });
        let rg = self.rg(x);
        self.push(out, Op::SmoothL1(x), rg)
    }

    pub fn softmax(&mut self, x: Var, axis: Axis) -> Result<Var, TensorError> {
        let xv = self.value(x);
        let (r, c) = (xv.rows(), xv.cols());
        let mut out = vec![0.0; r * c];
        let d = xv.data();
        match axis {
            Axis::Cols => {
                for i in 0..r {
                    softmax_into(&d[i * c..(i + 1) * c], &mut out[i * c..(i + 1) * c]);
                }
            }
            Axis::Rows => {
                let mut col = vec![0.0; r];
                let mut sm = vec![0.0; r];
                for j in 0..c {
                    for i in 0..r {
                        col[i] = d[i * c + j];
                    }
                    softmax_into(&col, &mut sm);
                    for i in 0..r {
                        out[i * c + j] = sm[i];
                    }
                }
            }
        }
        let out = Array::from_parts(xv.shape().to_vec(), out);
        let rg = self.rg(x);
        self.push(out, Op::Softmax { x, axis }, rg)
    }

    /// Row-wise `log Σ exp`, computed with max subtraction. Output `[rows, 1]`.
    pub fn logsumexp_rows(&mut self, x: Var) -> Result<Var, TensorError> {
        let xv = self.value(x);
        let out: Vec<f64> = (0..xv.rows())
            .map(|i| {
                let row = xv.row(i);
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln()
            })
            .collect();
        let out = Array::from_parts(vec![xv.rows(), 1], out);
        let rg = self.rg(x);
        self.push(out, Op::LogSumExpRows(x), rg)
    }

    /// Normalizes each row to zero mean and unit variance, then applies the
    /// per-column affine `gamma`, `beta` (both `[1, cols]`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var, TensorError> {
        let (r, c) = self.shape(x);
        if self.shape(gamma) != (1, c) || self.shape(beta) != (1, c) {
            return Err(self.shape_err("layer_norm", format!("affine parameters must be [1, {c}]")));
        }
        let xv = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[i * c + j] = h;
                out[i * c + j] = h * g[j] + b[j];
            }
        }
        let out = Array::from_parts(vec![r, c], out);
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(out, Op::LayerNorm { x, gamma, beta, xhat, inv_std }, rg)
    }

    /// Max over consecutive groups of `group` rows: `[g*group, c] -> [g, c]`.
    /// Ties resolve to the first row of the group.
    pub fn group_max(&mut self, x: Var, group: usize) -> Result<Var, TensorError> {
        let (r, c) = self.shape(x);
        if group == 0 || r % group != 0 {
            return Err(self.shape_err("group_max", format!("{r} rows not divisible into groups of {group}")));
        }
        let g = r / group;
        let d = self.value(x).data();
        let mut out = vec![f64::NEG_INFINITY; g * c];
        let mut argmax = vec![0usize; g * c];
        for gi in 0..g {
            for k in 0..group {
                let row = gi * group + k;
                for j in 0..c {
                    let v = d[row * c + j];
                    if v > out[gi * c + j] {
                        out[gi * c + j] = v;
                        argmax[gi * c + j] = row;
                    }
                }
            }
        }
        let out = Array::from_parts(vec![g, c], out);
        let rg = self.rg(x);
        self.push(out, Op::GroupMax { x, argmax }, rg)
    }

    /// Mean over consecutive groups of `group` rows: `[g*group, c] -> [g, c]`.
    pub fn group_mean(&mut self, x: Var, group: usize) -> Result<Var, TensorError> {
        let (r, c) = self.shape(x);
        if group == 0 || r % group != 0 {
            return Err(self.shape_err("group_mean", format!("{r} rows not divisible into groups of {group}")));
        }
        let g = r / group;
        let d = self.value(x).data();
        let mut out = vec![0.0; g * c];
        for gi in 0..g {
            for k in 0..group {
                let row = &d[(gi * group + k) * c..(gi * group + k + 1) * c];
                for (o, v) in out[gi * c..(gi + 1) * c].iter_mut().zip(row) {
                    *o += v;
                }
            }
        }
        let inv = 1.0 / group as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        let out = Array::from_parts(vec![g, c], out);
        let rg = self.rg(x);
        self.push(out, Op::GroupMean { x, group }, rg)
    }

    /// Column means: `[r, c] -> [1, c]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var, TensorError> {
        let (r, _) = self.shape(x);
        self.group_mean(x, r)
    }

    /// Repeats a `[1, c]` row `rows` times.
    pub fn broadcast_rows(&mut self, x: Var, rows: usize) -> Result<Var, TensorError> {
        let (r, c) = self.shape(x);
        if r != 1 || rows == 0 {
            return Err(self.shape_err("broadcast_rows", format!("expected [1, c] and rows > 0, got [{r}, {c}]")));
        }
        let row = self.value(x).data().to_vec();
        let mut out = Vec::with_capacity(rows * c);
        for _ in 0..rows {
            out.extend_from_slice(&row);
        }
        let out = Array::from_parts(vec![rows, c], out);
        let rg = self.rg(x);
        self.push(out, Op::BroadcastRows(x), rg)
    }

    /// Row sums: `[r, c] -> [r, 1]`.
    pub fn row_sum(&mut self, x: Var) -> Result<Var, TensorError> {
        let xv = self.value(x);
        let out: Vec<f64> = (0..xv.rows()).map(|i| xv.row(i).iter().sum()).collect();
        let out = Array::from_parts(vec![xv.rows(), 1], out);
        let rg = self.rg(x);
        self.push(out, Op::RowSum(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, TensorError> {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Array::scalar(s), Op::SumAll(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var, TensorError> {
        let xv = self.value(x);
        let s = xv.data().iter().sum::<f64>() / xv.len() as f64;
        let rg = self.rg(x);
        self.push(Array::scalar(s), Op::MeanAll(x), rg)
    }

    pub fn concat(&mut self, parts: &[Var], axis: Axis) -> Result<Var, TensorError> {
        if parts.is_empty() {
            return Err(self.shape_err("concat", "no parts".into()));
        }
        let shapes: Vec<(usize, usize)> = parts.iter().map(|&p| self.shape(p)).collect();
        let out = match axis {
            Axis::Rows => {
                let c = shapes[0].1;
                if shapes.iter().any(|s| s.1 != c) {
                    return Err(self.shape_err("concat", format!("column counts differ: {shapes:?}")));
                }
                let mut data = Vec::new();
                for &p in parts {
                    data.extend_from_slice(self.value(p).data());
                }
                let r = shapes.iter().map(|s| s.0).sum();
                Array::from_parts(vec![r, c], data)
            }
            Axis::Cols => {
                let r = shapes[0].0;
                if shapes.iter().any(|s| s.0 != r) {
                    return Err(self.shape_err("concat", format!("row counts differ: {shapes:?}")));
                }
                let c: usize = shapes.iter().map(|s| s.1).sum();
                let mut data = Vec::with_capacity(r * c);
                for i in 0..r {
                    for &p in parts {
                        data.extend_from_slice(self.value(p).row(i));
                    }
                }
                Array::from_parts(vec![r, c], data)
            }
        };
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(out, Op::Concat { parts: parts.to_vec(), axis }, rg)
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var, TensorError> {
        let (r, c) = self.shape(x);
        if start >= end || end > c {
            return Err(self.shape_err("slice_cols", format!("range {start}..{end} outside {c} columns")));
        }
        let xv = self.value(x);
        let mut data = Vec::with_capacity(r * (end - start));
        for i in 0..r {
            data.extend_from_slice(&xv.row(i)[start..end]);
        }
        let out = Array::from_parts(vec![r, end - start], data);
        let rg = self.rg(x);
        self.push(out, Op::SliceCols { x, start }, rg)
    }

    /// Row selection `out[i] = x[index[i]]`; indices may repeat.
    pub fn gather(&mut self, x: Var, index: &[usize]) -> Result<Var, TensorError> {
        let (r, c) = self.shape(x);
        if index.is_empty() {
            return Err(self.shape_err("gather", "empty index".into()));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= r) {
            return Err(self.shape_err("gather", format!("row {bad} out of range for {r} rows")));
        }
        let xv = self.value(x);
        let mut data = Vec::with_capacity(index.len() * c);
        for &i in index {
            data.extend_from_slice(xv.row(i));
        }
        let out = Array::from_parts(vec![index.len(), c], data);
        let rg = self.rg(x);
        self.push(out, Op::Gather { x, index: index.to_vec() }, rg)
    }

    /// Sliding windows for a same-padded 1-D convolution along rows:
    /// `[len, c] -> [len, kernel*c]`, zero outside the sequence.
    pub fn im2col(&mut self, x: Var, kernel: usize) -> Result<Var, TensorError> {
        let (r, c) = self.shape(x);
        if kernel % 2 == 0 {
            return Err(self.shape_err("im2col", format!("kernel {kernel} must be odd")));
        }
        let half = kernel / 2;
        let xv = self.value(x);
        let mut data = vec![0.0; r * kernel * c];
        for i in 0..r {
            for k in 0..kernel {
                let src = i as isize + k as isize - half as isize;
                if src >= 0 && (src as usize) < r {
                    let dst = i * kernel * c + k * c;
                    data[dst..dst + c].copy_from_slice(xv.row(src as usize));
                }
            }
        }
        let out = Array::from_parts(vec![r, kernel * c], data);
        let rg = self.rg(x);
        self.push(out, Op::Im2col { x, kernel }, rg)
    }

    /// Scales each row to unit L2 norm. A zero row is an error.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var, TensorError> {
        let xv = self.value(x);
        let (r, c) = (xv.rows(), xv.cols());
        let mut norms = Vec::with_capacity(r);
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            let row = xv.row(i);
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n <= f64::MIN_POSITIVE {
                return Err(TensorError::ZeroNorm { node: self.nodes.len(), row: i });
            }
            norms.push(n);
            data.extend(row.iter().map(|v| v / n));
        }
        let out = Array::from_parts(vec![r, c], data);
        let rg = self.rg(x);
        self.push(out, Op::NormalizeRows { x, norms }, rg)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var, TensorError> {
        let xv = self.value(x);
        let (r, c) = (xv.rows(), xv.cols());
        let d = xv.data();
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = d[i * c + j];
            }
        }
        let out = Array::from_parts(vec![c, r], data);
        let rg = self.rg(x);
        self.push(out, Op::Transpose(x), rg)
    }

    /// Identity on values, zero on gradients.
    pub fn stop_gradient(&mut self, x: Var) -> Result<Var, TensorError> {
        let out = self.value(x).clone();
        self.push(out, Op::StopGrad, false)
    }

    /// Reverse sweep from a single-entry loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients, TensorError> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(TensorError::Shape {
                op: "backward",
                node: loss.0,
                detail: format!("loss must be a single entry, got {:?}", lv.shape()),
            });
        }
        let mut grads: Vec<Option<Array>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Array::full(lv.shape(), 1.0));
        let mut out = Gradients::default();
        let param_names: HashMap<usize, &str> =
            self.param_vars.iter().map(|(k, v)| (v.0, k.as_str())).collect();

        for i in (0..=loss.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if !dy.is_finite() {
                return Err(TensorError::NonFinite { op: node.op.name(), node: i, phase: "backward" });
            }
            if let Op::Leaf = node.op {
                match param_names.get(&i) {
                    Some(name) => {
                        out.params.insert((*name).to_string(), dy);
                    }
                    None => {
                        out.leaves.insert(Var(i), dy);
                    }
                }
                continue;
            }
            self.vjp(i, &dy, &mut grads);
        }
        Ok(out)
    }

    fn vjp(&self, i: usize, dy: &Array, grads: &mut [Option<Array>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        let mut acc = |v: Var, g: Array| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        };
        match &node.op {
            Op::Leaf | Op::StopGrad => {}
            Op::MatMul { a, b, ta, tb } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    // C = op(A) op(B): dA follows from dC op(B)^T, transposed back if needed.
                    let ga = if *ta { gemm(bv, *tb, dy, true) } else { gemm(dy, false, bv, !*tb) };
                    acc(*a, ga);
                }
                if self.rg(*b) {
                    let gb = if *tb { gemm(dy, true, av, *ta) } else { gemm(av, !*ta, dy, false) };
                    acc(*b, gb);
                }
            }
            Op::Add(a, b) => {
                acc(*a, dy.clone());
                if self.rg(*b) {
                    acc(*b, reduce_to(dy, self.value(*b)));
                }
            }
            Op::Sub(a, b) => {
                acc(*a, dy.clone());
                if self.rg(*b) {
                    acc(*b, reduce_to(&dy.map(|v| -v), self.value(*b)));
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    acc(*a, broadcast_mul(dy, bv));
                }
                if self.rg(*b) {
                    let prod = Array::from_parts(
                        dy.shape().to_vec(),
                        dy.data().iter().zip(av.data()).map(|(g, x)| g * x).collect(),
                    );
                    acc(*b, reduce_to(&prod, bv));
                }
            }
            Op::Affine { x, scale } => acc(*x, dy.map(|g| g * scale)),
            Op::Sigmoid(x) => acc(*x, zip_map(dy, y, |g, s| g * s * (1.0 - s))),
            Op::Gelu(x) => acc(
                *x,
                zip_map(dy, self.value(*x), |g, v| {
                    let th = (GELU_C * (v + GELU_A * v * v * v)).tanh();
                    let d = 0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * GELU_A * v * v);
                    g * d
                }),
            ),
            Op::Exp(x) => acc(*x, zip_map(dy, y, |g, e| g * e)),
            Op::Log(x) => acc(*x, zip_map(dy, self.value(*x), |g, v| g / v)),
            Op::SmoothL1(x) => acc(*x, zip_map(dy, self.value(*x), |g, v| g * v.clamp(-1.0, 1.0))),
            Op::Softmax { x, axis } => {
                let (r, c) = (y.rows(), y.cols());
                let (yd, gd) = (y.data(), dy.data());
                let mut dx = vec![0.0; r * c];
                match axis {
                    Axis::Cols => {
                        for i in 0..r {
                            let s: f64 = (0..c).map(|j| gd[i * c + j] * yd[i * c + j]).sum();
                            for j in 0..c {
                                dx[i * c + j] = yd[i * c + j] * (gd[i * c + j] - s);
                            }
                        }
                    }
                    Axis::Rows => {
                        for j in 0..c {
                            let s: f64 = (0..r).map(|i| gd[i * c + j] * yd[i * c + j]).sum();
                            for i in 0..r {
                                dx[i * c + j] = yd[i * c + j] * (gd[i * c + j] - s);
                            }
                        }
                    }
                }
                acc(*x, Array::from_parts(y.shape().to_vec(), dx));
            }
            Op::LogSumExpRows(x) => {
                let xv = self.value(*x);
                let c = xv.cols();
                let mut dx = Vec::with_capacity(xv.len());
                for i in 0..xv.rows() {
                    let l = y.data()[i];
                    let g = dy.data()[i];
                    dx.extend(xv.row(i).iter().map(|&v| g * (v - l).exp()));
                }
                debug_assert_eq!(dx.len(), xv.rows() * c);
                acc(*x, Array::from_parts(xv.shape().to_vec(), dx));
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let (r, c) = (y.rows(), y.cols());
                let g = self.value(*gamma).data();
                let gd = dy.data();
                if self.rg(*gamma) || self.rg(*beta) {
                    let mut dg = vec![0.0; c];
                    let mut db = vec![0.0; c];
                    for i in 0..r {
                        for j in 0..c {
                            dg[j] += gd[i * c + j] * xhat[i * c + j];
                            db[j] += gd[i * c + j];
                        }
                    }
                    acc(*gamma, Array::from_parts(vec![1, c], dg));
                    acc(*beta, Array::from_parts(vec![1, c], db));
                }
                if self.rg(*x) {
                    let mut dx = vec![0.0; r * c];
                    for i in 0..r {
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..c {
                            let dh = gd[i * c + j] * g[j];
                            m1 += dh;
                            m2 += dh * xhat[i * c + j];
                        }
                        m1 /= c as f64;
                        m2 /= c as f64;
                        for j in 0..c {
                            let dh = gd[i * c + j] * g[j];
                            dx[i * c + j] = inv_std[i] * (dh - m1 - xhat[i * c + j] * m2);
                        }
                    }
                    acc(*x, Array::from_parts(vec![r, c], dx));
                }
            }
            Op::GroupMax { x, argmax } => {
                let xv = self.value(*x);
                let c = xv.cols();
                let mut dx = vec![0.0; xv.len()];
                for (k, &row) in argmax.iter().enumerate() {
                    dx[row * c + k % c] += dy.data()[k];
                }
                acc(*x, Array::from_parts(xv.shape().to_vec(), dx));
            }
            Op::GroupMean { x, group } => {
                let xv = self.value(*x);
                let c = xv.cols();
                let inv = 1.0 / *group as f64;
                let mut dx = Vec::with_capacity(xv.len());
                for row in 0..xv.rows() {
                    let gi = row / group;
                    dx.extend(dy.row(gi).iter().map(|g| g * inv));
                }
                debug_assert_eq!(dx.len(), xv.rows() * c);
                acc(*x, Array::from_parts(xv.shape().to_vec(), dx));
            }
            Op::BroadcastRows(x) => {
                let c = y.cols();
                let mut dx = vec![0.0; c];
                for i in 0..y.rows() {
                    for (d, g) in dx.iter_mut().zip(dy.row(i)) {
                        *d += g;
                    }
                }
                acc(*x, Array::from_parts(vec![1, c], dx));
            }
            Op::RowSum(x) => {
                let xv = self.value(*x);
                let c = xv.cols();
                let mut dx = Vec::with_capacity(xv.len());
                for i in 0..xv.rows() {
                    dx.extend(std::iter::repeat_n(dy.data()[i], c));
                }
                acc(*x, Array::from_parts(xv.shape().to_vec(), dx));
            }
            Op::SumAll(x) => {
                let xv = self.value(*x);
                acc(*x, Array::full(xv.shape(), dy.item()));
            }
            Op::MeanAll(x) => {
                let xv = self.value(*x);
                acc(*x, Array::full(xv.shape(), dy.item() / xv.len() as f64));
            }
            Op::Concat { parts, axis } => match axis {
                Axis::Rows => {
                    let c = y.cols();
                    let mut offset = 0;
                    for &p in parts {
                        let n = self.value(p).len();
                        if self.rg(p) {
                            let piece = dy.data()[offset..offset + n].to_vec();
                            acc(p, Array::from_parts(vec![n / c, c], piece));
                        }
                        offset += n;
                    }
                }
                Axis::Cols => {
                    let r = y.rows();
                    let mut start = 0;
                    for &p in parts {
                        let pc = self.value(p).cols();
                        if self.rg(p) {
                            let mut piece = Vec::with_capacity(r * pc);
                            for i in 0..r {
                                piece.extend_from_slice(&dy.row(i)[start..start + pc]);
                            }
                            acc(p, Array::from_parts(vec![r, pc], piece));
                        }
                        start += pc;
                    }
                }
            },
            Op::SliceCols { x, start } => {
                let xv = self.value(*x);
                let (r, c) = (xv.rows(), xv.cols());
                let w = y.cols();
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    dx[i * c + start..i * c + start + w].copy_from_slice(dy.row(i));
                }
                acc(*x, Array::from_parts(vec![r, c], dx));
            }
            Op::Gather { x, index } => {
                let xv = self.value(*x);
                let c = xv.cols();
                let mut dx = vec![0.0; xv.len()];
                for (k, &src) in index.iter().enumerate() {
                    for (d, g) in dx[src * c..(src + 1) * c].iter_mut().zip(dy.row(k)) {
                        *d += g;
                    }
                }
                acc(*x, Array::from_parts(xv.shape().to_vec(), dx));
            }
            Op::Im2col { x, kernel } => {
                let xv = self.value(*x);
                let (r, c) = (xv.rows(), xv.cols());
                let half = kernel / 2;
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    for k in 0..*kernel {
                        let src = i as isize + k as isize - half as isize;
                        if src >= 0 && (src as usize) < r {
                            let s = src as usize;
                            let from = &dy.data()[i * kernel * c + k * c..i * kernel * c + (k + 1) * c];
                            for (d, g) in dx[s * c..(s + 1) * c].iter_mut().zip(from) {
                                *d += g;
                            }
                        }
                    }
                }
                acc(*x, Array::from_parts(vec![r, c], dx));
            }
            Op::NormalizeRows { x, norms } => {
                let c = y.cols();
                let mut dx = Vec::with_capacity(y.len());
                for (i, n) in norms.iter().enumerate() {
                    let yr = y.row(i);
                    let gr = dy.row(i);
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    dx.extend(yr.iter().zip(gr).map(|(yv, g)| (g - yv * dot) / n));
                }
                debug_assert_eq!(dx.len(), norms.len() * c);
                acc(*x, Array::from_parts(y.shape().to_vec(), dx));
            }
            Op::Transpose(x) => {
                let (r, c) = (dy.rows(), dy.cols());
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        dx[j * r + i] = dy.data()[i * c + j];
                    }
                }
                acc(*x, Array::from_parts(vec![c, r], dx));
            }
        }
    }
}

fn t(flag: bool) -> &'static str {
    if flag {
        "ᵀ"
    } else {
        ""
    }
}

fn dims(a: &Array, transposed: bool) -> (usize, usize) {
    if transposed {
        (a.cols(), a.rows())
    } else {
        (a.rows(), a.cols())
    }
}

/// Dense `op(a) · op(b)`.
fn gemm(a: &Array, ta: bool, b: &Array, tb: bool) -> Array {
    let (m, k) = dims(a, ta);
    let (_, n) = dims(b, tb);
    let (rsa, csa) = if ta { (1, a.cols() as isize) } else { (a.cols() as isize, 1) };
    let (rsb, csb) = if tb { (1, b.cols() as isize) } else { (b.cols() as isize, 1) };
    let mut c = vec![0.0; m * n];
    // SAFETY: strides and extents describe the row-major buffers exactly.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data().as_ptr(),
            rsa,
            csa,
            b.data().as_ptr(),
            rsb,
            csb,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    Array::from_parts(vec![m, n], c)
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn softmax_into(x: &[f64], out: &mut [f64]) {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - m).exp();
        s += *o;
    }
    for o in out.iter_mut() {
        *o /= s;
    }
}

fn zip_map(a: &Array, b: &Array, f: impl Fn(f64, f64) -> f64) -> Array {
    Array::from_parts(a.shape().to_vec(), a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect())
}

/// `dy ⊙ b` with `b` broadcast to `dy`'s shape.
fn broadcast_mul(dy: &Array, b: &Array) -> Array {
    let (r, c) = (dy.rows(), dy.cols());
    let (rb, cb) = (b.rows(), b.cols());
    let mut out = Vec::with_capacity(r * c);
    for i in 0..r {
        let brow = b.row(if rb == 1 { 0 } else { i });
        for j in 0..c {
            out.push(dy.data()[i * c + j] * brow[if cb == 1 { 0 } else { j }]);
        }
    }
    Array::from_parts(dy.shape().to_vec(), out)
}

/// Sums `g` down to the broadcast shape of `target`.
fn reduce_to(g: &Array, target: &Array) -> Array {
    let (r, c) = (g.rows(), g.cols());
    let (rt, ct) = (target.rows(), target.cols());
    if rt == r && ct == c {
        return Array::from_parts(target.shape().to_vec(), g.data().to_vec());
    }
    let mut out = vec![0.0; rt * ct];
    for i in 0..r {
        let oi = if rt == 1 { 0 } else { i };
        for j in 0..c {
            let oj = if ct == 1 { 0 } else { j };
            out[oi * ct + oj] += g.data()[i * c + j];
        }
    }
    Array::from_parts(target.shape().to_vec(), out)
}
