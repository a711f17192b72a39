//! Wengert tape: every op appends a record holding its output value and
//! what it needs for the backward rule. `backward` walks the records in
//! exact reverse creation order and accumulates gradients additively.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::params::{ParamStore, Trainable};
use super::tensor::{dot, gemm_nn, gemm_nt, gemm_tn, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const QUICK_GELU_SLOPE: f64 = 1.702;
const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    MulConst(Var, Vec<f64>),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    GatherRows(Var, Vec<usize>),
    Pick(Var, Vec<usize>),
    Sum(Var),
    Mean(Var),
    Softmax { x: Var, inv_tau: f64 },
    LogSoftmax { x: Var, inv_tau: f64 },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    QuickGelu(Var),
    Sigmoid(Var),
    NormalizeRows { x: Var, inv_norm: Vec<f64> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::MatMulNt(..) => "matmul_nt",
            Op::Transpose(..) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::MulCol(..) => "mul_col",
            Op::Scale(..) => "scale",
            Op::AddConst(..) => "add_const",
            Op::MulConst(..) => "mul_const",
            Op::ConcatCols(..) => "concat_cols",
            Op::ConcatRows(..) => "concat_rows",
            Op::SliceCols(..) => "slice_cols",
            Op::SliceRows(..) => "slice_rows",
            Op::GatherRows(..) => "gather_rows",
            Op::Pick(..) => "pick",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Softmax { .. } => "softmax",
            Op::LogSoftmax { .. } => "log_softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::QuickGelu(..) => "quick_gelu",
            Op::Sigmoid(..) => "sigmoid",
            Op::NormalizeRows { .. } => "normalize_rows",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Counters for inputs handled by a degenerate-input policy rather than an error.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Diagnostics {
    /// Rows normalized while having zero norm (mapped to the zero vector).
    pub zero_norm_rows: usize,
    /// First op whose output contained NaN or infinity.
    pub non_finite_op: Option<&'static str>,
}

/// Single-threaded reverse-mode differentiation tape.
pub struct Tape<'a> {
    nodes: Vec<Node>,
    store: Option<&'a ParamStore>,
    trainable: Trainable,
    param_vars: BTreeMap<String, Var>,
    training: bool,
    rng: ChaCha8Rng,
    diagnostics: Diagnostics,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a> Tape<'a> {
    /// Tape without a parameter registry, in evaluation mode.
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            store: None,
            trainable: Trainable::Nothing,
            param_vars: BTreeMap::new(),
            training: false,
            rng: ChaCha8Rng::seed_from_u64(0),
            diagnostics: Diagnostics::default(),
        }
    }

    pub fn with_params(store: &'a ParamStore, trainable: Trainable) -> Self {
        Tape { store: Some(store), trainable, ..Self::new() }
    }

    /// Enables training mode (dropout active) with a dedicated dropout stream.
    pub fn training(mut self, dropout_seed: u64) -> Self {
        self.training = true;
        self.rng = ChaCha8Rng::seed_from_u64(dropout_seed);
        self
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn diagnostics(&self) -> &Diagnostics {
        &self.diagnostics
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Fails if any op so far produced a non-finite value.
    pub fn check_finite(&self) -> Result<()> {
        match self.diagnostics.non_finite_op {
            Some(op) => Err(Error::Numerical(format!("non-finite output from {op}"))),
            None => Ok(()),
        }
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        if self.diagnostics.non_finite_op.is_none() && !value.is_finite() {
            self.diagnostics.non_finite_op = Some(op.name());
        }
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    fn dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        self.nodes[v.0].value.dims2().map_err(|_| {
            Error::shape(op, format!("expected a matrix, got {:?}", self.nodes[v.0].value.shape()))
        })
    }

    // ----- leaves ---------------------------------------------------------

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Differentiable input not tied to the registry.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Registry parameter. Repeated lookups of one name return the same node,
    /// so weight sharing is sharing of a single registry entry.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.param_vars.get(name) {
            return Ok(v);
        }
        let store = self
            .store
            .ok_or_else(|| Error::Config(format!("tape has no parameter store (wanted '{name}')")))?;
        let value = store.get(name)?.clone();
        let trainable = self.trainable.allows(name);
        let v = self.push(value, Op::Leaf, trainable);
        self.param_vars.insert(name.to_string(), v);
        Ok(v)
    }

    /// Names of parameters pulled onto this tape, in registry order.
    pub fn param_vars(&self) -> &BTreeMap<String, Var> {
        &self.param_vars
    }

    /// Same value, cut from the graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    // ----- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a, "matmul")?;
        let (k2, n) = self.dims(b, "matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("[{m},{k}] x [{k2},{n}]")));
        }
        let mut out = vec![0.0; m * n];
        gemm_nn(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let ng = self.ng(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), ng))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a, "matmul_nt")?;
        let (n, k2) = self.dims(b, "matmul_nt")?;
        if k != k2 {
            return Err(Error::shape("matmul_nt", format!("[{m},{k}] x [{n},{k2}]^T")));
        }
        let mut out = vec![0.0; m * n];
        gemm_nt(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let ng = self.ng(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMulNt(a, b), ng))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims(x, "transpose")?;
        let src = self.value(x).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::Transpose(x), ng))
    }

    // ----- elementwise ----------------------------------------------------

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn zip(&mut self, a: Var, b: Var, op: Op, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(a, b, name)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(value, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Add(a, b), "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Sub(a, b), "sub", |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Mul(a, b), "mul", |x, y| x * y)
    }

    /// `x[m,n] + bias[n]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.dims(x, "add_row")?;
        if self.value(bias).numel() != n {
            return Err(Error::shape("add_row", format!("[{m},{n}] + {:?}", self.value(bias).shape())));
        }
        let b = self.value(bias).data();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(n) {
            for (o, &bv) in row.iter_mut().zip(b) {
                *o += bv;
            }
        }
        let shape = self.value(x).shape().to_vec();
        let ng = self.ng(&[x, bias]);
        Ok(self.push(Tensor::new(shape, out)?, Op::AddRow(x, bias), ng))
    }

    /// `x[m,n] * col[m]` broadcast over columns.
    pub fn mul_col(&mut self, x: Var, col: Var) -> Result<Var> {
        let (m, n) = self.dims(x, "mul_col")?;
        if self.value(col).numel() != m {
            return Err(Error::shape("mul_col", format!("[{m},{n}] * {:?}", self.value(col).shape())));
        }
        let c = self.value(col).data();
        let mut out = self.value(x).data().to_vec();
        for (row, &cv) in out.chunks_mut(n).zip(c) {
            row.iter_mut().for_each(|o| *o *= cv);
        }
        let shape = self.value(x).shape().to_vec();
        let ng = self.ng(&[x, col]);
        Ok(self.push(Tensor::new(shape, out)?, Op::MulCol(x, col), ng))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let value = self.value(x).map(|v| v * s);
        let ng = self.ng(&[x]);
        Ok(self.push(value, Op::Scale(x, s), ng))
    }

    /// `x + c` for a constant `c` of the same shape.
    pub fn add_const(&mut self, x: Var, c: &Tensor) -> Result<Var> {
        if self.value(x).shape() != c.shape() {
            return Err(Error::shape("add_const", format!("{:?} vs {:?}", self.value(x).shape(), c.shape())));
        }
        let data = self.value(x).data().iter().zip(c.data()).map(|(a, b)| a + b).collect();
        let value = Tensor::new(c.shape().to_vec(), data)?;
        let ng = self.ng(&[x]);
        Ok(self.push(value, Op::AddConst(x), ng))
    }

    /// `x ⊙ c` for a constant `c` of the same shape.
    pub fn mul_const(&mut self, x: Var, c: &Tensor) -> Result<Var> {
        if self.value(x).shape() != c.shape() {
            return Err(Error::shape("mul_const", format!("{:?} vs {:?}", self.value(x).shape(), c.shape())));
        }
        let data = self.value(x).data().iter().zip(c.data()).map(|(a, b)| a * b).collect();
        let value = Tensor::new(c.shape().to_vec(), data)?;
        let ng = self.ng(&[x]);
        Ok(self.push(value, Op::MulConst(x, c.data().to_vec()), ng))
    }

    pub fn quick_gelu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| v * sigmoid(QUICK_GELU_SLOPE * v));
        let ng = self.ng(&[x]);
        Ok(self.push(value, Op::QuickGelu(x), ng))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(sigmoid);
        let ng = self.ng(&[x]);
        Ok(self.push(value, Op::Sigmoid(x), ng))
    }

    /// Inverted dropout: identity in evaluation mode, otherwise zeroes each
    /// element with probability `p` and scales survivors by `1/(1-p)`.
    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Parameter(format!("dropout probability {p} outside [0,1)")));
        }
        if !self.training || p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let shape = self.value(x).shape().to_vec();
        let n = self.value(x).numel();
        let mask: Vec<f64> = (0..n).map(|_| if self.rng.random::<f64>() < p { 0.0 } else { keep }).collect();
        let mask = Tensor::new(shape, mask)?;
        self.mul_const(x, &mask)
    }

    // ----- structural -----------------------------------------------------

    /// Concatenate along the last axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::shape("concat_cols", "no inputs"))?;
        let (m, _) = self.dims(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = self.dims(p, "concat_cols")?;
            if pm != m {
                return Err(Error::shape("concat_cols", format!("row counts {m} vs {pm}")));
            }
            widths.push(pn);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; m * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.value(p).data();
            for i in 0..m {
                out[i * total + offset..i * total + offset + w].copy_from_slice(&src[i * w..(i + 1) * w]);
            }
            offset += w;
        }
        let ng = self.ng(parts);
        Ok(self.push(Tensor::new(vec![m, total], out)?, Op::ConcatCols(parts.to_vec()), ng))
    }

    /// Concatenate along the first axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::shape("concat_rows", "no inputs"))?;
        let (_, n) = self.dims(first, "concat_rows")?;
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (pm, pn) = self.dims(p, "concat_rows")?;
            if pn != n {
                return Err(Error::shape("concat_rows", format!("column counts {n} vs {pn}")));
            }
            out.extend_from_slice(self.value(p).data());
            rows += pm;
        }
        let ng = self.ng(parts);
        Ok(self.push(Tensor::new(vec![rows, n], out)?, Op::ConcatRows(parts.to_vec()), ng))
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.dims(x, "slice_cols")?;
        if start >= end || end > n {
            return Err(Error::shape("slice_cols", format!("{start}..{end} of {n} columns")));
        }
        let w = end - start;
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(m * w);
        for i in 0..m {
            out.extend_from_slice(&src[i * n + start..i * n + end]);
        }
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::new(vec![m, w], out)?, Op::SliceCols(x, start), ng))
    }

    /// Rows `start..end`.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.dims(x, "slice_rows")?;
        if start >= end || end > m {
            return Err(Error::shape("slice_rows", format!("{start}..{end} of {m} rows")));
        }
        let out = self.value(x).data()[start * n..end * n].to_vec();
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::new(vec![end - start, n], out)?, Op::SliceRows(x, start), ng))
    }

    /// Rows selected by index, e.g. embedding lookup.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = self.dims(x, "gather_rows")?;
        if idx.is_empty() {
            return Err(Error::shape("gather_rows", "empty index list"));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(Error::shape("gather_rows", format!("row {bad} of {m}")));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            out.extend_from_slice(&src[i * n..(i + 1) * n]);
        }
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::new(vec![idx.len(), n], out)?, Op::GatherRows(x, idx.to_vec()), ng))
    }

    /// Elements `(row, col)` of a matrix, as a vector.
    pub fn pick(&mut self, x: Var, coords: &[(usize, usize)]) -> Result<Var> {
        let (m, n) = self.dims(x, "pick")?;
        if coords.is_empty() {
            return Err(Error::shape("pick", "empty coordinate list"));
        }
        let mut flat = Vec::with_capacity(coords.len());
        for &(r, c) in coords {
            if r >= m || c >= n {
                return Err(Error::shape("pick", format!("({r},{c}) outside [{m},{n}]")));
            }
            flat.push(r * n + c);
        }
        let src = self.value(x).data();
        let out = flat.iter().map(|&i| src[i]).collect();
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::vector(out), Op::Pick(x, flat), ng))
    }

    // ----- reductions -----------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::scalar(s), Op::Sum(x), ng))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::scalar(s), Op::Mean(x), ng))
    }

    // ----- normalization and attention pieces -----------------------------

    /// Row-wise `softmax(x / tau)` with max subtraction.
    pub fn softmax_rows(&mut self, x: Var, tau: f64) -> Result<Var> {
        self.softmax_rows_masked(x, tau, None)
    }

    /// Row-wise softmax over the columns where `valid[j]` is true; masked
    /// columns get probability exactly 0 and receive no gradient.
    pub fn softmax_rows_masked(&mut self, x: Var, tau: f64, valid: Option<&[bool]>) -> Result<Var> {
        check_tau(tau)?;
        let (m, n) = self.dims(x, "softmax")?;
        if let Some(v) = valid {
            if v.len() != n {
                return Err(Error::shape("softmax", format!("mask of {} for {n} columns", v.len())));
            }
            if !v.iter().any(|&b| b) {
                return Err(Error::Parameter("softmax mask excludes every column".into()));
            }
        }
        let inv_tau = 1.0 / tau;
        let src = self.value(x).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let dst = &mut out[i * n..(i + 1) * n];
            let ok = |j: usize| valid.is_none_or(|v| v[j]);
            let max = (0..n).filter(|&j| ok(j)).map(|j| row[j]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..n {
                if ok(j) {
                    let e = ((row[j] - max) * inv_tau).exp();
                    dst[j] = e;
                    z += e;
                }
            }
            dst.iter_mut().for_each(|d| *d /= z);
        }
        let shape = self.value(x).shape().to_vec();
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax { x, inv_tau }, ng))
    }

    /// Softmax along `axis` (0 or the last axis) of a rank-2 tensor.
    pub fn softmax(&mut self, x: Var, axis: usize, tau: f64) -> Result<Var> {
        let rank = self.value(x).rank();
        if axis == rank - 1 {
            self.softmax_rows(x, tau)
        } else if axis == 0 && rank == 2 {
            let t = self.transpose(x)?;
            let s = self.softmax_rows(t, tau)?;
            self.transpose(s)
        } else {
            Err(Error::shape("softmax", format!("axis {axis} of rank {rank}")))
        }
    }

    /// Row-wise `log softmax(x / tau)`.
    pub fn log_softmax_rows(&mut self, x: Var, tau: f64) -> Result<Var> {
        check_tau(tau)?;
        let (m, n) = self.dims(x, "log_softmax")?;
        let inv_tau = 1.0 / tau;
        let src = self.value(x).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|&v| ((v - max) * inv_tau).exp()).sum::<f64>().ln();
            for j in 0..n {
                out[i * n + j] = (row[j] - max) * inv_tau - lse;
            }
        }
        let shape = self.value(x).shape().to_vec();
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, Op::LogSoftmax { x, inv_tau }, ng))
    }

    /// Layer norm over the last axis with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.dims(x, "layer_norm")?;
        if self.value(gain).numel() != n || self.value(bias).numel() != n {
            return Err(Error::shape("layer_norm", format!("gain/bias must have {n} elements")));
        }
        let src = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let mu = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[i] = is;
            for j in 0..n {
                let h = (row[j] - mu) * is;
                xhat[i * n + j] = h;
                out[i * n + j] = h * g[j] + b[j];
            }
        }
        let shape = self.value(x).shape().to_vec();
        let ng = self.ng(&[x, gain, bias]);
        Ok(self.push(Tensor::new(shape, out)?, Op::LayerNorm { x, gain, bias, xhat, inv_std }, ng))
    }

    /// Scales each row to unit L2 norm. Zero rows stay zero and are counted
    /// in [`Diagnostics::zero_norm_rows`].
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims(x, "normalize_rows")?;
        let src = self.value(x).data();
        let mut inv_norm = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        let mut zero_rows = 0;
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let norm = dot(row, row).sqrt();
            if norm > 0.0 {
                let inv = 1.0 / norm;
                inv_norm[i] = inv;
                for j in 0..n {
                    out[i * n + j] = row[j] * inv;
                }
            } else {
                zero_rows += 1;
            }
        }
        self.diagnostics.zero_norm_rows += zero_rows;
        let shape = self.value(x).shape().to_vec();
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, Op::NormalizeRows { x, inv_norm }, ng))
    }

    /// Pairwise cosine similarities `[m, n]` between rows of `a` and `b`.
    pub fn cosine_matrix(&mut self, a: Var, b: Var) -> Result<Var> {
        let na = self.normalize_rows(a)?;
        let nb = self.normalize_rows(b)?;
        self.matmul_nt(na, nb)
    }

    // ----- backward -------------------------------------------------------

    /// Gradients of a scalar `loss` with respect to every node that needs one.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape("backward", format!("loss must be scalar, got {:?}", self.value(loss).shape())));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        let mut visited = Vec::new();
        if !self.nodes[loss.0].needs_grad {
            return Ok(Gradients { grads, visited });
        }
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            visited.push(idx);
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
                continue;
            }
            self.backward_op(node, &g, &mut grads)?;
        }
        Ok(Gradients { grads, visited })
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        let node = &self.nodes[v.0];
        if !node.needs_grad {
            return None;
        }
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; node.value.numel()]))
    }

    fn backward_op(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (m, k) = self.value(a).dims2()?;
                let (_, n) = self.value(b).dims2()?;
                let bv = self.value(b).data();
                if let Some(ga) = self.acc(grads, a) {
                    gemm_nt(g, bv, ga, m, n, k);
                }
                let av = self.value(a).data();
                if let Some(gb) = self.acc(grads, b) {
                    gemm_tn(av, g, gb, k, m, n);
                }
            }
            &Op::MatMulNt(a, b) => {
                let (m, k) = self.value(a).dims2()?;
                let (n, _) = self.value(b).dims2()?;
                let bv = self.value(b).data();
                if let Some(ga) = self.acc(grads, a) {
                    gemm_nn(g, bv, ga, m, n, k);
                }
                let av = self.value(a).data();
                if let Some(gb) = self.acc(grads, b) {
                    gemm_tn(g, av, gb, n, m, k);
                }
            }
            &Op::Transpose(x) => {
                let (m, n) = self.value(x).dims2()?;
                if let Some(gx) = self.acc(grads, x) {
                    for i in 0..m {
                        for j in 0..n {
                            gx[i * n + j] += g[j * m + i];
                        }
                    }
                }
            }
            &Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(gv) = self.acc(grads, v) {
                        add_into(gv, g);
                    }
                }
            }
            &Op::Sub(a, b) => {
                if let Some(ga) = self.acc(grads, a) {
                    add_into(ga, g);
                }
                if let Some(gb) = self.acc(grads, b) {
                    gb.iter_mut().zip(g).for_each(|(d, s)| *d -= s);
                }
            }
            &Op::Mul(a, b) => {
                let bv = self.value(b).data();
                if let Some(ga) = self.acc(grads, a) {
                    for ((d, s), w) in ga.iter_mut().zip(g).zip(bv) {
                        *d += s * w;
                    }
                }
                let av = self.value(a).data();
                if let Some(gb) = self.acc(grads, b) {
                    for ((d, s), w) in gb.iter_mut().zip(g).zip(av) {
                        *d += s * w;
                    }
                }
            }
            &Op::AddRow(x, bias) => {
                if let Some(gx) = self.acc(grads, x) {
                    add_into(gx, g);
                }
                let n = self.value(bias).numel();
                if let Some(gb) = self.acc(grads, bias) {
                    for row in g.chunks(n) {
                        add_into(gb, row);
                    }
                }
            }
            &Op::MulCol(x, col) => {
                let (_, n) = self.value(x).dims2()?;
                let cv = self.value(col).data();
                if let Some(gx) = self.acc(grads, x) {
                    for ((drow, grow), &c) in gx.chunks_mut(n).zip(g.chunks(n)).zip(cv) {
                        drow.iter_mut().zip(grow).for_each(|(d, s)| *d += s * c);
                    }
                }
                let xv = self.value(x).data();
                if let Some(gc) = self.acc(grads, col) {
                    for (i, (grow, xrow)) in g.chunks(n).zip(xv.chunks(n)).enumerate() {
                        gc[i] += dot(grow, xrow);
                    }
                }
            }
            &Op::Scale(x, s) => {
                if let Some(gx) = self.acc(grads, x) {
                    gx.iter_mut().zip(g).for_each(|(d, v)| *d += s * v);
                }
            }
            &Op::AddConst(x) => {
                if let Some(gx) = self.acc(grads, x) {
                    add_into(gx, g);
                }
            }
            Op::MulConst(x, c) => {
                if let Some(gx) = self.acc(grads, *x) {
                    for ((d, s), w) in gx.iter_mut().zip(g).zip(c) {
                        *d += s * w;
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = *node.value.shape().last().unwrap();
                let m = node.value.numel() / total;
                let mut offset = 0;
                for &p in parts {
                    let (_, w) = self.value(p).dims2()?;
                    if let Some(gp) = self.acc(grads, p) {
                        for i in 0..m {
                            add_into(&mut gp[i * w..(i + 1) * w], &g[i * total + offset..i * total + offset + w]);
                        }
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    if let Some(gp) = self.acc(grads, p) {
                        add_into(gp, &g[offset..offset + len]);
                    }
                    offset += len;
                }
            }
            &Op::SliceCols(x, start) => {
                let (m, n) = self.value(x).dims2()?;
                let w = *node.value.shape().last().unwrap();
                if let Some(gx) = self.acc(grads, x) {
                    for i in 0..m {
                        add_into(&mut gx[i * n + start..i * n + start + w], &g[i * w..(i + 1) * w]);
                    }
                }
            }
            &Op::SliceRows(x, start) => {
                let (_, n) = self.value(x).dims2()?;
                if let Some(gx) = self.acc(grads, x) {
                    add_into(&mut gx[start * n..start * n + g.len()], g);
                }
            }
            Op::GatherRows(x, idx) => {
                let (_, n) = self.value(*x).dims2()?;
                if let Some(gx) = self.acc(grads, *x) {
                    for (k, &i) in idx.iter().enumerate() {
                        add_into(&mut gx[i * n..(i + 1) * n], &g[k * n..(k + 1) * n]);
                    }
                }
            }
            Op::Pick(x, flat) => {
                if let Some(gx) = self.acc(grads, *x) {
                    for (k, &i) in flat.iter().enumerate() {
                        gx[i] += g[k];
                    }
                }
            }
            &Op::Sum(x) => {
                if let Some(gx) = self.acc(grads, x) {
                    gx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            &Op::Mean(x) => {
                if let Some(gx) = self.acc(grads, x) {
                    let s = g[0] / gx.len() as f64;
                    gx.iter_mut().for_each(|d| *d += s);
                }
            }
            &Op::Softmax { x, inv_tau } => {
                let n = *node.value.shape().last().unwrap();
                if let Some(gx) = self.acc(grads, x) {
                    for ((drow, grow), yrow) in gx.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                        let s = dot(grow, yrow);
                        for j in 0..n {
                            drow[j] += inv_tau * yrow[j] * (grow[j] - s);
                        }
                    }
                }
            }
            &Op::LogSoftmax { x, inv_tau } => {
                let n = *node.value.shape().last().unwrap();
                if let Some(gx) = self.acc(grads, x) {
                    for ((drow, grow), yrow) in gx.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                        let s: f64 = grow.iter().sum();
                        for j in 0..n {
                            drow[j] += inv_tau * (grow[j] - yrow[j].exp() * s);
                        }
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let n = self.value(*gain).numel();
                let gv = self.value(*gain).data();
                if let Some(gx) = self.acc(grads, *x) {
                    let mut dxhat = vec![0.0; n];
                    for (i, ((drow, grow), hrow)) in
                        gx.chunks_mut(n).zip(g.chunks(n)).zip(xhat.chunks(n)).enumerate()
                    {
                        for j in 0..n {
                            dxhat[j] = grow[j] * gv[j];
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / n as f64;
                        let mean_dh = dot(&dxhat, hrow) / n as f64;
                        for j in 0..n {
                            drow[j] += inv_std[i] * (dxhat[j] - mean_d - hrow[j] * mean_dh);
                        }
                    }
                }
                if let Some(gg) = self.acc(grads, *gain) {
                    for (grow, hrow) in g.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            gg[j] += grow[j] * hrow[j];
                        }
                    }
                }
                if let Some(gb) = self.acc(grads, *bias) {
                    for grow in g.chunks(n) {
                        add_into(gb, grow);
                    }
                }
            }
            &Op::QuickGelu(x) => {
                let xv = self.value(x).data();
                if let Some(gx) = self.acc(grads, x) {
                    for ((d, s), &v) in gx.iter_mut().zip(g).zip(xv) {
                        let sg = sigmoid(QUICK_GELU_SLOPE * v);
                        *d += s * (sg + QUICK_GELU_SLOPE * v * sg * (1.0 - sg));
                    }
                }
            }
            &Op::Sigmoid(x) => {
                if let Some(gx) = self.acc(grads, x) {
                    for ((d, s), &v) in gx.iter_mut().zip(g).zip(y) {
                        *d += s * v * (1.0 - v);
                    }
                }
            }
            Op::NormalizeRows { x, inv_norm } => {
                let n = *node.value.shape().last().unwrap();
                if let Some(gx) = self.acc(grads, *x) {
                    for (i, ((drow, grow), yrow)) in gx.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)).enumerate() {
                        let inv = inv_norm[i];
                        if inv == 0.0 {
                            continue;
                        }
                        let s = dot(grow, yrow);
                        for j in 0..n {
                            drow[j] += inv * (grow[j] - yrow[j] * s);
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    visited: Vec<usize>,
}

impl Gradients {
    /// Gradient of a leaf, or `None` when the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of a leaf as a tensor shaped like its value; zeros if absent.
    pub fn wrt(&self, tape: &Tape<'_>, v: Var) -> Tensor {
        let shape = tape.value(v).shape().to_vec();
        match self.get(v) {
            Some(g) => Tensor::new(shape, g.to_vec()).expect("gradient matches value shape"),
            None => Tensor::zeros(shape),
        }
    }

    /// Gradients of every trainable registry parameter used on the tape.
    pub fn params(&self, tape: &Tape<'_>) -> BTreeMap<String, Tensor> {
        tape.param_vars()
            .iter()
            .filter(|(_, &v)| tape.needs_grad(v))
            .map(|(name, &v)| (name.clone(), self.wrt(tape, v)))
            .collect()
    }

    /// Node indices in the order the backward pass processed them.
    pub fn visit_order(&self) -> &[usize] {
        &self.visited
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::Parameter(format!("temperature must be positive, got {tau}")))
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
