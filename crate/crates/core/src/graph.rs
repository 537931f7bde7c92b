//! Tape-based reverse-mode automatic differentiation with FLOP instrumentation.
//!
//! A [`Graph`] records every operation of one forward pass in evaluation
//! order, so the tape is already topologically sorted and `backward` simply
//! walks it in reverse. Each recorded op also adds its cost to the graph's
//! [`OpCounter`] using the fixed convention in [`cost`].

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{dim_err, Error, Result};
use crate::params::{ParamGrads, ParamId, ParamStore};
use crate::tensor::Tensor;

/// FLOPs charged per operation.
///
/// A multiply-add counts as two FLOPs. Everything else is charged per output
/// element. Shape-only ops (reshape, slicing, concatenation, gathers) are free.
pub mod cost {
    pub const ADD: u64 = 1;
    pub const MUL: u64 = 1;
    pub const SCALE: u64 = 1;
    pub const TANH: u64 = 1;
    /// `cx * x + cy * y` with scalar coefficients; the scalar `tanh` of a gate
    /// parameter is not charged per element.
    pub const BLEND: u64 = 3;
    pub const SOFTMAX: u64 = 5;
    pub const LAYER_NORM: u64 = 8;
    pub const GELU: u64 = 8;
    /// Per logit; the extra FLOP covers the log and the target pick.
    pub const CROSS_ENTROPY: u64 = 6;
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Names under which ops are recorded in [`OpCounter`] and matched by
/// [`Graph::inject_backward_fault`].
pub const OP_NAMES: [&str; 19] = [
    "matmul",
    "matmul_nt",
    "linear",
    "add",
    "mul",
    "scale",
    "blend",
    "softmax",
    "layer_norm",
    "gelu",
    "tanh",
    "slice_cols",
    "concat_cols",
    "concat_rows",
    "reshape",
    "gather",
    "mean_rows",
    "sum",
    "cross_entropy",
];

/// FLOP totals, broken down by operation name.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct OpCounter {
    total_flops: u64,
    per_op_kind: BTreeMap<&'static str, u64>,
}

impl OpCounter {
    pub fn record(&mut self, op: &'static str, flops: u64) {
        self.total_flops += flops;
        *self.per_op_kind.entry(op).or_insert(0) += flops;
    }

    pub fn total_flops(&self) -> u64 {
        self.total_flops
    }

    pub fn per_op_kind(&self) -> &BTreeMap<&'static str, u64> {
        &self.per_op_kind
    }

    pub fn get(&self, op: &str) -> u64 {
        self.per_op_kind.get(op).copied().unwrap_or(0)
    }

    pub fn merge(&mut self, other: &OpCounter) {
        for (op, f) in &other.per_op_kind {
            self.record(op, *f);
        }
    }
}

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Scalar coefficient of a [`Graph::blend`].
#[derive(Debug, Clone, Copy)]
pub enum Coef {
    Const(f64),
    /// `tanh` of a one-element node (a gate parameter).
    Tanh(Var),
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Linear(Var, Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Blend(Var, Var, Coef, Coef),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        rstd: Vec<f64>,
    },
    Gelu(Var),
    Tanh(Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Reshape(Var),
    Gather {
        table: Var,
        rows: Vec<usize>,
    },
    MeanRows(Var),
    Sum(Var),
    CrossEntropy {
        logits: Var,
        target: usize,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param => "param",
            Op::MatMul(..) => "matmul",
            Op::MatMulNt(..) => "matmul_nt",
            Op::Linear(..) => "linear",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Blend(..) => "blend",
            Op::Softmax(_) => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gelu(_) => "gelu",
            Op::Tanh(_) => "tanh",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatCols(_) => "concat_cols",
            Op::ConcatRows(_) => "concat_rows",
            Op::Reshape(_) => "reshape",
            Op::Gather { .. } => "gather",
            Op::MeanRows(_) => "mean_rows",
            Op::Sum(_) => "sum",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }
}

#[derive(Debug)]
enum Value {
    Owned(Vec<f64>),
    Param(ParamId),
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Value,
    op: Op,
    requires_grad: bool,
}

/// One forward pass: the tape, its FLOP counter and (optionally) the
/// parameter store its `Param` leaves read from.
pub struct Graph<'p> {
    params: Option<&'p ParamStore>,
    param_vars: Vec<Option<Var>>,
    nodes: Vec<Node>,
    counter: OpCounter,
    fault: Option<&'static str>,
}

impl core::fmt::Debug for Graph<'_> {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.debug_struct("Graph")
            .field("nodes", &self.nodes.len())
            .field("flops", &self.counter.total_flops())
            .finish()
    }
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Graph<'p> {
    pub fn new() -> Self {
        Self {
            params: None,
            param_vars: Vec::new(),
            nodes: Vec::new(),
            counter: OpCounter::default(),
            fault: None,
        }
    }

    pub fn with_params(params: &'p ParamStore) -> Self {
        Self {
            params: Some(params),
            param_vars: vec![None; params.len()],
            ..Self::new()
        }
    }

    /// Test hook: corrupts the gradient flowing out of every op named `op`.
    #[doc(hidden)]
    pub fn inject_backward_fault(&mut self, op: &'static str) {
        self.fault = Some(op);
    }

    pub fn counter(&self) -> &OpCounter {
        &self.counter
    }

    /// Number of values stored on the tape outside the parameter store:
    /// inputs plus every intermediate kept for the backward pass.
    pub fn activation_values(&self) -> u64 {
        self.nodes
            .iter()
            .filter(|n| !matches!(n.op, Op::Param))
            .map(|n| n.shape.iter().product::<usize>() as u64)
            .sum()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        match &self.nodes[v.0].value {
            Value::Owned(d) => d,
            Value::Param(id) => self
                .params
                .expect("param node without store")
                .get(*id)
                .data(),
        }
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.shape(v), self.value(v).to_vec()).expect("tape node shape")
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[0]
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let id = Var(self.nodes.len());
        self.nodes.push(Node {
            shape,
            value: Value::Owned(data),
            op,
            requires_grad,
        });
        id
    }

    fn push_op(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, flops: u64) -> Var {
        let name = op.name();
        let requires_grad = self.op_inputs(&op).iter().any(|v| self.nodes[v.0].requires_grad);
        if flops > 0 {
            self.counter.record(name, flops);
        }
        self.push(shape, data, op, requires_grad)
    }

    fn op_inputs(&self, op: &Op) -> Vec<Var> {
        match op {
            Op::Leaf | Op::Param => Vec::new(),
            Op::MatMul(a, b) | Op::MatMulNt(a, b) | Op::Add(a, b) | Op::Mul(a, b) => {
                vec![*a, *b]
            }
            Op::Linear(x, w, b) => vec![*x, *w, *b],
            Op::Blend(x, y, cx, cy) => {
                let mut v = vec![*x, *y];
                for c in [cx, cy] {
                    if let Coef::Tanh(s) = c {
                        v.push(*s);
                    }
                }
                v
            }
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::Scale(x, _)
            | Op::Softmax(x)
            | Op::Gelu(x)
            | Op::Tanh(x)
            | Op::SliceCols { x, .. }
            | Op::Reshape(x)
            | Op::MeanRows(x)
            | Op::Sum(x) => vec![*x],
            Op::ConcatCols(xs) | Op::ConcatRows(xs) => xs.clone(),
            Op::Gather { table, .. } => vec![*table],
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }

    /// Adds a data tensor to the tape. It takes part in differentiation only
    /// if `t.requires_grad` is set.
    pub fn input(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad)
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t.shape().to_vec(), t.into_data(), Op::Leaf, false))
    }

    /// Leaf for a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars.get(id.0).copied().flatten() {
            return v;
        }
        let store = self.params.expect("graph has no parameter store");
        let shape = store.get(id).shape().to_vec();
        let v = Var(self.nodes.len());
        self.nodes.push(Node {
            shape,
            value: Value::Param(id),
            op: Op::Param,
            requires_grad: true,
        });
        if self.param_vars.len() <= id.0 {
            self.param_vars.resize(id.0 + 1, None);
        }
        self.param_vars[id.0] = Some(v);
        v
    }

    fn dims2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => dim_err(op, s, &[0, 0]),
        }
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return dim_err(op, self.shape(a), self.shape(b));
        }
        Ok(())
    }

    // ---------------------------------------------------------------------
    // Operations
    // ---------------------------------------------------------------------

    /// `a [m×k] · b [k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2("matmul", a)?;
        let (k2, n) = self.dims2("matmul", b)?;
        if k != k2 {
            return dim_err("matmul", self.shape(a), self.shape(b));
        }
        let out = kernels::matmul(self.value(a), self.value(b), m, k, n);
        Ok(self.push_op(vec![m, n], out, Op::MatMul(a, b), 2 * (m * k * n) as u64))
    }

    /// `a [m×k] · bᵀ` with `b [n×k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2("matmul_nt", a)?;
        let (n, k2) = self.dims2("matmul_nt", b)?;
        if k != k2 {
            return dim_err("matmul_nt", self.shape(a), self.shape(b));
        }
        let out = kernels::matmul_nt(self.value(a), self.value(b), m, k, n);
        Ok(self.push_op(vec![m, n], out, Op::MatMulNt(a, b), 2 * (m * k * n) as u64))
    }

    /// Affine map `x [m×k] · w [k×n] + b [n]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2("linear", x)?;
        let (k2, n) = self.dims2("linear", w)?;
        if k != k2 {
            return dim_err("linear", self.shape(x), self.shape(w));
        }
        if self.shape(b) != [n] {
            return dim_err("linear", self.shape(b), &[n]);
        }
        let mut out = kernels::matmul(self.value(x), self.value(w), m, k, n);
        let bias = self.value(b);
        for row in out.chunks_exact_mut(n) {
            row.iter_mut().zip(bias).for_each(|(o, b)| *o += b);
        }
        let flops = (2 * m * k * n + m * n) as u64;
        Ok(self.push_op(vec![m, n], out, Op::Linear(x, w, b), flops))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out: Vec<f64> = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let flops = cost::ADD * out.len() as u64;
        Ok(self.push_op(self.shape(a).to_vec(), out, Op::Add(a, b), flops))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out: Vec<f64> = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let flops = cost::MUL * out.len() as u64;
        Ok(self.push_op(self.shape(a).to_vec(), out, Op::Mul(a, b), flops))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out: Vec<f64> = self.value(x).iter().map(|v| v * factor).collect();
        let flops = cost::SCALE * out.len() as u64;
        self.push_op(self.shape(x).to_vec(), out, Op::Scale(x, factor), flops)
    }

    fn coef(&self, c: Coef) -> Result<f64> {
        match c {
            Coef::Const(v) => Ok(v),
            Coef::Tanh(s) => {
                if self.value(s).len() != 1 {
                    return dim_err("blend", self.shape(s), &[1]);
                }
                Ok(libm::tanh(self.scalar(s)))
            }
        }
    }

    /// `cx · x + cy · y`, the gated sum used by every residual gate.
    pub fn blend(&mut self, x: Var, y: Var, cx: Coef, cy: Coef) -> Result<Var> {
        self.same_shape("blend", x, y)?;
        let (a, b) = (self.coef(cx)?, self.coef(cy)?);
        let out: Vec<f64> = self
            .value(x)
            .iter()
            .zip(self.value(y))
            .map(|(u, v)| a * u + b * v)
            .collect();
        let flops = cost::BLEND * out.len() as u64;
        Ok(self.push_op(self.shape(x).to_vec(), out, Op::Blend(x, y, cx, cy), flops))
    }

    /// Softmax over the last axis, stabilised by subtracting the row maximum.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let n = *self.shape(x).last().expect("non-empty shape");
        let src = self.value(x);
        if src.iter().any(|v| v.is_nan()) {
            return Err(Error::NonFinite("softmax_rows"));
        }
        let mut out = src.to_vec();
        for row in out.chunks_exact_mut(n) {
            kernels::softmax_in_place(row);
        }
        if out.iter().any(|v| v.is_nan()) {
            return Err(Error::NonFinite("softmax_rows"));
        }
        let flops = cost::SOFTMAX * out.len() as u64;
        Ok(self.push_op(self.shape(x).to_vec(), out, Op::Softmax(x), flops))
    }

    /// Normalises each vector along the last axis, then applies `gain`/`bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let d = *self.shape(x).last().expect("non-empty shape");
        if self.shape(gain) != [d] {
            return dim_err("layer_norm", self.shape(x), self.shape(gain));
        }
        if self.shape(bias) != [d] {
            return dim_err("layer_norm", self.shape(x), self.shape(bias));
        }
        let (g, b) = (self.value(gain), self.value(bias));
        let src = self.value(x);
        let rows = src.len() / d;
        let mut out = vec![0.0; src.len()];
        let mut rstd = Vec::with_capacity(rows);
        for (xr, yr) in src.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
            let mean = xr.iter().sum::<f64>() / d as f64;
            let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let r = 1.0 / libm::sqrt(var + LAYER_NORM_EPS);
            for j in 0..d {
                yr[j] = (xr[j] - mean) * r * g[j] + b[j];
            }
            rstd.push(r);
        }
        let flops = cost::LAYER_NORM * out.len() as u64;
        let op = Op::LayerNorm { x, gain, bias, rstd };
        Ok(self.push_op(self.shape(x).to_vec(), out, op, flops))
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out: Vec<f64> = self.value(x).iter().map(|&v| kernels::gelu(v)).collect();
        let flops = cost::GELU * out.len() as u64;
        self.push_op(self.shape(x).to_vec(), out, Op::Gelu(x), flops)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out: Vec<f64> = self.value(x).iter().map(|&v| libm::tanh(v)).collect();
        let flops = cost::TANH * out.len() as u64;
        self.push_op(self.shape(x).to_vec(), out, Op::Tanh(x), flops)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims2("slice_cols", x)?;
        if len == 0 || start + len > c {
            return dim_err("slice_cols", &[r, c], &[start, len]);
        }
        let out: Vec<f64> = self
            .value(x)
            .chunks_exact(c)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        Ok(self.push_op(vec![r, len], out, Op::SliceCols { x, start }, 0))
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| Error::Contract("concat of nothing".into()))?;
        let (r, _) = self.dims2("concat_cols", first)?;
        let mut widths = Vec::with_capacity(xs.len());
        for &x in xs {
            let (rx, cx) = self.dims2("concat_cols", x)?;
            if rx != r {
                return dim_err("concat_cols", self.shape(first), self.shape(x));
            }
            widths.push(cx);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&x, &w) in xs.iter().zip(&widths) {
                out.extend_from_slice(&self.value(x)[i * w..(i + 1) * w]);
            }
        }
        Ok(self.push_op(vec![r, total], out, Op::ConcatCols(xs.to_vec()), 0))
    }

    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| Error::Contract("concat of nothing".into()))?;
        let (_, c) = self.dims2("concat_rows", first)?;
        let mut rows = 0;
        for &x in xs {
            let (rx, cx) = self.dims2("concat_rows", x)?;
            if cx != c {
                return dim_err("concat_rows", self.shape(first), self.shape(x));
            }
            rows += rx;
        }
        let mut out = Vec::with_capacity(rows * c);
        for &x in xs {
            out.extend_from_slice(self.value(x));
        }
        Ok(self.push_op(vec![rows, c], out, Op::ConcatRows(xs.to_vec()), 0))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).len() || shape.contains(&0) {
            return dim_err("reshape", self.shape(x), shape);
        }
        let out = self.value(x).to_vec();
        Ok(self.push_op(shape.to_vec(), out, Op::Reshape(x), 0))
    }

    /// Rows of `table [V×D]` selected by index (an embedding lookup).
    pub fn gather_rows(&mut self, table: Var, rows: &[usize]) -> Result<Var> {
        let (v, d) = self.dims2("gather_rows", table)?;
        if rows.is_empty() {
            return Err(Error::Contract("gather of no rows".into()));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= v) {
            return Err(Error::Input(alloc::format!("row {bad} out of range for table of {v}")));
        }
        let src = self.value(table);
        let out: Vec<f64> = rows.iter().flat_map(|&r| src[r * d..(r + 1) * d].iter().copied()).collect();
        let op = Op::Gather {
            table,
            rows: rows.to_vec(),
        };
        Ok(self.push_op(vec![rows.len(), d], out, op, 0))
    }

    /// Column means of `x [r×c]`, shape `[1×c]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims2("mean_rows", x)?;
        let mut out = vec![0.0; c];
        for row in self.value(x).chunks_exact(c) {
            out.iter_mut().zip(row).for_each(|(o, v)| *o += v);
        }
        out.iter_mut().for_each(|o| *o /= r as f64);
        Ok(self.push_op(vec![1, c], out, Op::MeanRows(x), (r * c) as u64))
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).iter().sum();
        let flops = self.value(x).len() as u64;
        self.push_op(vec![1], vec![s], Op::Sum(x), flops)
    }

    /// Softmax cross-entropy of one logit vector against a class index.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        let z = self.value(logits);
        if target >= z.len() {
            return Err(Error::Input(alloc::format!(
                "target class {target} out of range for {} logits",
                z.len()
            )));
        }
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + libm::log(z.iter().map(|v| libm::exp(v - max)).sum::<f64>());
        let loss = lse - z[target];
        if !loss.is_finite() {
            return Err(Error::NonFinite("cross_entropy"));
        }
        let flops = cost::CROSS_ENTROPY * z.len() as u64;
        Ok(self.push_op(vec![1], vec![loss], Op::CrossEntropy { logits, target }, flops))
    }

    // ---------------------------------------------------------------------
    // Backward
    // ---------------------------------------------------------------------

    /// Reverse-mode sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(alloc::format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(mut g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if let Some(f) = self.fault {
                if f == node.op.name() {
                    g.iter_mut().for_each(|v| *v *= 1.05);
                }
            }
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            param_vars: self.param_vars.clone(),
        })
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            let n = &self.nodes[v.0];
            if !n.requires_grad {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; n.shape.iter().product()]);
            f(buf);
        };
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(*a, &mut |da| kernels::matmul_nt_acc(da, g, bv, m, n, k));
                acc(*b, &mut |db| kernels::matmul_tn_acc(db, av, g, m, k, n));
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[0];
                let (av, bv) = (self.value(*a), self.value(*b));
                // C = A·Bᵀ: dA = dC·B, dB = dCᵀ·A
                acc(*a, &mut |da| kernels::matmul_acc(da, g, bv, m, n, k));
                acc(*b, &mut |db| kernels::matmul_tn_acc(db, g, av, m, n, k));
            }
            Op::Linear(x, w, b) => {
                let (m, k) = (self.shape(*x)[0], self.shape(*x)[1]);
                let n = self.shape(*w)[1];
                let (xv, wv) = (self.value(*x), self.value(*w));
                acc(*x, &mut |dx| kernels::matmul_nt_acc(dx, g, wv, m, n, k));
                acc(*w, &mut |dw| kernels::matmul_tn_acc(dw, xv, g, m, k, n));
                acc(*b, &mut |db| {
                    for row in g.chunks_exact(n) {
                        db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |da| add_into(da, g));
                acc(*b, &mut |db| add_into(db, g));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(*a, &mut |da| {
                    for ((d, gv), y) in da.iter_mut().zip(g).zip(bv) {
                        *d += gv * y;
                    }
                });
                acc(*b, &mut |db| {
                    for ((d, gv), x) in db.iter_mut().zip(g).zip(av) {
                        *d += gv * x;
                    }
                });
            }
            Op::Scale(x, f) => acc(*x, &mut |dx| {
                dx.iter_mut().zip(g).for_each(|(d, v)| *d += f * v);
            }),
            Op::Blend(x, y, cx, cy) => {
                let a = self.coef(*cx).expect("validated in forward");
                let b = self.coef(*cy).expect("validated in forward");
                acc(*x, &mut |dx| dx.iter_mut().zip(g).for_each(|(d, v)| *d += a * v));
                acc(*y, &mut |dy| dy.iter_mut().zip(g).for_each(|(d, v)| *d += b * v));
                for (c, src, t) in [(cx, *x, a), (cy, *y, b)] {
                    if let Coef::Tanh(s) = c {
                        let dot: f64 = g.iter().zip(self.value(src)).map(|(u, v)| u * v).sum();
                        acc(*s, &mut |ds| ds[0] += (1.0 - t * t) * dot);
                    }
                }
            }
            Op::Softmax(x) => {
                let n = *node.shape.last().expect("shape");
                let y = match &node.value {
                    Value::Owned(d) => d,
                    Value::Param(_) => unreachable!(),
                };
                acc(*x, &mut |dx| {
                    for ((dr, gr), yr) in dx.chunks_exact_mut(n).zip(g.chunks_exact(n)).zip(y.chunks_exact(n)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            dr[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm { x, gain, bias, rstd } => {
                let d = *node.shape.last().expect("shape");
                let xv = self.value(*x);
                let gv = self.value(*gain);
                // Normalised inputs, recomputed from the saved statistics.
                let mut xhat = vec![0.0; xv.len()];
                for ((xr, hr), r) in xv.chunks_exact(d).zip(xhat.chunks_exact_mut(d)).zip(rstd) {
                    let mean = xr.iter().sum::<f64>() / d as f64;
                    for j in 0..d {
                        hr[j] = (xr[j] - mean) * r;
                    }
                }
                acc(*x, &mut |dx| {
                    for (((dr, gr), hr), r) in dx
                        .chunks_exact_mut(d)
                        .zip(g.chunks_exact(d))
                        .zip(xhat.chunks_exact(d))
                        .zip(rstd)
                    {
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for j in 0..d {
                            let dh = gr[j] * gv[j];
                            mean_dh += dh;
                            mean_dh_h += dh * hr[j];
                        }
                        mean_dh /= d as f64;
                        mean_dh_h /= d as f64;
                        for j in 0..d {
                            let dh = gr[j] * gv[j];
                            dr[j] += r * (dh - mean_dh - hr[j] * mean_dh_h);
                        }
                    }
                });
                acc(*gain, &mut |dg| {
                    for (gr, hr) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                        for j in 0..d {
                            dg[j] += gr[j] * hr[j];
                        }
                    }
                });
                acc(*bias, &mut |db| {
                    for gr in g.chunks_exact(d) {
                        add_into(db, gr);
                    }
                });
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                acc(*x, &mut |dx| {
                    for ((d, gv), &v) in dx.iter_mut().zip(g).zip(xv) {
                        *d += gv * kernels::gelu_grad(v);
                    }
                });
            }
            Op::Tanh(x) => {
                let y = match &node.value {
                    Value::Owned(d) => d,
                    Value::Param(_) => unreachable!(),
                };
                acc(*x, &mut |dx| {
                    for ((d, gv), t) in dx.iter_mut().zip(g).zip(y) {
                        *d += gv * (1.0 - t * t);
                    }
                });
            }
            Op::SliceCols { x, start } => {
                let c = self.shape(*x)[1];
                let len = node.shape[1];
                acc(*x, &mut |dx| {
                    for (dr, gr) in dx.chunks_exact_mut(c).zip(g.chunks_exact(len)) {
                        add_into(&mut dr[*start..start + len], gr);
                    }
                });
            }
            Op::ConcatCols(xs) => {
                let total = node.shape[1];
                let mut offset = 0;
                for &x in xs {
                    let w = self.shape(x)[1];
                    acc(x, &mut |dx| {
                        for (dr, gr) in dx.chunks_exact_mut(w).zip(g.chunks_exact(total)) {
                            add_into(dr, &gr[offset..offset + w]);
                        }
                    });
                    offset += w;
                }
            }
            Op::ConcatRows(xs) => {
                let mut offset = 0;
                for &x in xs {
                    let len = self.value(x).len();
                    acc(x, &mut |dx| add_into(dx, &g[offset..offset + len]));
                    offset += len;
                }
            }
            Op::Reshape(x) => acc(*x, &mut |dx| add_into(dx, g)),
            Op::Gather { table, rows } => {
                let d = node.shape[1];
                acc(*table, &mut |dt| {
                    for (&r, gr) in rows.iter().zip(g.chunks_exact(d)) {
                        add_into(&mut dt[r * d..(r + 1) * d], gr);
                    }
                });
            }
            Op::MeanRows(x) => {
                let (r, c) = (self.shape(*x)[0], self.shape(*x)[1]);
                acc(*x, &mut |dx| {
                    for dr in dx.chunks_exact_mut(c) {
                        for j in 0..c {
                            dr[j] += g[j] / r as f64;
                        }
                    }
                });
            }
            Op::Sum(x) => acc(*x, &mut |dx| dx.iter_mut().for_each(|d| *d += g[0])),
            Op::CrossEntropy { logits, target } => {
                let z = self.value(*logits);
                let mut p = z.to_vec();
                kernels::softmax_in_place(&mut p);
                acc(*logits, &mut |dz| {
                    for (j, (d, pj)) in dz.iter_mut().zip(&p).enumerate() {
                        let onehot = if j == *target { 1.0 } else { 0.0 };
                        *d += g[0] * (pj - onehot);
                    }
                });
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

/// Result of [`Graph::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    param_vars: Vec<Option<Var>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. a node, if the node was reached.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.param_vars
            .get(id.index())
            .copied()
            .flatten()
            .and_then(|v| self.get(v))
    }

    /// Gradients of every parameter used in the pass, indexed like the store.
    pub fn into_params(mut self) -> ParamGrads {
        let out = self
            .param_vars
            .iter()
            .map(|v| v.and_then(|v| self.grads[v.0].take()))
            .collect();
        ParamGrads(out)
    }
}

pub(crate) mod kernels {
    /// `a [m×k] · b [k×n]`.
    pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> alloc::vec::Vec<f64> {
        let mut out = alloc::vec![0.0; m * n];
        matmul_acc(&mut out, a, b, m, k, n);
        out
    }

    /// `out += a [m×k] · b [k×n]`.
    pub fn matmul_acc(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let s = a[i * k + p];
                if s == 0.0 {
                    continue;
                }
                let brow = &b[p * n..(p + 1) * n];
                for (o, bv) in orow.iter_mut().zip(brow) {
                    *o += s * bv;
                }
            }
        }
    }

    /// `a [m×k] · bᵀ` with `b [n×k]`.
    pub fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> alloc::vec::Vec<f64> {
        let mut out = alloc::vec![0.0; m * n];
        matmul_nt_acc(&mut out, a, b, m, k, n);
        out
    }

    /// `out [m×n] += a [m×k] · bᵀ` with `b [n×k]`.
    pub fn matmul_nt_acc(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
        for i in 0..m {
            let arow = &a[i * k..(i + 1) * k];
            for j in 0..n {
                let brow = &b[j * k..(j + 1) * k];
                out[i * n + j] += dot(arow, brow);
            }
        }
    }

    /// `out [k×n] += aᵀ · b` with `a [m×k]`, `b [m×n]`.
    pub fn matmul_tn_acc(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
        for i in 0..m {
            let brow = &b[i * n..(i + 1) * n];
            for p in 0..k {
                let s = a[i * k + p];
                if s == 0.0 {
                    continue;
                }
                let orow = &mut out[p * n..(p + 1) * n];
                for (o, bv) in orow.iter_mut().zip(brow) {
                    *o += s * bv;
                }
            }
        }
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        // Four accumulators let the compiler vectorise the reduction.
        let mut acc = [0.0; 4];
        let chunks = a.len() / 4;
        for c in 0..chunks {
            for l in 0..4 {
                acc[l] += a[c * 4 + l] * b[c * 4 + l];
            }
        }
        let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
        for i in chunks * 4..a.len() {
            s += a[i] * b[i];
        }
        s
    }

    pub fn softmax_in_place(row: &mut [f64]) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = libm::exp(*v - max);
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }

    const FRAC_1_SQRT_2: f64 = core::f64::consts::FRAC_1_SQRT_2;
    const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

    pub fn gelu(x: f64) -> f64 {
        0.5 * x * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
    }

    pub fn gelu_grad(x: f64) -> f64 {
        0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2)) + x * FRAC_1_SQRT_2PI * libm::exp(-0.5 * x * x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn matmul_identity_and_hand_product() {
        let mut g = Graph::new();
        let i = g.input(&Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap());
        let v = g.input(&Tensor::from_rows(&[&[3.0], &[5.0]]).unwrap());
        let out = g.matmul(i, v).unwrap();
        assert_eq!(g.value(out), &[3.0, 5.0]);

        let a = g.input(&Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap());
        let b = g.input(&Tensor::from_rows(&[&[5.0], &[6.0]]).unwrap());
        let out = g.matmul(a, b).unwrap();
        assert_eq!(g.value(out), &[17.0, 39.0]);
    }

    #[test]
    fn matmul_flops_and_shape_errors() {
        let mut g = Graph::new();
        let a = g.input(&Tensor::zeros(&[2, 3]));
        let b = g.input(&Tensor::zeros(&[3, 4]));
        g.matmul(a, b).unwrap();
        assert_eq!(g.counter().total_flops(), 48);
        assert_eq!(g.counter().get("matmul"), 48);

        let err = g.matmul(a, a).unwrap_err();
        assert_eq!(
            err,
            Error::Dimension {
                op: "matmul",
                lhs: vec![2, 3],
                rhs: vec![2, 3]
            }
        );
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let x = g.input(&Tensor::from_rows(&[&[0.0, 0.0, 0.0], &[1000.0, 0.0, 0.0]]).unwrap());
        let y = g.softmax_rows(x).unwrap();
        let third = 1.0 / 3.0;
        assert!(close(&g.value(y)[..3], &[third; 3], 1e-15));
        assert!(close(&g.value(y)[3..], &[1.0, 0.0, 0.0], 1e-300));

        let x = g.input(&Tensor::from_rows(&[&[1.0, 2.0]]).unwrap());
        let y = g.softmax_rows(x).unwrap();
        // e/(e+e²) and e²/(e+e²)
        let e1 = core::f64::consts::E;
        let e2 = e1 * e1;
        let expect = [e1 / (e1 + e2), e2 / (e1 + e2)];
        assert!(close(g.value(y), &expect, 1e-15));
        assert!(close(g.value(y), &[0.26894, 0.73106], 1e-5));

        let x = g.input(&Tensor::from_rows(&[&[f64::NAN, 1.0]]).unwrap());
        assert_eq!(g.softmax_rows(x).unwrap_err(), Error::NonFinite("softmax_rows"));
    }

    #[test]
    fn layer_norm_examples() {
        let mut g = Graph::new();
        let ones = g.input(&Tensor::filled(&[2], 1.0));
        let zeros = g.input(&Tensor::zeros(&[2]));

        let c = g.input(&Tensor::filled(&[1, 2], 7.5));
        let y = g.layer_norm(c, ones, zeros).unwrap();
        assert_eq!(g.value(y), &[0.0, 0.0]);

        let x = g.input(&Tensor::from_rows(&[&[1.0, 3.0]]).unwrap());
        let y = g.layer_norm(x, ones, zeros).unwrap();
        assert!(close(g.value(y), &[-1.0, 1.0], 1e-4));

        let bias = g.input(&Tensor::new(&[2], vec![0.25, -4.0]).unwrap());
        let y = g.layer_norm(x, zeros, bias).unwrap();
        assert_eq!(g.value(y), &[0.25, -4.0]);

        let wrong = g.input(&Tensor::filled(&[3], 1.0));
        assert!(matches!(g.layer_norm(x, wrong, zeros), Err(Error::Dimension { .. })));
    }

    #[test]
    fn backward_simple_cases() {
        let mut g = Graph::new();
        let x = g.input(&Tensor::zeros(&[2, 2]).with_grad());
        let loss = g.sum(x);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[1.0; 4]);

        let mut g = Graph::new();
        let x = g.input(&Tensor::new(&[2], vec![1.0, 2.0]).unwrap().with_grad());
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[2.0, 4.0]);

        assert!(matches!(g.backward(sq), Err(Error::Contract(_))));
    }

    #[test]
    fn fan_out_accumulates() {
        let mut g = Graph::new();
        let x = g.input(&Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap().with_grad());
        let a = g.scale(x, 3.0);
        let b = g.add(a, x).unwrap();
        let loss = g.sum(b);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[4.0; 3]);
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_onehot() {
        let mut g = Graph::new();
        let z = g.input(&Tensor::from_rows(&[&[0.3, -1.2, 2.0]]).unwrap().with_grad());
        let loss = g.cross_entropy(z, 1).unwrap();
        let grads = g.backward(loss).unwrap();
        let mut p = vec![0.3, -1.2, 2.0];
        kernels::softmax_in_place(&mut p);
        p[1] -= 1.0;
        assert!(close(grads.get(z).unwrap(), &p, 1e-15));
    }

    #[test]
    fn replaying_forward_doubles_flops() {
        let mut g = Graph::new();
        let a = g.input(&Tensor::filled(&[3, 4], 0.5));
        let w = g.input(&Tensor::filled(&[4, 2], 0.1));
        let b = g.input(&Tensor::zeros(&[2]));
        let ones = g.input(&Tensor::filled(&[2], 1.0));
        let pass = |g: &mut Graph| {
            let h = g.linear(a, w, b).unwrap();
            let h = g.layer_norm(h, ones, b).unwrap();
            let h = g.softmax_rows(h).unwrap();
            g.gelu(h);
        };
        pass(&mut g);
        let once = g.counter().clone();
        pass(&mut g);
        assert_eq!(g.counter().total_flops(), 2 * once.total_flops());
        let sum: u64 = g.counter().per_op_kind().values().sum();
        assert_eq!(sum, g.counter().total_flops());
        // linear 2·3·4·2 + 3·2, layer_norm 8·6, softmax 5·6, gelu 8·6
        assert_eq!(once.total_flops(), 54 + 48 + 30 + 48);
    }
}
