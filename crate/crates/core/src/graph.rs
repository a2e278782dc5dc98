//! Recorded-computation reverse-mode differentiation.
//!
//! Values are computed eagerly as nodes are added, so a [`Graph`] doubles as
//! the forward evaluator. [`Graph::backward`] walks the nodes in reverse
//! creation order, which is a valid reverse topological order because every
//! node can only reference earlier nodes.
//!
//! Modules that need a fused kernel (hash lookups, B-spline bases, the
//! splatting renderer, SSIM) plug in through [`CustomOp`].

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, Ordering};

use crate::error::{Error, Result};
use crate::tensor::{matmul_at_into, matmul_bt_into, matmul_into, NdArray};

static FAULT_INJECTION: AtomicBool = AtomicBool::new(false);

/// Test hook: when enabled, the silu backward rule is scaled by 1.01 so
/// verification suites can prove they catch a broken analytic gradient.
pub fn set_fault_injection(enabled: bool) {
    FAULT_INJECTION.store(enabled, Ordering::SeqCst);
}

pub fn fault_injection_enabled() -> bool {
    FAULT_INJECTION.load(Ordering::SeqCst)
}

/// Handle to a node in a [`Graph`].
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A primitive whose forward value is computed by the caller and whose
/// vector-Jacobian product is supplied here.
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &'static str;

    /// Returns one gradient per input (None when `needs[i]` is false or the
    /// input is not differentiable).
    fn backward(
        &self,
        inputs: &[&NdArray],
        output: &NdArray,
        grad: &NdArray,
        needs: &[bool],
    ) -> Vec<Option<NdArray>>;
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Exp(Var),
    Log(Var),
    Sin(Var),
    Cos(Var),
    Abs(Var),
    Sigmoid(Var),
    Silu(Var),
    Softmax(Var),
    Sum(Var),
    Mean(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    BroadcastRows(Var),
    Reshape(Var),
    Custom(Box<dyn CustomOp>, Vec<Var>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Neg(..) => "neg",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Sin(..) => "sin",
            Op::Cos(..) => "cos",
            Op::Abs(..) => "abs",
            Op::Sigmoid(..) => "sigmoid",
            Op::Silu(..) => "silu",
            Op::Softmax(..) => "softmax",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::ConcatCols(..) => "concat_cols",
            Op::ConcatRows(..) => "concat_rows",
            Op::SliceCols(..) => "slice_cols",
            Op::SliceRows(..) => "slice_rows",
            Op::BroadcastRows(..) => "broadcast_rows",
            Op::Reshape(..) => "reshape",
            Op::Custom(op, _) => op.name(),
        }
    }
}

struct Node {
    value: NdArray,
    op: Op,
    requires_grad: bool,
    param: Option<String>,
    label: Option<String>,
}

/// Recorded computation. Not `Sync`; build one graph per thread.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    macs: u64,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<NdArray>>,
    params: BTreeMap<String, NdArray>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&NdArray> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient per parameter name; repeated uses of a name are summed.
    pub fn params(&self) -> &BTreeMap<String, NdArray> {
        &self.params
    }

    pub fn into_params(self) -> BTreeMap<String, NdArray> {
        self.params
    }
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

    /// Multiply-accumulates performed by matmuls and kernels recorded so far.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    pub fn add_macs(&mut self, n: u64) {
        self.macs += n;
    }

    pub fn value(&self, v: Var) -> &NdArray {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Attach a human-readable label used in shape errors.
    pub fn label(&mut self, v: Var, label: impl Into<String>) -> Var {
        self.nodes[v.0].label = Some(label.into());
        v
    }

    fn describe(&self, v: Var) -> String {
        let n = &self.nodes[v.0];
        match (&n.label, &n.param) {
            (Some(l), _) => format!("{}#{} `{}`", n.op.name(), v.0, l),
            (None, Some(p)) => format!("param#{} `{}`", v.0, p),
            (None, None) => format!("{}#{}", n.op.name(), v.0),
        }
    }

    fn push(&mut self, value: NdArray, op: Op) -> Var {
        let requires_grad = match &op {
            Op::Leaf => false,
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::MatMul(a, b) => {
                self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad
            }
            Op::ConcatCols(vs) | Op::ConcatRows(vs) | Op::Custom(_, vs) => {
                vs.iter().any(|v| self.nodes[v.0].requires_grad)
            }
            Op::Neg(a)
            | Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Transpose(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Sin(a)
            | Op::Cos(a)
            | Op::Abs(a)
            | Op::Sigmoid(a)
            | Op::Silu(a)
            | Op::Softmax(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::SliceCols(a, _)
            | Op::SliceRows(a, _)
            | Op::BroadcastRows(a)
            | Op::Reshape(a) => self.nodes[a.0].requires_grad,
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
            label: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: NdArray) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Differentiable leaf that is not a named parameter.
    pub fn variable(&mut self, value: NdArray) -> Var {
        let v = self.push(value, Op::Leaf);
        self.nodes[v.0].requires_grad = true;
        v
    }

    /// Named trainable leaf; its gradient is reported under `name`.
    pub fn param(&mut self, name: &str, value: NdArray) -> Var {
        let v = self.variable(value);
        self.nodes[v.0].param = Some(name.to_string());
        v
    }

    fn same_shape(&self, op: &str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                format!("{} of {} and {}", op, self.describe(a), self.describe(b)),
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.push(v, Op::Sub(a, b)))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("div", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x / y);
        Ok(self.push(v, Op::Div(a, b)))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| -x);
        self.push(v, Op::Neg(a))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x * s);
        self.push(v, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x + s);
        self.push(v, Op::AddScalar(a))
    }

    /// Affine map `a·s + b`, a common standardization step.
    pub fn affine(&mut self, a: Var, s: f64, b: f64) -> Var {
        let scaled = self.scale(a, s);
        self.add_scalar(scaled, b)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape(
                format!("matmul of {} and {}", self.describe(a), self.describe(b)),
                format!("{:?} x {:?}", sa, sb),
            ));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        matmul_into(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        self.macs += (m * k * n) as u64;
        Ok(self.push(NdArray::matrix(m, n, out)?, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        if self.shape(a).len() != 2 {
            return Err(Error::shape(self.describe(a), "transpose needs 2-D"));
        }
        let v = self.value(a).transpose();
        Ok(self.push(v, Op::Transpose(a)))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::ln);
        self.push(v, Op::Log(a))
    }

    pub fn sin(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::sin);
        self.push(v, Op::Sin(a))
    }

    pub fn cos(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::cos);
        self.push(v, Op::Cos(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::abs);
        self.push(v, Op::Abs(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    /// Smooth base activation `x·sigmoid(x)`.
    pub fn silu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * sigmoid(x));
        self.push(v, Op::Silu(a))
    }

    /// Row-wise softmax over the last axis. The row maximum is subtracted
    /// before exponentiation, so rows of equal logits give exactly uniform
    /// probabilities.
    pub fn softmax(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let c = x.cols();
        let mut out = x.clone();
        for row in out.data_mut().chunks_mut(c) {
            softmax_in_place(row);
        }
        self.push(out, Op::Softmax(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(NdArray::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let s = x.sum() / x.len() as f64;
        self.push(NdArray::scalar(s), Op::Mean(a))
    }

    /// Concatenate 2-D arrays along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.rows_of(parts[0]);
        for &p in parts {
            if self.shape(p).len() != 2 || self.rows_of(p) != rows {
                return Err(Error::shape(
                    format!("concat_cols input {}", self.describe(p)),
                    format!("expected {} rows, got shape {:?}", rows, self.shape(p)),
                ));
            }
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        Ok(self.push(
            NdArray::matrix(rows, total, out)?,
            Op::ConcatCols(parts.to_vec()),
        ))
    }

    /// Concatenate 2-D arrays along rows.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.value(parts[0]).cols();
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            if self.shape(p).len() != 2 || self.value(p).cols() != cols {
                return Err(Error::shape(
                    format!("concat_rows input {}", self.describe(p)),
                    format!("expected {} cols, got shape {:?}", cols, self.shape(p)),
                ));
            }
            rows += self.rows_of(p);
            out.extend_from_slice(self.value(p).data());
        }
        Ok(self.push(
            NdArray::matrix(rows, cols, out)?,
            Op::ConcatRows(parts.to_vec()),
        ))
    }

    fn rows_of(&self, v: Var) -> usize {
        self.value(v).rows()
    }

    /// Columns `start..start+len` of a 2-D array.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let x = self.value(a);
        if x.shape().len() != 2 || start + len > x.cols() {
            return Err(Error::shape(
                self.describe(a),
                format!("slice_cols {}..{} of {:?}", start, start + len, x.shape()),
            ));
        }
        let rows = x.rows();
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&x.row(r)[start..start + len]);
        }
        Ok(self.push(NdArray::matrix(rows, len, out)?, Op::SliceCols(a, start)))
    }

    /// Rows `start..start+len` of a 2-D array.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let x = self.value(a);
        if x.shape().len() != 2 || start + len > x.rows() {
            return Err(Error::shape(
                self.describe(a),
                format!("slice_rows {}..{} of {:?}", start, start + len, x.shape()),
            ));
        }
        let c = x.cols();
        let out = x.data()[start * c..(start + len) * c].to_vec();
        Ok(self.push(NdArray::matrix(len, c, out)?, Op::SliceRows(a, start)))
    }

    /// Repeat a `1×c` row `n` times.
    pub fn broadcast_rows(&mut self, a: Var, n: usize) -> Result<Var> {
        let x = self.value(a);
        if x.rows() != 1 {
            return Err(Error::shape(
                self.describe(a),
                format!("broadcast_rows needs one row, got {:?}", x.shape()),
            ));
        }
        let c = x.cols();
        let mut out = Vec::with_capacity(n * c);
        for _ in 0..n {
            out.extend_from_slice(x.data());
        }
        Ok(self.push(NdArray::matrix(n, c, out)?, Op::BroadcastRows(a)))
    }

    /// `x + broadcast(bias)` for an `n×c` matrix and a `1×c` bias row.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let n = self.value(x).rows();
        let b = self.broadcast_rows(bias, n)?;
        self.add(x, b)
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let v = self.value(a).clone().reshaped(shape).map_err(|_| {
            Error::shape(self.describe(a), format!("cannot reshape {:?}", self.shape(a)))
        })?;
        Ok(self.push(v, Op::Reshape(a)))
    }

    /// Record a fused kernel whose forward value was already computed.
    pub fn custom(
        &mut self,
        op: impl CustomOp + 'static,
        inputs: &[Var],
        output: NdArray,
        macs: u64,
    ) -> Var {
        self.macs += macs;
        self.push(output, Op::Custom(Box::new(op), inputs.to_vec()))
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<NdArray>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(NdArray::full(lv.shape(), 1.0));
        let fault = fault_injection_enabled();

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let y = &node.value;
            let send = |grads: &mut Vec<Option<NdArray>>, v: Var, delta: NdArray| {
                if !self.nodes[v.0].requires_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&delta),
                    slot @ None => *slot = Some(delta),
                }
            };
            let val = |v: Var| &self.nodes[v.0].value;
            let needs = |v: Var| self.nodes[v.0].requires_grad;
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    send(&mut grads, *a, g.clone());
                    send(&mut grads, *b, g.clone());
                }
                Op::Sub(a, b) => {
                    send(&mut grads, *a, g.clone());
                    send(&mut grads, *b, g.map(|x| -x));
                }
                Op::Mul(a, b) => {
                    if needs(*a) {
                        send(&mut grads, *a, g.zip_map(val(*b), |gy, bv| gy * bv));
                    }
                    if needs(*b) {
                        send(&mut grads, *b, g.zip_map(val(*a), |gy, av| gy * av));
                    }
                }
                Op::Div(a, b) => {
                    if needs(*a) {
                        send(&mut grads, *a, g.zip_map(val(*b), |gy, bv| gy / bv));
                    }
                    if needs(*b) {
                        let mut d = g.zip_map(y, |gy, yv| gy * yv);
                        d = d.zip_map(val(*b), |t, bv| -t / bv);
                        send(&mut grads, *b, d);
                    }
                }
                Op::Neg(a) => send(&mut grads, *a, g.map(|x| -x)),
                Op::Scale(a, s) => {
                    let s = *s;
                    send(&mut grads, *a, g.map(|x| x * s));
                }
                Op::AddScalar(a) => send(&mut grads, *a, g.clone()),
                Op::MatMul(a, b) => {
                    let (va, vb) = (val(*a), val(*b));
                    let (m, k, n) = (va.rows(), va.cols(), vb.cols());
                    if needs(*a) {
                        let mut da = vec![0.0; m * k];
                        matmul_bt_into(g.data(), vb.data(), &mut da, m, n, k);
                        send(&mut grads, *a, NdArray::matrix(m, k, da)?);
                    }
                    if needs(*b) {
                        let mut db = vec![0.0; k * n];
                        matmul_at_into(va.data(), g.data(), &mut db, m, k, n);
                        send(&mut grads, *b, NdArray::matrix(k, n, db)?);
                    }
                }
                Op::Transpose(a) => send(&mut grads, *a, g.transpose()),
                Op::Exp(a) => send(&mut grads, *a, g.zip_map(y, |gy, yv| gy * yv)),
                Op::Log(a) => send(&mut grads, *a, g.zip_map(val(*a), |gy, x| gy / x)),
                Op::Sin(a) => send(&mut grads, *a, g.zip_map(val(*a), |gy, x| gy * x.cos())),
                Op::Cos(a) => send(&mut grads, *a, g.zip_map(val(*a), |gy, x| -gy * x.sin())),
                Op::Abs(a) => send(
                    &mut grads,
                    *a,
                    g.zip_map(val(*a), |gy, x| {
                        if x > 0.0 {
                            gy
                        } else if x < 0.0 {
                            -gy
                        } else {
                            0.0
                        }
                    }),
                ),
                Op::Sigmoid(a) => send(&mut grads, *a, g.zip_map(y, |gy, s| gy * s * (1.0 - s))),
                Op::Silu(a) => {
                    let k = if fault { 1.01 } else { 1.0 };
                    send(
                        &mut grads,
                        *a,
                        g.zip_map(val(*a), |gy, x| {
                            let s = sigmoid(x);
                            k * gy * (s + x * s * (1.0 - s))
                        }),
                    )
                }
                Op::Softmax(a) => {
                    let c = y.cols();
                    let mut d = g.clone();
                    for (drow, yrow) in d.data_mut().chunks_mut(c).zip(y.data().chunks(c)) {
                        let s: f64 = drow.iter().zip(yrow).map(|(gv, yv)| gv * yv).sum();
                        for (gv, yv) in drow.iter_mut().zip(yrow) {
                            *gv = yv * (*gv - s);
                        }
                    }
                    send(&mut grads, *a, d);
                }
                Op::Sum(a) => {
                    let gs = g.data()[0];
                    send(&mut grads, *a, NdArray::full(val(*a).shape(), gs));
                }
                Op::Mean(a) => {
                    let x = val(*a);
                    let gs = g.data()[0] / x.len() as f64;
                    send(&mut grads, *a, NdArray::full(x.shape(), gs));
                }
                Op::ConcatCols(parts) => {
                    let total = g.cols();
                    let mut offset = 0;
                    for &p in parts {
                        let pc = val(p).cols();
                        if needs(p) {
                            let rows = g.rows();
                            let mut d = Vec::with_capacity(rows * pc);
                            for r in 0..rows {
                                d.extend_from_slice(&g.data()[r * total + offset..r * total + offset + pc]);
                            }
                            send(&mut grads, p, NdArray::matrix(rows, pc, d)?);
                        }
                        offset += pc;
                    }
                }
                Op::ConcatRows(parts) => {
                    let c = g.cols();
                    let mut offset = 0;
                    for &p in parts {
                        let pr = val(p).rows();
                        if needs(p) {
                            let d = g.data()[offset * c..(offset + pr) * c].to_vec();
                            send(&mut grads, p, NdArray::matrix(pr, c, d)?);
                        }
                        offset += pr;
                    }
                }
                Op::SliceCols(a, start) => {
                    let x = val(*a);
                    let (rows, c, len) = (x.rows(), x.cols(), g.cols());
                    let mut d = NdArray::zeros(x.shape());
                    for r in 0..rows {
                        d.data_mut()[r * c + start..r * c + start + len].copy_from_slice(g.row(r));
                    }
                    send(&mut grads, *a, d);
                }
                Op::SliceRows(a, start) => {
                    let x = val(*a);
                    let c = x.cols();
                    let mut d = NdArray::zeros(x.shape());
                    d.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                    send(&mut grads, *a, d);
                }
                Op::BroadcastRows(a) => {
                    let c = g.cols();
                    let mut d = vec![0.0; c];
                    for row in g.data().chunks(c) {
                        for (acc, v) in d.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    let shape = val(*a).shape().to_vec();
                    send(&mut grads, *a, NdArray::new(shape, d)?);
                }
                Op::Reshape(a) => {
                    let shape = val(*a).shape().to_vec();
                    send(&mut grads, *a, g.clone().reshaped(shape)?);
                }
                Op::Custom(op, inputs) => {
                    let ins: Vec<&NdArray> = inputs.iter().map(|&v| val(v)).collect();
                    let need: Vec<bool> = inputs.iter().map(|&v| needs(v)).collect();
                    let ds = op.backward(&ins, y, &g, &need);
                    for (&v, d) in inputs.iter().zip(ds) {
                        if let Some(d) = d {
                            debug_assert_eq!(d.shape(), val(v).shape(), "{} backward", op.name());
                            send(&mut grads, v, d);
                        }
                    }
                }
            }
        }

        let mut params: BTreeMap<String, NdArray> = BTreeMap::new();
        for (node, g) in self.nodes.iter().zip(&grads) {
            if let (Some(name), Some(g)) = (&node.param, g) {
                match params.get_mut(name) {
                    Some(acc) => acc.add_assign(g),
                    None => {
                        params.insert(name.clone(), g.clone());
                    }
                }
            }
        }
        Ok(Gradients { grads, params })
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_forward_and_backward() {
        let mut g = Graph::new();
        let x = g.param("x", NdArray::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        assert_eq!(g.value(y).data(), &[9.0]);
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.params()["x"].data(), &[6.0]);
    }

    #[test]
    fn softmax_symmetric_and_exp_identity() {
        let mut g = Graph::new();
        let x = g.constant(NdArray::matrix(1, 2, vec![0.0, 0.0]).unwrap());
        let s = g.softmax(x);
        assert_eq!(g.value(s).data(), &[0.5, 0.5]);
        let z = g.constant(NdArray::scalar(0.0));
        let e = g.exp(z);
        assert_eq!(g.value(e).data(), &[1.0]);
    }

    #[test]
    fn sigmoid_sum_gradient() {
        let mut g = Graph::new();
        let x = g.param("x", NdArray::zeros(&[2, 3]));
        let s = g.sigmoid(x);
        let l = g.sum(s);
        let grads = g.backward(l).unwrap();
        assert!(grads.params()["x"].data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let x = g.param("x", NdArray::zeros(&[2, 2]));
        let y = g.exp(x);
        assert!(matches!(g.backward(y), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn shape_error_names_node() {
        let mut g = Graph::new();
        let a = g.param("weights", NdArray::zeros(&[2, 3]));
        let b = g.constant(NdArray::zeros(&[2, 2]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("weights"), "{err}");
        let c = g.constant(NdArray::zeros(&[3, 3]));
        let c = g.label(c, "bias_block");
        let err = g.add(b, c).unwrap_err().to_string();
        assert!(err.contains("bias_block"), "{err}");
    }

    #[test]
    fn repeated_param_accumulates() {
        let mut g = Graph::new();
        let a = g.param("w", NdArray::scalar(2.0));
        let b = g.param("w", NdArray::scalar(2.0));
        let y = g.mul(a, b).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.params()["w"].data(), &[4.0]);
    }
}
