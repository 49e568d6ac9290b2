//! Reverse-mode automatic differentiation over whole tensors.
//!
//! A [`Tape`] records every operation as a node holding its forward value.
//! Nodes are appended in evaluation order, so the node index is already a
//! topological order and [`Tape::backward`] simply walks it in reverse.
//! Broadcasting is limited to tensor-scalar ops; use [`Tape::expand`] to
//! repeat a tensor along a new leading axis.

use crate::error::{Error, Result};
use crate::parallel::Execution;
use crate::tensor::{matmul_nn, matmul_nt, matmul_tn, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Binary(BinaryOp, usize, usize),
    AddScalar(usize),
    MulScalar(usize, f64),
    PowScalar(usize, f64),
    Exp(usize),
    Log(usize),
    Matmul {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Bmm {
        a: usize,
        b: usize,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    SumAll(usize),
    SumAxis {
        a: usize,
        outer: usize,
        len: usize,
        inner: usize,
    },
    Relu(usize),
    Gelu(usize),
    Sigmoid(usize),
    Tanh(usize),
    Softmax(usize),
    LogSoftmax(usize),
    LayerNorm {
        a: usize,
        rstd: Vec<f64>,
    },
    StopGradient,
    Reshape(usize),
    Permute {
        a: usize,
        perm: Vec<usize>,
    },
    Slice {
        a: usize,
        outer: usize,
        len: usize,
        inner: usize,
        start: usize,
        end: usize,
    },
    Concat {
        parts: Vec<usize>,
        outer: usize,
        inner: usize,
        lens: Vec<usize>,
    },
    Expand {
        a: usize,
        times: usize,
    },
    IndexSelect {
        a: usize,
        indices: Vec<usize>,
    },
    ScatterRows {
        a: usize,
        indices: Vec<usize>,
    },
    CrossEntropy {
        a: usize,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

/// Gradient tape. One tape records one forward pass and supports a single
/// backward pass.
#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Option<Vec<Option<Vec<f64>>>>,
    exec: Execution,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

fn check_finite(op: &'static str, t: &Tensor) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

/// `(outer, len, inner)` decomposition of `shape` around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Gathers `src` (with `src_shape`) into the layout given by `perm`.
fn permute_data(src: &[f64], src_shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<f64>) {
    let out_shape: Vec<usize> = perm.iter().map(|&p| src_shape[p]).collect();
    let src_strides = strides(src_shape);
    let step: Vec<usize> = perm.iter().map(|&p| src_strides[p]).collect();
    let n = src.len();
    let mut out = Vec::with_capacity(n);
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..n {
        out.push(src[offset]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            offset += step[d];
            if idx[d] < out_shape[d] {
                break;
            }
            offset -= step[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    (out_shape, out)
}

fn gelu_value(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_deriv(x: f64) -> f64 {
    let t = (SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x)
}

fn softmax_rows(data: &[f64], d: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for (row, orow) in data.chunks(d).zip(out.chunks_mut(d)) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (o, &x) in orow.iter_mut().zip(row) {
            *o = (x - max).exp();
            sum += *o;
        }
        for o in orow.iter_mut() {
            *o /= sum;
        }
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Tape::with_execution(Execution::auto())
    }

    pub fn with_execution(exec: Execution) -> Self {
        Tape {
            nodes: Vec::new(),
            grads: None,
            exec,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_checked(&mut self, name: &'static str, value: Tensor, op: Op, rg: bool) -> Result<Var> {
        check_finite(name, &value)?;
        Ok(self.push(value, op, rg))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Constant leaf; receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Gradient of the last backward target w.r.t. `v`. `None` before
    /// backward or when `v` does not participate.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let grads = self.grads.as_ref()?;
        let g = grads.get(v.0)?.as_ref()?;
        Some(Tensor::new(self.shape(v).to_vec(), g.clone()).expect("grad shape"))
    }

    // ---- elementwise -------------------------------------------------

    pub fn binary(&mut self, kind: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape(
                "elementwise",
                format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            ));
        }
        let (x, y) = (ta.data(), tb.data());
        let data: Vec<f64> = match kind {
            BinaryOp::Add => x.iter().zip(y).map(|(p, q)| p + q).collect(),
            BinaryOp::Sub => x.iter().zip(y).map(|(p, q)| p - q).collect(),
            BinaryOp::Mul => x.iter().zip(y).map(|(p, q)| p * q).collect(),
            BinaryOp::Div => {
                if y.contains(&0.0) {
                    return Err(Error::DivisionByZero { op: "div" });
                }
                x.iter().zip(y).map(|(p, q)| p / q).collect()
            }
            BinaryOp::Pow => {
                if x.iter().any(|&p| p <= 0.0) {
                    return Err(Error::InvalidArgument(
                        "tensor pow requires a positive base".into(),
                    ));
                }
                x.iter().zip(y).map(|(p, q)| p.powf(*q)).collect()
            }
        };
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        self.push_checked("elementwise", value, Op::Binary(kind, a.0, b.0), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Div, a, b)
    }

    fn map_unary(
        &mut self,
        name: &'static str,
        a: Var,
        f: impl Fn(f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let t = self.value(a);
        let value = Tensor::new(t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect())?;
        let rg = self.rg(a);
        self.push_checked(name, value, op, rg)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        self.map_unary("add_scalar", a, |x| x + s, Op::AddScalar(a.0))
    }

    pub fn mul_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        self.map_unary("mul_scalar", a, |x| x * s, Op::MulScalar(a.0, s))
    }

    pub fn div_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        if s == 0.0 {
            return Err(Error::DivisionByZero { op: "div_scalar" });
        }
        self.mul_scalar(a, 1.0 / s)
    }

    pub fn pow_scalar(&mut self, a: Var, p: f64) -> Result<Var> {
        self.map_unary(
            "pow_scalar",
            a,
            move |x| if p == 2.0 { x * x } else { x.powf(p) },
            Op::PowScalar(a.0, p),
        )
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.pow_scalar(a, 2.0)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.map_unary("exp", a, f64::exp, Op::Exp(a.0))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|&x| x <= 0.0) {
            return Err(Error::InvalidArgument("log of non-positive value".into()));
        }
        self.map_unary("log", a, f64::ln, Op::Log(a.0))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.map_unary("relu", a, |x| x.max(0.0), Op::Relu(a.0))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.map_unary("gelu", a, gelu_value, Op::Gelu(a.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.map_unary("sigmoid", a, |x| 1.0 / (1.0 + (-x).exp()), Op::Sigmoid(a.0))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.map_unary("tanh", a, f64::tanh, Op::Tanh(a.0))
    }

    /// Identity forward; blocks gradient flow to `a`.
    pub fn stop_gradient(&mut self, a: Var) -> Var {
        let value = self.value(a).clone();
        self.push(value, Op::StopGradient, false)
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = matmul_nn(
            self.exec,
            self.value(a).data(),
            self.value(b).data(),
            m,
            k,
            n,
        );
        let value = Tensor::new(vec![m, n], data)?;
        let rg = self.rg(a) || self.rg(b);
        self.push_checked(
            "matmul",
            value,
            Op::Matmul {
                a: a.0,
                b: b.0,
                m,
                k,
                n,
            },
            rg,
        )
    }

    /// Batched product `[B,m,k] x [B,k,n] -> [B,m,n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::shape("bmm", format!("{sa:?} x {sb:?}")));
        }
        let (batch, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(batch * m * n);
        for i in 0..batch {
            data.extend(matmul_nn(
                Execution::Sequential,
                &ad[i * m * k..(i + 1) * m * k],
                &bd[i * k * n..(i + 1) * k * n],
                m,
                k,
                n,
            ));
        }
        let value = Tensor::new(vec![batch, m, n], data)?;
        let rg = self.rg(a) || self.rg(b);
        self.push_checked(
            "bmm",
            value,
            Op::Bmm {
                a: a.0,
                b: b.0,
                batch,
                m,
                k,
                n,
            },
            rg,
        )
    }

    // ---- reductions ------------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.numel() == 0 {
            return Err(Error::InvalidArgument("sum over empty tensor".into()));
        }
        let s: f64 = t.data().iter().sum();
        let rg = self.rg(a);
        self.push_checked("sum", Tensor::scalar(s), Op::SumAll(a.0), rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel();
        let s = self.sum(a)?;
        self.mul_scalar(s, 1.0 / n as f64)
    }

    /// Sum over `axis`, removing it. A rank-1 input yields shape `[1]`.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::InvalidArgument(format!(
                "axis {axis} out of range for rank {}",
                shape.len()
            )));
        }
        if shape[axis] == 0 {
            return Err(Error::InvalidArgument("empty reduction axis".into()));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let src = self.value(a).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                for i in 0..inner {
                    out[o * inner + i] += src[base + i];
                }
            }
        }
        let mut out_shape: Vec<usize> = shape.clone();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let rg = self.rg(a);
        self.push_checked(
            "sum_axis",
            Tensor::new(out_shape, out)?,
            Op::SumAxis {
                a: a.0,
                outer,
                len,
                inner,
            },
            rg,
        )
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let len = *self
            .shape(a)
            .get(axis)
            .ok_or_else(|| Error::InvalidArgument(format!("axis {axis} out of range")))?;
        let s = self.sum_axis(a, axis)?;
        if len == 0 {
            return Err(Error::InvalidArgument("empty reduction axis".into()));
        }
        self.mul_scalar(s, 1.0 / len as f64)
    }

    // ---- row-wise ops over the last axis ---------------------------------

    fn last_dim(&self, a: Var, op: &'static str) -> Result<usize> {
        match self.shape(a).last() {
            Some(&d) if d > 0 => Ok(d),
            _ => Err(Error::InvalidArgument(format!("{op}: empty last axis"))),
        }
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let d = self.last_dim(a, "softmax")?;
        let t = self.value(a);
        let value = Tensor::new(t.shape().to_vec(), softmax_rows(t.data(), d))?;
        let rg = self.rg(a);
        self.push_checked("softmax", value, Op::Softmax(a.0), rg)
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let d = self.last_dim(a, "log_softmax")?;
        let t = self.value(a);
        let mut out = vec![0.0; t.numel()];
        for (row, orow) in t.data().chunks(d).zip(out.chunks_mut(d)) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            for (o, &x) in orow.iter_mut().zip(row) {
                *o = x - lse;
            }
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        let rg = self.rg(a);
        self.push_checked("log_softmax", value, Op::LogSoftmax(a.0), rg)
    }

    /// Normalizes each row of the last axis to zero mean and unit variance.
    /// No affine parameters; compose with [`Tape::expand`] for those.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Result<Var> {
        let d = self.last_dim(a, "layer_norm")?;
        let t = self.value(a);
        let mut out = vec![0.0; t.numel()];
        let mut rstds = Vec::with_capacity(t.numel() / d);
        for (row, orow) in t.data().chunks(d).zip(out.chunks_mut(d)) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d as f64;
            let rstd = 1.0 / (var + eps).sqrt();
            for (o, &x) in orow.iter_mut().zip(row) {
                *o = (x - mean) * rstd;
            }
            rstds.push(rstd);
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        let rg = self.rg(a);
        self.push_checked(
            "layer_norm",
            value,
            Op::LayerNorm {
                a: a.0,
                rstd: rstds,
            },
            rg,
        )
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits[R, N]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != targets.len() {
            return Err(Error::shape(
                "cross_entropy",
                format!("logits {shape:?} vs {} targets", targets.len()),
            ));
        }
        let (rows, n) = (shape[0], shape[1]);
        if rows == 0 {
            return Err(Error::InvalidArgument(
                "cross_entropy over zero rows".into(),
            ));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= n) {
            return Err(Error::IndexOutOfRange { index: t, len: n });
        }
        let probs = softmax_rows(self.value(logits).data(), n);
        let loss = targets
            .iter()
            .enumerate()
            .map(|(r, &t)| {
                let row = &self.value(logits).data()[r * n..(r + 1) * n];
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
                lse - row[t]
            })
            .sum::<f64>()
            / rows as f64;
        let rg = self.rg(logits);
        self.push_checked(
            "cross_entropy",
            Tensor::scalar(loss),
            Op::CrossEntropy {
                a: logits.0,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        )
    }

    // ---- layout ----------------------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshaped(shape)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Reshape(a.0), rg))
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len()
            || perm
                .iter()
                .any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true))
        {
            return Err(Error::shape("permute", format!("{perm:?} for {shape:?}")));
        }
        let (out_shape, data) = permute_data(self.value(a).data(), &shape, perm);
        let rg = self.rg(a);
        let value = Tensor::new(out_shape, data)?;
        Ok(self.push(
            value,
            Op::Permute {
                a: a.0,
                perm: perm.to_vec(),
            },
            rg,
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let r = self.shape(a).len();
        if r < 2 {
            return Err(Error::shape("transpose", "rank < 2"));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(a, &perm)
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || start >= end || end > shape[axis] {
            return Err(Error::shape(
                "slice",
                format!("axis {axis} range {start}..{end} of {shape:?}"),
            ));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            out.extend_from_slice(&src[(o * len + start) * inner..(o * len + end) * inner]);
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = end - start;
        let rg = self.rg(a);
        let value = Tensor::new(out_shape, out)?;
        Ok(self.push(
            value,
            Op::Slice {
                a: a.0,
                outer,
                len,
                inner,
                start,
                end,
            },
            rg,
        ))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of nothing".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", format!("axis {axis} for {base:?}")));
        }
        let mut lens = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(Error::shape("concat", format!("{s:?} vs {base:?}")));
            }
            lens.push(s[axis]);
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let total: usize = lens.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&p, &l) in parts.iter().zip(&lens) {
                let d = self.value(p).data();
                out.extend_from_slice(&d[o * l * inner..(o + 1) * l * inner]);
            }
        }
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let rg = parts.iter().any(|&p| self.rg(p));
        let value = Tensor::new(out_shape, out)?;
        Ok(self.push(
            value,
            Op::Concat {
                parts: parts.iter().map(|p| p.0).collect(),
                outer,
                inner,
                lens,
            },
            rg,
        ))
    }

    /// Repeats `a` along a new leading axis of size `times`.
    pub fn expand(&mut self, a: Var, times: usize) -> Result<Var> {
        if times == 0 {
            return Err(Error::InvalidArgument("expand by zero".into()));
        }
        let t = self.value(a);
        let mut shape = vec![times];
        shape.extend_from_slice(t.shape());
        let mut data = Vec::with_capacity(t.numel() * times);
        for _ in 0..times {
            data.extend_from_slice(t.data());
        }
        let rg = self.rg(a);
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::Expand { a: a.0, times }, rg))
    }

    /// Rows `indices` of `a[R, D]`, in order. Repeats are allowed.
    pub fn index_select(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 2 {
            return Err(Error::shape("index_select", format!("{shape:?}")));
        }
        let (rows, d) = (shape[0], shape[1]);
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            if i >= rows {
                return Err(Error::IndexOutOfRange {
                    index: i,
                    len: rows,
                });
            }
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let rg = self.rg(a);
        let value = Tensor::new(vec![indices.len(), d], out)?;
        Ok(self.push(
            value,
            Op::IndexSelect {
                a: a.0,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    /// Places row `r` of `a` at row `indices[r]` of a zero `[rows, D]`
    /// tensor. Indices must be distinct.
    pub fn scatter_rows(&mut self, a: Var, indices: &[usize], rows: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 2 || shape[0] != indices.len() {
            return Err(Error::shape("scatter_rows", format!("{shape:?}")));
        }
        let d = shape[1];
        let mut out = vec![0.0; rows * d];
        let mut seen = vec![false; rows];
        let src = self.value(a).data();
        for (r, &i) in indices.iter().enumerate() {
            if i >= rows {
                return Err(Error::IndexOutOfRange {
                    index: i,
                    len: rows,
                });
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(Error::InvalidArgument(format!(
                    "duplicate scatter index {i}"
                )));
            }
            out[i * d..(i + 1) * d].copy_from_slice(&src[r * d..(r + 1) * d]);
        }
        let rg = self.rg(a);
        let value = Tensor::new(vec![rows, d], out)?;
        Ok(self.push(
            value,
            Op::ScatterRows {
                a: a.0,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    // ---- backward --------------------------------------------------------

    /// Accumulates d`loss`/d`v` for every node. `loss` must hold one element.
    /// A tape supports exactly one backward pass.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.grads.is_some() {
            return Err(Error::TapeConsumed);
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::shape("backward", "loss must be a single element"));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.propagate(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        self.grads = Some(grads);
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let nodes = &self.nodes;
        let exec = self.exec;
        // Adds `contrib` (computed lazily) into the gradient slot of `p`.
        let mut acc = |p: usize, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[p].requires_grad {
                return;
            }
            let slot = grads[p].get_or_insert_with(|| vec![0.0; nodes[p].value.numel()]);
            f(slot);
        };
        let val = |p: usize| nodes[p].value.data();
        let out = node.value.data();
        match &node.op {
            Op::Leaf | Op::StopGradient => {}
            Op::Binary(kind, a, b) => {
                let (a, b) = (*a, *b);
                match kind {
                    BinaryOp::Add => {
                        acc(a, &mut |s| s.iter_mut().zip(g).for_each(|(x, gi)| *x += gi));
                        acc(b, &mut |s| s.iter_mut().zip(g).for_each(|(x, gi)| *x += gi));
                    }
                    BinaryOp::Sub => {
                        acc(a, &mut |s| s.iter_mut().zip(g).for_each(|(x, gi)| *x += gi));
                        acc(b, &mut |s| s.iter_mut().zip(g).for_each(|(x, gi)| *x -= gi));
                    }
                    BinaryOp::Mul => {
                        let (av, bv) = (val(a), val(b));
                        acc(a, &mut |s| {
                            for ((x, gi), y) in s.iter_mut().zip(g).zip(bv) {
                                *x += gi * y;
                            }
                        });
                        acc(b, &mut |s| {
                            for ((x, gi), y) in s.iter_mut().zip(g).zip(av) {
                                *x += gi * y;
                            }
                        });
                    }
                    BinaryOp::Div => {
                        let (av, bv) = (val(a), val(b));
                        acc(a, &mut |s| {
                            for ((x, gi), y) in s.iter_mut().zip(g).zip(bv) {
                                *x += gi / y;
                            }
                        });
                        acc(b, &mut |s| {
                            for (((x, gi), p), q) in s.iter_mut().zip(g).zip(av).zip(bv) {
                                *x -= gi * p / (q * q);
                            }
                        });
                    }
                    BinaryOp::Pow => {
                        let (av, bv) = (val(a), val(b));
                        acc(a, &mut |s| {
                            for (((x, gi), p), q) in s.iter_mut().zip(g).zip(av).zip(bv) {
                                *x += gi * q * p.powf(q - 1.0);
                            }
                        });
                        acc(b, &mut |s| {
                            for (((x, gi), p), o) in s.iter_mut().zip(g).zip(av).zip(out) {
                                *x += gi * o * p.ln();
                            }
                        });
                    }
                }
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                acc(*a, &mut |s| {
                    s.iter_mut().zip(g).for_each(|(x, gi)| *x += gi)
                });
            }
            Op::MulScalar(a, c) => {
                acc(*a, &mut |s| {
                    s.iter_mut().zip(g).for_each(|(x, gi)| *x += gi * c)
                });
            }
            Op::PowScalar(a, p) => {
                let av = val(*a);
                acc(*a, &mut |s| {
                    for ((x, gi), v) in s.iter_mut().zip(g).zip(av) {
                        *x += if *p == 2.0 {
                            gi * 2.0 * v
                        } else {
                            gi * p * v.powf(p - 1.0)
                        };
                    }
                });
            }
            Op::Exp(a) => {
                acc(*a, &mut |s| {
                    for ((x, gi), o) in s.iter_mut().zip(g).zip(out) {
                        *x += gi * o;
                    }
                });
            }
            Op::Log(a) => {
                let av = val(*a);
                acc(*a, &mut |s| {
                    for ((x, gi), v) in s.iter_mut().zip(g).zip(av) {
                        *x += gi / v;
                    }
                });
            }
            Op::Relu(a) => {
                let av = val(*a);
                acc(*a, &mut |s| {
                    for ((x, gi), v) in s.iter_mut().zip(g).zip(av) {
                        if *v > 0.0 {
                            *x += gi;
                        }
                    }
                });
            }
            Op::Gelu(a) => {
                let av = val(*a);
                acc(*a, &mut |s| {
                    for ((x, gi), v) in s.iter_mut().zip(g).zip(av) {
                        *x += gi * gelu_deriv(*v);
                    }
                });
            }
            Op::Sigmoid(a) => {
                acc(*a, &mut |s| {
                    for ((x, gi), o) in s.iter_mut().zip(g).zip(out) {
                        *x += gi * o * (1.0 - o);
                    }
                });
            }
            Op::Tanh(a) => {
                acc(*a, &mut |s| {
                    for ((x, gi), o) in s.iter_mut().zip(g).zip(out) {
                        *x += gi * (1.0 - o * o);
                    }
                });
            }
            Op::Matmul { a, b, m, k, n } => {
                let (a, b, m, k, n) = (*a, *b, *m, *k, *n);
                if nodes[a].requires_grad {
                    let da = matmul_nt(exec, g, val(b), m, n, k);
                    acc(a, &mut |s| s.iter_mut().zip(&da).for_each(|(x, d)| *x += d));
                }
                if nodes[b].requires_grad {
                    let db = matmul_tn(exec, val(a), g, k, m, n);
                    acc(b, &mut |s| s.iter_mut().zip(&db).for_each(|(x, d)| *x += d));
                }
            }
            Op::Bmm {
                a,
                b,
                batch,
                m,
                k,
                n,
            } => {
                let (a, b, batch, m, k, n) = (*a, *b, *batch, *m, *k, *n);
                let (av, bv) = (val(a), val(b));
                let seq = Execution::Sequential;
                acc(a, &mut |s| {
                    for t in 0..batch {
                        let gt = &g[t * m * n..(t + 1) * m * n];
                        let d = matmul_nt(seq, gt, &bv[t * k * n..(t + 1) * k * n], m, n, k);
                        for (x, y) in s[t * m * k..(t + 1) * m * k].iter_mut().zip(&d) {
                            *x += y;
                        }
                    }
                });
                acc(b, &mut |s| {
                    for t in 0..batch {
                        let gt = &g[t * m * n..(t + 1) * m * n];
                        let d = matmul_tn(seq, &av[t * m * k..(t + 1) * m * k], gt, k, m, n);
                        for (x, y) in s[t * k * n..(t + 1) * k * n].iter_mut().zip(&d) {
                            *x += y;
                        }
                    }
                });
            }
            Op::SumAll(a) => {
                acc(*a, &mut |s| s.iter_mut().for_each(|x| *x += g[0]));
            }
            Op::SumAxis {
                a,
                outer,
                len,
                inner,
            } => {
                let (outer, len, inner) = (*outer, *len, *inner);
                acc(*a, &mut |s| {
                    for o in 0..outer {
                        for l in 0..len {
                            let base = (o * len + l) * inner;
                            for i in 0..inner {
                                s[base + i] += g[o * inner + i];
                            }
                        }
                    }
                });
            }
            Op::Softmax(a) => {
                let d = *node.value.shape().last().unwrap();
                acc(*a, &mut |s| {
                    for ((srow, grow), orow) in s.chunks_mut(d).zip(g.chunks(d)).zip(out.chunks(d))
                    {
                        let dot: f64 = grow.iter().zip(orow).map(|(x, y)| x * y).sum();
                        for ((x, gi), o) in srow.iter_mut().zip(grow).zip(orow) {
                            *x += o * (gi - dot);
                        }
                    }
                });
            }
            Op::LogSoftmax(a) => {
                let d = *node.value.shape().last().unwrap();
                acc(*a, &mut |s| {
                    for ((srow, grow), orow) in s.chunks_mut(d).zip(g.chunks(d)).zip(out.chunks(d))
                    {
                        let gsum: f64 = grow.iter().sum();
                        for ((x, gi), o) in srow.iter_mut().zip(grow).zip(orow) {
                            *x += gi - o.exp() * gsum;
                        }
                    }
                });
            }
            Op::LayerNorm { a, rstd } => {
                let d = *node.value.shape().last().unwrap();
                acc(*a, &mut |s| {
                    for (((srow, grow), yrow), r) in s
                        .chunks_mut(d)
                        .zip(g.chunks(d))
                        .zip(out.chunks(d))
                        .zip(rstd)
                    {
                        let gmean = grow.iter().sum::<f64>() / d as f64;
                        let gymean =
                            grow.iter().zip(yrow).map(|(x, y)| x * y).sum::<f64>() / d as f64;
                        for ((x, gi), y) in srow.iter_mut().zip(grow).zip(yrow) {
                            *x += r * (gi - gmean - y * gymean);
                        }
                    }
                });
            }
            Op::CrossEntropy { a, targets, probs } => {
                let rows = targets.len();
                let n = probs.len() / rows;
                let scale = g[0] / rows as f64;
                acc(*a, &mut |s| {
                    for (x, p) in s.iter_mut().zip(probs) {
                        *x += scale * p;
                    }
                    for (r, &t) in targets.iter().enumerate() {
                        s[r * n + t] -= scale;
                    }
                });
            }
            Op::Permute { a, perm } => {
                let mut inverse = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                let (_, back) = permute_data(g, node.value.shape(), &inverse);
                acc(*a, &mut |s| {
                    s.iter_mut().zip(&back).for_each(|(x, y)| *x += y)
                });
            }
            Op::Slice {
                a,
                outer,
                len,
                inner,
                start,
                end,
            } => {
                let w = (end - start) * inner;
                acc(*a, &mut |s| {
                    for o in 0..*outer {
                        let dst = &mut s[(o * len + start) * inner..(o * len + end) * inner];
                        for (x, y) in dst.iter_mut().zip(&g[o * w..(o + 1) * w]) {
                            *x += y;
                        }
                    }
                });
            }
            Op::Concat {
                parts,
                outer,
                inner,
                lens,
            } => {
                let total: usize = lens.iter().sum();
                let mut offset = 0;
                for (&p, &l) in parts.iter().zip(lens) {
                    acc(p, &mut |s| {
                        for o in 0..*outer {
                            let src =
                                &g[(o * total + offset) * inner..(o * total + offset + l) * inner];
                            for (x, y) in s[o * l * inner..(o + 1) * l * inner].iter_mut().zip(src)
                            {
                                *x += y;
                            }
                        }
                    });
                    offset += l;
                }
            }
            Op::Expand { a, times } => {
                let n = nodes[*a].value.numel();
                acc(*a, &mut |s| {
                    for t in 0..*times {
                        for (x, y) in s.iter_mut().zip(&g[t * n..(t + 1) * n]) {
                            *x += y;
                        }
                    }
                });
            }
            Op::IndexSelect { a, indices } => {
                let d = *node.value.shape().last().unwrap();
                acc(*a, &mut |s| {
                    for (r, &i) in indices.iter().enumerate() {
                        for (x, y) in s[i * d..(i + 1) * d].iter_mut().zip(&g[r * d..(r + 1) * d]) {
                            *x += y;
                        }
                    }
                });
            }
            Op::ScatterRows { a, indices } => {
                let d = *node.value.shape().last().unwrap();
                acc(*a, &mut |s| {
                    for (r, &i) in indices.iter().enumerate() {
                        for (x, y) in s[r * d..(r + 1) * d].iter_mut().zip(&g[i * d..(i + 1) * d]) {
                            *x += y;
                        }
                    }
                });
            }
        }
    }
}
