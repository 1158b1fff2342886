//! Eager Wengert tape for reverse-mode differentiation.
//!
//! Every op evaluates immediately, stores its output on the tape, and records
//! enough to replay its vector-Jacobian product. [`Tape::backward`] consumes
//! the tape and walks the records once, newest to oldest.

use alloc::format;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;
use core::sync::atomic::{AtomicU32, Ordering};

use num_traits::Float;

use super::gemm::{gemm_nn, gemm_nt, gemm_tn, transpose};
use super::{check_shape, matmul_dims, numel, strides, Tensor};
use crate::error::{Error, Result};
use crate::flops::{FlopLedger, OpClass};

static NEXT_TAPE_ID: AtomicU32 = AtomicU32::new(1);

/// Sentinel in a gather map: the output element is zero.
pub const GATHER_ZERO: u32 = u32::MAX;

const LAYER_NORM_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u32,
    index: u32,
}

impl Var {
    pub fn index(self) -> usize {
        self.index as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Relu,
    Sigmoid,
    EluPlusOne,
    Exp,
    Gelu,
    Neg,
}

impl Unary {
    fn name(self) -> &'static str {
        match self {
            Unary::Relu => "relu",
            Unary::Sigmoid => "sigmoid",
            Unary::EluPlusOne => "elu_plus_one",
            Unary::Exp => "exp",
            Unary::Gelu => "gelu",
            Unary::Neg => "neg",
        }
    }

    #[inline]
    pub fn eval(self, x: f64) -> f64 {
        match self {
            Unary::Relu => x.max(0.0),
            Unary::Sigmoid => sigmoid(x),
            Unary::EluPlusOne => {
                if x > 0.0 {
                    x + 1.0
                } else {
                    Float::exp(x)
                }
            }
            Unary::Exp => Float::exp(x),
            Unary::Gelu => 0.5 * x * (1.0 + Float::tanh(GELU_C * (x + 0.044715 * x * x * x))),
            Unary::Neg => -x,
        }
    }

    /// dy/dx given input `x` and output `y`.
    #[inline]
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::Sigmoid => y * (1.0 - y),
            Unary::EluPlusOne => {
                if x > 0.0 {
                    1.0
                } else {
                    y
                }
            }
            Unary::Exp => y,
            Unary::Gelu => {
                let t = Float::tanh(GELU_C * (x + 0.044715 * x * x * x));
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
            }
            Unary::Neg => -1.0,
        }
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + Float::exp(-x))
    } else {
        let e = Float::exp(x);
        e / (1.0 + e)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

impl Binary {
    fn name(self) -> &'static str {
        match self {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
            Binary::Div => "div",
        }
    }

    #[inline]
    fn eval(self, a: f64, b: f64) -> f64 {
        match self {
            Binary::Add => a + b,
            Binary::Sub => a - b,
            Binary::Mul => a * b,
            Binary::Div => a / b,
        }
    }
}

enum Op {
    Leaf,
    Unary(u32, Unary),
    Binary(u32, u32, Binary),
    Scale(u32, f64),
    AddScalar(u32),
    MatMul(u32, u32),
    BatchMatMul(u32, u32),
    Transpose(u32),
    Reshape(u32),
    Permute(u32, Vec<usize>),
    Expand(u32),
    SumAxis(u32, usize),
    SumAll(u32),
    Concat(Vec<u32>),
    Slice(u32, usize),
    Softmax(u32),
    LayerNorm {
        x: u32,
        gamma: u32,
        beta: u32,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    ClampMin(u32, f64),
    Gather(u32, Arc<[u32]>),
    CrossEntropy {
        logits: u32,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], one per `requires_grad` leaf.
#[derive(Debug, Clone)]
pub struct Gradients {
    tape: u32,
    leaves: Vec<(u32, Tensor)>,
    visited: Vec<u32>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        if var.tape != self.tape {
            return None;
        }
        self.leaves
            .binary_search_by_key(&var.index, |(i, _)| *i)
            .ok()
            .map(|pos| &self.leaves[pos].1)
    }

    /// Leaf gradients in leaf-creation order.
    pub fn into_leaf_grads(self) -> Vec<Tensor> {
        self.leaves.into_iter().map(|(_, g)| g).collect()
    }

    /// Node indices whose vector-Jacobian product ran, in visiting order.
    pub fn visit_order(&self) -> &[u32] {
        &self.visited
    }
}

pub struct Tape {
    id: u32,
    nodes: Vec<Node>,
    flops: FlopLedger,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            flops: FlopLedger::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn flops(&self) -> &FlopLedger {
        &self.flops
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push_node(Node {
            value,
            op: Op::Leaf,
            needs_grad: requires_grad,
            requires_grad,
        })
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.check(v).expect("variable belongs to another tape");
        &self.nodes[v.index()].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.tape != self.id || v.index() >= self.nodes.len() {
            return Err(Error::Usage(format!(
                "variable #{} is not recorded on this tape",
                v.index
            )));
        }
        Ok(())
    }

    fn push_node(&mut self, node: Node) -> Var {
        let index = self.nodes.len() as u32;
        self.nodes.push(node);
        Var { tape: self.id, index }
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite {
                op: name,
                inputs: inputs.iter().map(|&v| self.nodes[v.index()].value.stats()).collect(),
            });
        }
        let needs_grad = inputs.iter().any(|&v| self.nodes[v.index()].needs_grad);
        Ok(self.push_node(Node {
            value,
            op,
            needs_grad,
            requires_grad: false,
        }))
    }

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.index()].value
    }

    // ---- elementwise -------------------------------------------------------

    pub fn unary(&mut self, x: Var, f: Unary) -> Result<Var> {
        self.check(x)?;
        let out = self.val(x).map(|v| f.eval(v));
        let cost = match f {
            Unary::Relu | Unary::Neg => 1,
            Unary::Sigmoid | Unary::EluPlusOne | Unary::Exp => 4,
            Unary::Gelu => 8,
        };
        self.flops.add(OpClass::Elementwise, cost * out.numel() as u64);
        self.push(f.name(), out, Op::Unary(x.index, f), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Relu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Sigmoid)
    }

    pub fn elu_plus_one(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::EluPlusOne)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Exp)
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Gelu)
    }

    pub fn binary(&mut self, a: Var, b: Var, f: Binary) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (ta, tb) = (self.val(a), self.val(b));
        let out_shape: Vec<usize> = if ta.shape() == tb.shape() || tb.rank() == 0 {
            ta.shape().to_vec()
        } else if ta.rank() == 0 {
            tb.shape().to_vec()
        } else {
            return Err(Error::Dimension {
                op: f.name(),
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        };
        let n = numel(&out_shape);
        let (sa, sb) = (ta.numel() == 1 && ta.rank() == 0, tb.numel() == 1 && tb.rank() == 0);
        if f == Binary::Div && tb.data().contains(&0.0) {
            return Err(Error::Domain {
                op: "div",
                reason: "division by zero (use guard_denominator for an epsilon-guarded quotient)".into(),
            });
        }
        let data: Vec<f64> = (0..n)
            .map(|i| {
                let x = if sa { ta.data()[0] } else { ta.data()[i] };
                let y = if sb { tb.data()[0] } else { tb.data()[i] };
                f.eval(x, y)
            })
            .collect();
        self.flops.add(OpClass::Elementwise, n as u64);
        let out = Tensor::new(&out_shape, data)?;
        self.push(f.name(), out, Op::Binary(a.index, b.index, f), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Mul)
    }

    /// Elementwise quotient; any zero in `b` is a domain error.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Div)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.check(x)?;
        let out = self.val(x).scale(c);
        self.flops.add(OpClass::Elementwise, out.numel() as u64);
        self.push("scale", out, Op::Scale(x.index, c), &[x])
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.check(x)?;
        let out = self.val(x).map(|v| v + c);
        self.flops.add(OpClass::Elementwise, out.numel() as u64);
        self.push("add_scalar", out, Op::AddScalar(x.index), &[x])
    }

    /// Lower-bounds a normalizer at `eps`. With `strict`, any entry below
    /// `eps` is reported as a degenerate row instead.
    pub fn guard_denominator(&mut self, x: Var, eps: f64, strict: bool) -> Result<Var> {
        self.check(x)?;
        let t = &self.nodes[x.index()].value;
        if strict {
            if let Some((row, &value)) = t
                .data()
                .iter()
                .enumerate()
                .find(|(_, &v)| v.partial_cmp(&eps).is_none_or(|o| o.is_lt()))
            {
                return Err(Error::DegenerateRow {
                    row,
                    value,
                    epsilon: eps,
                });
            }
        }
        let out = t.map(|v| v.max(eps));
        self.flops.add(OpClass::Elementwise, out.numel() as u64);
        self.push("guard_denominator", out, Op::ClampMin(x.index, eps), &[x])
    }

    // ---- products ----------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (m, k, p) = matmul_dims("matmul", self.val(a).shape(), self.val(b).shape())?;
        let mut out = vec![0.0; m * p];
        gemm_nn(self.val(a).data(), self.val(b).data(), &mut out, m, k, p);
        self.flops.add_matmul(m, k, p);
        let out = Tensor::new(&[m, p], out)?;
        self.push("matmul", out, Op::MatMul(a.index, b.index), &[a, b])
    }

    /// `[G,M,K] · [G,K,P] → [G,M,P]`
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (sa, sb) = (self.val(a).shape(), self.val(b).shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::Dimension {
                op: "bmm",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (g, m, k, p) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; g * m * p];
        let (da, db) = (self.val(a).data(), self.val(b).data());
        for ((ca, cb), co) in da
            .chunks_exact(m * k)
            .zip(db.chunks_exact(k * p))
            .zip(out.chunks_exact_mut(m * p))
        {
            gemm_nn(ca, cb, co, m, k, p);
        }
        self.flops.add_matmul(g * m, k, p);
        let out = Tensor::new(&[g, m, p], out)?;
        self.push("bmm", out, Op::BatchMatMul(a.index, b.index), &[a, b])
    }

    // ---- layout ------------------------------------------------------------

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let t = &self.nodes[x.index()].value;
        let r = t.rank();
        if r < 2 {
            return Err(Error::Shape {
                op: "transpose",
                shape: t.shape().to_vec(),
                reason: "needs rank >= 2".into(),
            });
        }
        let (rows, cols) = (t.shape()[r - 2], t.shape()[r - 1]);
        let mut out = vec![0.0; t.numel()];
        for (src, dst) in t
            .data()
            .chunks_exact(rows * cols)
            .zip(out.chunks_exact_mut(rows * cols))
        {
            transpose(src, dst, rows, cols);
        }
        let mut shape = t.shape().to_vec();
        shape.swap(r - 2, r - 1);
        let out = Tensor::new(&shape, out)?;
        self.push("transpose", out, Op::Transpose(x.index), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        self.check(x)?;
        let out = self.val(x).reshape(shape)?;
        self.push("reshape", out, Op::Reshape(x.index), &[x])
    }

    /// Output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        self.check(x)?;
        let t = &self.nodes[x.index()].value;
        validate_permutation(t.shape(), axes)?;
        let (data, shape) = permute_data(t.data(), t.shape(), axes);
        let out = Tensor::new(&shape, data)?;
        self.push("permute", out, Op::Permute(x.index, axes.to_vec()), &[x])
    }

    /// Explicit broadcast: every axis of `x` must equal the target extent or be 1.
    pub fn expand(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        self.check(x)?;
        check_shape("expand", shape)?;
        let t = &self.nodes[x.index()].value;
        let src = t.shape();
        if src.len() != shape.len() || src.iter().zip(shape).any(|(&s, &d)| s != d && s != 1) {
            return Err(Error::Dimension {
                op: "expand",
                lhs: src.to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let st = broadcast_strides(src);
        let mut data = Vec::with_capacity(numel(shape));
        strided_walk(shape, &st, |off| data.push(t.data()[off]));
        let out = Tensor::new(shape, data)?;
        self.push("expand", out, Op::Expand(x.index), &[x])
    }

    /// Sum along `axis`, keeping it with extent 1.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check(x)?;
        let t = &self.nodes[x.index()].value;
        if axis >= t.rank() {
            return Err(Error::Shape {
                op: "sum_axis",
                shape: t.shape().to_vec(),
                reason: format!("axis {axis} out of range"),
            });
        }
        let (outer, len, inner) = axis_split(t.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            let dst = &mut out[o * inner..(o + 1) * inner];
            for l in 0..len {
                let src = &t.data()[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        self.flops.add(OpClass::Reduction, t.numel() as u64);
        let mut shape = t.shape().to_vec();
        shape[axis] = 1;
        let out = Tensor::new(&shape, out)?;
        self.push("sum_axis", out, Op::SumAxis(x.index, axis), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let t = &self.nodes[x.index()].value;
        self.flops.add(OpClass::Reduction, t.numel() as u64);
        let out = Tensor::scalar(t.sum());
        self.push("sum", out, Op::SumAll(x.index), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n)
    }

    /// Concatenates along the last axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Usage("concat of zero tensors".into()));
        }
        for &p in parts {
            self.check(p)?;
        }
        let first = self.val(parts[0]).shape().to_vec();
        let lead = &first[..first.len() - 1];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.val(p).shape();
            if s.len() != first.len() || &s[..s.len() - 1] != lead {
                return Err(Error::Dimension {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: s.to_vec(),
                });
            }
            widths.push(s[s.len() - 1]);
        }
        let total: usize = widths.iter().sum();
        let rows = numel(lead);
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.val(p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let out = Tensor::new(&shape, data)?;
        self.push(
            "concat",
            out,
            Op::Concat(parts.iter().map(|v| v.index).collect()),
            parts,
        )
    }

    /// `len` entries of the last axis starting at `start`.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        self.check(x)?;
        let t = &self.nodes[x.index()].value;
        let w = *t.shape().last().unwrap_or(&1);
        if t.rank() == 0 || len == 0 || start + len > w {
            return Err(Error::Shape {
                op: "slice_last",
                shape: t.shape().to_vec(),
                reason: format!("range {start}..{} out of bounds", start + len),
            });
        }
        let rows = t.numel() / w;
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&t.data()[r * w + start..r * w + start + len]);
        }
        let mut shape = t.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let out = Tensor::new(&shape, data)?;
        self.push("slice_last", out, Op::Slice(x.index, start), &[x])
    }

    /// Output element `i` is input element `map[i]`, or zero for [`GATHER_ZERO`].
    pub fn gather(&mut self, x: Var, map: Arc<[u32]>, shape: &[usize]) -> Result<Var> {
        self.check(x)?;
        check_shape("gather", shape)?;
        let t = &self.nodes[x.index()].value;
        if map.len() != numel(shape) {
            return Err(Error::Shape {
                op: "gather",
                shape: shape.to_vec(),
                reason: format!("map has {} entries", map.len()),
            });
        }
        let src = t.data();
        let mut data = Vec::with_capacity(map.len());
        for &m in map.iter() {
            if m == GATHER_ZERO {
                data.push(0.0);
            } else {
                let m = m as usize;
                if m >= src.len() {
                    return Err(Error::Input(format!(
                        "gather index {m} out of range for {:?}",
                        t.shape()
                    )));
                }
                data.push(src[m]);
            }
        }
        let out = Tensor::new(shape, data)?;
        self.push("gather", out, Op::Gather(x.index, map), &[x])
    }

    // ---- normalization -----------------------------------------------------

    /// Row-max-stabilized softmax along the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let t = &self.nodes[x.index()].value;
        let w = *t.shape().last().ok_or_else(|| Error::Shape {
            op: "softmax",
            shape: Vec::new(),
            reason: "needs rank >= 1".into(),
        })?;
        let mut data = t.data().to_vec();
        for row in data.chunks_exact_mut(w) {
            softmax_in_place(row);
        }
        self.flops.add(OpClass::Softmax, 5 * t.numel() as u64);
        let out = Tensor::new(t.shape(), data)?;
        self.push("softmax", out, Op::Softmax(x.index), &[x])
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        self.check(x)?;
        self.check(gamma)?;
        self.check(beta)?;
        let t = &self.nodes[x.index()].value;
        let d = *t.shape().last().unwrap_or(&0);
        for p in [gamma, beta] {
            if self.val(p).shape() != [d] {
                return Err(Error::Dimension {
                    op: "layer_norm",
                    lhs: t.shape().to_vec(),
                    rhs: self.val(p).shape().to_vec(),
                });
            }
        }
        let (g, b) = (self.val(gamma).data(), self.val(beta).data());
        let rows = t.numel() / d;
        let mut out = Vec::with_capacity(t.numel());
        let mut xhat = Vec::with_capacity(t.numel());
        let mut inv_std = Vec::with_capacity(rows);
        for row in t.data().chunks_exact(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / Float::sqrt(var + LAYER_NORM_EPS);
            inv_std.push(is);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * is;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        self.flops.add(OpClass::Normalization, 8 * t.numel() as u64);
        let out = Tensor::new(t.shape(), out)?;
        self.push(
            "layer_norm",
            out,
            Op::LayerNorm {
                x: x.index,
                gamma: gamma.index,
                beta: beta.index,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        )
    }

    /// Mean cross-entropy of `logits[B×C]` against class indices.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        self.check(logits)?;
        let t = self.val(logits);
        if t.rank() != 2 || t.shape()[0] != labels.len() {
            return Err(Error::Dimension {
                op: "cross_entropy",
                lhs: t.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        let c = t.shape()[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Input(format!("label {bad} out of range for {c} classes")));
        }
        let mut probs = t.data().to_vec();
        let mut loss = 0.0;
        for (row, &label) in probs.chunks_exact_mut(c).zip(labels) {
            softmax_in_place(row);
            loss -= Float::ln(row[label].max(f64::MIN_POSITIVE));
        }
        loss /= labels.len() as f64;
        self.flops.add(OpClass::Softmax, 5 * t.numel() as u64);
        self.push(
            "cross_entropy",
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits: logits.index,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        )
    }

    // ---- backward ----------------------------------------------------------

    /// Replays the tape from `loss` and returns gradients for every leaf that
    /// requires them. Leaves the loss does not depend on get zero gradients.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        self.check(loss)?;
        let root = loss.index();
        if self.nodes[root].value.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[root].value.shape()
            )));
        }
        if !self.nodes[root].needs_grad {
            return Err(Error::Usage(
                "loss is detached: it depends on no leaf that requires a gradient".into(),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(root + 1, || None);
        grads[root] = Some(vec![1.0]);
        let mut visited = Vec::new();

        for i in (0..=root).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            visited.push(i as u32);
            if let Op::Leaf = node.op {
                grads[i] = Some(g);
                continue;
            }
            self.vjp(node, &g, &mut grads);
        }

        let mut leaves = Vec::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if node.requires_grad {
                let g = grads
                    .get_mut(i)
                    .and_then(Option::take)
                    .unwrap_or_else(|| vec![0.0; node.value.numel()]);
                leaves.push((i as u32, Tensor::new(node.value.shape(), g)?));
            }
        }
        Ok(Gradients {
            tape: self.id,
            leaves,
            visited,
        })
    }

    fn needs(&self, idx: u32) -> bool {
        self.nodes[idx as usize].needs_grad
    }

    fn vjp(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            &Op::Unary(x, f) => {
                if self.needs(x) {
                    let xv = self.nodes[x as usize].value.data();
                    let slot = slot(grads, x, xv.len());
                    for i in 0..xv.len() {
                        slot[i] += g[i] * f.derivative(xv[i], y[i]);
                    }
                }
            }
            &Op::Binary(a, b, f) => {
                let (va, vb) = (&self.nodes[a as usize].value, &self.nodes[b as usize].value);
                let bcast_a = va.rank() == 0 && vb.rank() != 0;
                let bcast_b = vb.rank() == 0 && va.rank() != 0;
                let av = |i: usize| if bcast_a { va.data()[0] } else { va.data()[i] };
                let bv = |i: usize| if bcast_b { vb.data()[0] } else { vb.data()[i] };
                if self.needs(a) {
                    let slot = slot(grads, a, va.numel());
                    for i in 0..g.len() {
                        let d = match f {
                            Binary::Add | Binary::Sub => g[i],
                            Binary::Mul => g[i] * bv(i),
                            Binary::Div => g[i] / bv(i),
                        };
                        slot[if bcast_a { 0 } else { i }] += d;
                    }
                }
                if self.needs(b) {
                    let slot = slot(grads, b, vb.numel());
                    for i in 0..g.len() {
                        let d = match f {
                            Binary::Add => g[i],
                            Binary::Sub => -g[i],
                            Binary::Mul => g[i] * av(i),
                            Binary::Div => -g[i] * av(i) / (bv(i) * bv(i)),
                        };
                        slot[if bcast_b { 0 } else { i }] += d;
                    }
                }
            }
            &Op::Scale(x, c) => {
                if self.needs(x) {
                    for (s, &gi) in slot(grads, x, g.len()).iter_mut().zip(g) {
                        *s += c * gi;
                    }
                }
            }
            &Op::AddScalar(x) | &Op::Reshape(x) => {
                if self.needs(x) {
                    for (s, &gi) in slot(grads, x, g.len()).iter_mut().zip(g) {
                        *s += gi;
                    }
                }
            }
            &Op::ClampMin(x, eps) => {
                if self.needs(x) {
                    let xv = self.nodes[x as usize].value.data();
                    for ((s, &gi), &xi) in slot(grads, x, g.len()).iter_mut().zip(g).zip(xv) {
                        if xi >= eps {
                            *s += gi;
                        }
                    }
                }
            }
            &Op::MatMul(a, b) => {
                let (va, vb) = (&self.nodes[a as usize].value, &self.nodes[b as usize].value);
                let (m, k, p) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                if self.needs(a) {
                    gemm_nt(g, vb.data(), slot(grads, a, m * k), m, p, k);
                }
                if self.needs(b) {
                    gemm_tn(va.data(), g, slot(grads, b, k * p), m, k, p);
                }
            }
            &Op::BatchMatMul(a, b) => {
                let (va, vb) = (&self.nodes[a as usize].value, &self.nodes[b as usize].value);
                let (gs, m, k, p) = (va.shape()[0], va.shape()[1], va.shape()[2], vb.shape()[2]);
                if self.needs(a) {
                    let sa = slot(grads, a, gs * m * k);
                    for ((ga, gg), bb) in sa
                        .chunks_exact_mut(m * k)
                        .zip(g.chunks_exact(m * p))
                        .zip(vb.data().chunks_exact(k * p))
                    {
                        gemm_nt(gg, bb, ga, m, p, k);
                    }
                }
                if self.needs(b) {
                    let sb = slot(grads, b, gs * k * p);
                    for ((gb, gg), aa) in sb
                        .chunks_exact_mut(k * p)
                        .zip(g.chunks_exact(m * p))
                        .zip(va.data().chunks_exact(m * k))
                    {
                        gemm_tn(aa, gg, gb, m, k, p);
                    }
                }
            }
            &Op::Transpose(x) => {
                if self.needs(x) {
                    let s = node.value.shape();
                    let r = s.len();
                    let (rows, cols) = (s[r - 2], s[r - 1]);
                    let mut tmp = vec![0.0; rows * cols];
                    let sx = slot(grads, x, g.len());
                    for (src, dst) in g.chunks_exact(rows * cols).zip(sx.chunks_exact_mut(rows * cols)) {
                        transpose(src, &mut tmp, rows, cols);
                        for (d, t) in dst.iter_mut().zip(&tmp) {
                            *d += t;
                        }
                    }
                }
            }
            Op::Permute(x, axes) => {
                let x = *x;
                if self.needs(x) {
                    let xs = self.nodes[x as usize].value.shape();
                    let in_st = strides(xs);
                    let st: Vec<usize> = axes.iter().map(|&a| in_st[a]).collect();
                    let sx = slot(grads, x, g.len());
                    let mut i = 0;
                    strided_walk(node.value.shape(), &st, |off| {
                        sx[off] += g[i];
                        i += 1;
                    });
                }
            }
            &Op::Expand(x) => {
                if self.needs(x) {
                    let xs = self.nodes[x as usize].value.shape();
                    let st = broadcast_strides(xs);
                    let sx = slot(grads, x, numel(xs));
                    let mut i = 0;
                    strided_walk(node.value.shape(), &st, |off| {
                        sx[off] += g[i];
                        i += 1;
                    });
                }
            }
            &Op::SumAxis(x, axis) => {
                if self.needs(x) {
                    let xs = self.nodes[x as usize].value.shape();
                    let (outer, len, inner) = axis_split(xs, axis);
                    let sx = slot(grads, x, numel(xs));
                    for o in 0..outer {
                        let src = &g[o * inner..(o + 1) * inner];
                        for l in 0..len {
                            let dst = &mut sx[(o * len + l) * inner..(o * len + l + 1) * inner];
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    }
                }
            }
            &Op::SumAll(x) => {
                if self.needs(x) {
                    let n = self.nodes[x as usize].value.numel();
                    for s in slot(grads, x, n).iter_mut() {
                        *s += g[0];
                    }
                }
            }
            Op::Concat(parts) => {
                let widths: Vec<usize> = parts
                    .iter()
                    .map(|&p| *self.nodes[p as usize].value.shape().last().unwrap())
                    .collect();
                let total: usize = widths.iter().sum();
                let rows = g.len() / total;
                let mut offset = 0;
                for (&p, &w) in parts.iter().zip(&widths) {
                    if self.needs(p) {
                        let sp = slot(grads, p, rows * w);
                        for r in 0..rows {
                            let src = &g[r * total + offset..r * total + offset + w];
                            for (d, s) in sp[r * w..(r + 1) * w].iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    }
                    offset += w;
                }
            }
            &Op::Slice(x, start) => {
                if self.needs(x) {
                    let xs = self.nodes[x as usize].value.shape();
                    let w = *xs.last().unwrap();
                    let len = *node.value.shape().last().unwrap();
                    let rows = g.len() / len;
                    let sx = slot(grads, x, rows * w);
                    for r in 0..rows {
                        let dst = &mut sx[r * w + start..r * w + start + len];
                        for (d, s) in dst.iter_mut().zip(&g[r * len..(r + 1) * len]) {
                            *d += s;
                        }
                    }
                }
            }
            Op::Gather(x, map) => {
                let x = *x;
                if self.needs(x) {
                    let n = self.nodes[x as usize].value.numel();
                    let sx = slot(grads, x, n);
                    for (&m, &gi) in map.iter().zip(g) {
                        if m != GATHER_ZERO {
                            sx[m as usize] += gi;
                        }
                    }
                }
            }
            &Op::Softmax(x) => {
                if self.needs(x) {
                    let w = *node.value.shape().last().unwrap();
                    let sx = slot(grads, x, g.len());
                    for ((yr, gr), sr) in y.chunks_exact(w).zip(g.chunks_exact(w)).zip(sx.chunks_exact_mut(w)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..w {
                            sr[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let d = self.nodes[gamma as usize].value.numel();
                let gv = self.nodes[gamma as usize].value.data();
                if self.needs(x) {
                    let sx = slot(grads, x, g.len());
                    let mut dxhat = vec![0.0; d];
                    for (r, (gr, sr)) in g.chunks_exact(d).zip(sx.chunks_exact_mut(d)).enumerate() {
                        let hr = &xhat[r * d..(r + 1) * d];
                        let mut sum_d = 0.0;
                        let mut sum_dh = 0.0;
                        for j in 0..d {
                            dxhat[j] = gr[j] * gv[j];
                            sum_d += dxhat[j];
                            sum_dh += dxhat[j] * hr[j];
                        }
                        let k = inv_std[r] / d as f64;
                        for j in 0..d {
                            sr[j] += k * (d as f64 * dxhat[j] - sum_d - hr[j] * sum_dh);
                        }
                    }
                }
                if self.needs(gamma) {
                    let sg = slot(grads, gamma, d);
                    for (gr, hr) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                        for j in 0..d {
                            sg[j] += gr[j] * hr[j];
                        }
                    }
                }
                if self.needs(beta) {
                    let sb = slot(grads, beta, d);
                    for gr in g.chunks_exact(d) {
                        for j in 0..d {
                            sb[j] += gr[j];
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let logits = *logits;
                if self.needs(logits) {
                    let c = probs.len() / labels.len();
                    let scale = g[0] / labels.len() as f64;
                    let sl = slot(grads, logits, probs.len());
                    for (r, &label) in labels.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == label { 1.0 } else { 0.0 };
                            sl[r * c + j] += scale * (probs[r * c + j] - onehot);
                        }
                    }
                }
            }
        }
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], idx: u32, len: usize) -> &mut Vec<f64> {
    grads[idx as usize].get_or_insert_with(|| vec![0.0; len])
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = Float::exp(*v - max);
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (numel(&shape[..axis]), shape[axis], numel(&shape[axis + 1..]))
}

fn broadcast_strides(shape: &[usize]) -> Vec<usize> {
    let mut st = strides(shape);
    for (s, &e) in st.iter_mut().zip(shape) {
        if e == 1 {
            *s = 0;
        }
    }
    st
}

fn validate_permutation(shape: &[usize], axes: &[usize]) -> Result<()> {
    let mut seen = vec![false; shape.len()];
    if axes.len() != shape.len() {
        return Err(Error::Shape {
            op: "permute",
            shape: shape.to_vec(),
            reason: format!("axes {axes:?} do not match rank"),
        });
    }
    for &a in axes {
        if a >= shape.len() || seen[a] {
            return Err(Error::Shape {
                op: "permute",
                shape: shape.to_vec(),
                reason: format!("axes {axes:?} are not a permutation"),
            });
        }
        seen[a] = true;
    }
    Ok(())
}

pub(crate) fn permute_data(data: &[f64], shape: &[usize], axes: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let in_st = strides(shape);
    let st: Vec<usize> = axes.iter().map(|&a| in_st[a]).collect();
    let mut out = Vec::with_capacity(data.len());
    strided_walk(&out_shape, &st, |off| out.push(data[off]));
    (out, out_shape)
}

/// Visits every index of `shape` in row-major order, passing the offset
/// `Σ index[i]·strides[i]` to `f`.
fn strided_walk(shape: &[usize], strides: &[usize], mut f: impl FnMut(usize)) {
    let r = shape.len();
    if r == 0 {
        f(0);
        return;
    }
    let (last_len, last_st) = (shape[r - 1], strides[r - 1]);
    let mut idx = vec![0usize; r];
    let mut base = 0usize;
    loop {
        let mut off = base;
        for _ in 0..last_len {
            f(off);
            off += last_st;
        }
        // advance the outer axes
        let mut a = r - 1;
        loop {
            if a == 0 {
                return;
            }
            a -= 1;
            idx[a] += 1;
            base += strides[a];
            if idx[a] < shape[a] {
                break;
            }
            base -= strides[a] * shape[a];
            idx[a] = 0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn relu_sigmoid_elu_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3], &[-1.0, 0.0, 2.0]));
        let r = tape.relu(x).unwrap();
        assert_eq!(tape.value(r).data(), &[0.0, 0.0, 2.0]);
        let z = tape.constant(t(&[1], &[0.0]));
        let s = tape.sigmoid(z).unwrap();
        assert_eq!(tape.value(s).data(), &[0.5]);
        let m = tape.constant(t(&[1], &[-20.0]));
        let e = tape.elu_plus_one(m).unwrap();
        let v = tape.value(e).data()[0];
        assert!(v > 0.0 && (v - Float::exp(-20.0f64)).abs() < 1e-20);
    }

    #[test]
    fn softmax_is_stable_and_normalized() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 3], &[0.0, 0.0, 0.0, 1000.0, 0.0, -5.0]));
        let s = tape.softmax(x).unwrap();
        let v = tape.value(s).data();
        for x in &v[..3] {
            assert!((x - 1.0 / 3.0).abs() < 1e-15);
        }
        assert!((v[3] - 1.0).abs() < 1e-15 && v[4] < 1e-300);
    }

    #[test]
    fn division_by_zero_is_a_domain_error() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2], &[1.0, 2.0]));
        let b = tape.constant(t(&[2], &[1.0, 0.0]));
        assert!(matches!(tape.div(a, b), Err(Error::Domain { .. })));
        let g = tape.guard_denominator(b, 1e-6, false).unwrap();
        assert_eq!(tape.value(g).data(), &[1.0, 1e-6]);
        assert!(matches!(
            tape.guard_denominator(b, 1e-6, true),
            Err(Error::DegenerateRow { row: 1, .. })
        ));
    }

    #[test]
    fn scalar_broadcast_only() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let s = tape.constant(Tensor::scalar(10.0));
        let y = tape.mul(a, s).unwrap();
        assert_eq!(tape.value(y).data(), &[10.0, 20.0, 30.0, 40.0]);
        let row = tape.constant(t(&[2], &[1.0, 1.0]));
        assert!(matches!(tape.add(a, row), Err(Error::Dimension { .. })));
    }

    #[test]
    fn non_finite_output_aborts_with_stats() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2], &[1.0, 800.0]));
        match tape.exp(x) {
            Err(Error::NonFinite { op, inputs }) => {
                assert_eq!(op, "exp");
                assert_eq!(inputs[0].max, 800.0);
            }
            other => panic!("expected NonFinite, got {other:?}", other = other.map(|_| ())),
        }
    }

    #[test]
    fn sum_backward_is_all_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_fn(&[2, 3, 2], |i| i as f64), true);
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &Tensor::ones(&[2, 3, 2]));
    }

    #[test]
    fn matmul_sum_grad_is_ones_times_bt() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::from_fn(&[2, 3], |i| i as f64 * 0.5), true);
        let bt = Tensor::from_fn(&[3, 4], |i| (i as f64) - 3.0);
        let b = tape.leaf(bt.clone(), false);
        let c = tape.matmul(a, b).unwrap();
        let s = tape.sum(c).unwrap();
        let g = tape.backward(s).unwrap();
        let want = Tensor::ones(&[2, 4]).matmul(&bt.transpose().unwrap()).unwrap();
        assert_eq!(g.get(a).unwrap(), &want);
        assert!(g.get(b).is_none());
    }

    #[test]
    fn backward_misuse_is_reported() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[2]));
        let s = tape.sum(x).unwrap();
        assert!(matches!(tape.backward(s), Err(Error::Usage(_))));

        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::ones(&[2]), true);
        assert!(matches!(tape.backward(x), Err(Error::Usage(_))));

        let mut other = Tape::new();
        let y = other.leaf(Tensor::ones(&[1]), true);
        let tape = Tape::new();
        assert!(matches!(tape.backward(y), Err(Error::Usage(_))));
    }

    #[test]
    fn unused_leaves_get_zero_gradients() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::ones(&[3]), true);
        let unused = tape.leaf(Tensor::ones(&[2, 2]), true);
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(unused).unwrap(), &Tensor::zeros(&[2, 2]));
    }

    #[test]
    fn backward_visits_in_strictly_decreasing_order() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_fn(&[2, 2], |i| i as f64), true);
        let y = tape.mul(x, x).unwrap();
        let z = tape.add(y, x).unwrap();
        let s = tape.sum(z).unwrap();
        let g = tape.backward(s).unwrap();
        let order = g.visit_order();
        assert!(order.windows(2).all(|w| w[0] > w[1]));
        assert_eq!(order.len(), 4);
    }

    #[test]
    fn permute_round_trip() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[2, 3, 4, 5], |i| i as f64));
        let p = tape.permute(x, &[2, 0, 3, 1]).unwrap();
        assert_eq!(tape.shape(p), &[4, 2, 5, 3]);
        assert_eq!(tape.value(p).at(&[3, 1, 4, 2]), tape.value(x).at(&[1, 2, 3, 4]));
        let back = tape.permute(p, &[1, 3, 0, 2]).unwrap();
        assert_eq!(tape.value(back), tape.value(x));
    }

    #[test]
    fn expand_broadcasts_unit_axes() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 3], &[1.0, 2.0, 3.0]));
        let e = tape.expand(x, &[2, 3]).unwrap();
        assert_eq!(tape.value(e).data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
        assert!(tape.expand(x, &[2, 4]).is_err());
    }
}
