//! Softmax, kernelized-quadratic and linear attention.
//!
//! Tape-level functions take `[G, L, D]` batches of independent sequences (one
//! group per head and sequence). The kernel ρ is applied by the caller, so
//! fixation can sit between ρ and the attention product. The `*_into` slice
//! kernels at the bottom are allocation-free on the hot path and generic over
//! precision; the profiler times those.

use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::flops::{FlopLedger, OpClass};
use crate::real::Real;
use crate::tensor::{Tape, Tensor, Unary, Var};

/// Default lower bound for linear-attention normalizers.
pub const DEFAULT_EPSILON: f64 = 1e-6;

/// Added to masked logits. Large enough that `exp` underflows to exactly zero.
pub const MASK_VALUE: f64 = -1e30;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum KernelTag {
    Relu,
    EluPlusOne,
    Sigmoid,
}

impl KernelTag {
    pub const ALL: [KernelTag; 3] = [KernelTag::Relu, KernelTag::EluPlusOne, KernelTag::Sigmoid];

    pub fn name(self) -> &'static str {
        match self {
            KernelTag::Relu => "relu",
            KernelTag::EluPlusOne => "elu_plus_one",
            KernelTag::Sigmoid => "sigmoid",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }

    fn unary(self) -> Unary {
        match self {
            KernelTag::Relu => Unary::Relu,
            KernelTag::EluPlusOne => Unary::EluPlusOne,
            KernelTag::Sigmoid => Unary::Sigmoid,
        }
    }
}

/// Feature map ρ plus the normalizer guard used with it.
///
/// With `strict`, a normalizer below `epsilon` is a [`Error::DegenerateRow`];
/// otherwise it is clamped up to `epsilon`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KernelFn {
    pub tag: KernelTag,
    pub epsilon: f64,
    pub strict: bool,
}

impl KernelFn {
    pub fn new(tag: KernelTag) -> Self {
        Self {
            tag,
            epsilon: DEFAULT_EPSILON,
            strict: false,
        }
    }

    pub fn relu() -> Self {
        Self::new(KernelTag::Relu)
    }

    pub fn strict(mut self) -> Self {
        self.strict = true;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::config(alloc::format!(
                "kernel epsilon must be positive and finite, got {}",
                self.epsilon
            )));
        }
        Ok(())
    }

    #[inline]
    pub fn eval<R: Real>(&self, x: R) -> R {
        match self.tag {
            KernelTag::Relu => x.max(R::zero()),
            KernelTag::EluPlusOne => {
                if x > R::zero() {
                    x + R::one()
                } else {
                    x.exp()
                }
            }
            KernelTag::Sigmoid => R::one() / (R::one() + (-x).exp()),
        }
    }

    /// Elementwise ρ on the tape.
    pub fn apply(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        tape.unary(x, self.tag.unary())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Family {
    Softmax,
    LinearQuadratic,
    Linear,
}

impl Family {
    pub const ALL: [Family; 3] = [Family::Softmax, Family::LinearQuadratic, Family::Linear];

    pub fn name(self) -> &'static str {
        match self {
            Family::Softmax => "softmax",
            Family::LinearQuadratic => "linear-quadratic",
            Family::Linear => "linear",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|f| f.name() == s)
    }

    pub fn is_kernelized(self) -> bool {
        self != Family::Softmax
    }
}

/// Result of a standalone attention call on `N×D` matrices.
#[derive(Clone, Debug)]
pub struct AttentionOutput {
    pub y: Tensor,
    /// Row-normalized `N×N` weights, present for the quadratic paths.
    pub matrix: Option<Tensor>,
    pub flops: FlopLedger,
}

fn check_qkv(tape: &Tape, op: &'static str, q: Var, k: Var, v: Var) -> Result<(usize, usize, usize)> {
    let (sq, sk, sv) = (tape.shape(q), tape.shape(k), tape.shape(v));
    if sq.len() != 3 || sk.len() != 3 || sv.len() != 3 {
        return Err(Error::Dimension {
            op,
            lhs: sq.to_vec(),
            rhs: sk.to_vec(),
        });
    }
    if sq[0] != sk[0] || sq[2] != sk[2] {
        return Err(Error::Dimension {
            op,
            lhs: sq.to_vec(),
            rhs: sk.to_vec(),
        });
    }
    if sv[0] != sk[0] || sv[1] != sk[1] {
        return Err(Error::Dimension {
            op,
            lhs: sk.to_vec(),
            rhs: sv.to_vec(),
        });
    }
    Ok((sq[0], sq[1], sk[1]))
}

/// `softmax(q kᵀ [/ √D] + mask) v` over `[G, L, D]` groups. Returns the output
/// and the attention weights `[G, Lq, Lk]`.
pub fn softmax_attention_tape(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    scale: bool,
    mask: Option<Var>,
) -> Result<(Var, Var)> {
    check_qkv(tape, "softmax_attention", q, k, v)?;
    let d = tape.shape(q)[2];
    let kt = tape.transpose(k)?;
    let mut logits = tape.bmm(q, kt)?;
    if scale {
        logits = tape.scale(logits, 1.0 / num_traits::Float::sqrt(d as f64))?;
    }
    if let Some(m) = mask {
        logits = tape.add(logits, m)?;
    }
    let p = tape.softmax(logits)?;
    let y = tape.bmm(p, v)?;
    Ok((y, p))
}

/// Row-normalized `ρ(Q)ρ(K)ᵀ` times `V`, with the `[G, Lq, Lk]` matrix
/// materialized. Inputs are already kernelized.
pub fn kernel_attention_quadratic_tape(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    kernel: &KernelFn,
) -> Result<(Var, Var)> {
    let (g, lq, lk) = check_qkv(tape, "linear_attention_quadratic", q, k, v)?;
    let kt = tape.transpose(k)?;
    let a = tape.bmm(q, kt)?;
    let den = tape.sum_axis(a, 2)?;
    let den = tape.guard_denominator(den, kernel.epsilon, kernel.strict)?;
    let den = tape.expand(den, &[g, lq, lk])?;
    let p = tape.div(a, den)?;
    let y = tape.bmm(p, v)?;
    Ok((y, p))
}

/// `ρ(Q)(ρ(K)ᵀV)` divided row-wise by `ρ(Q)Σⱼρ(kⱼ)`. Inputs are already
/// kernelized. No `L×L` intermediate exists.
pub fn linear_attention_tape(tape: &mut Tape, q: Var, k: Var, v: Var, kernel: &KernelFn) -> Result<Var> {
    let (g, lq, _) = check_qkv(tape, "linear_attention", q, k, v)?;
    let dv = tape.shape(v)[2];
    let kt = tape.transpose(k)?;
    let kv = tape.bmm(kt, v)?; // [G, D, Dv]
    let ksum = tape.sum_axis(k, 1)?; // [G, 1, D]
    let ksum_t = tape.transpose(ksum)?; // [G, D, 1]
    let den = tape.bmm(q, ksum_t)?; // [G, Lq, 1]
    let den = tape.guard_denominator(den, kernel.epsilon, kernel.strict)?;
    let den = tape.expand(den, &[g, lq, dv])?;
    let num = tape.bmm(q, kv)?;
    tape.div(num, den)
}

/// Dispatches on `family`. For kernelized families `q` and `k` must already be
/// kernelized. Returns the output and, for the quadratic paths, the weights.
pub fn attend(
    tape: &mut Tape,
    family: Family,
    q: Var,
    k: Var,
    v: Var,
    kernel: &KernelFn,
    softmax_scale: bool,
    mask: Option<Var>,
) -> Result<(Var, Option<Var>)> {
    match family {
        Family::Softmax => {
            let (y, p) = softmax_attention_tape(tape, q, k, v, softmax_scale, mask)?;
            Ok((y, Some(p)))
        }
        Family::LinearQuadratic => {
            let (y, p) = kernel_attention_quadratic_tape(tape, q, k, v, kernel)?;
            Ok((y, Some(p)))
        }
        Family::Linear => Ok((linear_attention_tape(tape, q, k, v, kernel)?, None)),
    }
}

fn lift(tape: &mut Tape, x: &Tensor, what: &'static str) -> Result<Var> {
    if x.rank() != 2 {
        return Err(Error::Shape {
            op: what,
            shape: x.shape().to_vec(),
            reason: "expects an N×D matrix".into(),
        });
    }
    let s = x.shape();
    let v = tape.constant(x.clone());
    tape.reshape(v, &[1, s[0], s[1]])
}

fn lower(tape: &Tape, y: Var) -> Result<Tensor> {
    let s = tape.shape(y);
    tape.value(y).reshape(&[s[1], s[2]])
}

/// Softmax attention on `N×D` matrices.
pub fn softmax_attention(q: &Tensor, k: &Tensor, v: &Tensor, scale: bool) -> Result<AttentionOutput> {
    let mut tape = Tape::new();
    let (qv, kv, vv) = (
        lift(&mut tape, q, "softmax_attention")?,
        lift(&mut tape, k, "softmax_attention")?,
        lift(&mut tape, v, "softmax_attention")?,
    );
    let (y, p) = softmax_attention_tape(&mut tape, qv, kv, vv, scale, None)?;
    Ok(AttentionOutput {
        y: lower(&tape, y)?,
        matrix: Some(lower(&tape, p)?),
        flops: *tape.flops(),
    })
}

/// Kernelized attention through the materialized `N×N` matrix. `q` and `k`
/// are raw; ρ is applied here.
pub fn linear_attention_quadratic(q: &Tensor, k: &Tensor, v: &Tensor, kernel: &KernelFn) -> Result<AttentionOutput> {
    kernel.validate()?;
    let mut tape = Tape::new();
    let op = "linear_attention_quadratic";
    let (qv, kv, vv) = (
        lift(&mut tape, q, op)?,
        lift(&mut tape, k, op)?,
        lift(&mut tape, v, op)?,
    );
    let (qk, kk) = (kernel.apply(&mut tape, qv)?, kernel.apply(&mut tape, kv)?);
    let (y, p) = kernel_attention_quadratic_tape(&mut tape, qk, kk, vv, kernel)?;
    Ok(AttentionOutput {
        y: lower(&tape, y)?,
        matrix: Some(lower(&tape, p)?),
        flops: *tape.flops(),
    })
}

/// Linear attention on `N×D` matrices. `q` and `k` are raw; ρ is applied here.
pub fn linear_attention(q: &Tensor, k: &Tensor, v: &Tensor, kernel: &KernelFn) -> Result<AttentionOutput> {
    kernel.validate()?;
    let mut tape = Tape::new();
    let op = "linear_attention";
    let (qv, kv, vv) = (
        lift(&mut tape, q, op)?,
        lift(&mut tape, k, op)?,
        lift(&mut tape, v, op)?,
    );
    let (qk, kk) = (kernel.apply(&mut tape, qv)?, kernel.apply(&mut tape, kv)?);
    let y = linear_attention_tape(&mut tape, qk, kk, vv, kernel)?;
    Ok(AttentionOutput {
        y: lower(&tape, y)?,
        matrix: None,
        flops: *tape.flops(),
    })
}

/// Zero-padded temporal windows for windowed attention.
///
/// Input rows are `(site, frame)` pairs in `[sites, T, D]` layout. Output row
/// `(site, t)` holds `2r+1` entries for frames `t-r..=t+r`; out-of-range
/// frames are zero. The matching softmax mask is `0` for valid slots and
/// [`MASK_VALUE`] otherwise.
#[derive(Clone, Debug)]
pub struct TemporalWindow {
    pub sites: usize,
    pub frames: usize,
    pub radius: usize,
    map: Vec<(usize, Option<usize>)>,
}

impl TemporalWindow {
    pub fn new(sites: usize, frames: usize, radius: usize) -> Self {
        let w = 2 * radius + 1;
        let mut map = Vec::with_capacity(frames * w);
        for t in 0..frames {
            for o in 0..w {
                let src = t as isize + o as isize - radius as isize;
                map.push((t, (0..frames as isize).contains(&src).then_some(src as usize)));
            }
        }
        Self {
            sites,
            frames,
            radius,
            map,
        }
    }

    pub fn width(&self) -> usize {
        2 * self.radius + 1
    }

    /// Gathers `[sites, T, D]` into `[sites·T, 2r+1, D]`.
    pub fn gather(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let d = tape.shape(x)[2];
        let w = self.width();
        let mut idx = Vec::with_capacity(self.sites * self.frames * w * d);
        for s in 0..self.sites {
            for &(_, src) in &self.map {
                for c in 0..d {
                    idx.push(match src {
                        Some(f) => ((s * self.frames + f) * d + c) as u32,
                        None => crate::tensor::GATHER_ZERO,
                    });
                }
            }
        }
        tape.gather(x, Arc::from(idx), &[self.sites * self.frames, w, d])
    }

    /// `[sites·T, 1, 2r+1]` additive mask.
    pub fn mask(&self) -> Tensor {
        let w = self.width();
        let mut data = Vec::with_capacity(self.sites * self.frames * w);
        for _ in 0..self.sites {
            data.extend(
                self.map
                    .iter()
                    .map(|&(_, s)| if s.is_some() { 0.0 } else { MASK_VALUE }),
            );
        }
        Tensor::new(&[self.sites * self.frames, 1, w], data).expect("window mask shape")
    }
}

// ---- slice kernels ---------------------------------------------------------

/// Scratch space for [`linear_attention_into`]: `D×Dv + D + D` values,
/// independent of sequence length.
#[derive(Clone, Debug)]
pub struct LinearWorkspace<R> {
    kv: Vec<R>,
    ksum: Vec<R>,
    phi: Vec<R>,
}

impl<R: Real> LinearWorkspace<R> {
    pub fn new(d: usize, dv: usize) -> Self {
        Self {
            kv: vec![R::zero(); d * dv],
            ksum: vec![R::zero(); d],
            phi: vec![R::zero(); d],
        }
    }
}

fn check_slices(
    op: &'static str,
    q: usize,
    k: usize,
    v: usize,
    out: usize,
    n: usize,
    d: usize,
    dv: usize,
) -> Result<()> {
    if q != n * d || k != n * d || v != n * dv || out != n * dv {
        return Err(Error::Dimension {
            op,
            lhs: vec![n, d, dv],
            rhs: vec![q, k, v, out],
        });
    }
    Ok(())
}

/// Linear attention over raw `q`, `k` (`N×D`) and `v` (`N×Dv`), applying ρ on
/// the fly. Allocates nothing; all scratch lives in `ws`.
pub fn linear_attention_into<R: Real>(
    q: &[R],
    k: &[R],
    v: &[R],
    n: usize,
    d: usize,
    dv: usize,
    kernel: &KernelFn,
    ws: &mut LinearWorkspace<R>,
    out: &mut [R],
    flops: &mut FlopLedger,
) -> Result<()> {
    check_slices("linear_attention", q.len(), k.len(), v.len(), out.len(), n, d, dv)?;
    if ws.kv.len() != d * dv || ws.ksum.len() != d {
        *ws = LinearWorkspace::new(d, dv);
    }
    ws.kv.iter_mut().for_each(|x| *x = R::zero());
    ws.ksum.iter_mut().for_each(|x| *x = R::zero());
    for (k_row, v_row) in k.chunks_exact(d).zip(v.chunks_exact(dv)) {
        for (i, &kx) in k_row.iter().enumerate() {
            let p = kernel.eval(kx);
            ws.ksum[i] += p;
            if p == R::zero() {
                continue;
            }
            for (acc, &vx) in ws.kv[i * dv..(i + 1) * dv].iter_mut().zip(v_row) {
                *acc += p * vx;
            }
        }
    }
    let eps = R::from_f64(kernel.epsilon);
    for (row, (q_row, o_row)) in q.chunks_exact(d).zip(out.chunks_exact_mut(dv)).enumerate() {
        let mut den = R::zero();
        for ((p, &qx), &s) in ws.phi.iter_mut().zip(q_row).zip(&ws.ksum) {
            *p = kernel.eval(qx);
            den += *p * s;
        }
        if den < eps {
            if kernel.strict {
                return Err(Error::DegenerateRow {
                    row,
                    value: den.to_f64(),
                    epsilon: kernel.epsilon,
                });
            }
            den = eps;
        }
        o_row.iter_mut().for_each(|x| *x = R::zero());
        for (i, &p) in ws.phi.iter().enumerate() {
            if p == R::zero() {
                continue;
            }
            for (o, &kvx) in o_row.iter_mut().zip(&ws.kv[i * dv..(i + 1) * dv]) {
                *o += p * kvx;
            }
        }
        let inv = R::one() / den;
        o_row.iter_mut().for_each(|x| *x *= inv);
    }
    flops.add(OpClass::Elementwise, 4 * (2 * n * d) as u64); // ρ on q and k
    flops.add_matmul(d, n, dv); // ρ(K)ᵀV
    flops.add(OpClass::Reduction, (n * d) as u64); // Σ ρ(k)
    flops.add_matmul(n, d, 1); // denominators
    flops.add_matmul(n, d, dv); // numerators
    flops.add(OpClass::Elementwise, (n * dv) as u64);
    Ok(())
}

/// Softmax attention computed one query row at a time; `row` is `N` scratch
/// values, so no `N×N` buffer is held.
pub fn softmax_attention_into<R: Real>(
    q: &[R],
    k: &[R],
    v: &[R],
    n: usize,
    d: usize,
    dv: usize,
    scale: bool,
    row: &mut Vec<R>,
    out: &mut [R],
    flops: &mut FlopLedger,
) -> Result<()> {
    check_slices("softmax_attention", q.len(), k.len(), v.len(), out.len(), n, d, dv)?;
    row.resize(n, R::zero());
    let s = if scale {
        R::one() / R::from_f64(d as f64).sqrt()
    } else {
        R::one()
    };
    for (q_row, o_row) in q.chunks_exact(d).zip(out.chunks_exact_mut(dv)) {
        let mut max = R::neg_infinity();
        for (r, k_row) in row.iter_mut().zip(k.chunks_exact(d)) {
            let mut dot = R::zero();
            for (&a, &b) in q_row.iter().zip(k_row) {
                dot += a * b;
            }
            *r = dot * s;
            if *r > max {
                max = *r;
            }
        }
        let mut sum = R::zero();
        for r in row.iter_mut() {
            *r = (*r - max).exp();
            sum += *r;
        }
        o_row.iter_mut().for_each(|x| *x = R::zero());
        for (&p, v_row) in row.iter().zip(v.chunks_exact(dv)) {
            for (o, &vx) in o_row.iter_mut().zip(v_row) {
                *o += p * vx;
            }
        }
        let inv = R::one() / sum;
        o_row.iter_mut().for_each(|x| *x *= inv);
    }
    flops.add_matmul(n, d, n);
    flops.add(OpClass::Elementwise, (n * n) as u64);
    flops.add(OpClass::Softmax, 5 * (n * n) as u64);
    flops.add_matmul(n, n, dv);
    Ok(())
}

/// Kernelized attention through a materialized `N×N` matrix held in `matrix`.
pub fn linear_attention_quadratic_into<R: Real>(
    q: &[R],
    k: &[R],
    v: &[R],
    n: usize,
    d: usize,
    dv: usize,
    kernel: &KernelFn,
    matrix: &mut Vec<R>,
    out: &mut [R],
    flops: &mut FlopLedger,
) -> Result<()> {
    check_slices(
        "linear_attention_quadratic",
        q.len(),
        k.len(),
        v.len(),
        out.len(),
        n,
        d,
        dv,
    )?;
    matrix.clear();
    matrix.resize(n * n, R::zero());
    let rk: Vec<R> = k.iter().map(|&x| kernel.eval(x)).collect();
    let rq: Vec<R> = q.iter().map(|&x| kernel.eval(x)).collect();
    let eps = R::from_f64(kernel.epsilon);
    for (i, (q_row, m_row)) in rq.chunks_exact(d).zip(matrix.chunks_exact_mut(n)).enumerate() {
        let mut den = R::zero();
        for (m, k_row) in m_row.iter_mut().zip(rk.chunks_exact(d)) {
            let mut dot = R::zero();
            for (&a, &b) in q_row.iter().zip(k_row) {
                dot += a * b;
            }
            *m = dot;
            den += dot;
        }
        if den < eps {
            if kernel.strict {
                return Err(Error::DegenerateRow {
                    row: i,
                    value: den.to_f64(),
                    epsilon: kernel.epsilon,
                });
            }
            den = eps;
        }
        let inv = R::one() / den;
        m_row.iter_mut().for_each(|m| *m *= inv);
    }
    out.iter_mut().for_each(|x| *x = R::zero());
    crate::tensor::gemm::gemm_nn(matrix, v, out, n, n, dv);
    flops.add(OpClass::Elementwise, 4 * (2 * n * d) as u64);
    flops.add_matmul(n, d, n);
    flops.add(OpClass::Reduction, (n * n) as u64);
    flops.add(OpClass::Elementwise, (n * n) as u64);
    flops.add_matmul(n, n, dv);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    /// Explicit per-row softmax then weighted sum.
    fn softmax_oracle(q: &Tensor, k: &Tensor, v: &Tensor, scale: bool) -> Vec<f64> {
        let (n, d) = (q.shape()[0], q.shape()[1]);
        let s = if scale { 1.0 / (d as f64).sqrt() } else { 1.0 };
        let mut y = vec![0.0; n * d];
        for i in 0..n {
            let logits: Vec<f64> = (0..n)
                .map(|j| (0..d).map(|c| q.at(&[i, c]) * k.at(&[j, c])).sum::<f64>() * s)
                .collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let z: f64 = w.iter().sum();
            for (j, wj) in w.iter().enumerate() {
                for c in 0..d {
                    y[i * d + c] += wj / z * v.at(&[j, c]);
                }
            }
        }
        y
    }

    #[test]
    fn softmax_single_token_returns_v() {
        let v = Tensor::new(&[1, 3], vec![0.3, -2.0, 5.0]).unwrap();
        let q = Tensor::new(&[1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let out = softmax_attention(&q, &q, &v, true).unwrap();
        assert_eq!(out.y, v);
    }

    #[test]
    fn softmax_zero_query_averages_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let k = rand_t(&mut rng, &[5, 4]);
        let v = rand_t(&mut rng, &[5, 4]);
        let out = softmax_attention(&Tensor::zeros(&[5, 4]), &k, &v, false).unwrap();
        for c in 0..4 {
            let mean = (0..5).map(|j| v.at(&[j, c])).sum::<f64>() / 5.0;
            for i in 0..5 {
                assert!((out.y.at(&[i, c]) - mean).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn softmax_matches_per_row_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (q, k, v) = (
            rand_t(&mut rng, &[6, 4]),
            rand_t(&mut rng, &[6, 4]),
            rand_t(&mut rng, &[6, 4]),
        );
        for scale in [false, true] {
            let out = softmax_attention(&q, &k, &v, scale).unwrap();
            let want = Tensor::new(&[6, 4], softmax_oracle(&q, &k, &v, scale)).unwrap();
            assert!(out.y.max_rel_diff(&want) < 1e-12);
        }
    }

    #[test]
    fn relu_quadratic_on_nonnegative_inputs_is_plain_normalized_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let q = rand_t(&mut rng, &[5, 3]).map(f64::abs);
        let k = rand_t(&mut rng, &[5, 3]).map(f64::abs);
        let v = rand_t(&mut rng, &[5, 3]);
        let out = linear_attention_quadratic(&q, &k, &v, &KernelFn::relu()).unwrap();
        let a = q.matmul(&k.transpose().unwrap()).unwrap();
        let mut p = a.clone();
        for i in 0..5 {
            let s: f64 = a.row(i).iter().sum();
            for x in &mut p.data_mut()[i * 5..(i + 1) * 5] {
                *x /= s;
            }
        }
        let want = p.matmul(&v).unwrap();
        assert!(out.y.max_rel_diff(&want) < 1e-14);
    }

    #[test]
    fn zero_key_row_gives_zero_column() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let q = rand_t(&mut rng, &[4, 3]).map(|x| x.abs() + 0.1);
        let mut k = rand_t(&mut rng, &[4, 3]).map(f64::abs);
        for c in 0..3 {
            k.data_mut()[2 * 3 + c] = 0.0;
        }
        let v = rand_t(&mut rng, &[4, 3]);
        let m = linear_attention_quadratic(&q, &k, &v, &KernelFn::relu())
            .unwrap()
            .matrix
            .unwrap();
        for i in 0..4 {
            assert_eq!(m.at(&[i, 2]), 0.0);
        }
    }

    #[test]
    fn linear_single_token_returns_v() {
        let q = Tensor::new(&[1, 2], vec![0.5, 2.0]).unwrap();
        let v = Tensor::new(&[1, 2], vec![-1.5, 7.0]).unwrap();
        let out = linear_attention(&q, &q, &v, &KernelFn::relu()).unwrap();
        assert_eq!(out.y, v);
    }

    #[test]
    fn linear_matches_quadratic_fixed_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (q, k, v) = (
            rand_t(&mut rng, &[8, 4]),
            rand_t(&mut rng, &[8, 4]),
            rand_t(&mut rng, &[8, 4]),
        );
        for tag in KernelTag::ALL {
            let kf = KernelFn::new(tag);
            let a = linear_attention(&q, &k, &v, &kf).unwrap().y;
            let b = linear_attention_quadratic(&q, &k, &v, &kf).unwrap().y;
            assert!(a.max_rel_diff(&b) < 1e-10, "{tag:?}");
        }
    }

    #[test]
    fn strict_mode_names_degenerate_row() {
        let mut q = Tensor::ones(&[3, 2]);
        q.data_mut()[2] = -1.0;
        q.data_mut()[3] = -1.0;
        let k = Tensor::ones(&[3, 2]);
        let v = Tensor::ones(&[3, 2]);
        let err = linear_attention(&q, &k, &v, &KernelFn::relu().strict()).unwrap_err();
        assert!(matches!(err, Error::DegenerateRow { row: 1, .. }), "{err}");
        let err = linear_attention_quadratic(&q, &k, &v, &KernelFn::relu().strict()).unwrap_err();
        assert!(matches!(err, Error::DegenerateRow { row: 1, .. }), "{err}");
        let ok = linear_attention(&q, &k, &v, &KernelFn::relu()).unwrap();
        assert_eq!(ok.y.row(1), &[0.0, 0.0]);
    }

    #[test]
    fn flop_ratios_when_n_doubles() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut counts = Vec::new();
        for n in [256, 512] {
            let (q, k, v) = (
                rand_t(&mut rng, &[n, 32]),
                rand_t(&mut rng, &[n, 32]),
                rand_t(&mut rng, &[n, 32]),
            );
            let lin = linear_attention(&q, &k, &v, &KernelFn::relu()).unwrap().flops.total();
            let sm = softmax_attention(&q, &k, &v, true).unwrap().flops.total();
            counts.push((lin, sm));
        }
        let lr = counts[1].0 as f64 / counts[0].0 as f64;
        let sr = counts[1].1 as f64 / counts[0].1 as f64;
        assert!((1.9..=2.1).contains(&lr), "{lr}");
        assert!((3.8..=4.2).contains(&sr), "{sr}");
    }

    #[test]
    fn slice_kernels_agree_with_tape_versions() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let (n, d) = (9, 5);
        let (q, k, v) = (
            rand_t(&mut rng, &[n, d]),
            rand_t(&mut rng, &[n, d]),
            rand_t(&mut rng, &[n, d]),
        );
        let mut out = vec![0.0; n * d];
        let mut fl = FlopLedger::new();
        for tag in KernelTag::ALL {
            let kf = KernelFn::new(tag);
            let mut ws = LinearWorkspace::new(d, d);
            linear_attention_into(q.data(), k.data(), v.data(), n, d, d, &kf, &mut ws, &mut out, &mut fl).unwrap();
            let want = linear_attention(&q, &k, &v, &kf).unwrap().y;
            assert!(Tensor::new(&[n, d], out.clone()).unwrap().max_rel_diff(&want) < 1e-12);
            let mut m = Vec::new();
            linear_attention_quadratic_into(q.data(), k.data(), v.data(), n, d, d, &kf, &mut m, &mut out, &mut fl)
                .unwrap();
            assert!(Tensor::new(&[n, d], out.clone()).unwrap().max_rel_diff(&want) < 1e-10);
        }
        let mut row = Vec::new();
        softmax_attention_into(q.data(), k.data(), v.data(), n, d, d, true, &mut row, &mut out, &mut fl).unwrap();
        let want = softmax_attention(&q, &k, &v, true).unwrap().y;
        assert!(Tensor::new(&[n, d], out).unwrap().max_rel_diff(&want) < 1e-12);
    }

    #[test]
    fn windowed_gather_pads_with_zeros() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[2, 3, 1], |i| i as f64 + 1.0));
        let win = TemporalWindow::new(2, 3, 1);
        let g = win.gather(&mut tape, x).unwrap();
        // site 1, frame 0: frames -1, 0, 1
        assert_eq!(&tape.value(g).data()[9..12], &[0.0, 4.0, 5.0]);
        let m = win.mask();
        assert_eq!(&m.data()[..3], &[MASK_VALUE, 0.0, 0.0]);
    }
}
