//! Attention-matrix materialization and concentration metrics.

use alloc::format;
use alloc::vec::Vec;

use num_traits::Float;

use crate::attention::{linear_attention_quadratic, softmax_attention, Family, KernelFn};
use crate::error::{Error, Result};
use crate::model::{stage_attention_matrix, Model};
use crate::tensor::Tensor;

/// Largest sequence length [`materialize_attention`] accepts.
pub const MATERIALIZE_LIMIT: usize = 4096;

/// Row-normalization tolerance accepted by [`concentration`].
pub const ROW_SUM_TOLERANCE: f64 = 1e-6;

/// The `N×N` weights `family` implicitly applies. `q` and `k` are raw; the
/// kernelized families apply ρ here, and the linear family yields its
/// quadratic form `ρ(Q)ρ(K)ᵀ` row-normalized.
pub fn materialize_attention(
    q: &Tensor,
    k: &Tensor,
    family: Family,
    kernel: &KernelFn,
    softmax_scale: bool,
) -> Result<Tensor> {
    let n = q.shape().first().copied().unwrap_or(0);
    if n > MATERIALIZE_LIMIT || k.shape().first().copied().unwrap_or(0) > MATERIALIZE_LIMIT {
        return Err(Error::TooLarge {
            n: n.max(k.shape()[0]),
            limit: MATERIALIZE_LIMIT,
        });
    }
    let v = Tensor::zeros(&[k.shape()[0], 1]);
    let out = match family {
        Family::Softmax => softmax_attention(q, k, &v, softmax_scale)?,
        Family::LinearQuadratic | Family::Linear => linear_attention_quadratic(q, k, &v, kernel)?,
    };
    Ok(out.matrix.expect("quadratic paths return the matrix"))
}

/// Concentration of one attention row.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RowStats {
    pub entropy: f64,
    pub max_weight: f64,
    pub top1: f64,
    pub top5: f64,
}

/// Per-row statistics of a row-normalized matrix (rows along the last axis).
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ConcentrationStats {
    /// All-zero rows skipped: queries the kernel maps to zero attend nowhere.
    pub degenerate: usize,
    pub entropy: Vec<f64>,
    pub max_weight: Vec<f64>,
    pub top1: Vec<f64>,
    pub top5: Vec<f64>,
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.iter().sum::<f64>() / v.len() as f64
}

impl ConcentrationStats {
    pub fn rows(&self) -> usize {
        self.entropy.len()
    }

    pub fn mean_entropy(&self) -> f64 {
        mean(&self.entropy)
    }

    pub fn mean_top1(&self) -> f64 {
        mean(&self.top1)
    }

    pub fn mean_top5(&self) -> f64 {
        mean(&self.top5)
    }

    pub fn push(&mut self, r: RowStats) {
        self.entropy.push(r.entropy);
        self.max_weight.push(r.max_weight);
        self.top1.push(r.top1);
        self.top5.push(r.top5);
    }

    pub fn extend(&mut self, other: &ConcentrationStats) {
        self.degenerate += other.degenerate;
        self.entropy.extend_from_slice(&other.entropy);
        self.max_weight.extend_from_slice(&other.max_weight);
        self.top1.extend_from_slice(&other.top1);
        self.top5.extend_from_slice(&other.top5);
    }
}

/// Entropy (`0·ln 0 = 0`), max weight and top-1/top-5 mass of one
/// normalized row.
pub fn row_stats(row: &[f64]) -> RowStats {
    let mut entropy = 0.0;
    let mut top = [0.0f64; 5];
    for &p in row {
        if p > 0.0 {
            entropy -= p * Float::ln(p);
        }
        if p > top[4] {
            let mut i = 4;
            while i > 0 && top[i - 1] < p {
                top[i] = top[i - 1];
                i -= 1;
            }
            top[i] = p;
        }
    }
    RowStats {
        entropy: entropy.max(0.0),
        max_weight: top[0],
        top1: top[0],
        top5: top.iter().sum(),
    }
}

/// Statistics for every row. Rows must be non-negative and sum to one within
/// [`ROW_SUM_TOLERANCE`], or be entirely zero.
pub fn concentration(matrix: &Tensor) -> Result<ConcentrationStats> {
    let w = *matrix
        .shape()
        .last()
        .ok_or_else(|| Error::Input("concentration of a scalar".into()))?;
    let mut stats = ConcentrationStats::default();
    for (i, row) in matrix.data().chunks_exact(w).enumerate() {
        if let Some(&p) = row.iter().find(|&&p| p < 0.0) {
            return Err(Error::Input(format!("row {i} has a negative weight {p:e}")));
        }
        let s: f64 = row.iter().sum();
        if s == 0.0 {
            stats.degenerate += 1;
            continue;
        }
        if (s - 1.0).abs() > ROW_SUM_TOLERANCE {
            return Err(Error::Input(format!("row {i} sums to {s}, not 1")));
        }
        stats.push(row_stats(row));
    }
    Ok(stats)
}

/// Concentration of every attention row of `layer` while `model` runs on
/// `pixels`, pooled over the layer's stages.
pub fn layer_concentration(model: &Model, pixels: &Tensor, layer: usize) -> Result<ConcentrationStats> {
    if layer >= model.config.layers {
        return Err(Error::Usage(format!(
            "layer {layer} is out of range for a {}-layer model",
            model.config.layers
        )));
    }
    let (_, captures) = model.logits_with_capture(pixels)?;
    let mut stats = ConcentrationStats::default();
    for cap in captures.iter().filter(|c| c.layer == layer) {
        let fixation = model.stage_fixation(layer, cap.stage)?;
        let m = stage_attention_matrix(&model.config, cap, &fixation)?;
        stats.extend(&concentration(&m)?);
    }
    Ok(stats)
}

/// Concentration of up to `max_rows` evenly spaced rows of the weights
/// `family` applies to raw `q`, `k` (`N×D`), one row at a time.
pub fn sampled_concentration(
    q: &[f64],
    k: &[f64],
    n: usize,
    d: usize,
    family: Family,
    kernel: &KernelFn,
    softmax_scale: bool,
    max_rows: usize,
) -> ConcentrationStats {
    let rows = max_rows.min(n).max(1);
    let mut stats = ConcentrationStats::default();
    let mut row = alloc::vec![0.0; n];
    let kk: Vec<f64> = match family {
        Family::Softmax => Vec::new(),
        _ => k.iter().map(|&x| kernel.eval(x)).collect(),
    };
    let scale = if softmax_scale {
        1.0 / Float::sqrt(d as f64)
    } else {
        1.0
    };
    for r in 0..rows {
        let i = r * n / rows;
        let qi = &q[i * d..(i + 1) * d];
        match family {
            Family::Softmax => {
                let mut max = f64::NEG_INFINITY;
                for (j, w) in row.iter_mut().enumerate() {
                    *w = qi.iter().zip(&k[j * d..(j + 1) * d]).map(|(a, b)| a * b).sum::<f64>() * scale;
                    max = max.max(*w);
                }
                let mut z = 0.0;
                for w in row.iter_mut() {
                    *w = Float::exp(*w - max);
                    z += *w;
                }
                row.iter_mut().for_each(|w| *w /= z);
            }
            _ => {
                let phi: Vec<f64> = qi.iter().map(|&x| kernel.eval(x)).collect();
                let mut z = 0.0;
                for (j, w) in row.iter_mut().enumerate() {
                    *w = phi.iter().zip(&kk[j * d..(j + 1) * d]).map(|(a, b)| a * b).sum::<f64>();
                    z += *w;
                }
                let z = z.max(kernel.epsilon);
                row.iter_mut().for_each(|w| *w /= z);
            }
        }
        stats.push(row_stats(&row));
    }
    stats
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn fit_exponent(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::Input("exponent fit needs at least two paired points".into()));
    }
    if x.iter()
        .chain(y)
        .any(|&v| v.partial_cmp(&0.0) != Some(core::cmp::Ordering::Greater))
    {
        return Err(Error::Input("exponent fit needs positive values".into()));
    }
    let lx: Vec<f64> = x.iter().map(|&v| Float::ln(v)).collect();
    let ly: Vec<f64> = y.iter().map(|&v| Float::ln(v)).collect();
    let (mx, my) = (mean(&lx), mean(&ly));
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    for (a, b) in lx.iter().zip(&ly) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
    }
    if sxx == 0.0 {
        return Err(Error::Input("exponent fit needs distinct x values".into()));
    }
    Ok(sxy / sxx)
}
