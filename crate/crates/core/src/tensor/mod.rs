//! Dense row-major `f64` tensors and the reverse-mode tape built on them.
//!
//! Broadcasting rule: binary elementwise ops accept two tensors of identical
//! shape, or one rank-0 scalar and a tensor of any shape. Every other shape
//! coercion goes through an explicit [`Tape::reshape`] or [`Tape::expand`].

pub mod gemm;
mod tape;

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, InputStats, Result};

pub use tape::{Binary, Gradients, Tape, Unary, Var, GATHER_ZERO};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub(crate) fn check_shape(op: &'static str, shape: &[usize]) -> Result<()> {
    if shape.contains(&0) {
        return Err(Error::Shape {
            op,
            shape: shape.to_vec(),
            reason: "extents must be positive".into(),
        });
    }
    Ok(())
}

/// Row-major strides for `shape`.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        check_shape("tensor", shape)?;
        if numel(shape) != data.len() {
            return Err(Error::Shape {
                op: "tensor",
                shape: shape.to_vec(),
                reason: alloc::format!("expects {} values, got {}", numel(shape), data.len()),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn scalar(x: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![x],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        assert!(shape.iter().all(|&e| e > 0), "zero extent in {shape:?}");
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel(shape)],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Builds a tensor from a function of the flat row-major index.
    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> f64) -> Self {
        assert!(shape.iter().all(|&e| e > 0), "zero extent in {shape:?}");
        Self {
            shape: shape.to_vec(),
            data: (0..numel(shape)).map(f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on a tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn at(&self, index: &[usize]) -> f64 {
        assert_eq!(index.len(), self.shape.len());
        let flat = index
            .iter()
            .zip(strides(&self.shape))
            .zip(&self.shape)
            .map(|((&i, s), &e)| {
                assert!(i < e, "index {index:?} out of bounds for {:?}", self.shape);
                i * s
            })
            .sum::<usize>();
        self.data[flat]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        check_shape("reshape", shape)?;
        if numel(shape) != self.numel() {
            return Err(Error::Dimension {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    /// Plain 2-D matrix product without tape registration.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k, p) = matmul_dims("matmul", &self.shape, &other.shape)?;
        let mut out = vec![0.0; m * p];
        gemm::gemm_nn(&self.data, &other.data, &mut out, m, k, p);
        Tensor::new(&[m, p], out)
    }

    pub fn transpose(&self) -> Result<Tensor> {
        if self.rank() != 2 {
            return Err(Error::Shape {
                op: "transpose",
                shape: self.shape.clone(),
                reason: "expects a matrix".into(),
            });
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; r * c];
        gemm::transpose(&self.data, &mut out, r, c);
        Tensor::new(&[c, r], out)
    }

    /// Row `i` of a matrix.
    pub fn row(&self, i: usize) -> &[f64] {
        let cols = *self.shape.last().expect("row() on a scalar");
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|x| x * c)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    /// Largest elementwise difference divided by the larger of the two
    /// tensors' max-abs values (floored at 1e-300).
    pub fn max_rel_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_rel_diff shape mismatch");
        let scale = self.max_abs().max(other.max_abs()).max(1e-300);
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()))
            / scale
    }

    pub(crate) fn stats(&self) -> InputStats {
        let mut min = f64::INFINITY;
        let mut max = f64::NEG_INFINITY;
        let mut sum = 0.0;
        let mut non_finite = 0;
        for &x in &self.data {
            if x.is_finite() {
                min = min.min(x);
                max = max.max(x);
                sum += x;
            } else {
                non_finite += 1;
            }
        }
        let finite = self.data.len() - non_finite;
        InputStats {
            shape: self.shape.clone(),
            min,
            max,
            mean: if finite > 0 { sum / finite as f64 } else { f64::NAN },
            non_finite,
        }
    }
}

pub(crate) fn matmul_dims(op: &'static str, a: &[usize], b: &[usize]) -> Result<(usize, usize, usize)> {
    if a.len() != 2 || b.len() != 2 || a[1] != b[0] {
        return Err(Error::Dimension {
            op,
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        });
    }
    Ok((a[0], a[1], b[1]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_inconsistent_data_length() {
        assert!(Tensor::new(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(&[2, 0], vec![]).is_err());
        assert_eq!(Tensor::new(&[2, 3], vec![0.0; 6]).unwrap().numel(), 6);
    }

    #[test]
    fn matmul_hand_example() {
        let a = Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::new(&[2, 1], vec![0.0, 1.0]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_error_names_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        let msg = alloc::format!("{}", a.matmul(&b).unwrap_err());
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn at_uses_row_major_layout() {
        let t = Tensor::from_fn(&[2, 3, 4], |i| i as f64);
        assert_eq!(t.at(&[1, 2, 3]), 23.0);
        assert_eq!(strides(&[2, 3, 4]), vec![12, 4, 1]);
    }
}
