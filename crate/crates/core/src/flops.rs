//! Analytic FLOP accounting.
//!
//! Counts come from operand shapes, never from hardware counters, so the same
//! shapes always yield the same totals. A multiply-accumulate counts as 2.

use core::fmt;
use core::ops::AddAssign;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum OpClass {
    MatMul,
    Elementwise,
    Reduction,
    Softmax,
    Normalization,
}

impl OpClass {
    pub const ALL: [OpClass; 5] = [
        OpClass::MatMul,
        OpClass::Elementwise,
        OpClass::Reduction,
        OpClass::Softmax,
        OpClass::Normalization,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpClass::MatMul => "matmul",
            OpClass::Elementwise => "elementwise",
            OpClass::Reduction => "reduction",
            OpClass::Softmax => "softmax",
            OpClass::Normalization => "normalization",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct FlopLedger {
    counts: [u64; 5],
}

impl FlopLedger {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn add(&mut self, class: OpClass, flops: u64) {
        self.counts[class as usize] += flops;
    }

    /// `2·m·k·p` for an `m×k` by `k×p` product.
    #[inline]
    pub fn add_matmul(&mut self, m: usize, k: usize, p: usize) {
        self.add(OpClass::MatMul, 2 * (m * k * p) as u64);
    }

    pub fn get(&self, class: OpClass) -> u64 {
        self.counts[class as usize]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

impl AddAssign for FlopLedger {
    fn add_assign(&mut self, rhs: Self) {
        for (a, b) in self.counts.iter_mut().zip(rhs.counts) {
            *a += b;
        }
    }
}

impl fmt::Display for FlopLedger {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, class) in OpClass::ALL.iter().enumerate() {
            if i > 0 {
                f.write_str(" ")?;
            }
            write!(f, "{}={}", class.name(), self.get(*class))?;
        }
        Ok(())
    }
}
