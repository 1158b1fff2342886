use alloc::string::String;
use alloc::vec::Vec;

use thiserror::Error;

pub type Result<T, E = Error> = core::result::Result<T, E>;

/// Summary statistics of an op input, attached to non-finite failures.
#[derive(Debug, Clone, PartialEq)]
pub struct InputStats {
    pub shape: Vec<usize>,
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    pub non_finite: usize,
}

impl core::fmt::Display for InputStats {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        write!(
            f,
            "{:?} min={:e} max={:e} mean={:e} non_finite={}",
            self.shape, self.min, self.max, self.mean, self.non_finite
        )
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: shape {shape:?} is invalid: {reason}")]
    Shape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },
    #[error("{op}: domain error: {reason}")]
    Domain { op: &'static str, reason: String },
    #[error("{op}: produced a non-finite value; inputs: {}", fmt_stats(.inputs))]
    NonFinite { op: &'static str, inputs: Vec<InputStats> },
    #[error("degenerate attention row {row}: normalizer {value:e} is below {epsilon:e}")]
    DegenerateRow { row: usize, value: f64, epsilon: f64 },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("refusing to materialize a {n}x{n} matrix: limit is N <= {limit}")]
    TooLarge { n: usize, limit: usize },
}

fn fmt_stats(stats: &[InputStats]) -> String {
    use core::fmt::Write;
    let mut out = String::new();
    for (i, s) in stats.iter().enumerate() {
        if i > 0 {
            out.push_str("; ");
        }
        let _ = write!(out, "#{i} {s}");
    }
    out
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
