//! Linear attention for video transformers, small enough to read in one sitting.
//!
//! Everything here is `no_std` + `alloc`: a dense tensor type with a
//! reverse-mode tape, the softmax / kernelized / linear attention family,
//! feature fixation, neighborhood feature shift, a toy factorized video
//! transformer, concentration diagnostics, a synthetic motion task and an SGD
//! trainer. File formats, timing and the CLI live in the `linvid` crate.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod ablate;
pub mod attention;
pub mod diagnostics;
pub mod error;
pub mod fixation;
pub mod flops;
pub mod gradcheck;
pub mod model;
pub mod real;
pub mod shift;
pub mod synthetic;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use flops::{FlopLedger, OpClass};
pub use real::Real;
pub use tensor::{Gradients, Tape, Tensor, Var};
