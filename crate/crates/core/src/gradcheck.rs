//! Central-difference gradient checks.
//!
//! The error of one entry is |analytic − numeric| / (|analytic| + 1e-8) after
//! subtracting the roundoff floor of the difference quotient itself, a few
//! ulps of the probed value divided by 2h. Without that allowance an entry
//! whose gradient is exactly zero (a softmax key bias, a query row with one
//! active channel) fails on rounding alone.
//!
//! A model check can land within h of a ReLU kink, where no difference
//! quotient approximates the derivative. An entry that fails is probed again
//! at 2h; if the two second differences disagree beyond what any smooth
//! function allows, the entry is counted as a kink and another is drawn.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::model::{ClipBatch, Model};
use crate::tensor::{Tape, Tensor, Var};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

/// Error of one entry; `scale` is the magnitude of the probed value.
pub fn entry_error(analytic: f64, numeric: f64, scale: f64) -> f64 {
    let floor = 16.0 * f64::EPSILON * scale.max(1.0) / (2.0 * STEP);
    ((analytic - numeric).abs() - floor).max(0.0) / (analytic.abs() + 1e-8)
}

/// Worst entry of a check.
#[derive(Clone, Debug, Default)]
pub struct Worst {
    pub error: f64,
    pub at: String,
    pub entries: usize,
    /// Entries skipped because the stencil straddled a kink.
    pub kinks: usize,
}

impl Worst {
    pub fn update(&mut self, analytic: f64, numeric: f64, scale: f64, at: impl FnOnce() -> String) {
        self.entries += 1;
        let e = entry_error(analytic, numeric, scale);
        if e > self.error {
            self.error = e;
            self.at = format!("{}: analytic {analytic:e} numeric {numeric:e}", at());
        }
    }

    pub fn merge(&mut self, other: Worst) {
        self.entries += other.entries;
        self.kinks += other.kinks;
        if other.error > self.error {
            self.error = other.error;
            self.at = other.at;
        }
    }

    pub fn passed(&self) -> bool {
        self.error < TOLERANCE
    }
}

impl core::fmt::Display for Worst {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        write!(f, "worst {:.2e} over {} entries", self.error, self.entries)?;
        if self.kinks > 0 {
            write!(f, " ({} kinks redrawn)", self.kinks)?;
        }
        if !self.at.is_empty() {
            write!(f, " at {}", self.at)?;
        }
        Ok(())
    }
}

/// True when a failing entry is explained by a kink inside the stencil.
/// `[down2, down, up, up2]` are the values at -2h, -h, h, 2h. A smooth
/// function fits a quadratic through the five points up to O(h²) in slope
/// terms; a slope jump leaves a misfit at least as large as the error it puts
/// into the central difference. A wrong analytic value at a smooth point
/// leaves the fit intact and is not excused.
pub fn kink_explains(analytic: f64, f0: f64, [down2, down, up, up2]: [f64; 4]) -> bool {
    let h = STEP;
    let scale = [f0, down2, down, up, up2].iter().fold(1.0f64, |m, v| m.max(v.abs()));
    let near = (up - down) / (2.0 * h);
    if entry_error(analytic, near, scale) < TOLERANCE {
        return false;
    }
    let far = (up2 - down2) / (4.0 * h);
    let curve_near = (up + down - 2.0 * f0) / h;
    let curve_far = (up2 + down2 - 2.0 * f0) / (4.0 * h);
    let misfit = (near - far).abs() + (curve_near - curve_far).abs();
    let noise = 16.0 * f64::EPSILON * scale / h;
    misfit - noise > 0.5 * (near - analytic).abs()
}

/// Redraws per picked entry before a kinked one is scored anyway.
const MAX_REDRAWS: usize = 4;

fn probe(tape: &mut Tape, out: Var, w: &Tensor) -> Result<Var> {
    let wv = tape.constant(w.clone());
    let p = tape.mul(out, wv)?;
    tape.sum(p)
}

/// Checks every entry of every input of `f` through the scalar probe
/// `Σ w ⊙ f(inputs)` with fixed random `w` drawn from `seed`.
pub fn check_fn(seed: u64, inputs: &[Tensor], f: impl Fn(&mut Tape, &[Var]) -> Result<Var>) -> Result<Worst> {
    let out_shape = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        tape.shape(out).to_vec()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let w = Tensor::from_fn(&out_shape, |_| rng.random_range(-1.0..1.0));
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let p = probe(&mut tape, out, &w)?;
        Ok(tape.value(p).item())
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    let p = probe(&mut tape, out, &w)?;
    let grads = tape.backward(p)?.into_leaf_grads();
    let mut worst = Worst::default();
    let mut xs = inputs.to_vec();
    for (i, g) in grads.iter().enumerate() {
        for j in 0..g.numel() {
            let x0 = xs[i].data()[j];
            xs[i].data_mut()[j] = x0 + STEP;
            let up = eval(&xs)?;
            xs[i].data_mut()[j] = x0 - STEP;
            let down = eval(&xs)?;
            xs[i].data_mut()[j] = x0;
            let scale = up.abs().max(down.abs());
            worst.update(g.data()[j], (up - down) / (2.0 * STEP), scale, || {
                format!("input {i}[{j}]")
            });
        }
    }
    Ok(worst)
}

/// Checks the mean cross-entropy of `model` on `batch` at `per_tensor`
/// random entries of every parameter tensor (all entries when smaller).
pub fn check_model(model: &Model, batch: &ClipBatch, per_tensor: usize, seed: u64) -> Result<Worst> {
    let (f0, grads, _) = model.loss_and_grads(batch)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = Worst::default();
    let mut m = model.clone();
    let at = |m: &mut Model, p: usize, j: usize, x: f64| -> Result<f64> {
        m.params.tensors_mut()[p].data_mut()[j] = x;
        Ok(m.loss_and_grads(batch)?.0)
    };
    for (p, name) in model.params.names().iter().enumerate() {
        let n = model.params.tensors()[p].numel();
        let sampled = n > per_tensor;
        let picks: Vec<usize> = if sampled {
            (0..per_tensor).map(|_| rng.random_range(0..n)).collect()
        } else {
            (0..n).collect()
        };
        for mut j in picks {
            let mut redraws = 0;
            loop {
                let x0 = m.params.tensors()[p].data()[j];
                let up = at(&mut m, p, j, x0 + STEP)?;
                let down = at(&mut m, p, j, x0 - STEP)?;
                let scale = up.abs().max(down.abs());
                let numeric = (up - down) / (2.0 * STEP);
                let analytic = grads[p].data()[j];
                let kinked = entry_error(analytic, numeric, scale) >= TOLERANCE && redraws < MAX_REDRAWS && {
                    let up2 = at(&mut m, p, j, x0 + 2.0 * STEP)?;
                    let down2 = at(&mut m, p, j, x0 - 2.0 * STEP)?;
                    kink_explains(analytic, f0, [down2, down, up, up2])
                };
                m.params.tensors_mut()[p].data_mut()[j] = x0;
                if !kinked {
                    worst.update(analytic, numeric, scale, || format!("{name}[{j}]"));
                    break;
                }
                worst.kinks += 1;
                if !sampled {
                    break;
                }
                redraws += 1;
                j = rng.random_range(0..n);
            }
        }
    }
    Ok(worst)
}
