//! Sigmoid reweighting of kernelized queries and keys.
//!
//! Separate fixation gates `q̆` and `k̆` with their own projections:
//! `q̂ = σ(q̆W_q + b_q) ⊙ q̆`. Cooperative fixation first aggregates `q̆`, `k̆`
//! (and optionally `v`) and derives the gate from the aggregate; with a shared
//! ratio one `γ` multiplies both, otherwise two output projections read the
//! same aggregate.
//!
//! Projections act on per-head features (`Dh` channels) and are shared by all
//! heads of a layer.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FixationMode {
    None,
    Separate,
    Cooperative,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Aggregation {
    Concat,
    Add,
    Multiply,
}

/// Which tensors feed the cooperative aggregate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CoopInputs {
    QK,
    QKV,
}

impl FixationMode {
    pub fn name(self) -> &'static str {
        match self {
            FixationMode::None => "none",
            FixationMode::Separate => "separate",
            FixationMode::Cooperative => "cooperative",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [FixationMode::None, FixationMode::Separate, FixationMode::Cooperative]
            .into_iter()
            .find(|m| m.name() == s)
    }
}

impl Aggregation {
    pub const ALL: [Aggregation; 3] = [Aggregation::Concat, Aggregation::Add, Aggregation::Multiply];

    pub fn name(self) -> &'static str {
        match self {
            Aggregation::Concat => "concat",
            Aggregation::Add => "add",
            Aggregation::Multiply => "multiply",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.name() == s)
    }
}

impl CoopInputs {
    pub fn name(self) -> &'static str {
        match self {
            CoopInputs::QK => "qk",
            CoopInputs::QKV => "qkv",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [CoopInputs::QK, CoopInputs::QKV].into_iter().find(|c| c.name() == s)
    }

    fn count(self) -> usize {
        match self {
            CoopInputs::QK => 2,
            CoopInputs::QKV => 3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct FixationConfig {
    pub mode: FixationMode,
    pub aggregation: Aggregation,
    pub share_ratio: bool,
    pub inputs: CoopInputs,
}

impl Default for FixationConfig {
    fn default() -> Self {
        Self::cooperative()
    }
}

impl FixationConfig {
    pub fn none() -> Self {
        Self {
            mode: FixationMode::None,
            ..Self::cooperative()
        }
    }

    pub fn separate() -> Self {
        Self {
            mode: FixationMode::Separate,
            ..Self::cooperative()
        }
    }

    /// Concatenated `q̆, k̆, v` with one shared ratio.
    pub fn cooperative() -> Self {
        Self {
            mode: FixationMode::Cooperative,
            aggregation: Aggregation::Concat,
            share_ratio: true,
            inputs: CoopInputs::QKV,
        }
    }

    /// Width of the projection input for `dh` channels per head.
    pub fn input_width(&self, dh: usize) -> usize {
        match (self.mode, self.aggregation) {
            (FixationMode::Cooperative, Aggregation::Concat) => self.inputs.count() * dh,
            _ => dh,
        }
    }

    /// Number of `(W, b)` projections.
    pub fn projections(&self) -> usize {
        match self.mode {
            FixationMode::None => 0,
            FixationMode::Separate => 2,
            FixationMode::Cooperative if self.share_ratio => 1,
            FixationMode::Cooperative => 2,
        }
    }

    /// Suffixes naming each projection, in parameter order.
    pub fn projection_names(&self) -> &'static [&'static str] {
        match self.projections() {
            0 => &[],
            1 => &["phi"],
            _ => &["phi_q", "phi_k"],
        }
    }

    pub fn param_count(&self, dh: usize) -> usize {
        self.projections() * (self.input_width(dh) * dh + dh)
    }
}

/// One affine gate projection `x·w + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    pub w: Tensor,
    pub b: Tensor,
}

impl Projection {
    /// Xavier-uniform weights, zero bias.
    pub fn xavier(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Self {
        let limit = num_traits::Float::sqrt(6.0 / (fan_in + fan_out) as f64);
        Self {
            w: Tensor::from_fn(&[fan_in, fan_out], |_| rng.random_range(-limit..limit)),
            b: Tensor::zeros(&[fan_out]),
        }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            w: Tensor::zeros(&[fan_in, fan_out]),
            b: Tensor::zeros(&[fan_out]),
        }
    }
}

/// Gate projections for one layer. `projections` follows
/// [`FixationConfig::projection_names`].
#[derive(Clone, Debug, PartialEq)]
pub struct FixationParams {
    pub config: FixationConfig,
    pub projections: Vec<Projection>,
}

impl FixationParams {
    pub fn init(config: FixationConfig, dh: usize, rng: &mut impl Rng) -> Self {
        let width = config.input_width(dh);
        Self {
            config,
            projections: (0..config.projections())
                .map(|_| Projection::xavier(rng, width, dh))
                .collect(),
        }
    }

    pub fn zeros(config: FixationConfig, dh: usize) -> Self {
        let width = config.input_width(dh);
        Self {
            config,
            projections: (0..config.projections())
                .map(|_| Projection::zeros(width, dh))
                .collect(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.projections.iter().map(|p| p.w.numel() + p.b.numel()).sum()
    }
}

/// Gated queries and keys plus the ratios that produced them.
#[derive(Clone, Copy, Debug)]
pub struct Fixated {
    pub q: Var,
    pub k: Var,
    pub gamma_q: Option<Var>,
    pub gamma_k: Option<Var>,
}

fn gate(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let rows = tape.shape(x)[0];
    let xw = tape.matmul(x, w)?;
    let width = tape.shape(xw)[1];
    let b2 = tape.reshape(b, &[1, width])?;
    let bb = tape.expand(b2, &[rows, width])?;
    let z = tape.add(xw, bb)?;
    tape.sigmoid(z)
}

fn check_projection(tape: &Tape, width: usize, dh: usize, w: Var, b: Var) -> Result<()> {
    let (sw, sb) = (tape.shape(w), tape.shape(b));
    if sw != [width, dh] || sb != [dh] {
        return Err(Error::Config(format!(
            "fixation projection has weight {sw:?} and bias {sb:?}; the aggregate needs [{width}, {dh}] and [{dh}]"
        )));
    }
    Ok(())
}

/// Applies fixation to kernelized `q̆`, `k̆` (`[R, Dh]` rows). `v` is only read by
/// cooperative QKV aggregation. `proj` holds `(W, b)` pairs in parameter order.
pub fn fixate(
    tape: &mut Tape,
    config: &FixationConfig,
    q: Var,
    k: Var,
    v: Var,
    proj: &[(Var, Var)],
) -> Result<Fixated> {
    let sq = tape.shape(q).to_vec();
    if sq.len() != 2 || tape.shape(k) != sq.as_slice() || tape.shape(v) != sq.as_slice() {
        return Err(Error::Dimension {
            op: "fixation",
            lhs: sq,
            rhs: tape.shape(k).to_vec(),
        });
    }
    let dh = sq[1];
    if proj.len() != config.projections() {
        return Err(Error::Config(format!(
            "{} fixation expects {} projections, got {}",
            config.mode.name(),
            config.projections(),
            proj.len()
        )));
    }
    let width = config.input_width(dh);
    for &(w, b) in proj {
        check_projection(tape, width, dh, w, b)?;
    }
    match config.mode {
        FixationMode::None => Ok(Fixated {
            q,
            k,
            gamma_q: None,
            gamma_k: None,
        }),
        FixationMode::Separate => {
            let gq = gate(tape, q, proj[0].0, proj[0].1)?;
            let gk = gate(tape, k, proj[1].0, proj[1].1)?;
            Ok(Fixated {
                q: tape.mul(gq, q)?,
                k: tape.mul(gk, k)?,
                gamma_q: Some(gq),
                gamma_k: Some(gk),
            })
        }
        FixationMode::Cooperative => {
            let parts: Vec<Var> = match config.inputs {
                CoopInputs::QK => alloc::vec![q, k],
                CoopInputs::QKV => alloc::vec![q, k, v],
            };
            let agg = match config.aggregation {
                Aggregation::Concat => tape.concat(&parts)?,
                Aggregation::Add => {
                    let mut acc = tape.add(parts[0], parts[1])?;
                    for &p in &parts[2..] {
                        acc = tape.add(acc, p)?;
                    }
                    acc
                }
                Aggregation::Multiply => {
                    let mut acc = tape.mul(parts[0], parts[1])?;
                    for &p in &parts[2..] {
                        acc = tape.mul(acc, p)?;
                    }
                    acc
                }
            };
            let gq = gate(tape, agg, proj[0].0, proj[0].1)?;
            let gk = if config.share_ratio {
                gq
            } else {
                gate(tape, agg, proj[1].0, proj[1].1)?
            };
            Ok(Fixated {
                q: tape.mul(gq, q)?,
                k: tape.mul(gk, k)?,
                gamma_q: Some(gq),
                gamma_k: Some(gk),
            })
        }
    }
}

/// Value-level result of a fixation call.
#[derive(Clone, Debug)]
pub struct FixationOutput {
    pub q: Tensor,
    pub k: Tensor,
    pub gamma_q: Tensor,
    pub gamma_k: Tensor,
}

fn run(params: &FixationParams, q: &Tensor, k: &Tensor, v: &Tensor) -> Result<FixationOutput> {
    let mut tape = Tape::new();
    let (qv, kv, vv) = (
        tape.constant(q.clone()),
        tape.constant(k.clone()),
        tape.constant(v.clone()),
    );
    let proj: Vec<(Var, Var)> = params
        .projections
        .iter()
        .map(|p| (tape.constant(p.w.clone()), tape.constant(p.b.clone())))
        .collect();
    let out = fixate(&mut tape, &params.config, qv, kv, vv, &proj)?;
    let ones = || Tensor::ones(q.shape());
    Ok(FixationOutput {
        q: tape.value(out.q).clone(),
        k: tape.value(out.k).clone(),
        gamma_q: out.gamma_q.map_or_else(ones, |g| tape.value(g).clone()),
        gamma_k: out.gamma_k.map_or_else(ones, |g| tape.value(g).clone()),
    })
}

/// `q̂ = σ(q̆W_q + b_q) ⊙ q̆`, `k̂ = σ(k̆W_k + b_k) ⊙ k̆`.
pub fn separate_fixation(q: &Tensor, k: &Tensor, params: &FixationParams) -> Result<FixationOutput> {
    if params.config.mode != FixationMode::Separate {
        return Err(Error::Config("separate_fixation needs separate-mode parameters".into()));
    }
    run(params, q, k, k)
}

/// Cooperative gate from the aggregate of `q̆`, `k̆` (and `v`).
pub fn cooperative_fixation(q: &Tensor, k: &Tensor, v: &Tensor, params: &FixationParams) -> Result<FixationOutput> {
    if params.config.mode != FixationMode::Cooperative {
        return Err(Error::Config(
            "cooperative_fixation needs cooperative-mode parameters".into(),
        ));
    }
    run(params, q, k, v)
}

/// Whether scaling competing scores `a`, `b` by ratios `m1 < m2` raises the
/// normalized weight of `b`: `m2·b / (m1·a + m2·b) > b / (a + b)`.
pub fn reweighting_monotonicity_check(a: f64, b: f64, m1: f64, m2: f64) -> bool {
    m2 * b / (m1 * a + m2 * b) > b / (a + b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
        Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
    }

    fn sigmoid(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    /// Direct `σ(xW+b) ⊙ x` evaluation.
    fn gate_oracle(x: &Tensor, p: &Projection) -> Tensor {
        let (n, d) = (x.shape()[0], x.shape()[1]);
        Tensor::from_fn(&[n, d], |i| {
            let (r, c) = (i / d, i % d);
            let z: f64 = (0..d).map(|j| x.at(&[r, j]) * p.w.at(&[j, c])).sum::<f64>() + p.b.data()[c];
            sigmoid(z) * x.at(&[r, c])
        })
    }

    #[test]
    fn zero_weights_halve_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q = rand_t(&mut rng, &[4, 6], 0.0, 2.0);
        let k = rand_t(&mut rng, &[4, 6], 0.0, 2.0);
        let out = separate_fixation(&q, &k, &FixationParams::zeros(FixationConfig::separate(), 6)).unwrap();
        assert_eq!(out.q, q.scale(0.5));
        assert_eq!(out.k, k.scale(0.5));
        for agg in Aggregation::ALL {
            let cfg = FixationConfig {
                aggregation: agg,
                ..FixationConfig::cooperative()
            };
            let out = cooperative_fixation(&q, &k, &q, &FixationParams::zeros(cfg, 6)).unwrap();
            assert!(out.gamma_q.data().iter().all(|&g| g == 0.5));
        }
    }

    #[test]
    fn large_bias_saturates_gate() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let q = rand_t(&mut rng, &[3, 4], 0.0, 1.0);
        let mut p = FixationParams::zeros(FixationConfig::separate(), 4);
        p.projections[0].b = Tensor::full(&[4], 30.0);
        let out = separate_fixation(&q, &q, &p).unwrap();
        assert!(out.q.max_rel_diff(&q) < 1e-9);
    }

    #[test]
    fn separate_matches_direct_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = rand_t(&mut rng, &[5, 4], 0.0, 1.0);
        let k = rand_t(&mut rng, &[5, 4], 0.0, 1.0);
        let mut p = FixationParams::init(FixationConfig::separate(), 4, &mut rng);
        p.projections[0].b = rand_t(&mut rng, &[4], -0.5, 0.5);
        p.projections[1].b = rand_t(&mut rng, &[4], -0.5, 0.5);
        let out = separate_fixation(&q, &k, &p).unwrap();
        assert!(out.q.max_rel_diff(&gate_oracle(&q, &p.projections[0])) < 1e-12);
        assert!(out.k.max_rel_diff(&gate_oracle(&k, &p.projections[1])) < 1e-12);
    }

    #[test]
    fn concat_aggregate_shapes() {
        let cfg = FixationConfig::cooperative();
        assert_eq!(cfg.input_width(8), 24);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[4, 8]));
        let p = FixationParams::zeros(cfg, 8);
        let w = tape.constant(p.projections[0].w.clone());
        let b = tape.constant(p.projections[0].b.clone());
        let agg = tape.concat(&[x, x, x]).unwrap();
        assert_eq!(tape.shape(agg), &[4, 24]);
        let out = fixate(&mut tape, &cfg, x, x, x, &[(w, b)]).unwrap();
        assert_eq!(tape.shape(out.gamma_q.unwrap()), &[4, 8]);
    }

    #[test]
    fn shared_ratio_is_one_tensor() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let q = rand_t(&mut rng, &[4, 4], 0.0, 1.0);
        let k = rand_t(&mut rng, &[4, 4], 0.0, 1.0);
        let p = FixationParams::init(FixationConfig::cooperative(), 4, &mut rng);
        let out = cooperative_fixation(&q, &k, &q, &p).unwrap();
        assert_eq!(out.gamma_q.data(), out.gamma_k.data());

        let unshared = FixationConfig {
            share_ratio: false,
            ..FixationConfig::cooperative()
        };
        let p2 = FixationParams::init(unshared, 4, &mut rng);
        assert!(p2.param_count() > p.param_count());
        let out = cooperative_fixation(&q, &k, &q, &p2).unwrap();
        assert_ne!(out.gamma_q.data(), out.gamma_k.data());
    }

    #[test]
    fn width_mismatch_is_config_error() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[2, 4]));
        let w = tape.constant(Tensor::zeros(&[4, 4]));
        let b = tape.constant(Tensor::zeros(&[4]));
        let err = fixate(&mut tape, &FixationConfig::cooperative(), x, x, x, &[(w, b)]).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
    }

    #[test]
    fn reweighting_examples() {
        assert!(reweighting_monotonicity_check(1.0, 1.0, 0.5, 0.999_999));
        let reweighted: f64 = 0.999_999 / (0.5 + 0.999_999);
        assert!((reweighted - 2.0 / 3.0).abs() < 1e-6);
        assert!(!reweighting_monotonicity_check(1.0, 1.0, 0.7, 0.7));
        assert_eq!(0.7 * 1.0 / (0.7 * 1.0 + 0.7 * 1.0), 0.5);
    }
}
