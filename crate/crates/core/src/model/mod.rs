//! Toy video transformer: patch embedding, pre-norm attention blocks with a
//! configurable pattern, shift + fixation pipeline, GELU MLP, mean-pool head.

mod config;
mod params;

use alloc::format;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

pub use config::{ModelConfig, Pattern, ShiftOrder, StageKind, Variant};
pub use params::{Affine, LayerLayout, Layout, Norm, Params, StageLayout};

use crate::attention::{attend, Family, TemporalWindow};
use crate::error::{Error, Result};
use crate::fixation::{fixate, FixationParams, Projection};
use crate::shift::{shift_map, shift_tape, TokenGrid};
use crate::tensor::{Tape, Tensor, Var};

/// Pixels `[B, T, H, W, C]` with one class index per clip.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipBatch {
    pub pixels: Tensor,
    pub labels: Vec<usize>,
}

impl ClipBatch {
    pub fn new(pixels: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if pixels.rank() != 5 || pixels.shape()[0] != labels.len() {
            return Err(Error::Shape {
                op: "clip_batch",
                shape: pixels.shape().to_vec(),
                reason: format!("expects [B, T, H, W, C] with B = {} labels", labels.len()),
            });
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Input(format!("label {l} out of range for {classes} classes")));
        }
        Ok(Self { pixels, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Projected `q`, `k`, `v` (`[B·N, D]`) entering one attention stage, kept so
/// diagnostics can rebuild the stage's attention matrix.
#[derive(Clone, Debug)]
pub struct StageCapture {
    pub layer: usize,
    pub stage: usize,
    pub kind: StageKind,
    pub batch: usize,
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub layout: Layout,
    pub params: Params,
}

fn affine(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let rows = tape.shape(x)[0];
    let xw = tape.matmul(x, w)?;
    let width = tape.shape(xw)[1];
    let b2 = tape.reshape(b, &[1, width])?;
    let bb = tape.expand(b2, &[rows, width])?;
    tape.add(xw, bb)
}

/// Non-overlapping patches: `[B, T, H, W, C]` → `[B·T·Hp·Wp, P·P·C]`, rows in
/// `(b, t, row, col)` order, features in `(y, x, c)` order.
pub fn patchify(pixels: &Tensor, patch: usize) -> Result<Tensor> {
    let s = pixels.shape();
    if s.len() != 5 || s[2] % patch != 0 || s[3] % patch != 0 {
        return Err(Error::Config(format!(
            "clip of shape {s:?} does not split into {patch}x{patch} patches"
        )));
    }
    let (b, t, h, w, c) = (s[0], s[1], s[2], s[3], s[4]);
    let (gh, gw) = (h / patch, w / patch);
    let width = patch * patch * c;
    let src = pixels.data();
    let mut out = Vec::with_capacity(pixels.numel());
    for bt in 0..b * t {
        for py in 0..gh {
            for px in 0..gw {
                for y in 0..patch {
                    let row = ((bt * h) + py * patch + y) * w + px * patch;
                    out.extend_from_slice(&src[row * c..(row + patch) * c]);
                }
            }
        }
    }
    Tensor::new(&[b * t * gh * gw, width], out)
}

fn group_axes(kind: StageKind) -> ([usize; 5], [usize; 5]) {
    // from [B, T, S, H, Dh]
    match kind {
        StageKind::Spatial => ([0, 1, 3, 2, 4], [0, 1, 3, 2, 4]),
        StageKind::Temporal | StageKind::WindowedTemporal => ([0, 2, 3, 1, 4], [0, 3, 1, 2, 4]),
        StageKind::Joint => ([0, 3, 1, 2, 4], [0, 2, 3, 1, 4]),
    }
}

/// One attention stage from projected `q`, `k`, `v` (`[B·N, D]`) to the
/// pre-projection output `[B·N, D]`. With `want_matrix`, also returns the
/// `[G, Lq, Lk]` attention weights; the linear family then runs through its
/// quadratic form so the weights exist.
pub fn attention_stage(
    tape: &mut Tape,
    cfg: &ModelConfig,
    batch: usize,
    kind: StageKind,
    q: Var,
    k: Var,
    v: Var,
    fix: &[(Var, Var)],
    want_matrix: bool,
) -> Result<(Var, Option<Var>)> {
    let dims = cfg.grid_dims(batch);
    let (t, s, h, dh) = (cfg.frames, cfg.spatial_tokens(), cfg.heads, cfg.head_dim());
    let rows = batch * cfg.tokens();
    if tape.shape(q) != [rows, cfg.dim] {
        return Err(Error::Dimension {
            op: "attention_stage",
            lhs: tape.shape(q).to_vec(),
            rhs: vec![rows, cfg.dim],
        });
    }
    let map: Option<Arc<[u32]>> = if cfg.shift.is_identity() {
        None
    } else {
        Some(shift_map(&dims, &cfg.shift, h)?)
    };
    let shift_first = cfg.shift_order == ShiftOrder::ShiftFirst;
    let (mut k, mut v) = (k, v);
    if let (Some(m), true) = (&map, shift_first) {
        k = shift_tape(tape, k, m.clone())?;
        v = shift_tape(tape, v, m.clone())?;
    }
    let split = [rows * h, dh];
    let mut q = tape.reshape(q, &split)?;
    k = tape.reshape(k, &split)?;
    v = tape.reshape(v, &split)?;
    if cfg.family.is_kernelized() {
        q = cfg.kernel.apply(tape, q)?;
        k = cfg.kernel.apply(tape, k)?;
    }
    let fixed = fixate(tape, &cfg.fixation, q, k, v, fix)?;
    let (q, mut k) = (fixed.q, fixed.k);
    if let (Some(m), false) = (&map, shift_first) {
        k = shift_tape(tape, k, m.clone())?;
        v = shift_tape(tape, v, m.clone())?;
    }

    let family = match (cfg.family, want_matrix) {
        (Family::Linear, true) => Family::LinearQuadratic,
        (f, _) => f,
    };
    let (fwd, inv) = group_axes(kind);
    let five = [batch, t, s, h, dh];
    let grouped = |tape: &mut Tape, x: Var| -> Result<Var> {
        let x = tape.reshape(x, &five)?;
        tape.permute(x, &fwd)
    };
    let (qg, kg, vg) = (grouped(tape, q)?, grouped(tape, k)?, grouped(tape, v)?);
    let (y, matrix, out_shape) = match kind {
        StageKind::WindowedTemporal => {
            let sites = batch * s * h;
            let win = TemporalWindow::new(sites, t, cfg.window);
            let qw = tape.reshape(qg, &[sites * t, 1, dh])?;
            let flat = [sites, t, dh];
            let kf = tape.reshape(kg, &flat)?;
            let vf = tape.reshape(vg, &flat)?;
            let kw = win.gather(tape, kf)?;
            let vw = win.gather(tape, vf)?;
            let mask = match family {
                Family::Softmax => Some(tape.constant(win.mask())),
                _ => None,
            };
            let (y, m) = attend(tape, family, qw, kw, vw, &cfg.kernel, cfg.softmax_scale, mask)?;
            (y, m, [batch, s, h, t, dh])
        }
        _ => {
            let g5 = tape.shape(qg).to_vec();
            let gl = [g5[0] * g5[1] * g5[2], g5[3], dh];
            let qg = tape.reshape(qg, &gl)?;
            let kg = tape.reshape(kg, &gl)?;
            let vg = tape.reshape(vg, &gl)?;
            let (y, m) = attend(tape, family, qg, kg, vg, &cfg.kernel, cfg.softmax_scale, None)?;
            (y, m, [g5[0], g5[1], g5[2], g5[3], dh])
        }
    };
    let y = tape.reshape(y, &out_shape)?;
    let y = tape.permute(y, &inv)?;
    let y = tape.reshape(y, &[rows, cfg.dim])?;
    Ok((y, matrix))
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (params, layout) = params::init(&config, seed);
        Ok(Self { config, layout, params })
    }

    /// The same parameters under a different configuration with an identical
    /// parameter layout (e.g. another attention family or kernel).
    pub fn with_config(&self, config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let (fresh, layout) = params::init(&config, 0);
        let same = fresh.len() == self.params.len()
            && fresh
                .iter()
                .zip(self.params.iter())
                .all(|((a, ta), (b, tb))| a == b && ta.shape() == tb.shape());
        if !same {
            return Err(Error::Config(
                "configuration changes the parameter layout; cannot reuse parameters".into(),
            ));
        }
        Ok(Self {
            config,
            layout,
            params: self.params.clone(),
        })
    }

    /// Registers every parameter on `tape`.
    pub fn leaves(&self, tape: &mut Tape, requires_grad: bool) -> Vec<Var> {
        self.params
            .tensors()
            .iter()
            .map(|t| tape.leaf(t.clone(), requires_grad))
            .collect()
    }

    /// Token grid `[B, T, Hp, Wp, D]` after patch projection and positional
    /// embeddings.
    pub fn embed(&self, pixels: &Tensor) -> Result<TokenGrid> {
        let mut tape = Tape::new();
        let pv = self.leaves(&mut tape, false);
        let x = self.embed_tape(&mut tape, &pv, pixels)?;
        let c = &self.config;
        TokenGrid::unflatten(
            &tape.value(x).reshape(&[pixels.shape()[0], c.tokens(), c.dim])?,
            c.frames,
            c.grid_height(),
            c.grid_width(),
        )
    }

    fn check_pixels(&self, pixels: &Tensor) -> Result<usize> {
        let c = &self.config;
        let s = pixels.shape();
        if s.len() != 5 || s[1] != c.frames || s[2] != c.height || s[3] != c.width || s[4] != c.channels {
            return Err(Error::Config(format!(
                "clip shape {s:?} does not match model geometry [B, {}, {}, {}, {}]",
                c.frames, c.height, c.width, c.channels
            )));
        }
        Ok(s[0])
    }

    fn embed_tape(&self, tape: &mut Tape, pv: &[Var], pixels: &Tensor) -> Result<Var> {
        let batch = self.check_pixels(pixels)?;
        let c = &self.config;
        let l = &self.layout;
        let patches = tape.constant(patchify(pixels, c.patch)?);
        let x = affine(tape, patches, pv[l.embed.w], pv[l.embed.b])?;
        let (t, s, d) = (c.frames, c.spatial_tokens(), c.dim);
        let rows = batch * t * s;
        let mut ms = Vec::with_capacity(rows * d);
        let mut mt = Vec::with_capacity(rows * d);
        for _ in 0..batch {
            for ti in 0..t {
                for si in 0..s {
                    ms.extend((0..d).map(|j| (si * d + j) as u32));
                    mt.extend((0..d).map(|j| (ti * d + j) as u32));
                }
            }
        }
        let ps = tape.gather(pv[l.pos_spatial], Arc::from(ms), &[rows, d])?;
        let pt = tape.gather(pv[l.pos_temporal], Arc::from(mt), &[rows, d])?;
        let x = tape.add(x, ps)?;
        tape.add(x, pt)
    }

    /// Logits `[B, classes]` on `tape`. Parameters come from `pv` (see
    /// [`Model::leaves`]). With `capture`, every stage's projected inputs are
    /// recorded.
    pub fn forward(
        &self,
        tape: &mut Tape,
        pv: &[Var],
        pixels: &Tensor,
        mut capture: Option<&mut Vec<StageCapture>>,
    ) -> Result<Var> {
        let c = &self.config;
        let batch = self.check_pixels(pixels)?;
        let mut x = self.embed_tape(tape, pv, pixels)?;
        let d = c.dim;
        for (li, layer) in self.layout.layers.iter().enumerate() {
            for (si, st) in layer.stages.iter().enumerate() {
                let h = tape.layer_norm(x, pv[st.norm.gamma], pv[st.norm.beta])?;
                let qkv = affine(tape, h, pv[st.qkv.w], pv[st.qkv.b])?;
                let q = tape.slice_last(qkv, 0, d)?;
                let k = tape.slice_last(qkv, d, d)?;
                let v = tape.slice_last(qkv, 2 * d, d)?;
                if let Some(cap) = capture.as_deref_mut() {
                    cap.push(StageCapture {
                        layer: li,
                        stage: si,
                        kind: st.kind,
                        batch,
                        q: tape.value(q).clone(),
                        k: tape.value(k).clone(),
                        v: tape.value(v).clone(),
                    });
                }
                let fix: Vec<(Var, Var)> = st.fixation.iter().map(|a| (pv[a.w], pv[a.b])).collect();
                let (y, _) = attention_stage(tape, c, batch, st.kind, q, k, v, &fix, false)?;
                let y = affine(tape, y, pv[st.out.w], pv[st.out.b])?;
                x = tape.add(x, y)?;
            }
            let h = tape.layer_norm(x, pv[layer.mlp_norm.gamma], pv[layer.mlp_norm.beta])?;
            let h = affine(tape, h, pv[layer.fc1.w], pv[layer.fc1.b])?;
            let h = tape.gelu(h)?;
            let h = affine(tape, h, pv[layer.fc2.w], pv[layer.fc2.b])?;
            x = tape.add(x, h)?;
        }
        let l = &self.layout;
        let x = tape.layer_norm(x, pv[l.head_norm.gamma], pv[l.head_norm.beta])?;
        let x = tape.reshape(x, &[batch, c.tokens(), d])?;
        let pooled = tape.sum_axis(x, 1)?;
        let pooled = tape.reshape(pooled, &[batch, d])?;
        let pooled = tape.scale(pooled, 1.0 / c.tokens() as f64)?;
        affine(tape, pooled, pv[l.head.w], pv[l.head.b])
    }

    pub fn logits(&self, pixels: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let pv = self.leaves(&mut tape, false);
        let y = self.forward(&mut tape, &pv, pixels, None)?;
        Ok(tape.value(y).clone())
    }

    pub fn logits_with_capture(&self, pixels: &Tensor) -> Result<(Tensor, Vec<StageCapture>)> {
        let mut tape = Tape::new();
        let pv = self.leaves(&mut tape, false);
        let mut cap = Vec::new();
        let y = self.forward(&mut tape, &pv, pixels, Some(&mut cap))?;
        Ok((tape.value(y).clone(), cap))
    }

    /// Mean cross-entropy, its gradient for every parameter (in parameter
    /// order) and the logits.
    pub fn loss_and_grads(&self, batch: &ClipBatch) -> Result<(f64, Vec<Tensor>, Tensor)> {
        let mut tape = Tape::new();
        let pv = self.leaves(&mut tape, true);
        let logits = self.forward(&mut tape, &pv, &batch.pixels, None)?;
        let loss = tape.cross_entropy(logits, &batch.labels)?;
        let (lv, logit_values) = (tape.value(loss).item(), tape.value(logits).clone());
        let grads = tape.backward(loss)?.into_leaf_grads();
        Ok((lv, grads, logit_values))
    }

    /// Fixation projections of one stage.
    pub fn stage_fixation(&self, layer: usize, stage: usize) -> Result<FixationParams> {
        let st = self
            .layout
            .layers
            .get(layer)
            .and_then(|l| l.stages.get(stage))
            .ok_or_else(|| Error::Usage(format!("no stage {stage} in layer {layer}")))?;
        let t = self.params.tensors();
        Ok(FixationParams {
            config: self.config.fixation,
            projections: st
                .fixation
                .iter()
                .map(|a| Projection {
                    w: t[a.w].clone(),
                    b: t[a.b].clone(),
                })
                .collect(),
        })
    }
}

/// Rebuilds a stage's `[G, Lq, Lk]` attention weights from captured inputs
/// under `cfg` (which may differ from the training configuration in family,
/// kernel or fixation) with the given fixation projections.
pub fn stage_attention_matrix(cfg: &ModelConfig, capture: &StageCapture, fixation: &FixationParams) -> Result<Tensor> {
    if fixation.config != cfg.fixation {
        return Err(Error::Config(
            "fixation parameters do not match the configuration".into(),
        ));
    }
    let mut tape = Tape::new();
    let q = tape.constant(capture.q.clone());
    let k = tape.constant(capture.k.clone());
    let v = tape.constant(capture.v.clone());
    let fix: Vec<(Var, Var)> = fixation
        .projections
        .iter()
        .map(|p| (tape.constant(p.w.clone()), tape.constant(p.b.clone())))
        .collect();
    let (_, m) = attention_stage(&mut tape, cfg, capture.batch, capture.kind, q, k, v, &fix, true)?;
    let m = m.expect("matrix requested");
    Ok(tape.value(m).clone())
}
