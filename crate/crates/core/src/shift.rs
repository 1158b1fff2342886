//! Parameter-free temporal and spatial feature shift of keys and values.
//!
//! Each token keeps its first `αC` channels. The remaining channels are split
//! into equal slabs, one per neighbor, and slab `r` is copied from neighbor
//! `r` at the same channel indices. Neighbors are ordered
//!
//! * temporal: frames `t-τ, …, t-1, t+1, …, t+τ`
//! * criss-cross: left near→far, right near→far, above near→far, below near→far
//! * squared kernel: the `(2ξ+1)²-1` off-center offsets in row-major order
//!
//! A shift is a gather: every output element is one input element or zero, so
//! the whole stage is described by an index map (see [`GATHER_ZERO`]). The
//! rule is applied inside each head's channel block independently. When both
//! shifts run, the spatial stage re-applies the full rule to the temporally
//! shifted tokens: channels `[0, αC)` stay the token's own, and spatial slabs
//! carry whatever the neighbor held after the temporal stage.

use alloc::format;
use alloc::sync::Arc;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var, GATHER_ZERO};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SpatialMode {
    CrissCross,
    SquaredKernel,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Boundary {
    ZeroPad,
    Clamp,
}

impl SpatialMode {
    pub fn name(self) -> &'static str {
        match self {
            SpatialMode::CrissCross => "criss-cross",
            SpatialMode::SquaredKernel => "squared-kernel",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [SpatialMode::CrissCross, SpatialMode::SquaredKernel]
            .into_iter()
            .find(|m| m.name() == s)
    }

    /// Tokens involved in one output token, itself included.
    pub fn tokens_touched(self, xi: usize) -> usize {
        match self {
            SpatialMode::CrissCross => 4 * xi + 1,
            SpatialMode::SquaredKernel => (2 * xi + 1) * (2 * xi + 1),
        }
    }

    /// Off-center `(dy, dx)` offsets in donation order.
    pub fn offsets(self, xi: usize) -> Vec<(isize, isize)> {
        let r = xi as isize;
        match self {
            SpatialMode::CrissCross => {
                let mut v = Vec::with_capacity(4 * xi);
                v.extend((1..=r).map(|d| (0, -d)));
                v.extend((1..=r).map(|d| (0, d)));
                v.extend((1..=r).map(|d| (-d, 0)));
                v.extend((1..=r).map(|d| (d, 0)));
                v
            }
            SpatialMode::SquaredKernel => {
                let mut v = Vec::new();
                for dy in -r..=r {
                    for dx in -r..=r {
                        if (dy, dx) != (0, 0) {
                            v.push((dy, dx));
                        }
                    }
                }
                v
            }
        }
    }
}

impl Boundary {
    pub fn name(self) -> &'static str {
        match self {
            Boundary::ZeroPad => "zero",
            Boundary::Clamp => "clamp",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Boundary::ZeroPad, Boundary::Clamp].into_iter().find(|b| b.name() == s)
    }

    fn resolve(self, i: isize, len: usize) -> Option<usize> {
        if (0..len as isize).contains(&i) {
            Some(i as usize)
        } else {
            match self {
                Boundary::ZeroPad => None,
                Boundary::Clamp => Some(i.clamp(0, len as isize - 1) as usize),
            }
        }
    }
}

/// `tau = 0` disables the temporal shift and `xi = 0` the spatial one.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ShiftConfig {
    pub tau: usize,
    pub xi: usize,
    pub alpha: f64,
    pub spatial_mode: SpatialMode,
    pub boundary: Boundary,
}

impl Default for ShiftConfig {
    fn default() -> Self {
        Self {
            tau: 1,
            xi: 1,
            alpha: 0.5,
            spatial_mode: SpatialMode::CrissCross,
            boundary: Boundary::ZeroPad,
        }
    }
}

impl ShiftConfig {
    pub fn off() -> Self {
        Self {
            tau: 0,
            xi: 0,
            ..Self::default()
        }
    }

    pub fn is_identity(&self) -> bool {
        (self.tau == 0 && self.xi == 0) || self.alpha == 1.0
    }

    /// Retained channel count `αC`, which must be a whole number.
    pub fn retained(&self, channels: usize) -> Result<usize> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!(
                "shift alpha must lie in [0, 1], got {}",
                self.alpha
            )));
        }
        let exact = self.alpha * channels as f64;
        let r = round(exact);
        if (exact - r).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "shift alpha {} does not split {channels} channels into whole channels",
                self.alpha
            )));
        }
        Ok(r as usize)
    }

    fn donors_temporal(&self) -> usize {
        2 * self.tau
    }

    fn donors_spatial(&self) -> usize {
        self.spatial_mode.tokens_touched(self.xi) - 1
    }

    /// Checks divisibility of the donated channels for `channels` per head.
    pub fn validate(&self, channels: usize) -> Result<()> {
        let donated = channels - self.retained(channels)?;
        if self.tau > 0 && donated % self.donors_temporal() != 0 {
            return Err(Error::Config(format!(
                "temporal shift: (1-alpha)·D = {donated} (D={channels}, alpha={}) is not divisible by 2·tau = {} (tau={})",
                self.alpha,
                self.donors_temporal(),
                self.tau
            )));
        }
        if self.xi > 0 && donated % self.donors_spatial() != 0 {
            return Err(Error::Config(format!(
                "{} spatial shift: (1-alpha)·D = {donated} (D={channels}, alpha={}) is not divisible by {} neighbors (xi={})",
                self.spatial_mode.name(),
                self.alpha,
                self.donors_spatial(),
                self.xi
            )));
        }
        Ok(())
    }
}

fn round(x: f64) -> f64 {
    num_traits::Float::round(x)
}

/// Extents of a `[B, T, Hp, Wp, C]` token grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct GridDims {
    pub batch: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl GridDims {
    pub fn spatial(&self) -> usize {
        self.height * self.width
    }

    pub fn tokens(&self) -> usize {
        self.frames * self.spatial()
    }

    pub fn shape(&self) -> [usize; 5] {
        [self.batch, self.frames, self.height, self.width, self.channels]
    }

    pub fn numel(&self) -> usize {
        self.batch * self.tokens() * self.channels
    }

    fn token_index(&self, b: usize, t: usize, h: usize, w: usize) -> usize {
        ((b * self.frames + t) * self.height + h) * self.width + w
    }
}

/// Token embeddings in `[B, T, Hp, Wp, D]` layout.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenGrid {
    data: Tensor,
}

impl TokenGrid {
    pub fn new(data: Tensor) -> Result<Self> {
        if data.rank() != 5 {
            return Err(Error::Shape {
                op: "token_grid",
                shape: data.shape().to_vec(),
                reason: "expects [B, T, Hp, Wp, D]".into(),
            });
        }
        Ok(Self { data })
    }

    /// From the flat `[B, N, D]` attention view.
    pub fn unflatten(flat: &Tensor, frames: usize, height: usize, width: usize) -> Result<Self> {
        let s = flat.shape();
        if s.len() != 3 || s[1] != frames * height * width {
            return Err(Error::Shape {
                op: "unflatten",
                shape: s.to_vec(),
                reason: format!("expects [B, {}·{}·{}, D]", frames, height, width),
            });
        }
        Self::new(flat.reshape(&[s[0], frames, height, width, s[2]])?)
    }

    pub fn flatten(&self) -> Tensor {
        let d = self.dims();
        self.data
            .reshape(&[d.batch, d.tokens(), d.channels])
            .expect("grid flatten")
    }

    pub fn dims(&self) -> GridDims {
        let s = self.data.shape();
        GridDims {
            batch: s[0],
            frames: s[1],
            height: s[2],
            width: s[3],
            channels: s[4],
        }
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor {
        self.data
    }

    fn apply(&self, map: &[u32]) -> Self {
        let src = self.data.data();
        let data = map
            .iter()
            .map(|&m| if m == GATHER_ZERO { 0.0 } else { src[m as usize] })
            .collect();
        Self {
            data: Tensor::new(self.data.shape(), data).expect("shift preserves shape"),
        }
    }
}

fn head_width(dims: &GridDims, heads: usize) -> Result<usize> {
    if heads == 0 || dims.channels % heads != 0 {
        return Err(Error::Config(format!(
            "{} channels do not split into {heads} heads",
            dims.channels
        )));
    }
    Ok(dims.channels / heads)
}

/// Builds a map where each output channel `j` (within its head block) of
/// token `(b, t, h, w)` is taken from `donor(slab, b, t, h, w)`.
fn build_map(
    dims: &GridDims,
    heads: usize,
    retained: usize,
    slab: usize,
    donor: impl Fn(usize, usize, usize, usize) -> Option<(usize, usize)>,
) -> Result<Vec<u32>> {
    let dh = head_width(dims, heads)?;
    if dims.numel() >= GATHER_ZERO as usize {
        return Err(Error::Config("token grid too large for a 32-bit shift map".into()));
    }
    let mut map = Vec::with_capacity(dims.numel());
    for b in 0..dims.batch {
        for t in 0..dims.frames {
            for h in 0..dims.height {
                for w in 0..dims.width {
                    let own = dims.token_index(b, t, h, w) * dims.channels;
                    for c in 0..dims.channels {
                        let j = c % dh;
                        if j < retained {
                            map.push((own + c) as u32);
                            continue;
                        }
                        let r = (j - retained) / slab;
                        map.push(match donor(r, t, h, w) {
                            Some((tt, hw)) => {
                                let (hh, ww) = (hw / dims.width, hw % dims.width);
                                (dims.token_index(b, tt, hh, ww) * dims.channels + c) as u32
                            }
                            None => GATHER_ZERO,
                        });
                    }
                }
            }
        }
    }
    Ok(map)
}

fn identity_map(dims: &GridDims) -> Vec<u32> {
    (0..dims.numel() as u32).collect()
}

/// Gather map of the temporal shift for `heads` channel blocks.
pub fn temporal_map(dims: &GridDims, cfg: &ShiftConfig, heads: usize) -> Result<Vec<u32>> {
    let dh = head_width(dims, heads)?;
    cfg.validate(dh)?;
    let retained = cfg.retained(dh)?;
    if cfg.tau == 0 || retained == dh {
        return Ok(identity_map(dims));
    }
    let slab = (dh - retained) / (2 * cfg.tau);
    let tau = cfg.tau as isize;
    build_map(dims, heads, retained, slab, |r, t, h, w| {
        let r = r as isize;
        let offset = if r < tau { r - tau } else { r - tau + 1 };
        cfg.boundary
            .resolve(t as isize + offset, dims.frames)
            .map(|tt| (tt, h * dims.width + w))
    })
}

/// Gather map of the spatial shift for `heads` channel blocks.
pub fn spatial_map(dims: &GridDims, cfg: &ShiftConfig, heads: usize) -> Result<Vec<u32>> {
    let dh = head_width(dims, heads)?;
    cfg.validate(dh)?;
    let retained = cfg.retained(dh)?;
    if cfg.xi == 0 || retained == dh {
        return Ok(identity_map(dims));
    }
    let offsets = cfg.spatial_mode.offsets(cfg.xi);
    let slab = (dh - retained) / offsets.len();
    build_map(dims, heads, retained, slab, |r, t, h, w| {
        let (dy, dx) = offsets[r];
        let hh = cfg.boundary.resolve(h as isize + dy, dims.height)?;
        let ww = cfg.boundary.resolve(w as isize + dx, dims.width)?;
        Some((t, hh * dims.width + ww))
    })
}

/// `first` then `second`: `out[i] = x[first[second[i]]]`.
pub fn compose(first: &[u32], second: &[u32]) -> Vec<u32> {
    second
        .iter()
        .map(|&i| {
            if i == GATHER_ZERO {
                GATHER_ZERO
            } else {
                first[i as usize]
            }
        })
        .collect()
}

/// Temporal then spatial shift as one map.
pub fn shift_map(dims: &GridDims, cfg: &ShiftConfig, heads: usize) -> Result<Arc<[u32]>> {
    let t = temporal_map(dims, cfg, heads)?;
    let s = spatial_map(dims, cfg, heads)?;
    Ok(Arc::from(compose(&t, &s)))
}

pub fn temporal_shift(grid: &TokenGrid, cfg: &ShiftConfig) -> Result<TokenGrid> {
    Ok(grid.apply(&temporal_map(&grid.dims(), cfg, 1)?))
}

pub fn spatial_shift(grid: &TokenGrid, cfg: &ShiftConfig) -> Result<TokenGrid> {
    Ok(grid.apply(&spatial_map(&grid.dims(), cfg, 1)?))
}

/// Applies a precomputed shift map on the tape. `x` may have any shape whose
/// element count matches the map.
pub fn shift_tape(tape: &mut Tape, x: Var, map: Arc<[u32]>) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    tape.gather(x, map, &shape)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims(t: usize, h: usize, w: usize, c: usize) -> GridDims {
        GridDims {
            batch: 1,
            frames: t,
            height: h,
            width: w,
            channels: c,
        }
    }

    fn grid(d: GridDims) -> TokenGrid {
        TokenGrid::new(Tensor::from_fn(&d.shape(), |i| i as f64 + 1.0)).unwrap()
    }

    #[test]
    fn alpha_one_is_identity() {
        let d = dims(3, 2, 2, 8);
        let g = grid(d);
        let cfg = ShiftConfig {
            alpha: 1.0,
            ..ShiftConfig::default()
        };
        assert_eq!(temporal_shift(&g, &cfg).unwrap(), g);
        assert_eq!(spatial_shift(&g, &cfg).unwrap(), g);
        assert_eq!(temporal_shift(&g, &ShiftConfig::off()).unwrap(), g);
        assert_eq!(spatial_shift(&g, &ShiftConfig::off()).unwrap(), g);
    }

    #[test]
    fn temporal_middle_frame_slabs() {
        let d = dims(3, 1, 1, 8);
        let g = grid(d);
        let out = temporal_shift(&g, &ShiftConfig::default()).unwrap();
        let at = |x: &TokenGrid, t: usize, c: usize| x.tensor().at(&[0, t, 0, 0, c]);
        for c in 0..4 {
            assert_eq!(at(&out, 1, c), at(&g, 1, c));
        }
        for c in 4..6 {
            assert_eq!(at(&out, 1, c), at(&g, 0, c));
        }
        for c in 6..8 {
            assert_eq!(at(&out, 1, c), at(&g, 2, c));
        }
    }

    #[test]
    fn boundary_modes_on_first_frame() {
        let d = dims(3, 1, 1, 8);
        let g = grid(d);
        let zero = temporal_shift(&g, &ShiftConfig::default()).unwrap();
        let clamp = temporal_shift(
            &g,
            &ShiftConfig {
                boundary: Boundary::Clamp,
                ..ShiftConfig::default()
            },
        )
        .unwrap();
        for c in 4..6 {
            assert_eq!(zero.tensor().at(&[0, 0, 0, 0, c]), 0.0);
            assert_eq!(clamp.tensor().at(&[0, 0, 0, 0, c]), g.tensor().at(&[0, 0, 0, 0, c]));
        }
    }

    #[test]
    fn token_counts() {
        assert_eq!(SpatialMode::CrissCross.tokens_touched(1), 5);
        assert_eq!(SpatialMode::SquaredKernel.tokens_touched(1), 9);
        assert_eq!(SpatialMode::CrissCross.tokens_touched(2), 9);
        assert_eq!(SpatialMode::SquaredKernel.tokens_touched(2), 25);
        assert_eq!(SpatialMode::SquaredKernel.offsets(2).len(), 24);
    }

    #[test]
    fn divisibility_errors_name_the_numbers() {
        let cfg = ShiftConfig {
            tau: 3,
            ..ShiftConfig::default()
        };
        let msg = alloc::format!("{}", cfg.validate(8).unwrap_err());
        assert!(
            msg.contains("D=8") && msg.contains("tau=3") && msg.contains("alpha=0.5"),
            "{msg}"
        );
        let cfg = ShiftConfig {
            spatial_mode: SpatialMode::SquaredKernel,
            tau: 0,
            ..ShiftConfig::default()
        };
        assert!(cfg.validate(8).is_err());
        assert!(cfg.validate(32).is_ok());
    }

    #[test]
    fn criss_cross_donor_order() {
        let d = dims(1, 3, 3, 8);
        let g = grid(d);
        let cfg = ShiftConfig {
            tau: 0,
            ..ShiftConfig::default()
        };
        let out = spatial_shift(&g, &cfg).unwrap();
        let at = |x: &TokenGrid, h: usize, w: usize, c: usize| x.tensor().at(&[0, 0, h, w, c]);
        assert_eq!(at(&out, 1, 1, 4), at(&g, 1, 0, 4)); // left
        assert_eq!(at(&out, 1, 1, 5), at(&g, 1, 2, 5)); // right
        assert_eq!(at(&out, 1, 1, 6), at(&g, 0, 1, 6)); // above
        assert_eq!(at(&out, 1, 1, 7), at(&g, 2, 1, 7)); // below
        assert_eq!(at(&out, 0, 0, 4), 0.0);
    }

    #[test]
    fn per_head_blocks_each_keep_their_prefix() {
        let d = dims(3, 1, 1, 16);
        let map = temporal_map(&d, &ShiftConfig::default(), 2).unwrap();
        let token1 = 16;
        for c in [0, 1, 2, 3, 8, 9, 10, 11] {
            assert_eq!(map[token1 + c], (token1 + c) as u32);
        }
        assert_eq!(map[token1 + 12], 12);
    }

    #[test]
    fn flatten_round_trip() {
        let d = GridDims {
            batch: 2,
            frames: 3,
            height: 2,
            width: 2,
            channels: 4,
        };
        let g = grid(d);
        let back = TokenGrid::unflatten(&g.flatten(), 3, 2, 2).unwrap();
        assert_eq!(back, g);
    }
}
