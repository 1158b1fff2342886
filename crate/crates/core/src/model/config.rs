use alloc::format;

use crate::attention::{Family, KernelFn};
use crate::error::{Error, Result};
use crate::fixation::{FixationConfig, FixationMode};
use crate::shift::{GridDims, ShiftConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    S,
    Default,
    H,
    HR,
    Toy,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::S, Variant::Default, Variant::H, Variant::HR, Variant::Toy];

    pub fn name(self) -> &'static str {
        match self {
            Variant::S => "S",
            Variant::Default => "default",
            Variant::H => "H",
            Variant::HR => "HR",
            Variant::Toy => "toy",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.name().eq_ignore_ascii_case(s))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Pattern {
    Factorized,
    Joint,
    Windowed,
}

impl Pattern {
    pub const ALL: [Pattern; 3] = [Pattern::Factorized, Pattern::Joint, Pattern::Windowed];

    pub fn name(self) -> &'static str {
        match self {
            Pattern::Factorized => "factorized",
            Pattern::Joint => "joint",
            Pattern::Windowed => "windowed",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.name() == s)
    }

    pub fn stages(self) -> &'static [StageKind] {
        match self {
            Pattern::Factorized => &[StageKind::Spatial, StageKind::Temporal],
            Pattern::Joint => &[StageKind::Joint],
            Pattern::Windowed => &[StageKind::Spatial, StageKind::WindowedTemporal],
        }
    }
}

/// One attention sub-block of a layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum StageKind {
    /// Tokens of one frame.
    Spatial,
    /// Tokens at one spatial site across all frames.
    Temporal,
    /// Tokens at one spatial site within `±window` frames of the query.
    WindowedTemporal,
    /// All tokens of a clip.
    Joint,
}

impl StageKind {
    pub fn name(self) -> &'static str {
        match self {
            StageKind::Spatial => "spatial",
            StageKind::Temporal => "temporal",
            StageKind::WindowedTemporal => "windowed",
            StageKind::Joint => "joint",
        }
    }
}

/// Where the neighborhood shift sits relative to fixation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ShiftOrder {
    /// shift K, V → ρ → fixation
    ShiftFirst,
    /// ρ → fixation → shift K̂, V
    FixationFirst,
}

impl ShiftOrder {
    pub fn name(self) -> &'static str {
        match self {
            ShiftOrder::ShiftFirst => "shift-first",
            ShiftOrder::FixationFirst => "fixation-first",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [ShiftOrder::ShiftFirst, ShiftOrder::FixationFirst]
            .into_iter()
            .find(|o| o.name() == s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelConfig {
    pub variant: Variant,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub patch: usize,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub classes: usize,
    pub pattern: Pattern,
    /// Temporal radius of the windowed pattern.
    pub window: usize,
    pub family: Family,
    pub kernel: KernelFn,
    /// Divide softmax logits by `√Dh`. Never used by kernelized families.
    pub softmax_scale: bool,
    pub fixation: FixationConfig,
    pub shift: ShiftConfig,
    pub shift_order: ShiftOrder,
}

impl ModelConfig {
    fn base(variant: Variant) -> Self {
        Self {
            variant,
            frames: 16,
            height: 224,
            width: 224,
            channels: 3,
            patch: 16,
            dim: 512,
            layers: 12,
            heads: 8,
            mlp_ratio: 4,
            classes: 174,
            pattern: Pattern::Factorized,
            window: 1,
            family: Family::Linear,
            kernel: KernelFn::relu(),
            softmax_scale: true,
            fixation: FixationConfig::cooperative(),
            shift: ShiftConfig {
                tau: 4,
                xi: 1,
                ..ShiftConfig::default()
            },
            shift_order: ShiftOrder::ShiftFirst,
        }
    }

    pub fn preset(variant: Variant) -> Self {
        let mut c = Self::base(variant);
        match variant {
            Variant::Default => {}
            Variant::S => c.frames = 8,
            Variant::H => c.frames = 32,
            Variant::HR => {
                c.height = 336;
                c.width = 336;
            }
            Variant::Toy => {
                c.frames = 4;
                c.height = 32;
                c.width = 32;
                c.channels = 1;
                c.patch = 8;
                c.dim = 32;
                c.layers = 2;
                c.heads = 2;
                c.classes = 4;
                c.shift.tau = 1;
                c.shift.xi = 1;
            }
        }
        c
    }

    pub fn toy() -> Self {
        Self::preset(Variant::Toy)
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn grid_height(&self) -> usize {
        self.height / self.patch
    }

    pub fn grid_width(&self) -> usize {
        self.width / self.patch
    }

    pub fn spatial_tokens(&self) -> usize {
        self.grid_height() * self.grid_width()
    }

    pub fn tokens(&self) -> usize {
        self.frames * self.spatial_tokens()
    }

    pub fn patch_width(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    pub fn grid_dims(&self, batch: usize) -> GridDims {
        GridDims {
            batch,
            frames: self.frames,
            height: self.grid_height(),
            width: self.grid_width(),
            channels: self.dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("frames", self.frames),
            ("height", self.height),
            ("width", self.width),
            ("channels", self.channels),
            ("patch", self.patch),
            ("dim", self.dim),
            ("layers", self.layers),
            ("heads", self.heads),
            ("mlp_ratio", self.mlp_ratio),
            ("classes", self.classes),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("model.{name} must be positive")));
            }
        }
        if self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "model.dim {} is not divisible by model.heads {}",
                self.dim, self.heads
            )));
        }
        if self.height % self.patch != 0 || self.width % self.patch != 0 {
            return Err(Error::Config(format!(
                "frame {}x{} is not divisible by patch size {}",
                self.height, self.width, self.patch
            )));
        }
        if self.pattern == Pattern::Windowed && self.window == 0 {
            return Err(Error::Config(
                "model.window must be positive for the windowed pattern".into(),
            ));
        }
        self.kernel.validate()?;
        self.shift.validate(self.head_dim())?;
        if self.fixation.mode != FixationMode::None && self.family == Family::Softmax {
            return Err(Error::Config(
                "fixation reweights kernel features; it needs a kernelized attention family".into(),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_have_expected_geometry() {
        let d = ModelConfig::preset(Variant::Default);
        assert_eq!(
            (d.frames, d.height, d.dim, d.layers, d.heads, d.patch),
            (16, 224, 512, 12, 8, 16)
        );
        assert_eq!(ModelConfig::preset(Variant::S).frames, 8);
        assert_eq!(ModelConfig::preset(Variant::H).frames, 32);
        let hr = ModelConfig::preset(Variant::HR);
        assert_eq!((hr.frames, hr.height, hr.width), (16, 336, 336));
        for v in Variant::ALL {
            ModelConfig::preset(v).validate().unwrap();
        }
        let toy = ModelConfig::toy();
        assert_eq!((toy.grid_height(), toy.grid_width(), toy.tokens()), (4, 4, 64));
    }

    #[test]
    fn indivisible_geometry_is_rejected() {
        let mut c = ModelConfig::toy();
        c.height = 30;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = ModelConfig::toy();
        c.heads = 3;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }
}
