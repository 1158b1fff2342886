use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{ModelConfig, StageKind};
use crate::error::{Error, Result};
use crate::fixation::Projection;
use crate::tensor::Tensor;

/// Named parameter tensors in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct Params {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl Params {
    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Replaces every tensor, checking names and shapes against `self`.
    pub fn replace_all(&mut self, named: Vec<(String, Tensor)>) -> Result<()> {
        if named.len() != self.len() {
            return Err(Error::Input(format!(
                "expected {} parameter tensors, got {}",
                self.len(),
                named.len()
            )));
        }
        for (i, (name, t)) in named.into_iter().enumerate() {
            if name != self.names[i] {
                return Err(Error::Input(format!(
                    "parameter #{i} is `{name}`, expected `{}`",
                    self.names[i]
                )));
            }
            if t.shape() != self.tensors[i].shape() {
                return Err(Error::Input(format!(
                    "parameter `{name}` has shape {:?}, expected {:?}",
                    t.shape(),
                    self.tensors[i].shape()
                )));
            }
            self.tensors[i] = t;
        }
        Ok(())
    }

    fn push(&mut self, name: String, t: Tensor) -> usize {
        self.names.push(name);
        self.tensors.push(t);
        self.tensors.len() - 1
    }
}

/// Indices of one `x·w + b` layer.
#[derive(Clone, Copy, Debug)]
pub struct Affine {
    pub w: usize,
    pub b: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct Norm {
    pub gamma: usize,
    pub beta: usize,
}

#[derive(Clone, Debug)]
pub struct StageLayout {
    pub kind: StageKind,
    pub norm: Norm,
    pub qkv: Affine,
    pub out: Affine,
    pub fixation: Vec<Affine>,
}

#[derive(Clone, Debug)]
pub struct LayerLayout {
    pub stages: Vec<StageLayout>,
    pub mlp_norm: Norm,
    pub fc1: Affine,
    pub fc2: Affine,
}

/// Where each parameter lives in [`Params`].
#[derive(Clone, Debug)]
pub struct Layout {
    pub embed: Affine,
    pub pos_spatial: usize,
    pub pos_temporal: usize,
    pub layers: Vec<LayerLayout>,
    pub head_norm: Norm,
    pub head: Affine,
}

/// Positional embeddings start at the scale of a patch embedding so that plain
/// SGD does not spend its budget growing them.
const POS_STD: f64 = 0.5;

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], limit: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-limit..limit))
}

struct Builder {
    params: Params,
    rng: ChaCha8Rng,
}

impl Builder {
    fn affine(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Affine {
        let p = Projection::xavier(&mut self.rng, fan_in, fan_out);
        Affine {
            w: self.params.push(format!("{name}.w"), p.w),
            b: self.params.push(format!("{name}.b"), p.b),
        }
    }

    fn norm(&mut self, name: &str, d: usize) -> Norm {
        Norm {
            gamma: self.params.push(format!("{name}.gamma"), Tensor::ones(&[d])),
            beta: self.params.push(format!("{name}.beta"), Tensor::zeros(&[d])),
        }
    }

    fn embedding(&mut self, name: &str, shape: &[usize]) -> usize {
        let t = uniform(&mut self.rng, shape, POS_STD * num_traits::Float::sqrt(3.0f64));
        self.params.push(String::from(name), t)
    }
}

/// Deterministic parameters for `cfg` from `seed`.
pub fn init(cfg: &ModelConfig, seed: u64) -> (Params, Layout) {
    let mut b = Builder {
        params: Params {
            names: Vec::new(),
            tensors: Vec::new(),
        },
        rng: ChaCha8Rng::seed_from_u64(seed),
    };
    let d = cfg.dim;
    let dh = cfg.head_dim();
    let embed = b.affine("embed", cfg.patch_width(), d);
    let pos_spatial = b.embedding("pos.spatial", &[cfg.spatial_tokens(), d]);
    let pos_temporal = b.embedding("pos.temporal", &[cfg.frames, d]);
    let mut layers = Vec::with_capacity(cfg.layers);
    for l in 0..cfg.layers {
        let mut stages = Vec::new();
        for &kind in cfg.pattern.stages() {
            let p = format!("layers.{l}.{}", kind.name());
            let norm = b.norm(&format!("{p}.norm"), d);
            let qkv = b.affine(&format!("{p}.qkv"), d, 3 * d);
            let out = b.affine(&format!("{p}.out"), d, d);
            let width = cfg.fixation.input_width(dh);
            let fixation = cfg
                .fixation
                .projection_names()
                .iter()
                .map(|n| b.affine(&format!("{p}.fix.{n}"), width, dh))
                .collect();
            stages.push(StageLayout {
                kind,
                norm,
                qkv,
                out,
                fixation,
            });
        }
        let mlp_norm = b.norm(&format!("layers.{l}.mlp.norm"), d);
        let fc1 = b.affine(&format!("layers.{l}.mlp.fc1"), d, cfg.mlp_ratio * d);
        let fc2 = b.affine(&format!("layers.{l}.mlp.fc2"), cfg.mlp_ratio * d, d);
        layers.push(LayerLayout {
            stages,
            mlp_norm,
            fc1,
            fc2,
        });
    }
    let head_norm = b.norm("head.norm", d);
    let head = b.affine("head", d, cfg.classes);
    (
        b.params,
        Layout {
            embed,
            pos_spatial,
            pos_temporal,
            layers,
            head_norm,
            head,
        },
    )
}
