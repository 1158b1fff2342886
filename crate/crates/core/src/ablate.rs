//! Ablation grids over configuration axes.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::attention::KernelTag;
use crate::error::{Error, Result};
use crate::fixation::{Aggregation, CoopInputs, FixationConfig, FixationMode};
use crate::model::{ModelConfig, Pattern, ShiftOrder};
use crate::synthetic::SyntheticTask;
use crate::train::{train, TrainConfig, TrainError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Axis {
    SpatialShift,
    TemporalShift,
    Fixation,
    ShareRatio,
    Aggregation,
    Kernel,
    Pattern,
    ShiftOrder,
}

impl Axis {
    pub const ALL: [Axis; 8] = [
        Axis::SpatialShift,
        Axis::TemporalShift,
        Axis::Fixation,
        Axis::ShareRatio,
        Axis::Aggregation,
        Axis::Kernel,
        Axis::Pattern,
        Axis::ShiftOrder,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Axis::SpatialShift => "spatial_shift",
            Axis::TemporalShift => "temporal_shift",
            Axis::Fixation => "fixation",
            Axis::ShareRatio => "share_ratio",
            Axis::Aggregation => "aggregation",
            Axis::Kernel => "kernel",
            Axis::Pattern => "pattern",
            Axis::ShiftOrder => "shift_order",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|a| a.name() == s).ok_or_else(|| {
            let valid: Vec<&str> = Self::ALL.iter().map(|a| a.name()).collect();
            Error::Config(format!("unknown ablation axis `{s}`; valid axes: {}", valid.join(", ")))
        })
    }

    pub fn values(self) -> &'static [&'static str] {
        match self {
            Axis::SpatialShift | Axis::TemporalShift => &["off", "on"],
            Axis::Fixation => &["none", "separate", "coop-qk", "coop-qkv"],
            Axis::ShareRatio => &["shared", "unshared"],
            Axis::Aggregation => &["concat", "add", "multiply"],
            Axis::Kernel => &["relu", "elu_plus_one", "sigmoid"],
            Axis::Pattern => &["factorized", "joint", "windowed"],
            Axis::ShiftOrder => &["shift-first", "fixation-first"],
        }
    }

    /// Sets this axis to `value` on `cfg`.
    pub fn apply(self, cfg: &mut ModelConfig, value: &str) -> Result<()> {
        let bad = || {
            Error::Config(format!(
                "axis {} has no value `{value}`; valid values: {}",
                self.name(),
                self.values().join(", ")
            ))
        };
        match self {
            Axis::SpatialShift => cfg.shift.xi = on_off(value, cfg.shift.xi.max(1)).ok_or_else(bad)?,
            Axis::TemporalShift => cfg.shift.tau = on_off(value, cfg.shift.tau.max(1)).ok_or_else(bad)?,
            Axis::Fixation => {
                let (mode, inputs) = match value {
                    "none" => (FixationMode::None, cfg.fixation.inputs),
                    "separate" => (FixationMode::Separate, cfg.fixation.inputs),
                    "coop-qk" => (FixationMode::Cooperative, CoopInputs::QK),
                    "coop-qkv" => (FixationMode::Cooperative, CoopInputs::QKV),
                    _ => return Err(bad()),
                };
                cfg.fixation = FixationConfig {
                    mode,
                    inputs,
                    ..cfg.fixation
                };
            }
            Axis::ShareRatio => {
                cfg.fixation.share_ratio = match value {
                    "shared" => true,
                    "unshared" => false,
                    _ => return Err(bad()),
                }
            }
            Axis::Aggregation => cfg.fixation.aggregation = Aggregation::parse(value).ok_or_else(bad)?,
            Axis::Kernel => cfg.kernel.tag = KernelTag::parse(value).ok_or_else(bad)?,
            Axis::Pattern => cfg.pattern = Pattern::parse(value).ok_or_else(bad)?,
            Axis::ShiftOrder => cfg.shift_order = ShiftOrder::parse(value).ok_or_else(bad)?,
        }
        Ok(())
    }
}

fn on_off(value: &str, on: usize) -> Option<usize> {
    match value {
        "on" => Some(on),
        "off" => Some(0),
        _ => None,
    }
}

/// One point of the grid: a value for every chosen axis.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Delta {
    pub id: usize,
    pub values: Vec<(Axis, &'static str)>,
}

impl Delta {
    pub fn apply(&self, base: &ModelConfig) -> Result<ModelConfig> {
        let mut cfg = *base;
        for &(axis, value) in &self.values {
            axis.apply(&mut cfg, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Cartesian product of the values of `axes`, first axis slowest.
pub fn grid(axes: &[Axis]) -> Result<Vec<Delta>> {
    for (i, a) in axes.iter().enumerate() {
        if axes[..i].contains(a) {
            return Err(Error::Config(format!("ablation axis {} listed twice", a.name())));
        }
    }
    let mut points: Vec<Vec<(Axis, &'static str)>> = vec![Vec::new()];
    for &axis in axes {
        points = points
            .into_iter()
            .flat_map(|p| {
                axis.values().iter().map(move |&v| {
                    let mut q = p.clone();
                    q.push((axis, v));
                    q
                })
            })
            .collect();
    }
    Ok(points
        .into_iter()
        .enumerate()
        .map(|(id, values)| Delta { id, values })
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub delta: Delta,
    pub seed: u64,
    pub final_top1: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DeltaSummary {
    pub delta: Delta,
    pub mean: f64,
    /// Sample standard deviation; zero for a single seed.
    pub std: f64,
    pub seeds: usize,
}

/// Trains every delta on every seed, in (delta, seed) order.
pub fn ablate(
    base: &ModelConfig,
    task: &SyntheticTask,
    tc: &TrainConfig,
    axes: &[Axis],
    seeds: &[u64],
) -> Result<Vec<AblationRow>> {
    let deltas = grid(axes)?;
    let configs = deltas.iter().map(|d| d.apply(base)).collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::with_capacity(deltas.len() * seeds.len());
    for (delta, cfg) in deltas.iter().zip(&configs) {
        for &seed in seeds {
            rows.push(AblationRow {
                delta: delta.clone(),
                seed,
                final_top1: run_cell(cfg, task, tc, seed)?,
            });
        }
    }
    Ok(rows)
}

/// Final validation top-1 of one training run. A diverged run scores NaN:
/// it is a result of the grid, not a failure of it.
pub fn run_cell(cfg: &ModelConfig, task: &SyntheticTask, tc: &TrainConfig, seed: u64) -> Result<f64> {
    match train(cfg, task, tc, seed) {
        Ok(out) => Ok(out.final_top1().unwrap_or(f64::NAN)),
        Err(TrainError::Diverged { .. }) => Ok(f64::NAN),
        Err(TrainError::Failed(e)) => Err(e),
    }
}

/// Mean and spread per delta, in order of first appearance.
pub fn summarize(rows: &[AblationRow]) -> Vec<DeltaSummary> {
    let mut out: Vec<(Delta, Vec<f64>)> = Vec::new();
    for r in rows {
        match out.iter_mut().find(|(d, _)| d.id == r.delta.id) {
            Some((_, v)) => v.push(r.final_top1),
            None => out.push((r.delta.clone(), vec![r.final_top1])),
        }
    }
    out.into_iter()
        .map(|(delta, v)| {
            let (mean, std) = mean_std(&v);
            DeltaSummary {
                delta,
                mean,
                std,
                seeds: v.len(),
            }
        })
        .collect()
}

pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, num_traits::Float::sqrt(var))
}

/// Label for a delta such as `fixation=coop-qk;kernel=relu`.
pub fn delta_label(values: &[(Axis, &str)]) -> String {
    let parts: Vec<String> = values.iter().map(|(a, v)| format!("{}={v}", a.name())).collect();
    parts.join(";")
}
