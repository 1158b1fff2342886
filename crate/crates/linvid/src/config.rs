//! Run configuration: a sectioned TOML file, `--set section.key=value`
//! overrides and two environment variables.
//!
//! ```toml
//! schema = "linvid/1"
//!
//! [model]
//! variant = "toy"      # S | default | H | HR | toy; every other key is optional
//! family = "linear"
//!
//! [train]
//! epochs = 8
//! ```
//!
//! Unknown sections or keys are errors. Precedence, lowest first: variant
//! preset, file, environment (`LINVID_OUT_DIR`, `LINVID_THREADS`), `--set`.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use linvid_core::attention::{Family, KernelFn, KernelTag};
use linvid_core::fixation::{Aggregation, CoopInputs, FixationMode};
use linvid_core::model::{ModelConfig, Pattern, ShiftOrder, Variant};
use linvid_core::shift::{Boundary, SpatialMode};
use linvid_core::synthetic::SyntheticTask;
use linvid_core::train::TrainConfig;

use crate::dump::Precision;

pub const SCHEMA: &str = "linvid/1";
pub const ENV_OUT_DIR: &str = "LINVID_OUT_DIR";
pub const ENV_THREADS: &str = "LINVID_THREADS";

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    /// Dotted key the problem is about, when there is one.
    pub key: Option<String>,
    pub message: String,
}

impl ConfigError {
    fn at(key: &str, message: impl Into<String>) -> Self {
        Self {
            key: Some(key.into()),
            message: message.into(),
        }
    }

    fn general(message: impl Into<String>) -> Self {
        Self {
            key: None,
            message: message.into(),
        }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.key {
            Some(k) => write!(f, "config key `{k}`: {}", self.message),
            None => write!(f, "config: {}", self.message),
        }
    }
}

impl std::error::Error for ConfigError {}

impl From<linvid_core::Error> for ConfigError {
    fn from(e: linvid_core::Error) -> Self {
        Self::general(e.to_string())
    }
}

#[derive(Debug, Default, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub schema: Option<String>,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub shift: ShiftSection,
    #[serde(default)]
    pub fixation: FixationSection,
    #[serde(default)]
    pub task: TaskSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub profile: ProfileSection,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Debug, Default, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub variant: Option<String>,
    pub frames: Option<usize>,
    pub height: Option<usize>,
    pub width: Option<usize>,
    pub channels: Option<usize>,
    pub patch: Option<usize>,
    pub dim: Option<usize>,
    pub layers: Option<usize>,
    pub heads: Option<usize>,
    pub mlp_ratio: Option<usize>,
    pub classes: Option<usize>,
    pub pattern: Option<String>,
    pub window: Option<usize>,
    pub family: Option<String>,
    pub kernel: Option<String>,
    pub epsilon: Option<f64>,
    pub strict: Option<bool>,
    pub softmax_scale: Option<bool>,
    pub shift_order: Option<String>,
}

#[derive(Debug, Default, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShiftSection {
    pub tau: Option<usize>,
    pub xi: Option<usize>,
    pub alpha: Option<f64>,
    pub spatial_mode: Option<String>,
    pub boundary: Option<String>,
}

#[derive(Debug, Default, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixationSection {
    pub mode: Option<String>,
    pub aggregation: Option<String>,
    pub share_ratio: Option<bool>,
    pub inputs: Option<String>,
}

#[derive(Debug, Default, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSection {
    pub sprite: Option<usize>,
    pub background: Option<f64>,
    pub noise: Option<f64>,
    pub random_axis: Option<bool>,
    pub seed: Option<u64>,
}

#[derive(Debug, Default, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub train_size: Option<usize>,
    pub val_size: Option<usize>,
    pub lr: Option<f64>,
    pub warmup_epochs: Option<usize>,
    pub momentum: Option<f64>,
    pub weight_decay: Option<f64>,
    pub clip_norm: Option<f64>,
    pub seed: Option<u64>,
}

#[derive(Debug, Default, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileSection {
    pub families: Option<Vec<String>>,
    pub n_values: Option<Vec<usize>>,
    pub dim: Option<usize>,
    pub repeats: Option<usize>,
    pub warmup: Option<usize>,
    pub seed: Option<u64>,
    pub memory_limit_mb: Option<u64>,
    pub entropy_rows: Option<usize>,
}

#[derive(Debug, Default, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: Option<PathBuf>,
    pub threads: Option<usize>,
    pub precision: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProfileSettings {
    pub families: Vec<Family>,
    pub n_values: Vec<usize>,
    pub dim: usize,
    /// Timed samples per cell; the median is reported. Each sample lasts at
    /// least 10 ms, looping the call as needed.
    pub repeats: usize,
    /// Untimed runs before the timed ones.
    pub warmup: usize,
    pub seed: u64,
    /// Cells whose working set would exceed this are recorded as OOM.
    pub memory_limit_mb: u64,
    /// Rows sampled for the concentration columns.
    pub entropy_rows: usize,
}

impl Default for ProfileSettings {
    fn default() -> Self {
        Self {
            families: vec![Family::Linear, Family::Softmax],
            n_values: vec![1024, 2048, 4096, 8192],
            dim: 32,
            repeats: 10,
            warmup: 2,
            seed: 0,
            memory_limit_mb: 1024,
            entropy_rows: 256,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutputSettings {
    pub dir: PathBuf,
    pub threads: usize,
    pub precision: Precision,
}

/// A fully resolved configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub task: SyntheticTask,
    pub train: TrainConfig,
    pub train_seed: u64,
    pub profile: ProfileSettings,
    pub output: OutputSettings,
}

/// Environment overrides, read once so tests can inject them.
#[derive(Debug, Clone, Default)]
pub struct Env {
    pub out_dir: Option<String>,
    pub threads: Option<String>,
}

impl Env {
    pub fn from_process() -> Self {
        Self {
            out_dir: std::env::var(ENV_OUT_DIR).ok(),
            threads: std::env::var(ENV_THREADS).ok(),
        }
    }
}

fn parse_enum<T>(key: &str, value: &str, parse: impl Fn(&str) -> Option<T>, valid: &[&str]) -> Result<T, ConfigError> {
    parse(value).ok_or_else(|| {
        ConfigError::at(
            key,
            format!("unknown value `{value}`; expected one of {}", valid.join(", ")),
        )
    })
}

fn names<T: Copy>(all: &[T], name: impl Fn(T) -> &'static str) -> Vec<&'static str> {
    all.iter().map(|&t| name(t)).collect()
}

/// `section.key=value` applied to a raw table. Values use TOML syntax; bare
/// words are taken as strings.
fn apply_set(table: &mut toml::Table, assignment: &str) -> Result<(), ConfigError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| ConfigError::general(format!("--set expects key=value, got `{assignment}`")))?;
    let key = key.trim();
    let raw = raw.trim();
    let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let mut parts: Vec<&str> = key.split('.').collect();
    let leaf = parts
        .pop()
        .filter(|s| !s.is_empty())
        .ok_or_else(|| ConfigError::general("--set with an empty key"))?;
    let mut node = table;
    for p in parts {
        node = node
            .entry(p)
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| ConfigError::at(key, format!("`{p}` is not a section")))?;
    }
    node.insert(leaf.to_string(), value);
    Ok(())
}

impl RunConfig {
    /// Reads `path` (if any), applies `env` and `sets`, and resolves.
    pub fn load(path: Option<&Path>, sets: &[String], env: &Env) -> Result<Self, ConfigError> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| ConfigError::general(format!("cannot read {}: {e}", p.display())))?;
                toml::from_str::<toml::Table>(&text)
                    .map_err(|e| ConfigError::general(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        if let Some(dir) = &env.out_dir {
            apply_set(&mut table, &format!("output.dir={}", toml::Value::String(dir.clone())))?;
        }
        if let Some(t) = &env.threads {
            let n: i64 = t
                .parse()
                .map_err(|_| ConfigError::at("output.threads", format!("{ENV_THREADS}=`{t}` is not an integer")))?;
            apply_set(&mut table, &format!("output.threads={n}"))?;
        }
        for s in sets {
            apply_set(&mut table, s)?;
        }
        let text = toml::to_string(&table).map_err(|e| ConfigError::general(e.to_string()))?;
        let file: FileConfig = toml::from_str(&text).map_err(|e| ConfigError::general(e.message().to_string()))?;
        Self::resolve(&file)
    }

    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let file: FileConfig = toml::from_str(text).map_err(|e| ConfigError::general(e.message().to_string()))?;
        Self::resolve(&file)
    }

    pub fn resolve(f: &FileConfig) -> Result<Self, ConfigError> {
        match f.schema.as_deref() {
            None => return Err(ConfigError::at("schema", format!("missing; expected \"{SCHEMA}\""))),
            Some(SCHEMA) => {}
            Some(other) => {
                return Err(ConfigError::at(
                    "schema",
                    format!("unsupported `{other}`; expected \"{SCHEMA}\""),
                ))
            }
        }
        let m = &f.model;
        let variant_name = m
            .variant
            .as_deref()
            .ok_or_else(|| ConfigError::at("model.variant", "missing; no default exists"))?;
        let variant = parse_enum(
            "model.variant",
            variant_name,
            Variant::parse,
            &names(&Variant::ALL, Variant::name),
        )?;
        let mut model = ModelConfig::preset(variant);
        macro_rules! set {
            ($dst:expr, $src:expr) => {
                if let Some(v) = $src.clone() {
                    $dst = v;
                }
            };
        }
        set!(model.frames, m.frames);
        set!(model.height, m.height);
        set!(model.width, m.width);
        set!(model.channels, m.channels);
        set!(model.patch, m.patch);
        set!(model.dim, m.dim);
        set!(model.layers, m.layers);
        set!(model.heads, m.heads);
        set!(model.mlp_ratio, m.mlp_ratio);
        set!(model.classes, m.classes);
        set!(model.window, m.window);
        set!(model.softmax_scale, m.softmax_scale);
        set!(model.kernel.epsilon, m.epsilon);
        set!(model.kernel.strict, m.strict);
        if let Some(v) = &m.pattern {
            model.pattern = parse_enum("model.pattern", v, Pattern::parse, &names(&Pattern::ALL, Pattern::name))?;
        }
        if let Some(v) = &m.family {
            model.family = parse_enum("model.family", v, Family::parse, &names(&Family::ALL, Family::name))?;
        }
        if let Some(v) = &m.kernel {
            model.kernel = KernelFn {
                tag: parse_enum(
                    "model.kernel",
                    v,
                    KernelTag::parse,
                    &names(&KernelTag::ALL, KernelTag::name),
                )?,
                ..model.kernel
            };
        }
        if let Some(v) = &m.shift_order {
            model.shift_order = parse_enum(
                "model.shift_order",
                v,
                ShiftOrder::parse,
                &["shift-first", "fixation-first"],
            )?;
        }

        let s = &f.shift;
        set!(model.shift.tau, s.tau);
        set!(model.shift.xi, s.xi);
        set!(model.shift.alpha, s.alpha);
        if let Some(v) = &s.spatial_mode {
            model.shift.spatial_mode = parse_enum(
                "shift.spatial_mode",
                v,
                SpatialMode::parse,
                &["criss-cross", "squared-kernel"],
            )?;
        }
        if let Some(v) = &s.boundary {
            model.shift.boundary = parse_enum("shift.boundary", v, Boundary::parse, &["zero", "clamp"])?;
        }

        let x = &f.fixation;
        if let Some(v) = &x.mode {
            model.fixation.mode = parse_enum(
                "fixation.mode",
                v,
                FixationMode::parse,
                &["none", "separate", "cooperative"],
            )?;
        }
        if let Some(v) = &x.aggregation {
            model.fixation.aggregation = parse_enum(
                "fixation.aggregation",
                v,
                Aggregation::parse,
                &names(&Aggregation::ALL, Aggregation::name),
            )?;
        }
        set!(model.fixation.share_ratio, x.share_ratio);
        if let Some(v) = &x.inputs {
            model.fixation.inputs = parse_enum("fixation.inputs", v, CoopInputs::parse, &["qk", "qkv"])?;
        }
        model.validate()?;

        let t = &f.task;
        let mut task = SyntheticTask {
            classes: model.classes,
            frames: model.frames,
            height: model.height,
            width: model.width,
            channels: model.channels,
            ..SyntheticTask::default()
        };
        set!(task.sprite, t.sprite);
        set!(task.background, t.background);
        set!(task.noise, t.noise);
        set!(task.random_axis, t.random_axis);
        set!(task.seed, t.seed);

        let r = &f.train;
        let mut train = TrainConfig::default();
        set!(train.epochs, r.epochs);
        set!(train.batch_size, r.batch_size);
        set!(train.train_size, r.train_size);
        set!(train.val_size, r.val_size);
        set!(train.lr, r.lr);
        set!(train.warmup_epochs, r.warmup_epochs);
        set!(train.momentum, r.momentum);
        set!(train.weight_decay, r.weight_decay);
        set!(train.clip_norm, r.clip_norm);
        train.validate()?;
        let train_seed = r.seed.unwrap_or(0);

        let p = &f.profile;
        let mut profile = ProfileSettings::default();
        if let Some(v) = &p.families {
            profile.families = v
                .iter()
                .map(|s| parse_enum("profile.families", s, Family::parse, &names(&Family::ALL, Family::name)))
                .collect::<Result<_, _>>()?;
        }
        set!(profile.n_values, p.n_values);
        set!(profile.dim, p.dim);
        set!(profile.repeats, p.repeats);
        set!(profile.warmup, p.warmup);
        set!(profile.seed, p.seed);
        set!(profile.memory_limit_mb, p.memory_limit_mb);
        set!(profile.entropy_rows, p.entropy_rows);
        if profile.families.is_empty() {
            return Err(ConfigError::at("profile.families", "must name at least one family"));
        }
        if profile.n_values.is_empty() || profile.n_values.contains(&0) {
            return Err(ConfigError::at(
                "profile.n_values",
                "must be a non-empty list of positive sizes",
            ));
        }
        if profile.dim == 0 || profile.repeats == 0 {
            return Err(ConfigError::at("profile", "dim and repeats must be positive"));
        }

        let o = &f.output;
        let precision = match o.precision.as_deref() {
            None | Some("f64") => Precision::F64,
            Some("f32") => Precision::F32,
            Some(v) => {
                return Err(ConfigError::at(
                    "output.precision",
                    format!("unknown value `{v}`; expected f64, f32"),
                ))
            }
        };
        let output = OutputSettings {
            dir: o.dir.clone().unwrap_or_else(|| PathBuf::from("linvid-out")),
            threads: o.threads.unwrap_or(1),
            precision,
        };
        if output.threads == 0 {
            return Err(ConfigError::at("output.threads", "must be at least 1"));
        }

        let cfg = Self {
            model,
            task,
            train,
            train_seed,
            profile,
            output,
        };
        cfg.task.validate()?;
        Ok(cfg)
    }

    /// Every key with its resolved value.
    pub fn to_file(&self) -> FileConfig {
        let m = &self.model;
        FileConfig {
            schema: Some(SCHEMA.into()),
            model: ModelSection {
                variant: Some(m.variant.name().into()),
                frames: Some(m.frames),
                height: Some(m.height),
                width: Some(m.width),
                channels: Some(m.channels),
                patch: Some(m.patch),
                dim: Some(m.dim),
                layers: Some(m.layers),
                heads: Some(m.heads),
                mlp_ratio: Some(m.mlp_ratio),
                classes: Some(m.classes),
                pattern: Some(m.pattern.name().into()),
                window: Some(m.window),
                family: Some(m.family.name().into()),
                kernel: Some(m.kernel.tag.name().into()),
                epsilon: Some(m.kernel.epsilon),
                strict: Some(m.kernel.strict),
                softmax_scale: Some(m.softmax_scale),
                shift_order: Some(m.shift_order.name().into()),
            },
            shift: ShiftSection {
                tau: Some(m.shift.tau),
                xi: Some(m.shift.xi),
                alpha: Some(m.shift.alpha),
                spatial_mode: Some(m.shift.spatial_mode.name().into()),
                boundary: Some(m.shift.boundary.name().into()),
            },
            fixation: FixationSection {
                mode: Some(m.fixation.mode.name().into()),
                aggregation: Some(m.fixation.aggregation.name().into()),
                share_ratio: Some(m.fixation.share_ratio),
                inputs: Some(m.fixation.inputs.name().into()),
            },
            task: TaskSection {
                sprite: Some(self.task.sprite),
                background: Some(self.task.background),
                noise: Some(self.task.noise),
                random_axis: Some(self.task.random_axis),
                seed: Some(self.task.seed),
            },
            train: TrainSection {
                epochs: Some(self.train.epochs),
                batch_size: Some(self.train.batch_size),
                train_size: Some(self.train.train_size),
                val_size: Some(self.train.val_size),
                lr: Some(self.train.lr),
                warmup_epochs: Some(self.train.warmup_epochs),
                momentum: Some(self.train.momentum),
                weight_decay: Some(self.train.weight_decay),
                clip_norm: Some(self.train.clip_norm),
                seed: Some(self.train_seed),
            },
            profile: ProfileSection {
                families: Some(self.profile.families.iter().map(|f| f.name().to_string()).collect()),
                n_values: Some(self.profile.n_values.clone()),
                dim: Some(self.profile.dim),
                repeats: Some(self.profile.repeats),
                warmup: Some(self.profile.warmup),
                seed: Some(self.profile.seed),
                memory_limit_mb: Some(self.profile.memory_limit_mb),
                entropy_rows: Some(self.profile.entropy_rows),
            },
            output: OutputSection {
                dir: Some(self.output.dir.clone()),
                threads: Some(self.output.threads),
                precision: Some(
                    match self.output.precision {
                        Precision::F64 => "f64",
                        Precision::F32 => "f32",
                    }
                    .into(),
                ),
            },
        }
    }

    /// The resolved configuration as a loadable TOML document.
    pub fn to_toml(&self) -> String {
        toml::to_string(&self.to_file()).expect("config serializes")
    }

    /// Resolved TOML as `# ` comment lines for CSV headers.
    pub fn comment_block(&self) -> String {
        self.to_toml()
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| format!("# {l}\n"))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> Vec<String> {
        vec![format!("schema={SCHEMA}"), "model.variant=toy".into()]
    }

    #[test]
    fn minimal_config_resolves_to_the_preset() {
        let c = RunConfig::load(None, &toy(), &Env::default()).unwrap();
        assert_eq!(c.model, ModelConfig::toy());
        assert_eq!(c.train, TrainConfig::default());
        assert_eq!(c.task.frames, 4);
    }

    #[test]
    fn required_keys_are_named() {
        let e = RunConfig::load(None, &[], &Env::default()).unwrap_err();
        assert_eq!(e.key.as_deref(), Some("schema"));
        let e = RunConfig::load(None, &toy()[..1], &Env::default()).unwrap_err();
        assert_eq!(e.key.as_deref(), Some("model.variant"));
        assert!(e.to_string().contains("model.variant"));
    }

    #[test]
    fn unknown_keys_and_values_are_rejected() {
        let mut sets = toy();
        sets.push("model.dimm=3".into());
        let e = RunConfig::load(None, &sets, &Env::default()).unwrap_err();
        assert!(e.message.contains("dimm"), "{e}");
        let mut sets = toy();
        sets.push("bogus.key=1".into());
        assert!(RunConfig::load(None, &sets, &Env::default()).is_err());
        let mut sets = toy();
        sets.push("model.kernel=tanh".into());
        let e = RunConfig::load(None, &sets, &Env::default()).unwrap_err();
        assert_eq!(e.key.as_deref(), Some("model.kernel"));
        assert!(e.message.contains("elu_plus_one"));
    }

    #[test]
    fn set_env_and_file_precedence() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(
            &path,
            "schema = \"linvid/1\"\n[model]\nvariant = \"toy\"\ndim = 64\n[output]\ndir = \"from-file\"\nthreads = 2\n",
        )
        .unwrap();
        let env = Env {
            out_dir: Some("from-env".into()),
            threads: Some("3".into()),
        };
        let c = RunConfig::load(Some(&path), &["model.heads=4".into()], &env).unwrap();
        assert_eq!((c.model.dim, c.model.heads), (64, 4));
        assert_eq!(c.output.dir, PathBuf::from("from-env"));
        assert_eq!(c.output.threads, 3);
        let c = RunConfig::load(Some(&path), &["output.threads=5".into()], &env).unwrap();
        assert_eq!(c.output.threads, 5);
    }

    #[test]
    fn list_values_parse() {
        let mut sets = toy();
        sets.push("profile.n_values=[64, 128, 256]".into());
        sets.push("profile.families=[\"softmax\"]".into());
        let c = RunConfig::load(None, &sets, &Env::default()).unwrap();
        assert_eq!(c.profile.n_values, [64, 128, 256]);
        assert_eq!(c.profile.families, [Family::Softmax]);
    }

    #[test]
    fn resolved_echo_round_trips() {
        let mut sets = toy();
        sets.extend([
            "fixation.mode=separate".to_string(),
            "shift.boundary=clamp".into(),
            "train.lr=0.125".into(),
        ]);
        let c = RunConfig::load(None, &sets, &Env::default()).unwrap();
        let back = RunConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        assert!(c.comment_block().lines().all(|l| l.starts_with("# ")));
    }

    #[test]
    fn invalid_model_is_a_config_error() {
        let mut sets = toy();
        sets.push("model.heads=3".into());
        assert!(RunConfig::load(None, &sets, &Env::default()).is_err());
        let mut sets = toy();
        sets.push("model.family=softmax".into());
        // toy keeps cooperative fixation, which softmax cannot take
        assert!(RunConfig::load(None, &sets, &Env::default()).is_err());
    }
}
