//! Command-line front end.
//!
//! Exit codes:
//!
//! | code | meaning |
//! |------|---------|
//! | 0 | success |
//! | 2 | configuration or usage error |
//! | 3 | resource failure: an output could not be written, or a bench cell was over the memory limit (the CSV is still written) |
//! | 4 | checkpoint missing or unreadable |
//! | 5 | layer index out of range |
//! | 6 | training diverged; the last good checkpoint is written |

use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use linvid_core::ablate::{self, Axis};
use linvid_core::attention::Family;
use linvid_core::diagnostics::concentration;
use linvid_core::fixation::{FixationConfig, FixationMode, FixationParams};
use linvid_core::model::{stage_attention_matrix, Model, ModelConfig, StageCapture};
use linvid_core::synthetic::{derive_seed, Split};
use linvid_core::train::{self, MetricRow, TrainError};

use crate::checkpoint::{self, CheckpointError};
use crate::config::{ConfigError, Env, RunConfig};
use crate::dump;
use crate::profile::{self, CellStatus};

pub const EXIT_OK: u8 = 0;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_RESOURCE: u8 = 3;
pub const EXIT_CHECKPOINT: u8 = 4;
pub const EXIT_LAYER: u8 = 5;
pub const EXIT_DIVERGED: u8 = 6;

pub const METRICS_VERSION: &str = "linvid-metrics/1";
pub const ABLATION_VERSION: &str = "linvid-ablation/1";
pub const INSPECT_VERSION: &str = "linvid-inspect/1";

#[derive(Parser, Debug)]
#[command(name = "linvid", version, about = "Linear-attention video transformer lab")]
pub struct Cli {
    /// Run configuration (TOML). Keys may also come from --set alone.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override one key, e.g. --set model.dim=64. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Time and count FLOPs of single-head attention across sequence lengths.
    Bench(BenchArgs),
    /// Train a model on the synthetic task.
    Train(TrainArgs),
    /// Train every point of a grid of configuration deltas.
    Ablate(AblateArgs),
    /// Dump attention matrices of a trained checkpoint.
    Inspect(InspectArgs),
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    /// Comma-separated families: linear, softmax, linear-quadratic.
    #[arg(long, value_delimiter = ',')]
    pub families: Vec<String>,
    /// Comma-separated sequence lengths.
    #[arg(long = "n-values", value_delimiter = ',')]
    pub n_values: Vec<usize>,
    /// Output CSV [default: <output.dir>/bench.csv].
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Training seed [default: train.seed].
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory [default: output.dir].
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    /// Comma-separated axes.
    #[arg(long, value_delimiter = ',', required = true)]
    pub axes: Vec<String>,
    /// Number of seeds per delta (seeds 0..N).
    #[arg(long, default_value_t = 1)]
    pub seeds: u64,
    /// Output CSV [default: <output.dir>/ablation.csv]; the summary goes next
    /// to it with a `_summary` suffix.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct InspectArgs {
    /// Checkpoint directory written by `train`.
    pub checkpoint: PathBuf,
    /// Layer whose attention to dump.
    #[arg(long, default_value_t = 0)]
    pub layer: usize,
    /// Stage of the layer to dump (index into the pattern's stages).
    #[arg(long, default_value_t = 0)]
    pub stage: usize,
    /// Validation clip to run.
    #[arg(long, default_value_t = 0)]
    pub clip: u64,
    /// Output directory [default: <output.dir>/inspect].
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Resource(String),
    #[error("{0}")]
    Checkpoint(String),
    #[error("{0}")]
    Layer(String),
    #[error("{0}")]
    Diverged(String),
}

impl CliError {
    pub fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Resource(_) => EXIT_RESOURCE,
            CliError::Checkpoint(_) => EXIT_CHECKPOINT,
            CliError::Layer(_) => EXIT_LAYER,
            CliError::Diverged(_) => EXIT_DIVERGED,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<linvid_core::Error> for CliError {
    fn from(e: linvid_core::Error) -> Self {
        match e {
            linvid_core::Error::Config(_) | linvid_core::Error::Usage(_) => CliError::Config(e.to_string()),
            other => CliError::Resource(other.to_string()),
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        CliError::Checkpoint(e.to_string())
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Resource(format!("{}: {e}", path.display()))
}

/// Writes via a temporary sibling and renames, so outputs are replaced whole.
fn write_file(path: &Path, f: impl FnOnce(&mut dyn Write) -> io::Result<()>) -> Result<(), CliError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    let tmp = path.with_extension("partial");
    let file = fs::File::create(&tmp).map_err(|e| io_err(&tmp, e))?;
    let mut w = BufWriter::new(file);
    f(&mut w).and_then(|_| w.flush()).map_err(|e| io_err(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| io_err(path, e))
}

/// Parses arguments, runs, and returns the exit code. Errors go to `stderr`.
pub fn main_with(args: impl IntoIterator<Item = String>, env: &Env, stderr: &mut dyn Write) -> u8 {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = write!(stderr, "{e}");
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_CONFIG,
            };
        }
    };
    match run(&cli, env) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(stderr, "linvid: {e}");
            e.code()
        }
    }
}

pub fn run(cli: &Cli, env: &Env) -> Result<(), CliError> {
    if let Command::Inspect(a) = &cli.command {
        return inspect(a, cli, env);
    }
    let cfg = RunConfig::load(cli.config.as_deref(), &cli.sets, env)?;
    match &cli.command {
        Command::Bench(a) => bench(a, cfg),
        Command::Train(a) => train_cmd(a, cfg),
        Command::Ablate(a) => ablate_cmd(a, cfg),
        Command::Inspect(_) => unreachable!(),
    }
}

fn bench(a: &BenchArgs, mut cfg: RunConfig) -> Result<(), CliError> {
    if !a.families.is_empty() {
        cfg.profile.families = a
            .families
            .iter()
            .map(|f| {
                Family::parse(f.trim()).ok_or_else(|| {
                    CliError::Config(format!(
                        "--families: unknown family `{f}`; expected linear, softmax, linear-quadratic"
                    ))
                })
            })
            .collect::<Result<_, _>>()?;
    }
    if !a.n_values.is_empty() {
        if a.n_values.contains(&0) {
            return Err(CliError::Config("--n-values must be positive".into()));
        }
        cfg.profile.n_values = a.n_values.clone();
    }
    let out = a.out.clone().unwrap_or_else(|| cfg.output.dir.join("bench.csv"));
    let reports = profile::scaling_study(&cfg, |r| {
        eprintln!(
            "bench {} N={} {}",
            r.family.name(),
            r.n,
            match r.status {
                CellStatus::Ok => format!("{:.3e}s", r.time_s),
                CellStatus::Oom { needed_bytes } => format!("OOM (needs {needed_bytes} bytes)"),
            }
        )
    });
    write_file(&out, |w| profile::write_csv(w, &cfg, &reports))?;
    let oom = reports.iter().filter(|r| r.status != CellStatus::Ok).count();
    if oom > 0 {
        return Err(CliError::Resource(format!(
            "{oom} cell(s) exceeded profile.memory_limit_mb and were recorded as OOM in {}",
            out.display()
        )));
    }
    Ok(())
}

pub fn write_metrics(w: &mut dyn Write, cfg: &RunConfig, log: &[MetricRow]) -> io::Result<()> {
    writeln!(w, "# {METRICS_VERSION}")?;
    w.write_all(cfg.comment_block().as_bytes())?;
    let mut csv = csv::Writer::from_writer(w);
    csv.write_record(["step", "split", "loss", "top1"])?;
    for r in log {
        csv.write_record([
            r.step.to_string(),
            r.split.name().to_string(),
            format!("{:?}", r.loss),
            format!("{:?}", r.top1),
        ])?;
    }
    csv.flush()
}

fn train_cmd(a: &TrainArgs, mut cfg: RunConfig) -> Result<(), CliError> {
    if let Some(seed) = a.seed {
        cfg.train_seed = seed;
    }
    let out = a.out.clone().unwrap_or_else(|| cfg.output.dir.clone());
    fs::create_dir_all(&out).map_err(|e| io_err(&out, e))?;
    write_file(&out.join("resolved_config.toml"), |w| {
        w.write_all(cfg.to_toml().as_bytes())
    })?;
    let (state, log, failure) = match train::train(&cfg.model, &cfg.task, &cfg.train, cfg.train_seed) {
        Ok(o) => (o.state, o.log, None),
        Err(TrainError::Diverged {
            step,
            cause,
            last_good,
            log,
        }) => (
            *last_good,
            log,
            Some(format!("training diverged at step {step}: {cause}")),
        ),
        Err(TrainError::Failed(e)) => return Err(e.into()),
    };
    write_file(&out.join("metrics.csv"), |w| write_metrics(w, &cfg, &log))?;
    let ckpt = out.join("checkpoint");
    checkpoint::save(&ckpt, &cfg, &state).map_err(|e| io_err(&ckpt, e))?;
    match failure {
        Some(msg) => Err(CliError::Diverged(format!(
            "{msg}; last good checkpoint in {}",
            ckpt.display()
        ))),
        None => Ok(()),
    }
}

fn fmt_top1(v: f64) -> String {
    if v.is_nan() {
        "NaN".into()
    } else {
        format!("{v:?}")
    }
}

fn ablate_cmd(a: &AblateArgs, cfg: RunConfig) -> Result<(), CliError> {
    let axes = a
        .axes
        .iter()
        .map(|s| Axis::parse(s.trim()))
        .collect::<Result<Vec<_>, _>>()?;
    if a.seeds == 0 {
        return Err(CliError::Config("--seeds must be at least 1".into()));
    }
    let deltas = ablate::grid(&axes)?;
    let configs = deltas
        .iter()
        .map(|d| d.apply(&cfg.model))
        .collect::<Result<Vec<ModelConfig>, _>>()?;
    let cells: Vec<(usize, u64)> = (0..deltas.len())
        .flat_map(|d| (0..a.seeds).map(move |s| (d, s)))
        .collect();
    let results = run_cells(&cells, cfg.output.threads, |&(d, seed)| {
        ablate::run_cell(&configs[d], &cfg.task, &cfg.train, seed)
    })?;
    let rows: Vec<ablate::AblationRow> = cells
        .iter()
        .zip(results)
        .map(|(&(d, seed), top1)| ablate::AblationRow {
            delta: deltas[d].clone(),
            seed,
            final_top1: top1,
        })
        .collect();
    let out = a.out.clone().unwrap_or_else(|| cfg.output.dir.join("ablation.csv"));
    let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("ablation");
    let summary_path = out.with_file_name(format!("{stem}_summary.csv"));
    let axis_names: Vec<&str> = axes.iter().map(|a| a.name()).collect();
    write_file(&out, |w| {
        writeln!(w, "# {ABLATION_VERSION}")?;
        w.write_all(cfg.comment_block().as_bytes())?;
        let mut csv = csv::Writer::from_writer(w);
        let mut header = vec!["delta_id"];
        header.extend(&axis_names);
        header.extend(["seed", "final_top1"]);
        csv.write_record(&header)?;
        for r in &rows {
            let mut rec = vec![r.delta.id.to_string()];
            rec.extend(r.delta.values.iter().map(|(_, v)| v.to_string()));
            rec.extend([r.seed.to_string(), fmt_top1(r.final_top1)]);
            csv.write_record(&rec)?;
        }
        csv.flush()
    })?;
    write_file(&summary_path, |w| {
        writeln!(w, "# {ABLATION_VERSION}")?;
        w.write_all(cfg.comment_block().as_bytes())?;
        let mut csv = csv::Writer::from_writer(w);
        let mut header = vec!["delta_id"];
        header.extend(&axis_names);
        header.extend(["mean_top1", "std_top1", "seeds"]);
        csv.write_record(&header)?;
        for s in ablate::summarize(&rows) {
            let mut rec = vec![s.delta.id.to_string()];
            rec.extend(s.delta.values.iter().map(|(_, v)| v.to_string()));
            rec.extend([fmt_top1(s.mean), fmt_top1(s.std), s.seeds.to_string()]);
            csv.write_record(&rec)?;
        }
        csv.flush()
    })
}

/// Runs independent cells on up to `threads` worker threads; results keep
/// the order of `cells`.
fn run_cells<C: Sync, T: Send>(
    cells: &[C],
    threads: usize,
    f: impl Fn(&C) -> linvid_core::Result<T> + Sync,
) -> Result<Vec<T>, CliError> {
    let threads = threads.clamp(1, cells.len().max(1));
    let mut slots: Vec<Option<linvid_core::Result<T>>> = (0..cells.len()).map(|_| None).collect();
    let next = std::sync::atomic::AtomicUsize::new(0);
    let chunks: Vec<Vec<(usize, linvid_core::Result<T>)>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..threads)
            .map(|_| {
                s.spawn(|| {
                    let mut done = Vec::new();
                    loop {
                        let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                        if i >= cells.len() {
                            return done;
                        }
                        done.push((i, f(&cells[i])));
                    }
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("worker panicked"))
            .collect()
    });
    for (i, r) in chunks.into_iter().flatten() {
        slots[i] = Some(r);
    }
    slots
        .into_iter()
        .map(|r| r.expect("every cell ran").map_err(CliError::from))
        .collect()
}

/// A family/fixation variant evaluated on the captured stage inputs.
struct Panel {
    name: &'static str,
    cfg: ModelConfig,
    fixation: FixationParams,
    /// `trained` when the checkpoint was trained in exactly this variant,
    /// `derived` when the variant reuses its projections or fresh ones.
    source: &'static str,
}

fn panels(model: &Model, layer: usize, stage: usize) -> Result<Vec<Panel>, CliError> {
    let base = model.config;
    let dh = base.head_dim();
    let trained = model.stage_fixation(layer, stage)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(0x1f16, &[layer as u64, stage as u64]));
    let mut variant = |name, family, fixation: FixationConfig| {
        let cfg = ModelConfig {
            family,
            fixation,
            ..base
        };
        let same = cfg.family == base.family && cfg.fixation == base.fixation;
        let (params, source) = if same {
            (trained.clone(), "trained")
        } else if fixation == base.fixation {
            (trained.clone(), "derived")
        } else {
            (FixationParams::init(fixation, dh, &mut rng), "derived")
        };
        Panel {
            name,
            cfg,
            fixation: params,
            source,
        }
    };
    let coop = if base.fixation.mode == FixationMode::Cooperative {
        base.fixation
    } else {
        FixationConfig::cooperative()
    };
    let sep = if base.fixation.mode == FixationMode::Separate {
        base.fixation
    } else {
        FixationConfig::separate()
    };
    Ok(vec![
        variant("a_linear", Family::Linear, FixationConfig::none()),
        variant("b_separate", Family::Linear, sep),
        variant("c_cooperative", Family::Linear, coop),
        variant("d_softmax", Family::Softmax, FixationConfig::none()),
    ])
}

fn inspect(a: &InspectArgs, cli: &Cli, env: &Env) -> Result<(), CliError> {
    if !a.checkpoint.join(checkpoint::MANIFEST).is_file() {
        return Err(CliError::Checkpoint(format!(
            "no checkpoint at {}",
            a.checkpoint.display()
        )));
    }
    let (cfg, state) = checkpoint::load(&a.checkpoint)?;
    // output settings may still be overridden from the command line
    let out_cfg = if cli.config.is_some() || !cli.sets.is_empty() || env.out_dir.is_some() {
        let mut sets = vec![
            format!("schema={}", crate::config::SCHEMA),
            "model.variant=toy".to_string(),
        ];
        sets.extend(cli.sets.iter().cloned());
        Some(RunConfig::load(cli.config.as_deref(), &sets, env)?)
    } else {
        None
    };
    let out_root = out_cfg.as_ref().map_or(&cfg.output, |c| &c.output);
    let out = a.out.clone().unwrap_or_else(|| out_root.dir.join("inspect"));
    let precision = out_root.precision;
    let layers = cfg.model.layers;
    if a.layer >= layers {
        return Err(CliError::Layer(format!(
            "--layer {} is out of range; the checkpoint has {layers} layers (0..{})",
            a.layer,
            layers - 1
        )));
    }
    let stages = cfg.model.pattern.stages().len();
    if a.stage >= stages {
        return Err(CliError::Config(format!(
            "--stage {} is out of range; pattern {} has {stages} stages",
            a.stage,
            cfg.model.pattern.name()
        )));
    }
    let mut model = Model::new(cfg.model, 0)?;
    model.params = state.params;
    let batch = cfg.task.batch(Split::Val, &[a.clip])?;
    let (_, captures) = model.logits_with_capture(&batch.pixels)?;
    let layer_caps: Vec<&StageCapture> = captures.iter().filter(|c| c.layer == a.layer).collect();
    fs::create_dir_all(&out).map_err(|e| io_err(&out, e))?;
    let mut stats_rows = Vec::new();
    for cap in &layer_caps {
        for p in panels(&model, a.layer, cap.stage)? {
            let m = stage_attention_matrix(&p.cfg, cap, &p.fixation)?;
            let s = m.shape().to_vec();
            let flat = linvid_core::Tensor::new(&[s[0] * s[1], s[2]], m.data().to_vec())?;
            let st = concentration(&flat)?;
            stats_rows.push([
                p.name.to_string(),
                p.source.to_string(),
                a.layer.to_string(),
                cap.stage.to_string(),
                cap.kind.name().to_string(),
                s[0].to_string(),
                s[2].to_string(),
                format!("{:.6}", st.mean_entropy()),
                format!("{:.6}", mean(&st.max_weight)),
                format!("{:.6}", st.mean_top1()),
                format!("{:.6}", st.mean_top5()),
            ]);
            if cap.stage == a.stage {
                let path = out.join(format!("{}.ltnsr", p.name));
                dump::save(&path, &m, precision).map_err(|e| io_err(&path, e))?;
            }
        }
    }
    let header = [
        "panel",
        "source",
        "layer",
        "stage",
        "kind",
        "groups",
        "keys",
        "entropy_mean",
        "max_weight_mean",
        "top1_mass_mean",
        "top5_mass_mean",
    ];
    write_file(&out.join("inspect_stats.csv"), |w| {
        writeln!(w, "# {INSPECT_VERSION}")?;
        w.write_all(cfg.comment_block().as_bytes())?;
        let mut csv = csv::Writer::from_writer(w);
        csv.write_record(header)?;
        for r in &stats_rows {
            csv.write_record(r)?;
        }
        csv.flush()
    })
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}
