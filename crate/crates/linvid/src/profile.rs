//! Wall-clock and FLOP scaling of single-head attention.

use std::io::Write;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use linvid_core::attention::{
    linear_attention_into, linear_attention_quadratic_into, softmax_attention_into, Family, KernelFn, LinearWorkspace,
};
use linvid_core::diagnostics::{fit_exponent, sampled_concentration};
use linvid_core::{FlopLedger, OpClass};

use crate::alloc_track;
use crate::config::{ProfileSettings, RunConfig};

pub const CSV_VERSION: &str = "linvid-bench/1";
pub const CSV_HEADER: [&str; 10] = [
    "family",
    "N",
    "D",
    "seed",
    "flops",
    "time_s",
    "exponent_fit",
    "peak_alloc",
    "entropy_mean",
    "top1_mass_mean",
];

#[derive(Clone, Debug, PartialEq)]
pub enum CellStatus {
    Ok,
    /// The working set would exceed the configured memory limit.
    Oom {
        needed_bytes: u64,
    },
}

#[derive(Clone, Debug)]
pub struct ProfileReport {
    pub family: Family,
    pub n: usize,
    pub d: usize,
    pub seed: u64,
    pub status: CellStatus,
    pub flops: FlopLedger,
    /// Median per-call time over the timed repeats.
    pub time_s: f64,
    pub peak_alloc: Option<usize>,
    pub entropy_mean: f64,
    pub top1_mass_mean: f64,
    /// Least-squares slope of log time against log N for this family, shared
    /// by all of its cells.
    pub exponent_fit: Option<f64>,
    pub fingerprint: String,
}

/// Shortest timed sample. Faster calls are looped within one sample so that
/// timer resolution and scheduler noise stay small against the work.
const MIN_SAMPLE_S: f64 = 0.01;

/// Bytes the family needs for one `N × D` head, inputs included.
pub fn working_set(family: Family, n: usize, d: usize) -> u64 {
    let (n, d) = (n as u64, d as u64);
    let io = 4 * n * d * 8;
    io + match family {
        Family::Linear => (d * d + 2 * d) * 8,
        Family::Softmax => n * 8,
        Family::LinearQuadratic => n * n * 8,
    }
}

pub fn random_inputs(n: usize, d: usize, seed: u64) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (n as u64).rotate_left(32));
    let mut draw = || (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
    (draw(), draw(), draw())
}

/// Scratch buffers for one family, sized up front.
enum Scratch {
    Linear(LinearWorkspace<f64>),
    Softmax(Vec<f64>),
    Quadratic(Vec<f64>),
}

impl Scratch {
    fn new(family: Family, n: usize, d: usize) -> Self {
        match family {
            Family::Linear => Scratch::Linear(LinearWorkspace::new(d, d)),
            Family::Softmax => Scratch::Softmax(Vec::with_capacity(n)),
            Family::LinearQuadratic => Scratch::Quadratic(Vec::with_capacity(n * n)),
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn run_once(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    n: usize,
    d: usize,
    kernel: &KernelFn,
    scratch: &mut Scratch,
    out: &mut [f64],
) -> FlopLedger {
    let mut flops = FlopLedger::default();
    let r = match scratch {
        Scratch::Linear(ws) => linear_attention_into(q, k, v, n, d, d, kernel, ws, out, &mut flops),
        Scratch::Softmax(row) => softmax_attention_into(q, k, v, n, d, d, true, row, out, &mut flops),
        Scratch::Quadratic(m) => linear_attention_quadratic_into(q, k, v, n, d, d, kernel, m, out, &mut flops),
    };
    r.expect("profile inputs are well formed");
    flops
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

pub fn profile_cell(
    family: Family,
    n: usize,
    p: &ProfileSettings,
    kernel: &KernelFn,
    fingerprint: &str,
) -> ProfileReport {
    let d = p.dim;
    let needed = working_set(family, n, d);
    let mut report = ProfileReport {
        family,
        n,
        d,
        seed: p.seed,
        status: CellStatus::Ok,
        flops: FlopLedger::default(),
        time_s: f64::NAN,
        peak_alloc: None,
        entropy_mean: f64::NAN,
        top1_mass_mean: f64::NAN,
        exponent_fit: None,
        fingerprint: fingerprint.to_string(),
    };
    if needed > p.memory_limit_mb.saturating_mul(1 << 20) {
        report.status = CellStatus::Oom { needed_bytes: needed };
        return report;
    }
    let (q, k, v) = random_inputs(n, d, p.seed);
    let mut out = vec![0.0; n * d];
    let (scratch, peak) = alloc_track::measure(|| {
        let mut s = Scratch::new(family, n, d);
        run_once(&q, &k, &v, n, d, kernel, &mut s, &mut out);
        s
    });
    let mut scratch = scratch;
    report.peak_alloc = peak;
    for _ in 0..p.warmup {
        run_once(&q, &k, &v, n, d, kernel, &mut scratch, &mut out);
    }
    let t0 = Instant::now();
    run_once(&q, &k, &v, n, d, kernel, &mut scratch, &mut out);
    let calls = ((MIN_SAMPLE_S / t0.elapsed().as_secs_f64().max(1e-9)).ceil() as usize).max(1);
    let mut times = Vec::with_capacity(p.repeats);
    for _ in 0..p.repeats {
        let t0 = Instant::now();
        for _ in 0..calls {
            report.flops = run_once(&q, &k, &v, n, d, kernel, &mut scratch, &mut out);
            std::hint::black_box(&out);
        }
        times.push(t0.elapsed().as_secs_f64() / calls as f64);
    }
    report.time_s = median(times);
    let stats = sampled_concentration(&q, &k, n, d, family, kernel, true, p.entropy_rows);
    report.entropy_mean = stats.mean_entropy();
    report.top1_mass_mean = stats.mean_top1();
    report
}

/// Every (family, N) cell in order, with per-family exponent fits. `progress`
/// sees each cell as it finishes.
pub fn scaling_study(cfg: &RunConfig, mut progress: impl FnMut(&ProfileReport)) -> Vec<ProfileReport> {
    let p = &cfg.profile;
    let fingerprint = crate::checkpoint::config_hash(&cfg.to_toml())[..16].to_string();
    let mut reports = Vec::new();
    for &family in &p.families {
        let start = reports.len();
        for &n in &p.n_values {
            let r = profile_cell(family, n, p, &cfg.model.kernel, &fingerprint);
            progress(&r);
            reports.push(r);
        }
        let ok: Vec<&ProfileReport> = reports[start..].iter().filter(|r| r.status == CellStatus::Ok).collect();
        let xs: Vec<f64> = ok.iter().map(|r| r.n as f64).collect();
        let ys: Vec<f64> = ok.iter().map(|r| r.time_s).collect();
        let fit = fit_exponent(&xs, &ys).ok();
        for r in &mut reports[start..] {
            r.exponent_fit = fit;
        }
    }
    reports
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

/// The bench CSV: version line, resolved config as comments, header, rows.
/// OOM cells carry `OOM` in the flops and time columns.
pub fn write_csv<W: Write>(mut w: W, cfg: &RunConfig, reports: &[ProfileReport]) -> std::io::Result<()> {
    writeln!(w, "# {CSV_VERSION}")?;
    w.write_all(cfg.comment_block().as_bytes())?;
    let mut csv = csv::Writer::from_writer(w);
    csv.write_record(CSV_HEADER)?;
    for r in reports {
        let (flops, time) = match r.status {
            CellStatus::Ok => (r.flops.total().to_string(), format!("{:e}", r.time_s)),
            CellStatus::Oom { .. } => ("OOM".into(), "OOM".into()),
        };
        csv.write_record([
            r.family.name().to_string(),
            r.n.to_string(),
            r.d.to_string(),
            r.seed.to_string(),
            flops,
            time,
            opt(r.exponent_fit.map(|e| format!("{e:.4}"))),
            opt(r.peak_alloc),
            if r.entropy_mean.is_nan() {
                String::new()
            } else {
                format!("{:.6}", r.entropy_mean)
            },
            if r.top1_mass_mean.is_nan() {
                String::new()
            } else {
                format!("{:.6}", r.top1_mass_mean)
            },
        ])?;
    }
    csv.flush()
}

/// FLOPs of one cell split by class, for reports.
pub fn flops_by_class(r: &ProfileReport) -> Vec<(OpClass, u64)> {
    OpClass::ALL.iter().map(|&c| (c, r.flops.get(c))).collect()
}
