use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use linvid::cli::{EXIT_CHECKPOINT, EXIT_CONFIG, EXIT_DIVERGED, EXIT_LAYER, EXIT_OK, EXIT_RESOURCE};
use linvid::dump;

const SMALL: &str = r#"schema = "linvid/1"

[model]
variant = "toy"

[train]
epochs = 1
batch_size = 8
train_size = 16
val_size = 8
warmup_epochs = 0

[profile]
repeats = 1
warmup = 0
n_values = [64, 128, 256]
"#;

fn linvid(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_linvid"))
        .current_dir(dir)
        .env_remove("LINVID_OUT_DIR")
        .env_remove("LINVID_THREADS")
        .args(args)
        .output()
        .unwrap()
}

fn code(o: &Output) -> u8 {
    o.status.code().expect("exited normally") as u8
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn small_dir() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("small.toml"), SMALL).unwrap();
    dir
}

/// Data rows of a versioned CSV: everything after the comment block and header.
fn rows(path: &Path) -> Vec<Vec<String>> {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines().filter(|l| !l.starts_with('#'));
    lines.next().expect("header");
    lines.map(|l| l.split(',').map(String::from).collect()).collect()
}

#[test]
fn bench_writes_one_row_per_cell() {
    let dir = small_dir();
    let o = linvid(
        dir.path(),
        &["--config", "small.toml", "bench", "--families", "linear,softmax"],
    );
    assert_eq!(code(&o), EXIT_OK, "{}", stderr(&o));
    let csv = dir.path().join("linvid-out/bench.csv");
    let text = fs::read_to_string(&csv).unwrap();
    assert!(text.starts_with("# linvid-bench/1\n"));
    assert!(text.contains("# schema = \"linvid/1\""));
    let r = rows(&csv);
    assert_eq!(r.len(), 6);
    assert_eq!(r[0][..4], ["linear", "64", "32", "0"]);
    assert_eq!(r[5][..2], ["softmax", "256"]);

    // counted FLOPs do not depend on the run
    let again = dir.path().join("again.csv");
    let o = linvid(
        dir.path(),
        &[
            "--config",
            "small.toml",
            "bench",
            "--families",
            "linear,softmax",
            "--out",
            again.to_str().unwrap(),
        ],
    );
    assert_eq!(code(&o), EXIT_OK);
    let flops = |r: &[Vec<String>]| r.iter().map(|x| x[4].clone()).collect::<Vec<_>>();
    assert_eq!(flops(&rows(&again)), flops(&r));
}

#[test]
fn bench_over_the_memory_limit_records_oom_and_exits_3() {
    let dir = small_dir();
    let o = linvid(
        dir.path(),
        &[
            "--config",
            "small.toml",
            "--set",
            "profile.memory_limit_mb=1",
            "bench",
            "--families",
            "linear-quadratic",
            "--n-values",
            "64,1024",
        ],
    );
    assert_eq!(code(&o), EXIT_RESOURCE, "{}", stderr(&o));
    let r = rows(&dir.path().join("linvid-out/bench.csv"));
    assert_eq!(r.len(), 2);
    assert_ne!(r[0][4], "OOM");
    assert_eq!(r[1][4..6], ["OOM", "OOM"]);
}

#[test]
fn configuration_errors_exit_2_and_name_the_key() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("bad.toml"),
        "schema = \"linvid/1\"\n[model]\ndim = 64\n",
    )
    .unwrap();
    let o = linvid(dir.path(), &["--config", "bad.toml", "bench"]);
    assert_eq!(code(&o), EXIT_CONFIG);
    assert!(stderr(&o).contains("model.variant"), "{}", stderr(&o));

    let o = linvid(
        dir.path(),
        &[
            "--set",
            "schema=linvid/1",
            "--set",
            "model.variant=toy",
            "ablate",
            "--axes",
            "dropout",
        ],
    );
    assert_eq!(code(&o), EXIT_CONFIG);
    assert!(
        stderr(&o).contains("spatial_shift") && stderr(&o).contains("shift_order"),
        "{}",
        stderr(&o)
    );

    let o = linvid(dir.path(), &["bench", "--no-such-flag"]);
    assert_eq!(code(&o), EXIT_CONFIG);
}

#[test]
fn train_is_reproducible_and_inspect_reads_the_checkpoint() {
    let dir = small_dir();
    for run in ["a", "b"] {
        let o = linvid(
            dir.path(),
            &["--config", "small.toml", "train", "--seed", "4", "--out", run],
        );
        assert_eq!(code(&o), EXIT_OK, "{}", stderr(&o));
    }
    let a = fs::read(dir.path().join("a/metrics.csv")).unwrap();
    assert_eq!(a, fs::read(dir.path().join("b/metrics.csv")).unwrap());
    let text = String::from_utf8(a).unwrap();
    assert!(text.starts_with("# linvid-metrics/1\n"));
    assert!(text.contains("step,split,loss,top1"));
    assert!(dir.path().join("a/resolved_config.toml").is_file());

    let o = linvid(
        dir.path(),
        &[
            "inspect",
            "a/checkpoint",
            "--layer",
            "1",
            "--stage",
            "1",
            "--out",
            "panels",
        ],
    );
    assert_eq!(code(&o), EXIT_OK, "{}", stderr(&o));
    for panel in ["a_linear", "b_separate", "c_cooperative", "d_softmax"] {
        let t = dump::load(&dir.path().join(format!("panels/{panel}.ltnsr"))).unwrap();
        // temporal stage of the toy: one group per site and head, 4 frames
        assert_eq!(t.shape(), [32, 4, 4], "{panel}");
        for row in t.data().chunks(4) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
    let stats = rows(&dir.path().join("panels/inspect_stats.csv"));
    // two stages of layer 1, four panels each
    assert_eq!(stats.len(), 8);
    assert!(stats.iter().any(|r| r[0] == "c_cooperative" && r[1] == "trained"));

    let o = linvid(dir.path(), &["inspect", "a/checkpoint", "--layer", "2"]);
    assert_eq!(code(&o), EXIT_LAYER, "{}", stderr(&o));
    let o = linvid(dir.path(), &["inspect", "nowhere"]);
    assert_eq!(code(&o), EXIT_CHECKPOINT, "{}", stderr(&o));
}

#[test]
fn divergence_exits_6_and_keeps_the_last_good_checkpoint() {
    let dir = small_dir();
    let o = linvid(
        dir.path(),
        &[
            "--config",
            "small.toml",
            "--set",
            "train.lr=1e300",
            "train",
            "--out",
            "run",
        ],
    );
    assert_eq!(code(&o), EXIT_DIVERGED, "{}", stderr(&o));
    assert!(dir.path().join("run/checkpoint/manifest.txt").is_file());
    assert!(dir.path().join("run/metrics.csv").is_file());
}

#[test]
fn ablate_writes_a_row_per_delta_and_seed() {
    let dir = small_dir();
    let o = linvid(
        dir.path(),
        &[
            "--config",
            "small.toml",
            "--set",
            "output.threads=2",
            "ablate",
            "--axes",
            "fixation",
            "--seeds",
            "3",
        ],
    );
    assert_eq!(code(&o), EXIT_OK, "{}", stderr(&o));
    let r = rows(&dir.path().join("linvid-out/ablation.csv"));
    assert_eq!(r.len(), 12);
    assert_eq!(r[0][..3], ["0", "none", "0"]);
    assert_eq!(r[11][..3], ["3", "coop-qkv", "2"]);
    let s = rows(&dir.path().join("linvid-out/ablation_summary.csv"));
    assert_eq!(s.len(), 4);
    assert!(s.iter().all(|x| x[4] == "3"));

    // a different thread count gives the same table
    let o = linvid(
        dir.path(),
        &[
            "--config",
            "small.toml",
            "ablate",
            "--axes",
            "fixation",
            "--seeds",
            "3",
            "--out",
            "one.csv",
        ],
    );
    assert_eq!(code(&o), EXIT_OK);
    assert_eq!(rows(&dir.path().join("one.csv")), r);
}
