//! Trainability and task-construction checks that need real training.

use linvid_core::attention::Family;
use linvid_core::fixation::FixationConfig;
use linvid_core::model::{Model, ModelConfig};
use linvid_core::shift::ShiftConfig;
use linvid_core::synthetic::{shuffle_frames, Split, SyntheticTask};
use linvid_core::train::{evaluate_batch, overfit, train, TrainConfig};

fn pure() -> ModelConfig {
    ModelConfig {
        fixation: FixationConfig::none(),
        shift: ShiftConfig::off(),
        ..ModelConfig::toy()
    }
}

#[test]
fn labels_are_balanced() {
    let task = SyntheticTask::default();
    let indices: Vec<u64> = (0..1000).collect();
    let batch = task.batch(Split::Train, &indices).unwrap();
    let mut hist = vec![0usize; task.classes];
    for &l in &batch.labels {
        hist[l] += 1;
    }
    // multinomial 3-sigma band around n/k
    let (n, p) = (1000.0, 1.0 / task.classes as f64);
    let band = 3.0 * (n * p * (1.0 - p)).sqrt();
    for &h in &hist {
        assert!((h as f64 - n * p).abs() <= band, "{hist:?}");
    }
}

#[test]
fn every_config_overfits_one_batch() {
    let full = ModelConfig::toy();
    let configs = [
        ("pure", pure()),
        ("full", full),
        (
            "separate",
            ModelConfig {
                fixation: FixationConfig::separate(),
                ..full
            },
        ),
        (
            "softmax",
            ModelConfig {
                family: Family::Softmax,
                ..pure()
            },
        ),
    ];
    let task = SyntheticTask::default();
    let batch = task.batch(Split::Train, &(0..8).collect::<Vec<u64>>()).unwrap();
    for (name, cfg) in configs {
        let mut model = Model::new(cfg, 1).unwrap();
        let losses = overfit(&mut model, &batch, 500, 0.03, 0.05).unwrap();
        let (loss, _) = evaluate_batch(&model, &batch).unwrap();
        assert!(loss < 0.05, "{name}: loss {loss} after {} steps", losses.len());
    }
}

#[test]
fn trained_baseline_beats_chance_only_with_frame_order() {
    let task = SyntheticTask::default();
    let run = train(&pure(), &task, &TrainConfig::default(), 0).unwrap();
    let val = task.batch(Split::Val, &(0..256).collect::<Vec<u64>>()).unwrap();
    let chance = 1.0 / task.classes as f64;
    let (_, top1) = evaluate_batch(&run.model, &val).unwrap();
    assert!(top1 > chance + 0.2, "ordered top1 {top1}");
    let (_, shuffled) = evaluate_batch(&run.model, &shuffle_frames(&val, 5)).unwrap();
    assert!((shuffled - chance).abs() <= 0.1, "shuffled top1 {shuffled}");
}
