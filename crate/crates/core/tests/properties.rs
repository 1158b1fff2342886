use std::sync::Arc;

use linvid_core::attention::{
    linear_attention, linear_attention_quadratic, linear_attention_tape, Family, KernelFn, KernelTag,
};
use linvid_core::diagnostics::materialize_attention;
use linvid_core::fixation::{
    cooperative_fixation, reweighting_monotonicity_check, separate_fixation, Aggregation, CoopInputs, FixationConfig,
    FixationMode, FixationParams,
};
use linvid_core::model::{Model, ModelConfig};
use linvid_core::shift::{shift_map, spatial_map, temporal_map, Boundary, GridDims, ShiftConfig, SpatialMode};
use linvid_core::tensor::GATHER_ZERO;
use linvid_core::{Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

fn kernel_tag() -> impl Strategy<Value = KernelTag> {
    prop::sample::select(KernelTag::ALL.to_vec())
}

fn fixation_config() -> impl Strategy<Value = FixationConfig> {
    (
        prop::sample::select(vec![FixationMode::Separate, FixationMode::Cooperative]),
        prop::sample::select(vec![Aggregation::Concat, Aggregation::Add, Aggregation::Multiply]),
        any::<bool>(),
        prop::sample::select(vec![CoopInputs::QK, CoopInputs::QKV]),
    )
        .prop_map(|(mode, aggregation, share_ratio, inputs)| FixationConfig {
            mode,
            aggregation,
            share_ratio,
            inputs,
        })
}

fn fixate(
    cfg: FixationConfig,
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    p: &FixationParams,
) -> (Tensor, Tensor, Tensor, Tensor) {
    let out = match cfg.mode {
        FixationMode::Separate => separate_fixation(q, k, p),
        _ => cooperative_fixation(q, k, v, p),
    }
    .unwrap();
    (out.q, out.k, out.gamma_q, out.gamma_k)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_sum_to_one(rows in 1usize..6, cols in 1usize..40, mag in 0.0f64..300.0, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tape = Tape::new();
        let x = tape.constant(tensor(&mut rng, &[rows, cols], -mag - 1e-3, mag + 1e-3));
        let p = tape.softmax(x).unwrap();
        for r in tape.value(p).data().chunks(cols) {
            prop_assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(r.iter().all(|&w| (0.0..=1.0).contains(&w)));
        }
    }

    #[test]
    fn matmul_is_associative(m in 1usize..8, k in 1usize..8, p in 1usize..8, q in 1usize..8, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = tensor(&mut rng, &[m, k], -1.0, 1.0);
        let b = tensor(&mut rng, &[k, p], -1.0, 1.0);
        let c = tensor(&mut rng, &[p, q], -1.0, 1.0);
        let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
        let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
        prop_assert!(left.max_rel_diff(&right) < 1e-10);
    }

    #[test]
    fn linear_matches_quadratic(n in 1usize..48, d in 1usize..12, dv in 1usize..12, tag in kernel_tag(), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = tensor(&mut rng, &[n, d], -1.0, 1.0);
        let k = tensor(&mut rng, &[n, d], -1.0, 1.0);
        let v = tensor(&mut rng, &[n, dv], -1.0, 1.0);
        let kernel = KernelFn::new(tag);
        let lin = linear_attention(&q, &k, &v, &kernel).unwrap();
        let quad = linear_attention_quadratic(&q, &k, &v, &kernel).unwrap();
        prop_assert!(lin.y.max_rel_diff(&quad.y) < 1e-10);
    }

    #[test]
    fn kernelized_matrices_are_nonnegative_and_normalized(n in 1usize..32, d in 1usize..8, tag in kernel_tag(), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = tensor(&mut rng, &[n, d], -2.0, 2.0);
        let k = tensor(&mut rng, &[n, d], -2.0, 2.0);
        let m = materialize_attention(&q, &k, Family::Linear, &KernelFn::new(tag), false).unwrap();
        prop_assert!(m.data().iter().all(|&w| w >= 0.0));
        if tag != KernelTag::Relu {
            for r in m.data().chunks(n) {
                prop_assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn output_is_linear_in_v_and_invariant_to_key_scale(
        n in 1usize..32, d in 1usize..8, tag in kernel_tag(), pow in -8i32..8, c in 0.1f64..10.0, seed in any::<u64>()
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = tensor(&mut rng, &[n, d], -1.0, 1.0);
        let k = tensor(&mut rng, &[n, d], -1.0, 1.0);
        let v = tensor(&mut rng, &[n, d], -1.0, 1.0);
        let kernel = KernelFn::new(tag);
        let y = linear_attention(&q, &k, &v, &kernel).unwrap().y;
        let y2 = linear_attention(&q, &k, &v.scale(2f64.powi(pow)), &kernel).unwrap().y;
        prop_assert_eq!(y2, y.scale(2f64.powi(pow)));
        let yc = linear_attention(&q, &k, &v.scale(c), &kernel).unwrap().y;
        prop_assert!(yc.max_rel_diff(&y.scale(c)) < 1e-12);

        // ρ(K) rows scaled together: build the kernelized inputs directly.
        let phi = |t: &Tensor| t.map(|x| kernel.eval(x));
        let (qk, kk) = (phi(&q), phi(&k).scale(c));
        let mut tape = Tape::new();
        let lift = |tape: &mut Tape, t: &Tensor| {
            let s = t.shape();
            tape.constant(t.reshape(&[1, s[0], s[1]]).unwrap())
        };
        let (qv, kv, vv, kv1) = (lift(&mut tape, &qk), lift(&mut tape, &kk), lift(&mut tape, &v), lift(&mut tape, &phi(&k)));
        let scaled = linear_attention_tape(&mut tape, qv, kv, vv, &kernel).unwrap();
        let plain = linear_attention_tape(&mut tape, qv, kv1, vv, &kernel).unwrap();
        // the clamp is the one place the scale does not cancel
        let den_min = (0..n)
            .map(|i| (0..n).map(|j| (0..d).map(|c| qk.at(&[i, c]) * phi(&k).at(&[j, c])).sum::<f64>()).sum::<f64>())
            .fold(f64::INFINITY, f64::min);
        if den_min * c.min(1.0) > 1e-3 {
            prop_assert!(tape.value(scaled).max_rel_diff(tape.value(plain)) < 1e-12);
        }
    }

    #[test]
    fn fixation_ratio_is_in_the_unit_interval_and_never_amplifies(
        cfg in fixation_config(), rows in 1usize..12, dh in 1usize..9, bias in -5.0f64..5.0, seed in any::<u64>()
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = tensor(&mut rng, &[rows, dh], 0.0, 2.0);
        let k = tensor(&mut rng, &[rows, dh], 0.0, 2.0);
        let v = tensor(&mut rng, &[rows, dh], -2.0, 2.0);
        let mut p = FixationParams::init(cfg, dh, &mut rng);
        for proj in &mut p.projections {
            proj.b = Tensor::full(&[dh], bias);
        }
        let (qh, kh, gq, gk) = fixate(cfg, &q, &k, &v, &p);
        // pre-activations stay well inside the range where f64 resolves σ < 1
        for g in [&gq, &gk] {
            prop_assert!(g.data().iter().all(|&x| x > 0.0 && x < 1.0), "{:?}", g);
        }
        for (a, b) in qh.data().iter().zip(q.data()).chain(kh.data().iter().zip(k.data())) {
            prop_assert!(a.abs() <= b.abs());
        }
    }

    #[test]
    fn fixation_never_amplifies_for_any_finite_input(
        cfg in fixation_config(), rows in 1usize..6, dh in 1usize..6, mag in 1.0f64..1e6, seed in any::<u64>()
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = tensor(&mut rng, &[rows, dh], -mag, mag);
        let k = tensor(&mut rng, &[rows, dh], -mag, mag);
        let v = tensor(&mut rng, &[rows, dh], -mag, mag);
        let p = FixationParams::init(cfg, dh, &mut rng);
        let (qh, kh, gq, gk) = fixate(cfg, &q, &k, &v, &p);
        for g in [&gq, &gk] {
            prop_assert!(g.data().iter().all(|&x| (0.0..=1.0).contains(&x)));
        }
        for (a, b) in qh.data().iter().zip(q.data()).chain(kh.data().iter().zip(k.data())) {
            prop_assert!(a.abs() <= b.abs());
        }
    }

    #[test]
    fn sharing_the_ratio_saves_parameters(aggregation in prop::sample::select(vec![Aggregation::Concat, Aggregation::Add, Aggregation::Multiply]), dh in 1usize..64) {
        let shared = FixationConfig { aggregation, ..FixationConfig::cooperative() };
        let unshared = FixationConfig { share_ratio: false, ..shared };
        prop_assert!(shared.param_count(dh) < unshared.param_count(dh));
    }

    #[test]
    fn reweighting_favours_the_larger_ratio(a in 1e-3f64..1e3, b in 1e-3f64..1e3, m1 in 1e-3f64..0.99, gap in 1e-3f64..1.0) {
        let m2 = (m1 + gap).min(1.0);
        prop_assume!(m2 > m1);
        prop_assert!(reweighting_monotonicity_check(a, b, m1, m2));
    }

    #[test]
    fn shift_maps_copy_each_channel_from_one_place(
        frames in 1usize..5, height in 1usize..5, width in 1usize..5, heads in 1usize..3,
        tau in 0usize..2, xi in 0usize..2, squared in any::<bool>(), clamp in any::<bool>()
    ) {
        let spatial_mode = if squared { SpatialMode::SquaredKernel } else { SpatialMode::CrissCross };
        let cfg = ShiftConfig {
            tau,
            xi,
            alpha: 0.5,
            spatial_mode,
            boundary: if clamp { Boundary::Clamp } else { Boundary::ZeroPad },
        };
        // room for every slab: 2τ temporal and 4ξ or (2ξ+1)²−1 spatial
        let slabs = (2 * tau).max(spatial_mode.tokens_touched(xi) - 1).max(1);
        let dh = 2 * slabs * 2;
        let dims = GridDims { batch: 2, frames, height, width, channels: dh * heads };
        let retained = dh / 2;
        for map in [
            temporal_map(&dims, &cfg, heads).unwrap(),
            spatial_map(&dims, &cfg, heads).unwrap(),
            shift_map(&dims, &cfg, heads).unwrap().to_vec(),
        ] {
            prop_assert_eq!(map.len(), dims.numel());
            let mut used = vec![false; dims.numel()];
            for (i, &src) in map.iter().enumerate() {
                let c = i % dims.channels;
                if c % dh < retained {
                    prop_assert_eq!(src as usize, i, "retained channel moved");
                    continue;
                }
                if src == GATHER_ZERO {
                    continue;
                }
                let src = src as usize;
                prop_assert!(src < dims.numel());
                prop_assert_eq!(src % dims.channels, c, "channel index changed");
                // samples never cross the batch
                let per_clip = dims.tokens() * dims.channels;
                prop_assert_eq!(src / per_clip, i / per_clip);
                if !clamp {
                    prop_assert!(!used[src], "input channel donated twice");
                    used[src] = true;
                }
            }
        }
    }
}

#[test]
fn forward_is_bit_identical_across_runs_and_instances() {
    let cfg = ModelConfig::toy();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let px = tensor(
        &mut rng,
        &[2, cfg.frames, cfg.height, cfg.width, cfg.channels],
        0.0,
        1.0,
    );
    let a = Model::new(cfg, 11).unwrap();
    let b = Model::new(cfg, 11).unwrap();
    let first = a.logits(&px).unwrap();
    assert_eq!(first, a.logits(&px).unwrap());
    assert_eq!(first, b.logits(&px).unwrap());
    assert_ne!(first, Model::new(cfg, 12).unwrap().logits(&px).unwrap());
}

#[test]
fn shift_map_matches_one_hot_probe() {
    // τ = 1, α = 0.5, D = 8: channels 4..6 from t−1, 6..8 from t+1
    let cfg = ShiftConfig {
        xi: 0,
        ..ShiftConfig::default()
    };
    let dims = GridDims {
        batch: 1,
        frames: 3,
        height: 1,
        width: 1,
        channels: 8,
    };
    let map: Arc<[u32]> = shift_map(&dims, &cfg, 1).unwrap();
    for src in 0..dims.numel() {
        let probe: Vec<f64> = (0..dims.numel()).map(|i| f64::from(u8::from(i == src))).collect();
        let out: Vec<f64> = map
            .iter()
            .map(|&m| if m == GATHER_ZERO { 0.0 } else { probe[m as usize] })
            .collect();
        let (t, c) = (src / 8, src % 8);
        let want: Vec<usize> = match c {
            0..4 => vec![src],
            4..6 if t + 1 < 3 => vec![(t + 1) * 8 + c],
            6..8 if t > 0 => vec![(t - 1) * 8 + c],
            _ => vec![],
        };
        let got: Vec<usize> = (0..out.len()).filter(|&i| out[i] == 1.0).collect();
        assert_eq!(got, want, "probe at t={t} c={c}");
    }
}
