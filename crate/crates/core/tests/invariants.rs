//! Property tests over randomly drawn shapes, configurations and values.

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rtpca::attention::AttentionParams;
use rtpca::checkpoint::Checkpoint;
use rtpca::data::{stride_sample, SampleMode};
use rtpca::losses::{mpjve, tc_loss, wmpjpe, JointWeights};
use rtpca::metrics::{mpjpe, p_mpjpe, pck_auc_from_errors};
use rtpca::nn::{Ctx, ParamStore};
use rtpca::tensor::{Tape, Tensor};
use rtpca::tpca::{Amplification, Compression, TpcaConfig, TpcaState};

fn tensor(shape: Vec<usize>, values: &[f64]) -> Tensor<f64> {
    Tensor::from_fn(shape, |i| values[i % values.len()] * (1.0 + (i / values.len()) as f64 * 0.37))
}

fn values(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-3.0f64..3.0, n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn softmax_rows_sum_to_one(rows in 1usize..6, cols in 1usize..9, v in values(64), shift in -50.0f64..50.0) {
        let x = Tensor::from_fn(vec![rows, cols], |i| v[i % 64] * 10.0 + shift);
        let tape = Tape::new();
        let s = tape.constant(&x).softmax(1).unwrap().value();
        for r in 0..rows {
            let sum: f64 = (0..cols).map(|c| s.at(&[r, c])).sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            prop_assert!((0..cols).all(|c| s.at(&[r, c]) >= 0.0));
        }
    }

    #[test]
    fn duplicating_keys_and_values_leaves_attention_unchanged(
        n in 1usize..7, heads in 1usize..3, seed in any::<u64>(), v in values(48)
    ) {
        let dim = 4 * heads;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::<f64>::new();
        let attn = AttentionParams::new(&mut store, "attn", dim, heads, &mut rng).unwrap();
        let x = tensor(vec![n, dim], &v);
        let tape = Tape::new();
        let ctx = Ctx::eval(&tape, &store);
        let xv = tape.constant(&x);
        let twice = rtpca::tensor::Var::concat(&[xv, xv], 0).unwrap();
        let a = attn.forward(&ctx, xv, xv, xv).unwrap().out.value();
        let b = attn.forward(&ctx, xv, twice, twice).unwrap().out.value();
        prop_assert!(a.max_abs_diff(&b).unwrap() < 1e-9);
    }

    #[test]
    fn tpca_preserves_shape(
        n in 1usize..40, ratio in 2usize..4, stages in 0usize..4, conv in any::<bool>(), linear in any::<bool>(),
        seed in any::<u64>()
    ) {
        let cfg = TpcaConfig {
            stages,
            ratio,
            compression: if conv { Compression::Conv } else { Compression::Pool },
            amplification: if linear { Amplification::Linear } else { Amplification::TransConv },
        };
        let valid = cfg.stage_lengths(n).is_ok();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::<f64>::new();
        let state = TpcaState::new(&mut store, "k", cfg, 4, &mut rng).unwrap();
        let tape = Tape::new();
        let ctx = Ctx::eval(&tape, &store);
        let z = tape.constant(&Tensor::from_fn(vec![2, n, 4], |i| (i as f64 * 0.7).sin()));
        match state.transform(&ctx, z) {
            Ok(out) => {
                prop_assert!(valid);
                prop_assert_eq!(out.shape(), vec![2, n, 4]);
            }
            Err(e) => {
                prop_assert!(!valid);
                let needle = format!("n = {}", n);
                prop_assert!(e.to_string().contains(&needle));
            }
        }
    }

    #[test]
    fn losses_are_non_negative_and_vanish_on_equality(
        joints in 1usize..4, frames in 3usize..7, p in values(72), g in values(72)
    ) {
        let shape = vec![1, joints, frames, 3];
        let (p, g) = (tensor(shape.clone(), &p), tensor(shape, &g));
        let tape = Tape::new();
        let (pv, gv) = (tape.constant(&p), tape.constant(&g));
        let w = JointWeights::uniform(joints);
        for squared in [true, false] {
            prop_assert!(wmpjpe(pv, gv, &w, squared).unwrap().item() >= 0.0);
            prop_assert_eq!(wmpjpe(pv, pv, &w, squared).unwrap().item(), 0.0);
        }
        prop_assert!(mpjve(pv, gv).unwrap().item() >= 0.0);
        prop_assert!(tc_loss(pv, gv).unwrap().item() >= 0.0);
        prop_assert_eq!(mpjve(pv, pv).unwrap().item(), 0.0);
        prop_assert_eq!(tc_loss(pv, pv).unwrap().item(), 0.0);
    }

    #[test]
    fn mpjpe_is_translation_invariant_and_bounds_p_mpjpe(
        joints in 3usize..8, p in values(96), g in values(96), c in prop::array::uniform3(-100.0f64..100.0)
    ) {
        let shape = vec![1, joints, 2, 3];
        let scaled = |v: &[f64]| Tensor::from_fn(shape.clone(), |i| 50.0 * v[i % v.len()] + i as f64);
        let (p, g) = (scaled(&p), scaled(&g));
        let ps = Tensor::from_fn(shape.clone(), |i| p.data()[i] + c[i % 3]);
        let gs = Tensor::from_fn(shape, |i| g.data()[i] + c[i % 3]);
        let base = mpjpe(&p, &g).unwrap();
        prop_assert!((mpjpe(&ps, &gs).unwrap() - base).abs() < 1e-9 * base.max(1.0));
        prop_assert!(p_mpjpe(&p, &g).unwrap() <= base + 1e-9);
    }

    #[test]
    fn auc_is_the_mean_pck_curve(errors in prop::collection::vec(0.0f64..200.0, 1..200)) {
        let (pck, auc) = pck_auc_from_errors(&errors);
        let frac = |t: f64| 100.0 * errors.iter().filter(|&&e| e < t).count() as f64 / errors.len() as f64;
        let curve: f64 = (1..=30).map(|k| frac(5.0 * k as f64)).sum::<f64>() / 30.0;
        prop_assert!((auc - curve).abs() < 1e-9);
        prop_assert!((pck - frac(150.0)).abs() < 1e-12);
        prop_assert!((0.0..=100.0).contains(&auc) && (0.0..=100.0).contains(&pck));
    }

    #[test]
    fn stride_windows_tile_the_sequence(total in 0usize..400, frames in 1usize..60) {
        let train = stride_sample(0, total, frames, SampleMode::Train);
        prop_assert_eq!(train.len(), total / frames);
        for w in &train {
            prop_assert!(w.start % frames == 0 && w.valid == frames && w.start + frames <= total);
        }
        let eval = stride_sample(0, total, frames, SampleMode::Eval);
        prop_assert_eq!(eval.iter().map(|w| w.valid).sum::<usize>(), total);
        prop_assert!(eval.iter().all(|w| w.len == frames && w.valid >= 1));
    }

    #[test]
    fn checkpoint_bytes_round_trip(
        shapes in prop::collection::vec(prop::collection::vec(1usize..4, 0..3), 0..5), seed in any::<u32>()
    ) {
        let tensors = shapes
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let t = Tensor::<f32>::from_fn(s.clone(), |k| (seed as f32 + k as f32) * 0.001 - i as f32);
                (format!("t{i}"), t)
            })
            .collect();
        let ck = Checkpoint {
            config: serde_json::json!({ "seed": seed }),
            meta: serde_json::json!({ "step": 3 }),
            tensors,
        };
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        prop_assert_eq!(&back, &ck);
        prop_assert_eq!(back.to_bytes().unwrap(), bytes);
    }
}
