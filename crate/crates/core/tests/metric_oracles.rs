//! Losses, metrics and data handling against brute-force loops.

mod common;

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rtpca::data::{
    add_gaussian_noise, dataset_to_string, load_dataset, parse_dataset, sample_all, synth_generate, SampleMode,
};
use rtpca::losses::{mpjve, tc_loss, total_loss, wmpjpe, JointWeights, LossWeights};
use rtpca::metrics::{accel_error, mpjpe, p_mpjpe, pck_auc, pck_auc_from_errors, procrustes_align};
use rtpca::tensor::{Tape, Tensor};

/// `[B, J, F, 3]` accessor for flat data.
fn at(t: &Tensor<f64>, b: usize, j: usize, f: usize) -> [f64; 3] {
    std::array::from_fn(|k| t.at(&[b, j, f, k]))
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    std::array::from_fn(|k| a[k] - b[k])
}

fn pose_pair(shape: [usize; 4], seed: u64) -> (Tensor<f64>, Tensor<f64>) {
    let mut rng = common::rng(seed);
    let scale = |t: Tensor<f64>| Tensor::from_fn(t.shape().to_vec(), |i| 100.0 * t.data()[i]);
    (
        scale(common::rand_tensor(&shape, &mut rng)),
        scale(common::rand_tensor(&shape, &mut rng)),
    )
}

/// Mean over `(b, j, f)` of `term(b, j, f)` for `f` in `lo..frames`.
fn brute(p: &Tensor<f64>, lo: usize, term: impl Fn(usize, usize, usize) -> f64) -> f64 {
    let s = p.shape();
    let (mut acc, mut n) = (0.0, 0.0);
    for b in 0..s[0] {
        for j in 0..s[1] {
            for f in lo..s[2] {
                acc += term(b, j, f);
                n += 1.0;
            }
        }
    }
    acc / n
}

fn loss_value(
    p: &Tensor<f64>,
    g: &Tensor<f64>,
    f: impl for<'t> Fn(rtpca::tensor::Var<'t, f64>, rtpca::tensor::Var<'t, f64>) -> rtpca::Result<rtpca::tensor::Var<'t, f64>>,
) -> f64 {
    let tape = Tape::new();
    f(tape.constant(p), tape.constant(g)).unwrap().item()
}

#[test]
fn mpjpe_matches_triple_loop_and_constant_offset() {
    let (p, g) = pose_pair([2, 4, 5, 3], 1);
    let want = brute(&p, 0, |b, j, f| dist(at(&p, b, j, f), at(&g, b, j, f)));
    assert!((mpjpe(&p, &g).unwrap() - want).abs() < 1e-9);

    let shifted = Tensor::from_fn(g.shape().to_vec(), |i| g.data()[i] + if i % 3 == 1 { 10.0 } else { 0.0 });
    assert!((mpjpe(&shifted, &g).unwrap() - 10.0).abs() < 1e-12);

    let c = Tensor::from_fn(g.shape().to_vec(), |i| p.data()[i] + [5.0, -2.0, 7.0][i % 3]);
    let d = Tensor::from_fn(g.shape().to_vec(), |i| g.data()[i] + [5.0, -2.0, 7.0][i % 3]);
    assert!((mpjpe(&c, &d).unwrap() - mpjpe(&p, &g).unwrap()).abs() < 1e-9);
}

#[test]
fn mpjve_matches_difference_loop() {
    for (shape, seed) in [([1, 1, 3, 3], 2), ([2, 3, 6, 3], 3)] {
        let (p, g) = pose_pair(shape, seed);
        let want = brute(&p, 1, |b, j, f| {
            let dp = sub(at(&p, b, j, f), at(&p, b, j, f - 1));
            let dg = sub(at(&g, b, j, f), at(&g, b, j, f - 1));
            dist(dp, dg)
        });
        assert!((loss_value(&p, &g, mpjve) - want).abs() < 1e-9);
    }
    let (p, _) = pose_pair([1, 2, 4, 3], 4);
    let offset = Tensor::from_fn(p.shape().to_vec(), |i| p.data()[i] + [3.0, 1.0, -8.0][i % 3]);
    assert!(loss_value(&offset, &p, mpjve).abs() < 1e-12);
}

fn second_difference(t: &Tensor<f64>, b: usize, j: usize, f: usize) -> [f64; 3] {
    let (a, m, c) = (at(t, b, j, f - 2), at(t, b, j, f - 1), at(t, b, j, f));
    std::array::from_fn(|k| c[k] - 2.0 * m[k] + a[k])
}

#[test]
fn tc_loss_and_accel_match_second_difference_loop() {
    for (shape, seed) in [([1, 1, 4, 3], 5), ([2, 3, 7, 3], 6)] {
        let (p, g) = pose_pair(shape, seed);
        let want = brute(&p, 2, |b, j, f| {
            dist(second_difference(&p, b, j, f), second_difference(&g, b, j, f))
        });
        assert!((loss_value(&p, &g, tc_loss) - want).abs() < 1e-9);
        let accel = accel_error(&p, &g, 50.0).unwrap();
        assert!((accel - want * 2500.0).abs() < 1e-6 * accel.max(1.0));
    }
}

#[test]
fn affine_in_time_offsets_vanish_under_second_differences() {
    let (g, _) = pose_pair([2, 3, 6, 3], 7);
    let s = g.shape().to_vec();
    let p = Tensor::from_fn(s.clone(), |i| {
        let f = (i / 3) % s[2];
        g.data()[i] + 4.0 + 2.5 * f as f64
    });
    assert!(loss_value(&p, &g, tc_loss).abs() < 1e-9);
    assert!(accel_error(&p, &g, 50.0).unwrap().abs() < 1e-6);
}

#[test]
fn constant_velocity_tracks_have_no_acceleration_error() {
    let s = vec![1, 2, 5, 3];
    let p = Tensor::from_fn(s.clone(), |i| ((i / 3) % 5) as f64 * 3.0 + (i % 3) as f64);
    let g = Tensor::from_fn(s, |i| ((i / 3) % 5) as f64 * -7.0 + 11.0);
    assert_eq!(accel_error(&p, &g, 50.0).unwrap(), 0.0);
}

#[test]
fn total_loss_is_the_weighted_sum_of_its_parts() {
    let (p, g) = pose_pair([2, 3, 5, 3], 8);
    let w = JointWeights::new(vec![1.0, 2.5, 4.0]).unwrap();
    let tape = Tape::new();
    let (pv, gv) = (tape.constant(&p), tape.constant(&g));
    let lw = LossWeights {
        lambda_t: 0.3,
        lambda_m: 0.7,
        squared: true,
    };
    let parts = total_loss(pv, gv, &w, &lw).unwrap();
    let wm = wmpjpe(pv, gv, &w, true).unwrap().item();
    let recombined = wm + 0.3 * tc_loss(pv, gv).unwrap().item() + 0.7 * mpjve(pv, gv).unwrap().item();
    assert!((parts.total.item() - recombined).abs() < 1e-9 * recombined);

    let zero = LossWeights {
        lambda_t: 0.0,
        lambda_m: 0.0,
        squared: true,
    };
    assert_eq!(total_loss(pv, gv, &w, &zero).unwrap().total.item(), wm);
    assert_eq!(total_loss(gv, gv, &w, &lw).unwrap().total.item(), 0.0);
}

#[test]
fn wmpjpe_matches_weighted_loop() {
    let (p, g) = pose_pair([2, 3, 4, 3], 9);
    let w = [1.0, 1.5, 4.0];
    let mut want = 0.0;
    for b in 0..2 {
        for j in 0..3 {
            let per_frame: f64 = (0..4).map(|f| dist(at(&p, b, j, f), at(&g, b, j, f)).powi(2)).sum::<f64>() / 4.0;
            want += w[j] * per_frame;
        }
    }
    want /= 6.0;
    let got = loss_value(&p, &g, |a, b| wmpjpe(a, b, &JointWeights::new(w.to_vec()).unwrap(), true));
    assert!((got - want).abs() < 1e-9 * want);
}

#[test]
fn pck_and_auc_follow_threshold_enumeration() {
    assert_eq!(pck_auc_from_errors(&[0.0; 10]), (100.0, 100.0));
    assert_eq!(pck_auc_from_errors(&[200.0; 10]), (0.0, 0.0));
    assert_eq!(pck_auc_from_errors(&[75.0; 10]), (100.0, 50.0));

    let mut rng = common::rng(10);
    let errors: Vec<f64> = (0..500).map(|_| rng.random_range(0.0..180.0)).collect();
    let (pck, auc) = pck_auc_from_errors(&errors);
    let count = |t: f64| errors.iter().filter(|&&e| e < t).count() as f64;
    let curve: Vec<f64> = (1..=30).map(|k| 100.0 * count(5.0 * k as f64) / 500.0).collect();
    assert!((pck - 100.0 * count(150.0) / 500.0).abs() < 1e-12);
    assert!((auc - curve.iter().sum::<f64>() / 30.0).abs() < 1e-9);

    let (p, _) = pose_pair([1, 3, 4, 3], 11);
    assert_eq!(pck_auc(&p, &p).unwrap(), (100.0, 100.0));
}

fn similarity_pair(rng: &mut ChaCha8Rng, joints: usize, noise: f64) -> (Vec<Vector3<f64>>, Vec<Vector3<f64>>) {
    let g: Vec<Vector3<f64>> = (0..joints)
        .map(|_| Vector3::from_fn(|_, _| rng.random_range(-300.0..300.0)))
        .collect();
    let axis = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 1.0];
    let r = common::rotation(axis, rng.random_range(-3.0..3.0));
    let s = rng.random_range(0.5..2.0);
    let t = Vector3::new(40.0, -15.0, 90.0);
    let p = g
        .iter()
        .map(|x| s * r * x + t + Vector3::from_fn(|_, _| noise * rng.random_range(-1.0..1.0)))
        .collect();
    (p, g)
}

fn sum_sq(a: &[Vector3<f64>], g: &[Vector3<f64>]) -> f64 {
    a.iter().zip(g).map(|(x, y)| (x - y).norm_squared()).sum()
}

#[test]
fn alignment_removes_similarity_transforms() {
    let mut rng = common::rng(12);
    for _ in 0..50 {
        let (p, g) = similarity_pair(&mut rng, 17, 0.0);
        let a = procrustes_align(&p, &g);
        assert!(!a.degenerate);
        let worst = a.points.iter().zip(&g).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max);
        assert!(worst < 1e-6, "residual {worst}");
    }
}

#[test]
fn alignment_agrees_with_quaternion_solution() {
    let mut rng = common::rng(13);
    for _ in 0..50 {
        let (p, g) = similarity_pair(&mut rng, 9, 30.0);
        let ours = procrustes_align(&p, &g).points;
        let to = |v: &[Vector3<f64>]| v.iter().map(|x| [x.x, x.y, x.z]).collect::<Vec<_>>();
        let horn = common::horn_align(&to(&p), &to(&g));
        for (a, b) in ours.iter().zip(&horn) {
            assert!((a - Vector3::from(*b)).norm() < 1e-6);
        }
    }
}

/// Shrinking-radius random search over (log scale, rotation vector,
/// translation) for the least-squares similarity fit.
fn random_search(p: &[Vector3<f64>], g: &[Vector3<f64>], samples: usize, rng: &mut ChaCha8Rng) -> f64 {
    let apply = |x: &[f64; 7]| -> Vec<Vector3<f64>> {
        let rot = nalgebra::Rotation3::new(Vector3::new(x[1], x[2], x[3]));
        let t = Vector3::new(x[4], x[5], x[6]);
        p.iter().map(|v| x[0].exp() * (rot * v) + t).collect()
    };
    let mut best = [0.0; 7];
    let mut best_cost = sum_sq(&apply(&best), g);
    let radii = [0.2, 0.2, 0.2, 0.2, 30.0, 30.0, 30.0];
    for i in 0..samples {
        let shrink = 1.0 - i as f64 / samples as f64;
        let cand: [f64; 7] =
            std::array::from_fn(|k| best[k] + radii[k] * shrink.powi(3) * rng.random_range(-1.0..1.0));
        let c = sum_sq(&apply(&cand), g);
        if c < best_cost {
            best = cand;
            best_cost = c;
        }
    }
    best_cost
}

#[test]
fn closed_form_alignment_beats_random_search() {
    let mut rng = common::rng(14);
    let g: Vec<Vector3<f64>> = (0..17)
        .map(|_| Vector3::from_fn(|_, _| rng.random_range(-300.0..300.0)))
        .collect();
    let r = Matrix3::from(nalgebra::Rotation3::new(Vector3::new(0.05, -0.03, 0.04)));
    let p: Vec<Vector3<f64>> = g
        .iter()
        .map(|x| 1.03 * r * x + Vector3::new(5.0, -3.0, 2.0) + Vector3::from_fn(|_, _| rng.random_range(-10.0..10.0)))
        .collect();
    let closed = sum_sq(&procrustes_align(&p, &g).points, &g);
    let searched = random_search(&p, &g, 100_000, &mut rng);
    assert!(closed <= searched * (1.0 + 1e-9), "closed {closed} > search {searched}");
    assert!(searched <= closed * 1.01, "search {searched} not within 1 % of {closed}");
}

#[test]
fn p_mpjpe_never_exceeds_mpjpe() {
    for seed in 0..20 {
        let (p, g) = pose_pair([1, 5, 3, 3], 100 + seed);
        assert!(p_mpjpe(&p, &g).unwrap() <= mpjpe(&p, &g).unwrap() + 1e-9);
    }
}

#[test]
fn loader_handles_empty_single_and_ragged_files() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.jsonl");
    std::fs::write(&empty, "").unwrap();
    assert!(load_dataset(&empty).unwrap().is_empty());

    let seqs = synth_generate(3, 1, 5, 4, 50.0);
    let text = dataset_to_string(&seqs).unwrap();
    let one = dir.path().join("one.jsonl");
    std::fs::write(&one, &text).unwrap();
    let loaded = load_dataset(&one).unwrap();
    assert_eq!(loaded, seqs);
    assert_eq!((loaded[0].frames(), loaded[0].joints()), (5, 4));
    assert_eq!(dataset_to_string(&loaded).unwrap(), text);

    let mut ragged = seqs[0].clone();
    ragged.joints3d.pop();
    let bad = format!("{text}{}\n", serde_json::to_string(&ragged).unwrap());
    let err = parse_dataset(&bad, std::path::Path::new("bad.jsonl")).unwrap_err().to_string();
    assert!(err.contains("bad.jsonl:2:"), "{err}");
}

#[test]
fn noise_has_requested_spread_and_is_seeded() {
    let seq = &synth_generate(4, 1, 3000, 17, 50.0)[0];
    let sigma = 0.01;
    let noisy = add_gaussian_noise(seq, sigma, 99).unwrap();
    assert_eq!(noisy, add_gaussian_noise(seq, sigma, 99).unwrap());
    assert_eq!(&add_gaussian_noise(seq, 0.0, 99).unwrap(), seq);
    assert_eq!(noisy.joints3d, seq.joints3d);
    let d: Vec<f64> = noisy
        .joints2d
        .iter()
        .flatten()
        .flatten()
        .zip(seq.joints2d.iter().flatten().flatten())
        .map(|(a, b)| a - b)
        .collect();
    assert!(d.len() >= 100_000);
    let mean = d.iter().sum::<f64>() / d.len() as f64;
    let sd = (d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (d.len() - 1) as f64).sqrt();
    assert!((sd / sigma - 1.0).abs() < 0.02, "sample sd {sd}");
}

#[test]
fn eval_windows_cover_every_frame_once() {
    let seqs = synth_generate(5, 3, 100, 4, 50.0);
    let windows = sample_all(&seqs, 27, SampleMode::Eval);
    for (i, s) in seqs.iter().enumerate() {
        let mut hits = vec![0; s.frames()];
        for w in windows.iter().filter(|w| w.sequence == i) {
            (w.start..w.start + w.valid).for_each(|f| hits[f] += 1);
        }
        assert!(hits.iter().all(|&h| h == 1));
    }
    let train = sample_all(&seqs, 27, SampleMode::Train);
    assert!(train.windows(2).all(|p| p[0].sequence != p[1].sequence || p[1].start >= p[0].start + 27));
}
