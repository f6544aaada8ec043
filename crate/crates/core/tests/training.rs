mod common;

use std::collections::BTreeMap;

use common::{gen_config, rand_tensor, rng, small_model, video_clips};
use dcfm::autograd::Tape;
use dcfm::dataio::{GenConfig, LabelMap, LabelMode, VideoClip};
use dcfm::engine::predict_all_keyframes;
use dcfm::metrics::ConfusionMatrix;
use dcfm::model::Model;
use dcfm::tensor::Tensor;
use dcfm::training::{
    compute_joint_loss, compute_joint_loss_with, compute_mask, train, train_step,
    ConsistencyTarget, PairSampler, TrainConfig,
};
use rand::Rng;

fn flat_clip(n: usize, labelled: &[usize]) -> VideoClip {
    VideoClip {
        id: "c".into(),
        frames: (0..n)
            .map(|t| Tensor::full([3, 16, 16], t as f32))
            .collect(),
        labels: labelled
            .iter()
            .map(|&i| (i, LabelMap::filled(16, 16, 0)))
            .collect(),
    }
}

#[test]
fn sampler_forced_and_sparse_cases() {
    let mut r = rng(1);
    let two = [flat_clip(2, &[0])];
    let s = PairSampler::new(&two).unwrap();
    for _ in 0..100 {
        assert_eq!(s.sample_indices(&two, &mut r), (0, 0, 1));
    }
    let sparse = [flat_clip(12, &[5])];
    let s = PairSampler::new(&sparse).unwrap();
    for _ in 0..100 {
        let (_, l, u) = s.sample_indices(&sparse, &mut r);
        assert_eq!(l, 5);
        assert!(u == 4 || u == 6);
    }
    assert!(PairSampler::new(&[flat_clip(1, &[0])]).is_err());
}

#[test]
fn sampler_neighbour_directions_are_balanced() {
    let clips = [flat_clip(12, &(0..12).collect::<Vec<_>>())];
    let s = PairSampler::new(&clips).unwrap();
    let mut r = rng(2);
    let mut counts: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for _ in 0..10_000 {
        let (_, l, u) = s.sample_indices(&clips, &mut r);
        assert_eq!(l.abs_diff(u), 1);
        let e = counts.entry(l).or_default();
        if u > l {
            e.1 += 1;
        } else {
            e.0 += 1;
        }
    }
    assert_eq!(counts[&0].0, 0);
    assert_eq!(counts[&11].1, 0);
    for l in 1..11 {
        let (back, fwd) = counts[&l];
        let f = fwd as f64 / (back + fwd) as f64;
        assert!((f - 0.5).abs() <= 0.05, "frame {l}: forward share {f}");
    }
}

#[test]
fn mask_matches_per_pixel_argmax_oracle() {
    let mut r = rng(3);
    for _ in 0..20 {
        let a = rand_tensor(&mut r, &[3, 4, 4], -1.0, 1.0);
        let b = rand_tensor(&mut r, &[3, 4, 4], -1.0, 1.0);
        let m = compute_mask(&a, &b).unwrap();
        let arg = |t: &Tensor<f64>, p: usize| {
            (0..3)
                .max_by(|&i, &j| t.data()[i * 16 + p].total_cmp(&t.data()[j * 16 + p]))
                .unwrap()
        };
        for p in 0..16 {
            let expect = if arg(&a, p) == arg(&b, p) { 1.0 } else { 0.0 };
            assert_eq!(m.data()[p], expect);
        }
    }
    let a = Tensor::from_fn([2, 3, 3], |i| if i < 9 { 1.0 } else { 0.0 });
    let b = Tensor::from_fn([2, 3, 3], |i| if i < 9 { 0.0 } else { 1.0 });
    assert!(compute_mask(&a, &a)
        .unwrap()
        .data()
        .iter()
        .all(|&v| v == 1.0));
    assert!(compute_mask(&a, &b)
        .unwrap()
        .data()
        .iter()
        .all(|&v| v == 0.0));
}

fn f64_model(seed: u64) -> Model<f64> {
    small_model(3, seed).cast()
}

fn random_pair(seed: u64, h: usize, w: usize) -> (Tensor<f64>, LabelMap, Tensor<f64>) {
    let mut r = rng(seed);
    let x_l = rand_tensor(&mut r, &[3, h, w], 0.0, 255.0);
    let x_u = rand_tensor(&mut r, &[3, h, w], 0.0, 255.0);
    let y = LabelMap::new(h, w, (0..h * w).map(|_| r.random_range(0..3u8)).collect()).unwrap();
    (x_l, y, x_u)
}

#[test]
fn loss_terms_follow_toggles() {
    let model = f64_model(4);
    let (x_l, y, x_u) = random_pair(5, 32, 32);
    for bits in 1..8u8 {
        let cfg = TrainConfig {
            use_li: bits & 1 != 0,
            use_lb: bits & 2 != 0,
            use_lc: bits & 4 != 0,
            ..Default::default()
        };
        let mut tape = Tape::new();
        let j = compute_joint_loss(&model, &mut tape, &x_l, &y, &x_u, &cfg).unwrap();
        let b = j.breakdown;
        let li = if cfg.use_li { b.l_i } else { 0.0 };
        let expect = li + cfg.lambda_b * b.l_b + cfg.lambda_c * b.l_c;
        assert!((b.total - expect).abs() < 1e-6, "toggles {bits:03b}");
        if !cfg.use_lb {
            assert_eq!(b.l_b, 0.0);
        }
        if !cfg.use_lc {
            assert_eq!(b.l_c, 0.0);
        }
        assert!(b.l_i >= 0.0 && b.l_b >= 0.0 && b.l_c >= 0.0);
        assert!((0.0..=1.0).contains(&b.mask_fraction));
    }
    let cfg = TrainConfig {
        use_lb: false,
        use_lc: false,
        ..Default::default()
    };
    let mut tape = Tape::new();
    let j = compute_joint_loss(&model, &mut tape, &x_l, &y, &x_u, &cfg).unwrap();
    assert_eq!(j.breakdown.total, j.breakdown.l_i);
}

#[test]
fn identical_frames_make_branches_agree() {
    let model = f64_model(6);
    let (x, y, _) = random_pair(7, 32, 32);
    let mut tape = Tape::new();
    let b = compute_joint_loss(&model, &mut tape, &x, &y, &x, &TrainConfig::default())
        .unwrap()
        .breakdown;
    assert!((b.l_b - b.l_i).abs() < 1e-6);
    assert_eq!(b.l_c, 0.0);
    assert_eq!(b.mask_fraction, 1.0);
}

#[test]
fn labelled_frame_runs_as_keyframe_and_as_nonkey_frame() {
    let model = small_model(3, 8);
    let (x_l, y, x_u) = random_pair(9, 32, 32);
    let (x_l, x_u) = (x_l.cast::<f32>(), x_u.cast::<f32>());
    model.reset_stage_counts();
    let mut tape = Tape::new();
    compute_joint_loss(&model, &mut tape, &x_l, &y, &x_u, &TrainConfig::default()).unwrap();
    let c = model.stage_counts();
    // keyframe passes of x_l and x_u, plus x_l fused with x_u's common feature
    assert_eq!((c.enc_lo, c.enc_hi, c.fuse, c.decode), (2, 2, 3, 3));
}

#[test]
fn consistency_ignores_features_outside_mask() {
    let model = f64_model(10);
    let (x_l, y, x_u) = random_pair(11, 32, 32);
    let cfg = TrainConfig::default();
    let mut tape = Tape::new();
    let natural = compute_joint_loss(&model, &mut tape, &x_l, &y, &x_u, &cfg).unwrap();
    let fused_u = tape.value(natural.fused_u.unwrap()).clone();
    let ConsistencyTarget { target, .. } = natural.consistency.unwrap();
    let (c, h, w) = fused_u.dims3().unwrap();
    // a mask with zeros at known places, kept fixed for the comparison
    let mask = Tensor::from_fn([h, w], |p| ((p / w + p % w) % 2) as f64);
    let frozen = ConsistencyTarget {
        mask: mask.clone(),
        target: target.clone(),
    };
    let mut tape = Tape::new();
    let base = compute_joint_loss_with(&model, &mut tape, &x_l, &y, &x_u, &cfg, Some(&frozen))
        .unwrap()
        .breakdown
        .l_c;
    let l_c_of = |f: &Tensor<f64>| {
        let mut t = Tape::inference();
        let (a, b) = (t.input(f.clone()), t.constant(target.clone()));
        let l = t.mse_masked(a, b, &mask).unwrap();
        t.value(l).item()
    };
    assert_eq!(l_c_of(&fused_u), base);
    let mut r = rng(12);
    for _ in 0..20 {
        let p = loop {
            let p = r.random_range(0..h * w);
            if mask.data()[p] == 0.0 {
                break p;
            }
        };
        let mut f = fused_u.to_vec();
        for ch in 0..c {
            f[ch * h * w + p] += r.random_range(-5.0..5.0);
        }
        assert_eq!(l_c_of(&Tensor::new([c, h, w], f).unwrap()), base);
    }
}

#[test]
fn small_step_descends() {
    for seed in 0..5 {
        let mut model = small_model(3, 20 + seed);
        let (x_l, y, x_u) = random_pair(30 + seed, 32, 32);
        let pair = dcfm::training::TrainingPair {
            clip: 0,
            l: 0,
            u: 1,
            x_l: x_l.cast(),
            y_l: y,
            x_u: x_u.cast(),
        };
        let cfg = TrainConfig {
            base_lr: 1e-3,
            iters: 10,
            ..Default::default()
        };
        let before = train_step(&mut model, std::slice::from_ref(&pair), &cfg, 0).unwrap();
        let expect = before.l_i + cfg.lambda_b * before.l_b + cfg.lambda_c * before.l_c;
        assert!((before.total - expect).abs() < 1e-6);
        let mut tape = Tape::new();
        let after = compute_joint_loss(&model, &mut tape, &pair.x_l, &pair.y_l, &pair.x_u, &cfg)
            .unwrap()
            .breakdown;
        assert!(
            after.total < before.total,
            "seed {seed}: {} -> {}",
            before.total,
            after.total
        );
    }
}

#[test]
fn training_is_deterministic() {
    let clips = video_clips(&GenConfig {
        height: 32,
        width: 32,
        ..gen_config(3, 4, 13)
    });
    let cfg = TrainConfig {
        iters: 6,
        batch: 2,
        seed: 3,
        ..Default::default()
    };
    let run = |cfg: &TrainConfig| {
        let mut m = small_model(4, 1);
        let log = train(&mut m, &clips, cfg).unwrap();
        (m.params().clone(), log)
    };
    let (pa, la) = run(&cfg);
    let (pb, lb) = run(&cfg);
    assert_eq!(la, lb);
    for (a, b) in pa.iter().zip(pb.iter()) {
        assert_eq!(a.value, b.value, "{}", a.name);
    }
    let (pc, _) = run(&TrainConfig { seed: 4, ..cfg });
    assert!(pa.iter().zip(pc.iter()).any(|(a, c)| a.value != c.value));
    assert_eq!(la.len(), 6);
    assert!(la.iter().enumerate().all(|(i, e)| e.iter == i));
}

fn keyframe_miou(model: &Model<f32>, clips: &[VideoClip], classes: usize) -> f64 {
    let mut cm = ConfusionMatrix::new(classes);
    for clip in clips {
        let preds = predict_all_keyframes(model, &clip.frames).unwrap();
        for (t, gt) in &clip.labels {
            cm.accumulate(&preds[*t], gt).unwrap();
        }
    }
    cm.miou().unwrap()
}

#[test]
fn training_improves_held_out_accuracy() {
    let base = GenConfig {
        classes: 3,
        label_mode: LabelMode::Dense,
        ..gen_config(20, 12, 40)
    };
    let train_clips = video_clips(&base);
    let test_clips = video_clips(&GenConfig {
        videos: 5,
        seed: 41,
        ..base
    });
    let mut model = Model::new(dcfm::model::ModelConfig {
        num_classes: 3,
        ..Default::default()
    })
    .unwrap();
    let before = keyframe_miou(&model, &test_clips, 3);
    train(&mut model, &train_clips, &TrainConfig::default()).unwrap();
    let after = keyframe_miou(&model, &test_clips, 3);
    assert!(after - before >= 0.4, "mIoU {before:.3} -> {after:.3}");
}
