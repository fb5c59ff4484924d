mod common;

use cosavatar::checkpoint::{Checkpoint, Stage};
use cosavatar::fields::{Groups, Region};
use cosavatar::log::JsonLog;
use cosavatar::nn::Parameters;
use cosavatar::scene_synth::MASK_TORSO;
use cosavatar::training::{fit_reconstruction, FitOptions, PerceptualConfig, TrainSchedule, Trainer};
use cosavatar::Error;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn schedule(iters: usize, lr: f64) -> TrainSchedule {
    TrainSchedule {
        total_iters: iters,
        learning_rate: lr,
        eval_every: iters,
        ..TrainSchedule::reconstruct()
    }
}

fn small_perceptual() -> PerceptualConfig {
    PerceptualConfig {
        layer_weights: vec![1.0, 1.0],
        channels: vec![4, 4],
        seed: 3,
    }
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let ds = common::small_scene(5);
    let mut a = common::tiny_avatar(ds.frames[0].z_exp.len(), 1);
    let before = a.all_params();
    fit_reconstruction(&ds, &mut a, &schedule(3, 0.0), &common::fast_render(), &small_perceptual(), FitOptions::default())
        .unwrap();
    assert_eq!(a.all_params(), before);
}

#[test]
fn torso_gradients_ignore_head_pixels() {
    let ds = common::small_scene(2);
    let frame = &ds.frames[0];
    let mut a = common::tiny_avatar(frame.z_exp.len(), 2);
    common::randomize(&mut a, 0.3, &mut ChaCha8Rng::seed_from_u64(9));
    let sched = TrainSchedule { loss_alpha: 0.0, ..schedule(1, 1e-3) };
    let head = frame.masks.head_region().unwrap();
    let mut other = frame.image_gt.clone();
    for p in 0..head.data.len() {
        if head.data[p] {
            other.data[3 * p] = 1.0 - other.data[3 * p];
        }
    }
    let grads = |target| {
        let mut t = Trainer::new(&sched, common::fast_render(), small_perceptual()).unwrap();
        t.loss_and_grads(&a, frame, target, ds.background()).unwrap().2
    };
    let g1 = grads(&frame.image_gt);
    let g2 = grads(&other);
    assert_eq!(g1.torso.flatten(), g2.torso.flatten());
    assert_ne!(g1.head.flatten(), g2.head.flatten());
    assert!(frame.masks.get(MASK_TORSO).unwrap().count() > 0);
}

#[test]
fn seeded_fits_are_identical_and_loss_decreases() {
    let ds = common::small_scene(5);
    let run = || {
        let mut a = common::tiny_avatar(ds.frames[0].z_exp.len(), 4);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.jsonl");
        let report = {
            let mut log = JsonLog::create(&path).unwrap();
            let r = fit_reconstruction(
                &ds,
                &mut a,
                &schedule(80, 5e-3),
                &common::fast_render(),
                &small_perceptual(),
                FitOptions { log: Some(&mut log), snapshot_dir: None },
            )
            .unwrap();
            log.flush().unwrap();
            r
        };
        (a.all_params(), report, std::fs::read(&path).unwrap())
    };
    let (p1, r1, l1) = run();
    let (p2, r2, l2) = run();
    assert_eq!(p1, p2);
    assert_eq!(r1, r2);
    assert_eq!(l1, l2);
    assert_eq!(String::from_utf8(l1).unwrap().lines().count(), 80);
    let mean = |s: &[(usize, cosavatar::training::LossValue)]| s.iter().map(|l| l.1.total).sum::<f64>() / s.len() as f64;
    let first = mean(&r1.losses[..10]);
    let last = mean(&r1.losses[70..]);
    assert!(last < first, "loss went from {first} to {last}");
}

#[test]
fn non_finite_loss_writes_a_snapshot() {
    let ds = common::small_scene(5);
    let mut a = common::tiny_avatar(ds.frames[0].z_exp.len(), 5);
    a.head.visit_groups_mut(
        Groups { deform: false, field: false, upsampler: true, codes: false },
        &mut |_, v| v.fill(f64::NAN),
    );
    let dir = tempfile::tempdir().unwrap();
    let err = fit_reconstruction(
        &ds,
        &mut a,
        &schedule(5, 1e-3),
        &common::fast_render(),
        &small_perceptual(),
        FitOptions { log: None, snapshot_dir: Some(dir.path().to_path_buf()) },
    )
    .unwrap_err();
    match err {
        Error::NonFiniteLoss { iter, snapshot, .. } => {
            assert_eq!(iter, 0);
            assert!(snapshot.starts_with(dir.path()));
            let ck = Checkpoint::load(&snapshot).unwrap();
            assert_eq!(ck.stage, Stage::Reconstruct);
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn checkpoint_round_trip_and_corruption() {
    let mut a = common::tiny_avatar(6, 6);
    common::randomize(&mut a, 0.5, &mut ChaCha8Rng::seed_from_u64(1));
    let mut ck = Checkpoint { stage: Stage::Edit, avatar: a, render: common::fast_render(), metadata: Default::default() };
    ck.metadata.insert("note".into(), serde_json::json!("x"));
    let bytes = ck.to_bytes().unwrap();
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back, ck);
    assert_eq!(back.to_bytes().unwrap(), bytes);
    assert_eq!(back.avatar.model(Region::Head).deform, ck.avatar.head.deform);

    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Checkpoint(_))));
    assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 8]), Err(Error::Checkpoint(_))));
    let mut longer = bytes.clone();
    longer.extend_from_slice(&[0; 8]);
    assert!(Checkpoint::from_bytes(&longer).is_err());
}

proptest! {
    #[test]
    fn train_and_holdout_partition_frames(n in 1usize..60, every in 2usize..8) {
        let s = TrainSchedule { holdout_every: every, ..TrainSchedule::reconstruct() };
        let train = s.train_frames(n);
        let hold = s.holdout_frames(n);
        prop_assert_eq!(train.len() + hold.len(), n);
        prop_assert!(train.iter().all(|i| !hold.contains(i)));
        prop_assert_eq!(hold.len(), n / every);
    }
}
