use lgm_core::camera::Camera;
use lgm_core::tensor::{check_gradients_where, Tape, Tensor};
use lgm_core::training::*;
use lgm_core::unet::UNetConfig;
use proptest::prelude::*;

fn toy_unet() -> UNetConfig {
    UNetConfig {
        in_res: 16,
        views: 4,
        in_channels: 9,
        down_channels: vec![8, 16],
        mid_channels: 16,
        up_channels: vec![16],
        attention_blocks: [1, 2].into_iter().collect(),
        groups: 4,
        layers: 1,
        heads: 2,
        k: 1,
    }
}

fn toy_cfg(steps: u64) -> TrainConfig {
    TrainConfig {
        total_steps: steps,
        supervise_res: 16,
        seed: 11,
        ..TrainConfig::default()
    }
}

fn toy_scenes() -> Vec<Scene> {
    (0..2).map(|s| gen_scene(100 + s, 6, 16).unwrap()).collect()
}

#[test]
fn scenes_are_deterministic_and_well_formed() {
    let a = gen_scene(5, 4, 16).unwrap();
    let b = gen_scene(5, 4, 16).unwrap();
    assert_eq!(a.to_archive(), b.to_archive());
    assert_eq!(a.view_pool.len(), POOL_SIZE);
    for v in &a.view_pool {
        assert!(v.alpha.data().iter().all(|x| (0.0..=1.0).contains(x)));
        assert!(v.image.data().iter().all(|x| (0.0..=1.0).contains(x)));
        assert!((v.camera.position.norm() - 1.5).abs() < 1e-12);
    }
    assert!(a.view_pool.iter().any(|v| v.alpha.data().iter().any(|&x| x > 0.5)));
    assert!(gen_scene(5, 0, 16).is_err());
    let dir = tempfile::tempdir().unwrap();
    a.save(dir.path().join("s.lgma")).unwrap();
    assert_eq!(Scene::load(dir.path().join("s.lgma")).unwrap().to_archive(), a.to_archive());
}

#[test]
fn batches_follow_the_sampling_rules() {
    let scene = gen_scene(3, 4, 16).unwrap();
    let front = Camera::orbit(0.0, 0.0, 1.5, 49.1f64.to_radians(), 16, 16).unwrap();
    for seed in 0..10 {
        let b = make_batch(&scene, seed).unwrap();
        assert_eq!(b.targets.len(), TARGET_VIEWS);
        assert_eq!(b.inputs.len(), INPUT_VIEWS);
        let mut idx = b.indices.clone();
        idx.sort();
        idx.dedup();
        assert_eq!(idx.len(), TARGET_VIEWS);
        for i in 0..INPUT_VIEWS {
            assert_eq!(b.inputs[i].camera, b.targets[i].camera);
        }
        assert_eq!(b.inputs[0].camera, front);
    }
    let mut small = scene.clone();
    small.view_pool.truncate(7);
    assert!(make_batch(&small, 0).is_err());
}

#[test]
fn augmentation_rules() {
    let scene = gen_scene(3, 4, 16).unwrap();
    let b = make_batch(&scene, 1).unwrap();
    let off = TrainConfig {
        aug_prob: 0.0,
        ..TrainConfig::default()
    };
    let on = TrainConfig {
        aug_prob: 1.0,
        ..TrainConfig::default()
    };
    for seed in 0..5 {
        let same = augment_inputs(&b.inputs, &off, seed).unwrap();
        assert_eq!(same.len(), 4);
        for (x, y) in same.iter().zip(&b.inputs) {
            assert_eq!(x.image, y.image);
            assert_eq!(x.camera, y.camera);
        }
        let aug = augment_inputs(&b.inputs, &on, seed).unwrap();
        assert_eq!(aug[0].image, b.inputs[0].image);
        assert_eq!(aug[0].camera, b.inputs[0].camera);
        for (x, y) in aug.iter().zip(&b.inputs).skip(1) {
            assert_ne!(x.camera, y.camera);
            assert!((x.camera.position.norm() - 1.5).abs() < 1e-12);
        }
    }
}

#[test]
fn loss_examples() {
    let tape = Tape::<f64>::new();
    let gt = Tensor::from_fn(&[3, 4, 4], |i| (i as f64 * 0.37).fract() * 0.8);
    let shifted = Tensor::from_fn(&[3, 4, 4], |i| gt.data()[i] + 0.1);
    let same = loss_rgb(tape.constant(gt.clone()), tape.constant(gt.clone()), 0.0).unwrap();
    assert_eq!(same.value().item(), 0.0);
    let l = loss_rgb(tape.constant(shifted), tape.constant(gt.clone()), 0.5).unwrap();
    assert!((l.value().item() - 0.01).abs() < 1e-12);
    let zeros = Tensor::<f64>::zeros(&[1, 4, 4]);
    let ones = Tensor::from_fn(&[1, 4, 4], |_| 1.0);
    assert_eq!(loss_alpha(tape.constant(zeros.clone()), tape.constant(zeros.clone())).unwrap().value().item(), 0.0);
    assert_eq!(loss_alpha(tape.constant(zeros), tape.constant(ones)).unwrap().value().item(), 1.0);
    assert!(loss_rgb(tape.constant(gt), tape.constant(Tensor::zeros(&[3, 4, 3])), 0.0).is_err());
}

#[test]
fn loss_gradients_are_analytic() {
    let gt = Tensor::from_fn(&[3, 3, 3], |i| (i as f64 * 0.61).fract());
    let pred = Tensor::from_fn(&[3, 3, 3], |i| (i as f64 * 0.29).fract());
    let tape = Tape::<f64>::new();
    let p = tape.param(pred.clone());
    let g = tape.backward(loss_rgb(p, tape.constant(gt.clone()), 0.0).unwrap()).unwrap().get(p);
    for i in 0..27 {
        let want = 2.0 * (pred.data()[i] - gt.data()[i]) / 27.0;
        assert!((g.data()[i] - want).abs() < 1e-15);
    }
    let a_gt = Tensor::from_fn(&[1, 3, 3], |i| (i as f64 * 0.43).fract());
    let worst = check_gradients_where(
        |_, v| loss_alpha(v[0], v[0].tape().constant(a_gt.clone())),
        &[Tensor::from_fn(&[1, 3, 3], |i| (i as f64 * 0.17).fract())],
        1e-6,
        |_, _| true,
    )
    .unwrap();
    assert!(worst.max_rel_error < 1e-6, "{worst:?}");
}

#[test]
fn adamw_closed_forms() {
    let cfg = TrainConfig {
        weight_decay: 0.0,
        ..TrainConfig::default()
    };
    let mut p = vec![Tensor::<f64>::scalar(0.7)];
    let mut st = AdamState::new(&p);
    adamw_step(&mut p, &[Tensor::scalar(0.0)], &mut st, 1, 0.1, &cfg).unwrap();
    assert_eq!(p[0].item(), 0.7);

    let mut p = vec![Tensor::<f64>::scalar(0.0)];
    let mut st = AdamState::new(&p);
    adamw_step(&mut p, &[Tensor::scalar(1.0)], &mut st, 1, 0.1, &cfg).unwrap();
    assert!((p[0].item() + 0.1).abs() < 1e-6);

    let decay = TrainConfig::default();
    let mut p = vec![Tensor::<f64>::scalar(2.0)];
    let mut st = AdamState::new(&p);
    adamw_step(&mut p, &[Tensor::scalar(0.0)], &mut st, 1, 4e-4, &decay).unwrap();
    assert!((p[0].item() - 2.0 * (1.0 - 4e-4 * 0.05)).abs() < 1e-15);

    assert!(adamw_step(&mut p, &[Tensor::zeros(&[2])], &mut st, 2, 0.1, &cfg).is_err());
    assert!(adamw_step(&mut p, &[Tensor::scalar(0.0)], &mut st, 0, 0.1, &cfg).is_err());
}

#[test]
fn cosine_schedule_endpoints() {
    assert_eq!(cosine_lr(0, 1000, 4e-4), 4e-4);
    assert_eq!(cosine_lr(1000, 1000, 4e-4), 0.0);
    assert!((cosine_lr(500, 1000, 4e-4) - 2e-4).abs() < 1e-18);
}

#[test]
fn clipping_examples() {
    let mut g = vec![Tensor::<f64>::new(&[2], vec![3.0, 4.0]).unwrap()];
    assert_eq!(clip_grad_norm(&mut g, 1.0).unwrap(), 5.0);
    assert_eq!(g[0].data(), &[0.6, 0.8]);
    let mut small = vec![Tensor::<f64>::new(&[2], vec![0.3, 0.4]).unwrap()];
    clip_grad_norm(&mut small, 1.0).unwrap();
    assert_eq!(small[0].data(), &[0.3, 0.4]);
    let mut bad = vec![Tensor::<f64>::new(&[1], vec![f64::NAN]).unwrap()];
    assert!(clip_grad_norm(&mut bad, 1.0).is_err());
}

proptest! {
    #[test]
    fn clipped_norm_never_exceeds_max(v in prop::collection::vec(-100.0f64..100.0, 1..20), split in 0usize..20, max in 0.01f64..10.0) {
        let k = split.min(v.len());
        let mut g = vec![Tensor::new(&[k], v[..k].to_vec()).unwrap(), Tensor::new(&[v.len() - k], v[k..].to_vec()).unwrap()];
        clip_grad_norm(&mut g, max).unwrap();
        let n = g.iter().flat_map(|t| t.data()).map(|x| x * x).sum::<f64>().sqrt();
        prop_assert!(n <= max + 1e-9);
    }

    #[test]
    fn losses_are_non_negative(a in prop::collection::vec(0.0f64..1.0, 12), b in prop::collection::vec(0.0f64..1.0, 12)) {
        let tape = Tape::<f64>::new();
        let l = loss_rgb(tape.constant(Tensor::new(&[3, 2, 2], a.clone()).unwrap()), tape.constant(Tensor::new(&[3, 2, 2], b.clone()).unwrap()), 0.0).unwrap();
        let v = l.value().item();
        prop_assert!(v >= 0.0);
        prop_assert_eq!(v == 0.0, a == b);
    }
}

#[test]
fn identical_seeds_give_identical_logs() {
    let scenes = toy_scenes();
    let cfg = toy_cfg(3);
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (_, ma) = train_loop(&cfg, &toy_unet(), &scenes, Some(a.path())).unwrap();
    train_loop(&cfg, &toy_unet(), &scenes, Some(b.path())).unwrap();
    let text = std::fs::read_to_string(a.path().join("metrics.csv")).unwrap();
    assert_eq!(text, std::fs::read_to_string(b.path().join("metrics.csv")).unwrap());
    assert_eq!(text.lines().next().unwrap(), "step,lr,loss,psnr_in,psnr_novel");
    assert_eq!(read_metrics(a.path().join("metrics.csv")).unwrap(), ma);
    assert_eq!(ma.len(), 3);
    assert!(ma.last().unwrap().lr < 1e-8 * cfg.lr);
    assert!(a.path().join("final/params.lgma").exists());
}

#[test]
fn resume_matches_uninterrupted_run() {
    let scenes = toy_scenes();
    let cfg = TrainConfig {
        checkpoint_every: 2,
        ..toy_cfg(4)
    };
    let dir = tempfile::tempdir().unwrap();
    let (full, metrics) = train_loop(&cfg, &toy_unet(), &scenes, Some(dir.path())).unwrap();
    let mut resumed = Trainer::load_checkpoint(dir.path().join("ckpt-000002")).unwrap();
    assert_eq!(resumed.step, 2);
    let next = resumed.step(&scenes).unwrap();
    assert_eq!(next, metrics[2]);
    resumed.step(&scenes).unwrap();
    assert_eq!(resumed.params.tensors, full.params.tensors);
    assert_eq!(resumed.adam, full.adam);
}

#[test]
fn small_step_lowers_the_loss_on_a_frozen_batch() {
    let scenes = vec![gen_scene(9, 6, 16).unwrap()];
    let mut failures = 0;
    for seed in 0..10 {
        let cfg = TrainConfig {
            lr: 1e-4,
            aug_prob: 0.0,
            fixed_batch: true,
            total_steps: 1000,
            seed,
            ..toy_cfg(1000)
        };
        let mut t = Trainer::new(cfg, toy_unet()).unwrap();
        let before = t.step(&scenes).unwrap().loss;
        let after = t.step(&scenes).unwrap().loss;
        if after >= before {
            failures += 1;
        }
    }
    assert!(failures <= 1, "{failures} of 10 seeds did not decrease");
}

#[test]
fn config_is_validated() {
    let bad = TrainConfig {
        aug_prob: 1.5,
        ..TrainConfig::default()
    };
    assert!(Trainer::new(bad, toy_unet()).is_err());
    let bad = TrainConfig {
        lr: 0.0,
        ..TrainConfig::default()
    };
    assert!(bad.validate().is_err());
    assert!(Trainer::new(toy_cfg(2), toy_unet()).unwrap().step(&[]).is_err());
}
