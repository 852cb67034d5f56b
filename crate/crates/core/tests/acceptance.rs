//! Acceptance suite: one test per release criterion, each printing a
//! pass/fail line. Criteria 4, 6, and 8 share one reduced-scale training
//! fixture (built once); criterion 5 runs the attack-sanity control on the
//! same data split.
//!
//! Data: real CIFAR-10 archives are used when present under `./data` or
//! `$PIXVEIL_DATA`; otherwise a synthetic archive in the exact CIFAR binary
//! layout is generated into a temp directory and loaded through the normal
//! ingestion path. Criterion 7 (the full multi-hour protocol) is `#[ignore]`
//! and requires the real archives.

use std::path::PathBuf;
use std::sync::OnceLock;

use ndarray::{Array, Array3, Array4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

use pixveil::attack::{
    generate_identity_pairs, generate_pairs, train_inverse, verify_pairs, AttackConfig,
};
use pixveil::data::{
    augment, load_dataset, one_hot, one_hot_matrix, sample_rng, synthetic, AugmentationPolicy,
    DatasetId, DatasetSplit, LabeledImage,
};
use pixveil::error::Result;
use pixveil::eval::{accuracy, box_stats, evaluate_attack, psnr, stack_pixels};
use pixveil::gradcheck::check_gradients;
use pixveil::imageio;
use pixveil::losses::{batch_objective, feature_loss_batch};
use pixveil::models::{
    build_inverse_net, build_transform_net, load_checkpoint, save_checkpoint, ArchSpec,
    FeatureExtractor, FeatureSpec, Manifest, Params, ResNet, ResNetConfig, UNet, UNetConfig,
};
use pixveil::service::{client_protect_and_submit, serve_classifier};
use pixveil::training::{
    joint_objective, joint_step, make_lr_schedule, select_best_checkpoint, train_joint,
    EpochRecord, TrainConfig,
};

// ---------------------------------------------------------------------------
// reduced-scale fixtures
// ---------------------------------------------------------------------------

/// Transform/inverse topology for the reduced-scale runs.
fn desk_unet_cfg() -> UNetConfig {
    UNetConfig {
        base_width: 4,
        depth: 2,
        ..Default::default()
    }
}

fn desk_classifier_cfg() -> ResNetConfig {
    ResNetConfig {
        base_width: 4,
        blocks_per_stage: 1,
        num_classes: 10,
        ..Default::default()
    }
}

fn desk_train_cfg(alpha: f64) -> TrainConfig {
    TrainConfig {
        alpha,
        epochs: 20,
        batch_size: 128,
        base_lr: 0.1,
        lr_factor: 0.2,
        // the step-decay milestones of the full recipe lie beyond a
        // 20-epoch horizon, so the rate stays at 0.1 throughout
        lr_milestones: vec![],
        momentum: 0.9,
        weight_decay: 0.0005,
        seed: 7,
        dataset: DatasetId::Cifar10,
        joint: true,
        augment: AugmentationPolicy::default(),
    }
}

fn attacker_cfg() -> AttackConfig {
    AttackConfig {
        epochs: 50,
        batch_size: 128,
        base_lr: 0.1,
        lr_factor: 0.2,
        // step decay scaled into the 50-epoch attacker budget
        lr_milestones: vec![30, 42],
        momentum: 0.9,
        weight_decay: 0.0005,
        seed: 13,
        ..Default::default()
    }
}

const FEATURE_TAP: FeatureSpec = FeatureSpec::ClassifierStage { stage: 2 };
const ATTACK_PAIRS: usize = 2_000;

// ---------------------------------------------------------------------------
// fixture cache: expensive artifacts (synthetic archive, trained nets,
// attack medians) persist under the cargo tmp dir keyed by a digest of
// everything that influences them, so reruns skip the training
// ---------------------------------------------------------------------------

/// Bump to invalidate every cached training artifact.
const CACHE_VERSION: u32 = 1;

fn cache_root() -> PathBuf {
    PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance-cache")
}

fn fixture_digest() -> String {
    pixveil::models::config_digest(&(
        CACHE_VERSION,
        synthetic::GENERATOR_VERSION,
        desk_unet_cfg(),
        desk_classifier_cfg(),
        desk_train_cfg(0.005),
        desk_train_cfg(0.0),
        attacker_cfg(),
        FEATURE_TAP,
        ATTACK_PAIRS,
    ))
}

struct SharedData {
    split: DatasetSplit<f32>,
    synthesized: bool,
}

fn data() -> &'static SharedData {
    static DATA: OnceLock<SharedData> = OnceLock::new();
    DATA.get_or_init(|| {
        // prefer real archives when available
        for root in [
            std::env::var("PIXVEIL_DATA").unwrap_or_default(),
            "./data".to_string(),
        ] {
            if root.is_empty() {
                continue;
            }
            let root = PathBuf::from(root);
            if let Ok(full) = load_dataset::<f32>(DatasetId::Cifar10, &root, 11) {
                let split = full.subset(5_000, 1_000, 1_000).expect("subset");
                return SharedData {
                    split,
                    synthesized: false,
                };
            }
        }
        let dir = cache_root().join(format!(
            "synth-data-g{}-s11",
            synthetic::GENERATOR_VERSION
        ));
        std::fs::create_dir_all(&dir).expect("cache dir");
        synthetic::ensure_archive(DatasetId::Cifar10, &dir, 11).expect("synthetic archive");
        let full = load_dataset::<f32>(DatasetId::Cifar10, &dir, 11).expect("load");
        let split = full.subset(5_000, 1_000, 1_000).expect("subset");
        SharedData {
            split,
            synthesized: true,
        }
    })
}

struct DeskRun {
    transform: UNet<f32>,
    classifier: ResNet<f32>,
    records: Vec<EpochRecord>,
    best_epoch: usize,
}

struct DeskTraining {
    with_alpha: DeskRun,
    without_alpha: DeskRun,
}

fn run_desk_training(split: &DatasetSplit<f32>, alpha: f64, dir: &std::path::Path) -> DeskRun {
    let best_t = dir.join("best.transform.ckpt");
    let best_c = dir.join("best.classifier.ckpt");
    let records_path = dir.join("records.json");
    if !(best_t.is_file() && best_c.is_file() && records_path.is_file()) {
        std::fs::create_dir_all(dir).expect("run dir");
        let cfg = desk_train_cfg(alpha);
        let mut h = build_transform_net::<f32>(&desk_unet_cfg(), 21).unwrap();
        let mut psi = ResNet::build(&desk_classifier_cfg(), 22).unwrap();
        let outcome = train_joint(&cfg, split, &mut h, &mut psi, FEATURE_TAP, dir).unwrap();
        let best = select_best_checkpoint(&outcome.records, &outcome.checkpoints).unwrap();
        std::fs::copy(&best.transform_path, &best_t).unwrap();
        std::fs::copy(&best.classifier_path, &best_c).unwrap();
        std::fs::write(
            &records_path,
            serde_json::to_vec(&outcome.records).unwrap(),
        )
        .unwrap();
    }
    let records: Vec<EpochRecord> =
        serde_json::from_slice(&std::fs::read(&records_path).unwrap()).unwrap();
    let (handle, manifest) = load_checkpoint::<f32>(&best_t).unwrap();
    let transform = handle.into_unet().unwrap();
    let classifier = load_checkpoint::<f32>(&best_c)
        .unwrap()
        .0
        .into_classifier()
        .unwrap();
    DeskRun {
        transform,
        classifier,
        records,
        best_epoch: manifest.epoch,
    }
}

fn desk() -> &'static DeskTraining {
    static DESK: OnceLock<DeskTraining> = OnceLock::new();
    DESK.get_or_init(|| {
        let shared = data();
        let dir = cache_root().join(format!("desk-{}", &fixture_digest()[..12]));
        let with_alpha = run_desk_training(&shared.split, 0.005, &dir.join("a"));
        let without_alpha = run_desk_training(&shared.split, 0.0, &dir.join("zero"));
        DeskTraining {
            with_alpha,
            without_alpha,
        }
    })
}

fn cached_median(tag: &str, compute: impl FnOnce() -> f64) -> f64 {
    let path = cache_root().join(format!("{tag}-{}.json", &fixture_digest()[..12]));
    if let Ok(bytes) = std::fs::read(&path) {
        if let Ok(v) = serde_json::from_slice::<f64>(&bytes) {
            return v;
        }
    }
    let v = compute();
    std::fs::create_dir_all(cache_root()).ok();
    std::fs::write(&path, serde_json::to_vec(&v).unwrap()).ok();
    v
}

/// Held-out median PSNR of the attack-sanity control (identity transform).
fn control_median() -> f64 {
    static CONTROL: OnceLock<f64> = OnceLock::new();
    *CONTROL.get_or_init(|| {
        cached_median("control", || {
            let shared = data();
            let images: Vec<Array3<f32>> = shared.split.train[..ATTACK_PAIRS]
                .iter()
                .map(|img| img.pixels.clone())
                .collect();
            let pairs = generate_identity_pairs(&images).unwrap();
            let mut g = build_inverse_net::<f32>(&desk_unet_cfg(), 99).unwrap();
            train_inverse(&pairs, &mut g, &attacker_cfg()).unwrap();
            let report =
                evaluate_attack(&g, None, &shared.split.test, 1.0, "control".into()).unwrap();
            report
                .box_stats
                .map(|b| b.median)
                .unwrap_or(f64::INFINITY)
        })
    })
}

fn mean_protected_psnr(transform: &UNet<f32>, test: &[LabeledImage<f32>]) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for chunk in test.chunks(250) {
        let refs: Vec<&Array3<f32>> = chunk.iter().map(|img| &img.pixels).collect();
        let batch = stack_pixels(&refs).unwrap();
        let protected = transform.infer(&batch).unwrap();
        for (i, img) in chunk.iter().enumerate() {
            let v = psnr(
                &protected.index_axis(Axis(0), i).to_owned(),
                &img.pixels,
                1.0,
            )
            .unwrap();
            if v.is_finite() {
                sum += v;
                n += 1;
            }
        }
    }
    sum / n as f64
}

// ---------------------------------------------------------------------------
// toy fixtures for the fast criteria
// ---------------------------------------------------------------------------

fn toy_transform_cfg() -> UNetConfig {
    UNetConfig {
        base_width: 4,
        depth: 1,
        batch_norm: false,
        ..Default::default()
    }
}

fn toy_classifier_cfg(classes: usize) -> ResNetConfig {
    ResNetConfig {
        base_width: 4,
        blocks_per_stage: 1,
        num_classes: classes,
        batch_norm: false,
        ..Default::default()
    }
}

fn toy_batch(m: usize, seed: u64) -> Array4<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array::from_shape_simple_fn((m, 3, 8, 8), || rng.gen::<f64>())
}

/// Tiny labeled 8×8 set with class-dependent colors; learnable in a few
/// epochs.
fn toy_dataset(n_train: usize, n_val: usize, classes: usize, seed: u64) -> DatasetSplit<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut make = |n: usize| -> Vec<LabeledImage<f64>> {
        (0..n)
            .map(|i| {
                let label = i % classes;
                let base = label as f64 / classes as f64;
                let pixels = Array::from_shape_simple_fn((3, 8, 8), || {
                    (base + 0.25 * rng.gen::<f64>()).clamp(0.0, 1.0)
                });
                LabeledImage { pixels, label }
            })
            .collect()
    };
    DatasetSplit {
        train: make(n_train),
        val: make(n_val),
        test: make(n_val),
        classes,
    }
}

// ---------------------------------------------------------------------------
// criteria
// ---------------------------------------------------------------------------

#[test]
fn criterion_1_property_suite() {
    // one-hot: single nonzero at the label for every class count
    for c in 1..=12 {
        for label in 0..c {
            let v = one_hot::<f64>(label, c).unwrap();
            assert_eq!(v.entries.iter().filter(|&&e| e != 0.0).count(), 1);
            assert_eq!(v.class_index(), label);
            assert_eq!(v.entries.sum(), 1.0);
        }
    }

    // augmentation never changes shape, label, or range
    let imgs = toy_dataset(16, 4, 4, 3);
    let policy = AugmentationPolicy::default();
    for (i, img) in imgs.train.iter().enumerate() {
        let mut rng = sample_rng(5, 1, i);
        let out = augment(img, &policy, &mut rng);
        assert_eq!(out.pixels.dim(), img.pixels.dim());
        assert_eq!(out.label, img.label);
        assert!(out.pixels.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    // deterministic ingestion: same (name, split_seed) -> same membership
    {
        let dir = TempDir::new().unwrap();
        synthetic::write_archive_sized(DatasetId::Cifar100, dir.path(), 4, 600, 100).unwrap();
        // full-profile loads need full archives; compare raw record identity
        let a = std::fs::read(dir.path().join("cifar-100-binary/train.bin")).unwrap();
        synthetic::write_archive_sized(DatasetId::Cifar100, dir.path(), 4, 600, 100).unwrap();
        let b = std::fs::read(dir.path().join("cifar-100-binary/train.bin")).unwrap();
        assert_eq!(a, b);
    }
    {
        // split membership determinism and disjointness on the shared data
        let shared = data();
        let s = &shared.split;
        assert_eq!(s.train.len(), 5_000);
        assert_eq!(s.val.len(), 1_000);
        assert_eq!(s.test.len(), 1_000);
    }

    // simplex contract on random inputs
    let psi: ResNet<f64> = ResNet::build(&toy_classifier_cfg(10), 1).unwrap();
    let x = toy_batch(8, 2);
    let probs = psi.classify(&x).unwrap();
    for row in probs.outer_iter() {
        assert!((row.sum() - 1.0).abs() < 1e-5);
        assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
    }

    // transform shape/range contract and eval determinism
    let h: UNet<f64> = UNet::build(&toy_transform_cfg(), 3).unwrap();
    let y1 = h.infer(&x).unwrap();
    let y2 = h.infer(&x).unwrap();
    assert_eq!(y1.dim(), x.dim());
    assert_eq!(y1, y2);
    assert!(y1.iter().all(|&v| (0.0..=1.0).contains(&v)));

    // seeded construction is reproducible bit for bit
    let h2: UNet<f64> = UNet::build(&toy_transform_cfg(), 3).unwrap();
    let mut params = Vec::new();
    h.visit("", &mut |_, _, v| params.push(v.to_owned()));
    let mut i = 0;
    h2.visit("", &mut |_, _, v| {
        assert_eq!(v, params[i].view());
        i += 1;
    });

    // loss decomposition is affine in alpha
    let phi = FeatureExtractor::<f64>::identity();
    let targets = one_hot_matrix::<f64>(&[0, 1, 2, 3, 0, 1, 2, 3], 10).unwrap();
    let t1 = batch_objective(&x, &targets, &h, &psi, &phi, 0.003).unwrap();
    let t2 = batch_objective(&x, &targets, &h, &psi, &phi, 0.31).unwrap();
    let slope = (t1 - t2) / (0.31 - 0.003);
    let x_hat = h.infer(&x).unwrap();
    let feat = feature_loss_batch(&x, &x_hat, &phi).unwrap().sum() / 8.0;
    assert!((slope - feat).abs() < 1e-9);

    // psnr symmetry and peak scaling
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..25 {
        let a: Array3<f64> = Array::from_shape_simple_fn((3, 6, 6), || rng.gen());
        let b: Array3<f64> = Array::from_shape_simple_fn((3, 6, 6), || rng.gen());
        let ab = psnr(&a, &b, 1.0).unwrap();
        assert!((ab - psnr(&b, &a, 1.0).unwrap()).abs() < 1e-12);
        let k = 2.5;
        let scaled = psnr(&a.mapv(|v| v * k), &b.mapv(|v| v * k), k).unwrap();
        assert!((ab - scaled).abs() < 1e-9);
    }

    // box statistics equal the sort-and-interpolate oracle on 200 instances
    for trial in 0..200 {
        let n = 1 + (trial * 5) % 1000;
        let values: Vec<f64> = (0..n).map(|_| 40.0 * rng.gen::<f64>() - 5.0).collect();
        let b = box_stats(&values).unwrap();
        let mut sorted = values.clone();
        sorted.sort_by(|x, y| x.partial_cmp(y).unwrap());
        let q = |p: f64| {
            let pos = p * (n as f64 - 1.0);
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(n - 1);
            sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
        };
        assert!((b.q1 - q(0.25)).abs() < 1e-9);
        assert!((b.median - q(0.5)).abs() < 1e-9);
        assert!((b.q3 - q(0.75)).abs() < 1e-9);
        let iqr = b.q3 - b.q1;
        let wl = sorted.iter().cloned().find(|&v| v >= b.q1 - 1.5 * iqr).unwrap();
        let wh = sorted.iter().rev().cloned().find(|&v| v <= b.q3 + 1.5 * iqr).unwrap();
        assert_eq!(b.whisker_low, wl);
        assert_eq!(b.whisker_high, wh);
        assert!(b.q1 <= b.median && b.median <= b.q3);
    }

    // checkpoint round-trip is lossless
    {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("t.ckpt");
        let mut manifest = Manifest::new(ArchSpec::Transform(toy_transform_cfg()));
        manifest.alpha = Some(0.005);
        save_checkpoint(&h, &manifest, &path).unwrap();
        let (restored, m) = load_checkpoint::<f64>(&path).unwrap();
        assert_eq!(m.alpha, Some(0.005));
        let restored = restored.into_unet().unwrap();
        let mut i = 0;
        restored.visit("", &mut |_, _, v| {
            assert_eq!(v, params[i].view());
            i += 1;
        });
    }

    // argmin selection with earliest-epoch tie-break is covered by unit
    // tests; re-check the invariant that the winner is <= every record here
    {
        use pixveil::training::EpochCheckpoint;
        let vals = [0.4, 0.2, 0.2, 0.9];
        let records: Vec<EpochRecord> = vals
            .iter()
            .enumerate()
            .map(|(i, &v)| EpochRecord {
                epoch: i + 1,
                lr: 0.1,
                train_total: 0.0,
                train_class: 0.0,
                train_feat: 0.0,
                val_total: v,
                val_accuracy: 0.0,
            })
            .collect();
        let ckpts: Vec<EpochCheckpoint> = records
            .iter()
            .map(|r| EpochCheckpoint {
                epoch: r.epoch,
                transform_path: PathBuf::new(),
                classifier_path: PathBuf::new(),
                val_total: r.val_total,
            })
            .collect();
        let best = select_best_checkpoint(&records, &ckpts).unwrap();
        assert_eq!(best.epoch, 2);
        assert!(records.iter().all(|r| best.val_total <= r.val_total));
    }

    // attack pair fidelity under the generating transform
    {
        let images: Vec<Array3<f64>> = toy_dataset(6, 2, 3, 12)
            .train
            .into_iter()
            .map(|img| img.pixels)
            .collect();
        let pairs = generate_pairs(&h, &images).unwrap();
        verify_pairs(&h, &pairs).unwrap();
        let other: UNet<f64> = UNet::build(&toy_transform_cfg(), 77).unwrap();
        assert!(verify_pairs(&other, &pairs).is_err());
    }

    // smoke descent: 10 toy epochs with alpha = 0 reduce the class loss
    {
        let split = toy_dataset(200, 20, 10, 31);
        let mut cfg = desk_train_cfg(0.0);
        cfg.epochs = 10;
        cfg.batch_size = 32;
        cfg.base_lr = 0.05;
        cfg.augment.enabled = false;
        let mut h_toy: UNet<f64> = UNet::build(&toy_transform_cfg(), 41).unwrap();
        let mut psi_toy: ResNet<f64> = ResNet::build(&toy_classifier_cfg(10), 42).unwrap();
        let dir = TempDir::new().unwrap();
        let data_cfg = cfg.clone();
        let split10 = split;
        let outcome = train_joint(
            &data_cfg,
            &split10,
            &mut h_toy,
            &mut psi_toy,
            FeatureSpec::Identity,
            dir.path(),
        )
        .unwrap();
        let first = outcome.records.first().unwrap();
        let last = outcome.records.last().unwrap();
        assert!(
            last.train_class < first.train_class,
            "class loss should descend: {} -> {}",
            first.train_class,
            last.train_class
        );
        // alpha = 0 keeps total equal to the class term
        for r in &outcome.records {
            assert!((r.train_total - r.train_class).abs() < 1e-12);
        }

        // reproducibility: a second identical run yields identical records
        let mut h_2: UNet<f64> = UNet::build(&toy_transform_cfg(), 41).unwrap();
        let mut psi_2: ResNet<f64> = ResNet::build(&toy_classifier_cfg(10), 42).unwrap();
        let dir2 = TempDir::new().unwrap();
        let outcome2 = train_joint(
            &data_cfg,
            &split10,
            &mut h_2,
            &mut psi_2,
            FeatureSpec::Identity,
            dir2.path(),
        )
        .unwrap();
        for (a, b) in outcome.records.iter().zip(outcome2.records.iter()) {
            assert_eq!(a.train_total, b.train_total);
            assert_eq!(a.val_total, b.val_total);
            assert_eq!(a.val_accuracy, b.val_accuracy);
        }
        let mut p1 = Vec::new();
        h_toy.visit("", &mut |_, _, v| p1.push(v.to_owned()));
        let mut i = 0;
        h_2.visit("", &mut |_, _, v| {
            assert_eq!(v, p1[i].view(), "transform params must be bitwise equal");
            i += 1;
        });
    }

    println!("criterion 1: module invariants hold");
}

#[test]
fn criterion_2_gradient_check() {
    let x = toy_batch(4, 100);
    let targets = one_hot_matrix::<f64>(&[0, 1, 1, 0], 2).unwrap();
    let alpha = 0.01;
    let h: UNet<f64> = UNet::build(&toy_transform_cfg(), 50).unwrap();
    let psi: ResNet<f64> = ResNet::build(&toy_classifier_cfg(2), 51).unwrap();

    // transform-parameter gradients against central differences
    let report_h = check_gradients(
        &h,
        &mut |h_t: &mut UNet<f64>| {
            let mut psi_c = psi.clone();
            joint_step(h_t, &mut psi_c, FeatureSpec::Identity, &x, &targets, alpha, true, true)
                .map(|s| s.total_mean)
        },
        &mut |h_t: &mut UNet<f64>| {
            let mut psi_c = psi.clone();
            joint_objective(h_t, &mut psi_c, FeatureSpec::Identity, &x, &targets, alpha, true)
        },
        220,
        1e-5,
        1234,
    )
    .unwrap();
    println!(
        "criterion 2: transform gradients, {} params checked, max rel err {:.3e} ({})",
        report_h.checked, report_h.max_rel_err, report_h.worst
    );
    assert!(report_h.checked >= 200);
    assert!(
        report_h.max_rel_err < 1e-4,
        "transform gradient mismatch: {} at {}",
        report_h.max_rel_err,
        report_h.worst
    );

    // classifier-parameter gradients (the class term is the only path)
    let report_psi = check_gradients(
        &psi,
        &mut |psi_t: &mut ResNet<f64>| {
            let mut h_c = h.clone();
            joint_step(&mut h_c, psi_t, FeatureSpec::Identity, &x, &targets, alpha, true, true)
                .map(|s| s.total_mean)
        },
        &mut |psi_t: &mut ResNet<f64>| {
            let mut h_c = h.clone();
            joint_objective(&mut h_c, psi_t, FeatureSpec::Identity, &x, &targets, alpha, true)
        },
        220,
        1e-5,
        4321,
    )
    .unwrap();
    println!(
        "criterion 2: classifier gradients, {} params checked, max rel err {:.3e}",
        report_psi.checked, report_psi.max_rel_err
    );
    assert!(
        report_psi.max_rel_err < 1e-4,
        "classifier gradient mismatch: {} at {}",
        report_psi.max_rel_err,
        report_psi.worst
    );
}

#[test]
fn criterion_3_schedule_reproduction() {
    let s = make_lr_schedule(0.1, &[60, 120, 160], 0.2).unwrap();
    let expected = [
        (1, 0.1),
        (59, 0.1),
        (60, 0.02),
        (119, 0.02),
        (120, 0.004),
        (159, 0.004),
        (160, 0.0008),
        (200, 0.0008),
    ];
    for (epoch, want) in expected {
        let got = s.lr(epoch);
        assert!(
            (got - want).abs() < 1e-12,
            "epoch {epoch}: lr {got}, expected {want}"
        );
    }
    println!("criterion 3: lr regimes 0.1 / 0.02 / 0.004 / 0.0008 reproduced");
}

#[test]
fn criterion_4_desk_scale_protection() {
    let shared = data();
    let desk = desk();

    let acc = accuracy(
        Some(&desk.with_alpha.transform),
        &desk.with_alpha.classifier,
        &shared.split.test,
    )
    .unwrap();

    let feat_alpha = desk.with_alpha.records.last().unwrap().train_feat;
    let feat_zero = desk.without_alpha.records.last().unwrap().train_feat;

    let psnr_alpha = mean_protected_psnr(&desk.with_alpha.transform, &shared.split.test);
    let psnr_zero = mean_protected_psnr(&desk.without_alpha.transform, &shared.split.test);

    println!(
        "criterion 4: data={}, best epoch {}, protected accuracy {acc:.2}%, \
         final feat {feat_alpha:.4} (alpha=0.005) vs {feat_zero:.4} (alpha=0), \
         protected-vs-plain psnr {psnr_alpha:.2} dB vs {psnr_zero:.2} dB",
        if shared.synthesized { "synthetic cifar-layout" } else { "cifar-10" },
        desk.with_alpha.best_epoch,
    );

    assert!(acc >= 35.0, "protected-test accuracy {acc:.2}% below 35%");
    assert!(
        feat_alpha > feat_zero,
        "feature term did not engage: {feat_alpha} <= {feat_zero}"
    );
    assert!(
        psnr_alpha < psnr_zero,
        "alpha=0.005 should distort more than alpha=0: {psnr_alpha} >= {psnr_zero}"
    );
}

#[test]
fn criterion_5_attack_positive_control() {
    let median = control_median();
    println!("criterion 5: identity-control held-out median psnr {median:.2} dB");
    assert!(
        median > 25.0,
        "attack machinery failed to invert the identity map: median {median:.2} dB"
    );
}

#[test]
fn criterion_6_attack_robustness() {
    let control = control_median();
    let median = cached_median("attack6", || {
        let shared = data();
        let desk = desk();
        let images: Vec<Array3<f32>> = shared.split.train[..ATTACK_PAIRS]
            .iter()
            .map(|img| img.pixels.clone())
            .collect();
        let pairs = generate_pairs(&desk.with_alpha.transform, &images).unwrap();
        verify_pairs(&desk.with_alpha.transform, &pairs).unwrap();
        let mut g = build_inverse_net::<f32>(&desk_unet_cfg(), 99).unwrap();
        train_inverse(&pairs, &mut g, &attacker_cfg()).unwrap();
        let report = evaluate_attack(
            &g,
            Some(&desk.with_alpha.transform),
            &shared.split.test,
            1.0,
            "robustness".into(),
        )
        .unwrap();
        report.box_stats.map(|b| b.median).unwrap_or(f64::INFINITY)
    });
    println!(
        "criterion 6: attacked median psnr {median:.2} dB vs control {control:.2} dB \
         (margin {:.2} dB)",
        control - median
    );
    assert!(
        median <= control - 10.0,
        "attack reconstructed too well: median {median:.2} dB vs control {control:.2} dB"
    );
}

/// Full §-scale reproduction of the published accuracy table. Multi-hour
/// runtime and requires the real CIFAR archives, so it never runs in the
/// default suite.
#[test]
#[ignore = "full-protocol run: 200 epochs on the complete splits, multi-hour; needs real CIFAR archives under ./data or $PIXVEIL_DATA"]
fn criterion_7_full_protocol_reproduction() {
    fn full_run(id: DatasetId, expected: f64, tol: f64) -> Result<()> {
        let root = std::env::var("PIXVEIL_DATA").unwrap_or_else(|_| "./data".into());
        let split = load_dataset::<f32>(id, std::path::Path::new(&root), 11)?;
        let mut cfg = TrainConfig {
            dataset: id,
            seed: 7,
            ..Default::default()
        };
        cfg.alpha = 0.005;
        let mut h = build_transform_net::<f32>(&UNetConfig::default(), 21)?;
        let mut psi = ResNet::build(
            &ResNetConfig {
                num_classes: id.classes(),
                ..Default::default()
            },
            22,
        )?;
        let out = TempDir::new().expect("out dir");
        let outcome = train_joint(&cfg, &split, &mut h, &mut psi, FEATURE_TAP, out.path())?;
        let best = select_best_checkpoint(&outcome.records, &outcome.checkpoints)?;
        let h = load_checkpoint::<f32>(&best.transform_path)?.0.into_unet()?;
        let psi = load_checkpoint::<f32>(&best.classifier_path)?.0.into_classifier()?;
        let acc = accuracy(Some(&h), &psi, &split.test)?;
        println!(
            "criterion 7: {} accuracy {acc:.2}% (target {expected} ± {tol})",
            id.name()
        );
        assert!(
            (acc - expected).abs() <= tol,
            "{} accuracy {acc:.2}% outside {expected} ± {tol}",
            id.name()
        );
        Ok(())
    }
    full_run(DatasetId::Cifar10, 91.72, 1.5).unwrap();
    full_run(DatasetId::Cifar100, 70.78, 2.0).unwrap();
}

#[test]
fn criterion_8_client_server_equivalence() {
    let shared = data();
    let desk = desk();
    let h = &desk.with_alpha.transform;
    let psi = desk.with_alpha.classifier.clone();

    let server = serve_classifier(psi.clone(), "acceptance".into(), "127.0.0.1:0").unwrap();
    let addr = server.local_addr.to_string();

    let mut max_prob_diff = 0.0f64;
    let mut max_payload_psnr = f64::NEG_INFINITY;
    for img in shared.split.test.iter().take(100) {
        let (response, payload) = client_protect_and_submit(h, &img.pixels, &addr, 3).unwrap();

        // local pipeline on the identical protected bytes
        let wire_image: Array3<f32> = imageio::decode_png(&payload).unwrap();
        let batch = stack_pixels(&[&wire_image]).unwrap();
        let local = psi.classify(&batch).unwrap();
        let row = local.index_axis(Axis(0), 0);
        for (served, local_p) in response.probabilities.iter().zip(row.iter()) {
            max_prob_diff = max_prob_diff.max((served - *local_p as f64).abs());
        }

        // the wire payload must be a protected image, not the plain one
        let v = psnr(&wire_image, &img.pixels, 1.0).unwrap();
        max_payload_psnr = max_payload_psnr.max(v);
    }
    server.shutdown();

    println!(
        "criterion 8: max served-vs-local probability diff {max_prob_diff:.2e}, \
         max payload-vs-plain psnr {max_payload_psnr:.2} dB"
    );
    assert!(
        max_prob_diff <= 1e-5,
        "served probabilities diverge from the local pipeline: {max_prob_diff}"
    );
    assert!(
        max_payload_psnr < 15.0,
        "wire payload resembles the plain image: {max_payload_psnr:.2} dB"
    );
}
