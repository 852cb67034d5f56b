//! Joint optimization of the transformation network and the classifier:
//! momentum SGD with weight decay, a step-decay learning-rate schedule,
//! per-epoch validation, per-epoch checkpoints, and best-checkpoint
//! selection by validation loss.

pub mod sgd;

use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{
    augment, one_hot_matrix, sample_rng, AugmentationPolicy, DatasetId, DatasetSplit,
    LabeledImage,
};
use crate::error::{Error, Result};
use crate::eval::{accuracy, stack_pixels};
use crate::losses::{feature_distance_per_sample, softmax_ce_with_grad};
use crate::models::{
    save_checkpoint, ArchSpec, FeatureExtractor, FeatureSpec, Manifest, Mode, Params, ResNet,
    SeedInfo, UNet,
};
use crate::scalar::Scalar;

pub use sgd::{sgd_update_tensor, Sgd};

/// Hyperparameters of one protection-training run. The default is the full
/// training recipe; reduced-scale runs override fields explicitly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Weight of the feature-reconstruction term.
    pub alpha: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub lr_factor: f64,
    pub lr_milestones: Vec<usize>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub dataset: DatasetId,
    /// Update the classifier together with the transform; with `false` the
    /// classifier is frozen (ablation mode).
    pub joint: bool,
    pub augment: AugmentationPolicy,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: 0.005,
            epochs: 200,
            batch_size: 128,
            base_lr: 0.1,
            lr_factor: 0.2,
            lr_milestones: vec![60, 120, 160],
            momentum: 0.9,
            weight_decay: 0.0005,
            seed: 0,
            dataset: DatasetId::Cifar10,
            joint: true,
            augment: AugmentationPolicy::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.alpha < 0.0 {
            return Err(Error::Config("alpha must be nonnegative".into()));
        }
        if !self.lr_milestones.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Config(
                "lr_milestones must be strictly increasing".into(),
            ));
        }
        if self.lr_milestones.iter().any(|&m| m >= self.epochs) {
            return Err(Error::Config(format!(
                "lr_milestones must lie below epochs ({})",
                self.epochs
            )));
        }
        if self.base_lr <= 0.0 || self.lr_factor <= 0.0 {
            return Err(Error::Config("base_lr and lr_factor must be positive".into()));
        }
        self.augment.validate()
    }
}

/// Step-decay schedule: the base rate is multiplied by `factor` at the start
/// of each milestone epoch (epochs are 1-indexed).
#[derive(Clone, Debug)]
pub struct LrSchedule {
    base: f64,
    factor: f64,
    milestones: Vec<usize>,
}

pub fn make_lr_schedule(base: f64, milestones: &[usize], factor: f64) -> Result<LrSchedule> {
    if base <= 0.0 || factor <= 0.0 {
        return Err(Error::Config("lr schedule needs base > 0 and factor > 0".into()));
    }
    if !milestones.windows(2).all(|w| w[0] < w[1]) {
        return Err(Error::Config(
            "lr milestones must be strictly increasing".into(),
        ));
    }
    Ok(LrSchedule {
        base,
        factor,
        milestones: milestones.to_vec(),
    })
}

impl LrSchedule {
    pub fn lr(&self, epoch: usize) -> f64 {
        let crossed = self.milestones.iter().filter(|&&m| m <= epoch).count();
        self.base * self.factor.powi(crossed as i32)
    }
}

/// Per-epoch metrics row.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_total: f64,
    pub train_class: f64,
    pub train_feat: f64,
    pub val_total: f64,
    pub val_accuracy: f64,
}

pub const METRICS_HEADER: &str =
    "epoch,lr,train_total,train_class,train_feat,val_total,val_accuracy";

impl EpochRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.epoch,
            self.lr,
            self.train_total,
            self.train_class,
            self.train_feat,
            self.val_total,
            self.val_accuracy
        )
    }
}

/// Paths of the per-epoch snapshot pair.
#[derive(Clone, Debug)]
pub struct EpochCheckpoint {
    pub epoch: usize,
    pub transform_path: PathBuf,
    pub classifier_path: PathBuf,
    pub val_total: f64,
}

pub struct TrainOutcome {
    pub checkpoints: Vec<EpochCheckpoint>,
    pub records: Vec<EpochRecord>,
    pub metrics_path: PathBuf,
}

/// Seed-derived permutation of `0..n` for epoch shuffling.
fn epoch_permutation(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(
        seed ^ (epoch as u64).wrapping_mul(0xD1B5_4A32_D192_ED03),
    );
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    order
}

/// Average loss terms over a batch.
#[derive(Clone, Copy, Debug)]
pub struct StepStats {
    pub class_mean: f64,
    pub feat_mean: f64,
    pub total_mean: f64,
}

/// One forward/backward pass of the composite objective over a minibatch.
///
/// Gradients of the mean objective accumulate into both networks when
/// `accumulate` is set. The feature term backpropagates into the transform
/// only through the protected image; when the extractor taps the classifier,
/// that path contributes no classifier-parameter gradients (the feature
/// yardstick is never optimized to cheat) and runs with eval semantics so
/// features stay a deterministic function of the image.
pub fn joint_step<T: Scalar>(
    h: &mut UNet<T>,
    psi: &mut ResNet<T>,
    phi: FeatureSpec,
    x: &Array4<T>,
    targets: &Array2<T>,
    alpha: T,
    accumulate: bool,
    psi_trainable: bool,
) -> Result<StepStats> {
    let m = x.dim().0;
    if m == 0 {
        return Err(Error::Domain("empty minibatch".into()));
    }
    let minv = T::from_f64(1.0 / m as f64);
    let x_hat = h.forward(x, Mode::Train)?;

    // feature branch first: its prefix caches may be overwritten by the
    // classification pass below
    let (feat_mean, dxh_feat) = match phi {
        FeatureSpec::Identity => {
            let per = feature_distance_per_sample(x, &x_hat);
            let n = T::from_f64((x.len() / m) as f64);
            let two = T::from_f64(2.0);
            let mut d = &x_hat - x;
            d.mapv_inplace(|v| v * two / n);
            (per.sum() * minv, d)
        }
        FeatureSpec::ClassifierStage { stage } => {
            let fx = psi.infer_prefix(x, stage)?;
            let fxh = psi.forward_prefix(&x_hat, stage, Mode::EvalCached)?;
            let per = feature_distance_per_sample(&fx, &fxh);
            let n = T::from_f64((fx.len() / m) as f64);
            let two = T::from_f64(2.0);
            let mut dfeat = &fxh - &fx;
            dfeat.mapv_inplace(|v| v * two / n);
            let d = psi.backward_prefix(&dfeat, stage, false);
            (per.sum() * minv, d)
        }
    };

    let psi_mode = if psi_trainable { Mode::Train } else { Mode::EvalCached };
    let logits = psi.forward(&x_hat, psi_mode)?;
    let (ce, mut dlogits) = softmax_ce_with_grad(&logits, targets);
    dlogits.mapv_inplace(|v| v * minv);
    let dxh_class = psi.backward(&dlogits, accumulate && psi_trainable);

    let class_mean = ce.sum() * minv;
    let scale = alpha * minv;
    let mut dxh = dxh_class;
    ndarray::Zip::from(&mut dxh).and(&dxh_feat).for_each(|d, &f| {
        *d = *d - scale * f;
    });
    h.backward(&dxh, accumulate);

    let total = class_mean - alpha * feat_mean;
    Ok(StepStats {
        class_mean: class_mean.as_f64(),
        feat_mean: feat_mean.as_f64(),
        total_mean: total.as_f64(),
    })
}

/// The composite objective evaluated with the same train-phase semantics as
/// [`joint_step`], without touching gradients. Used by the gradient checks.
pub fn joint_objective<T: Scalar>(
    h: &mut UNet<T>,
    psi: &mut ResNet<T>,
    phi: FeatureSpec,
    x: &Array4<T>,
    targets: &Array2<T>,
    alpha: T,
    psi_trainable: bool,
) -> Result<f64> {
    let m = x.dim().0;
    let minv = T::from_f64(1.0 / m as f64);
    let x_hat = h.forward(x, Mode::Train)?;
    let feat_mean = match phi {
        FeatureSpec::Identity => feature_distance_per_sample(x, &x_hat).sum() * minv,
        FeatureSpec::ClassifierStage { stage } => {
            let fx = psi.infer_prefix(x, stage)?;
            let fxh = psi.infer_prefix(&x_hat, stage)?;
            feature_distance_per_sample(&fx, &fxh).sum() * minv
        }
    };
    let psi_mode = if psi_trainable { Mode::Train } else { Mode::EvalCached };
    let logits = psi.forward(&x_hat, psi_mode)?;
    let (ce, _) = softmax_ce_with_grad(&logits, targets);
    let class_mean = ce.sum() * minv;
    Ok((class_mean - alpha * feat_mean).as_f64())
}

fn assemble_batch<T: Scalar>(
    images: &[LabeledImage<T>],
    indices: &[usize],
    policy: &AugmentationPolicy,
    seed: u64,
    epoch: usize,
    classes: usize,
) -> Result<(Array4<T>, Array2<T>)> {
    let augmented: Vec<Array3<T>> = indices
        .iter()
        .map(|&idx| {
            let mut rng = sample_rng(seed, epoch, idx);
            augment(&images[idx], policy, &mut rng).pixels
        })
        .collect();
    let refs: Vec<&Array3<T>> = augmented.iter().collect();
    let batch = stack_pixels(&refs)?;
    let labels: Vec<usize> = indices.iter().map(|&idx| images[idx].label).collect();
    let targets = one_hot_matrix(&labels, classes)?;
    Ok((batch, targets))
}

/// Mean composite objective over a sample list, inference semantics, no
/// augmentation.
pub fn dataset_objective<T: Scalar>(
    h: &UNet<T>,
    psi: &ResNet<T>,
    phi: FeatureSpec,
    images: &[LabeledImage<T>],
    classes: usize,
    alpha: T,
    chunk: usize,
) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::Domain("objective over an empty sample list".into()));
    }
    let bound = FeatureExtractor::bind(phi, psi)?;
    let mut total = 0.0f64;
    for part in images.chunks(chunk) {
        let refs: Vec<&Array3<T>> = part.iter().map(|img| &img.pixels).collect();
        let batch = stack_pixels(&refs)?;
        let labels: Vec<usize> = part.iter().map(|img| img.label).collect();
        let targets = one_hot_matrix(&labels, classes)?;
        let mean = crate::losses::batch_objective(&batch, &targets, h, psi, &bound, alpha)?;
        total += mean.as_f64() * part.len() as f64;
    }
    Ok(total / images.len() as f64)
}

/// Train the transform and classifier jointly. Writes one checkpoint pair
/// and one metrics row per epoch under `out_dir`, and aborts with a
/// diagnostic if the loss goes non-finite.
pub fn train_joint<T: Scalar>(
    cfg: &TrainConfig,
    data: &DatasetSplit<T>,
    h: &mut UNet<T>,
    psi: &mut ResNet<T>,
    phi: FeatureSpec,
    out_dir: &Path,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.classes != cfg.dataset.classes() {
        return Err(Error::Config(format!(
            "dataset split has {} classes but cfg.dataset {} expects {}",
            data.classes,
            cfg.dataset.name(),
            cfg.dataset.classes()
        )));
    }
    if data.train.is_empty() || data.val.is_empty() {
        return Err(Error::Config("train and validation splits must be non-empty".into()));
    }
    FeatureExtractor::bind(phi, psi)?;
    std::fs::create_dir_all(out_dir)?;

    let schedule = make_lr_schedule(cfg.base_lr, &cfg.lr_milestones, cfg.lr_factor)?;
    let alpha = T::from_f64(cfg.alpha);
    let mut opt_h = Sgd::new(T::from_f64(cfg.momentum), T::from_f64(cfg.weight_decay));
    let mut opt_psi = Sgd::new(T::from_f64(cfg.momentum), T::from_f64(cfg.weight_decay));

    let metrics_path = out_dir.join("metrics.csv");
    let mut metrics = File::create(&metrics_path)
        .map_err(|e| Error::File(format!("cannot create {}: {e}", metrics_path.display())))?;
    writeln!(metrics, "{METRICS_HEADER}")?;

    let mut records = Vec::with_capacity(cfg.epochs);
    let mut checkpoints = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        let lr = schedule.lr(epoch);
        let lr_t = T::from_f64(lr);
        let order = epoch_permutation(cfg.seed, epoch, data.train.len());
        let mut sums = (0.0f64, 0.0f64, 0.0f64);
        let mut seen = 0usize;
        for (batch_idx, part) in order.chunks(cfg.batch_size).enumerate() {
            let (batch, targets) =
                assemble_batch(&data.train, part, &cfg.augment, cfg.seed, epoch, data.classes)?;
            h.zero_grads();
            psi.zero_grads();
            let stats = joint_step(h, psi, phi, &batch, &targets, alpha, true, cfg.joint)?;
            if !stats.total_mean.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    batch: batch_idx,
                    detail: format!(
                        "loss {} (class {}, feat {})",
                        stats.total_mean, stats.class_mean, stats.feat_mean
                    ),
                });
            }
            opt_h.step(h, lr_t)?;
            if cfg.joint {
                opt_psi.step(psi, lr_t)?;
            }
            let mb = part.len() as f64;
            sums.0 += stats.total_mean * mb;
            sums.1 += stats.class_mean * mb;
            sums.2 += stats.feat_mean * mb;
            seen += part.len();
        }

        let val_total = dataset_objective(
            h,
            psi,
            phi,
            &data.val,
            data.classes,
            alpha,
            cfg.batch_size.max(128),
        )?;
        let val_accuracy = accuracy(Some(h), psi, &data.val)?;
        let record = EpochRecord {
            epoch,
            lr,
            train_total: sums.0 / seen as f64,
            train_class: sums.1 / seen as f64,
            train_feat: sums.2 / seen as f64,
            val_total,
            val_accuracy,
        };
        writeln!(metrics, "{}", record.csv_row())?;
        metrics.flush()?;

        let seeds = SeedInfo {
            init: cfg.seed,
            train: Some(cfg.seed),
            split: None,
        };
        let mut manifest_h = Manifest::new(ArchSpec::Transform(h.cfg.clone()));
        manifest_h.epoch = epoch;
        manifest_h.val_loss = Some(val_total);
        manifest_h.alpha = Some(cfg.alpha);
        manifest_h.seeds = seeds.clone();
        manifest_h.dataset = Some(cfg.dataset.name().to_string());
        let transform_path = out_dir.join(format!("epoch_{epoch:03}.transform.ckpt"));
        save_checkpoint(h, &manifest_h, &transform_path)?;

        let mut manifest_psi = Manifest::new(ArchSpec::Classifier(psi.cfg.clone()));
        manifest_psi.epoch = epoch;
        manifest_psi.val_loss = Some(val_total);
        manifest_psi.alpha = Some(cfg.alpha);
        manifest_psi.seeds = seeds;
        manifest_psi.dataset = Some(cfg.dataset.name().to_string());
        let classifier_path = out_dir.join(format!("epoch_{epoch:03}.classifier.ckpt"));
        save_checkpoint(psi, &manifest_psi, &classifier_path)?;

        checkpoints.push(EpochCheckpoint {
            epoch,
            transform_path,
            classifier_path,
            val_total,
        });
        records.push(record);
    }

    Ok(TrainOutcome {
        checkpoints,
        records,
        metrics_path,
    })
}

/// Index of the checkpoint with the lowest validation loss; ties go to the
/// earliest epoch.
pub fn select_best_checkpoint<'a>(
    records: &[EpochRecord],
    checkpoints: &'a [EpochCheckpoint],
) -> Result<&'a EpochCheckpoint> {
    if records.is_empty() || records.len() != checkpoints.len() {
        return Err(Error::Domain(format!(
            "selection needs equal non-empty lists, got {} records and {} checkpoints",
            records.len(),
            checkpoints.len()
        )));
    }
    let mut best = 0usize;
    for (i, r) in records.iter().enumerate() {
        if r.val_total < records[best].val_total {
            best = i;
        }
    }
    Ok(&checkpoints[best])
}
