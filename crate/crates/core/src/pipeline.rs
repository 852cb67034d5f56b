//! Command-level orchestration shared by the CLI and the integration tests:
//! train → select best, protect image files, run the inversion attack, and
//! evaluate accuracy/PSNR. Every command is rerunnable; identical inputs and
//! seeds produce byte-identical primary outputs.

use std::path::{Path, PathBuf};

use ndarray::{Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::attack::{
    generate_identity_pairs, generate_pairs, train_inverse, verify_pairs, AttackPair,
    PairManifest, SplitId,
};
use crate::config::ExperimentConfig;
use crate::data::{DatasetSplit, LabeledImage};
use crate::error::{Error, Result};
use crate::eval::{accuracy, evaluate_attack, export_grid, psnr, stack_pixels, EvalReport};
use crate::imageio;
use crate::models::{
    build_inverse_net, build_transform_net, checkpoint_digest, load_checkpoint, save_checkpoint,
    ArchSpec, Manifest, ResNet, SeedInfo, UNet,
};
use crate::scalar::Scalar;
use crate::training::{select_best_checkpoint, train_joint, EpochRecord, TrainOutcome};

/// Outputs of one training run (one alpha value).
#[derive(Clone, Debug)]
pub struct TrainArtifacts {
    pub alpha: f64,
    pub out_dir: PathBuf,
    pub best_epoch: usize,
    pub best_val_total: f64,
    pub best_transform: PathBuf,
    pub best_classifier: PathBuf,
    pub metrics_csv: PathBuf,
    pub records: Vec<EpochRecord>,
}

#[derive(Serialize, Deserialize)]
struct RunManifest {
    config_digest: String,
    dataset: String,
    synthesized_data: bool,
    alpha: f64,
    best_epoch: usize,
    best_val_total: f64,
}

/// Train the transform/classifier pair for every alpha in the sweep (or the
/// single configured alpha), select the best epoch by validation loss, and
/// leave `best.transform.ckpt` / `best.classifier.ckpt` plus `metrics.csv`
/// in each run directory.
pub fn cmd_train<T: Scalar>(cfg: &ExperimentConfig) -> Result<Vec<TrainArtifacts>> {
    cfg.validate()?;
    let (split, synthesized) = cfg.load_split::<T>()?;
    let alphas: Vec<f64> = if cfg.alpha_sweep.is_empty() {
        vec![cfg.train.alpha]
    } else {
        cfg.alpha_sweep.clone()
    };
    let mut artifacts = Vec::with_capacity(alphas.len());
    for &alpha in &alphas {
        let out_dir = if alphas.len() == 1 {
            cfg.run.out_dir.clone()
        } else {
            cfg.run.out_dir.join(format!("alpha_{alpha}"))
        };
        artifacts.push(train_one::<T>(cfg, &split, alpha, &out_dir, synthesized)?);
    }
    Ok(artifacts)
}

fn train_one<T: Scalar>(
    cfg: &ExperimentConfig,
    split: &DatasetSplit<T>,
    alpha: f64,
    out_dir: &Path,
    synthesized: bool,
) -> Result<TrainArtifacts> {
    let mut train_cfg = cfg.train.clone();
    train_cfg.alpha = alpha;
    let mut h = build_transform_net::<T>(&cfg.model.transform, cfg.model.transform_seed())?;
    let mut psi = ResNet::build(&cfg.model.classifier, cfg.model.classifier_seed())?;
    let TrainOutcome {
        checkpoints,
        records,
        metrics_path,
    } = train_joint(&train_cfg, split, &mut h, &mut psi, cfg.model.feature, out_dir)?;
    let best = select_best_checkpoint(&records, &checkpoints)?;

    let best_transform = out_dir.join("best.transform.ckpt");
    let best_classifier = out_dir.join("best.classifier.ckpt");
    std::fs::copy(&best.transform_path, &best_transform)?;
    std::fs::copy(&best.classifier_path, &best_classifier)?;

    let run_manifest = RunManifest {
        config_digest: cfg.digest(),
        dataset: cfg.data.dataset.name().into(),
        synthesized_data: synthesized,
        alpha,
        best_epoch: best.epoch,
        best_val_total: best.val_total,
    };
    std::fs::write(
        out_dir.join("run.json"),
        serde_json::to_string_pretty(&run_manifest)
            .map_err(|e| Error::Serialization(e.to_string()))?,
    )?;

    Ok(TrainArtifacts {
        alpha,
        out_dir: out_dir.to_path_buf(),
        best_epoch: best.epoch,
        best_val_total: best.val_total,
        best_transform,
        best_classifier,
        metrics_csv: metrics_path,
        records,
    })
}

/// The canonical public form of a protected image: transformed, then
/// quantized to the 8-bit grid that files and the wire carry.
pub fn protect_image<T: Scalar>(transform: &UNet<T>, image: &Array3<T>) -> Result<Array3<T>> {
    let batch = stack_pixels(&[image])?;
    let protected = transform.infer(&batch)?;
    imageio::quantize(&protected.index_axis(Axis(0), 0).to_owned())
}

#[derive(Clone, Debug)]
pub struct ProtectArtifacts {
    pub outputs: Vec<PathBuf>,
    pub grid: PathBuf,
}

/// Protect a list of image files. One lossless output per input plus a
/// plain/protected comparison grid.
pub fn cmd_protect<T: Scalar>(
    transform_ckpt: &Path,
    inputs: &[PathBuf],
    out_dir: &Path,
) -> Result<ProtectArtifacts> {
    if inputs.is_empty() {
        return Err(Error::Domain("no input images given".into()));
    }
    let (handle, _) = load_checkpoint::<T>(transform_ckpt)?;
    let h = handle.into_unet()?;

    let mut unreadable = Vec::new();
    let mut images: Vec<(PathBuf, Array3<T>)> = Vec::new();
    for path in inputs {
        match imageio::read_png::<T>(path) {
            Ok(img) => images.push((path.clone(), img)),
            Err(e) => unreadable.push(format!("{} ({e})", path.display())),
        }
    }
    if !unreadable.is_empty() {
        return Err(Error::File(format!(
            "unreadable input image(s): {}",
            unreadable.join(", ")
        )));
    }

    std::fs::create_dir_all(out_dir)?;
    let mut outputs = Vec::with_capacity(images.len());
    let mut plain_row = Vec::new();
    let mut protected_row = Vec::new();
    for (path, image) in &images {
        let protected = protect_image(&h, image)?;
        let stem = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "image".into());
        let out_path = out_dir.join(format!("{stem}.protected.png"));
        imageio::write_png(&protected, &out_path)?;
        outputs.push(out_path);
        plain_row.push(image.clone());
        protected_row.push(protected);
    }
    let grid = out_dir.join("protect_grid.png");
    export_grid(
        &[
            ("plain".to_string(), plain_row),
            ("protected".to_string(), protected_row),
        ],
        &grid,
    )?;
    Ok(ProtectArtifacts { outputs, grid })
}

#[derive(Clone, Debug)]
pub struct AttackArtifacts {
    pub inverse_ckpt: PathBuf,
    pub report_path: PathBuf,
    pub report: EvalReport,
    pub grid: PathBuf,
    pub pair_manifest: PathBuf,
}

fn split_images<T: Scalar>(split: &DatasetSplit<T>, source: SplitId) -> &[LabeledImage<T>] {
    match source {
        SplitId::Train => &split.train,
        SplitId::Val => &split.val,
        SplitId::Test => &split.test,
    }
}

/// Run the inversion attack end to end: build pairs with the public
/// transform (`None` = identity control), train the inverse net, evaluate
/// PSNR on held-out test images, and export artifacts.
pub fn cmd_attack<T: Scalar>(
    transform_ckpt: Option<&Path>,
    cfg: &ExperimentConfig,
    out_dir: &Path,
) -> Result<AttackArtifacts> {
    cfg.validate()?;
    let (split, _) = cfg.load_split::<T>()?;
    let transform = match transform_ckpt {
        Some(path) => Some((load_checkpoint::<T>(path)?.0.into_unet()?, path)),
        None => None,
    };

    let source_images: Vec<Array3<T>> = {
        let imgs = split_images(&split, cfg.attack.pair_source);
        let limit = if cfg.attack.pair_limit > 0 {
            cfg.attack.pair_limit.min(imgs.len())
        } else {
            imgs.len()
        };
        imgs[..limit].iter().map(|i| i.pixels.clone()).collect()
    };

    let pairs: Vec<AttackPair<T>> = match &transform {
        Some((h, _)) => {
            let pairs = generate_pairs(h, &source_images)?;
            verify_pairs(h, &pairs)?;
            pairs
        }
        None => generate_identity_pairs(&source_images)?,
    };

    std::fs::create_dir_all(out_dir)?;
    let pair_manifest_path = out_dir.join("pairs.json");
    let manifest = PairManifest {
        transform_digest: match &transform {
            Some((_, path)) => checkpoint_digest(path)?,
            None => "identity".into(),
        },
        pair_count: pairs.len(),
        source: cfg.attack.pair_source,
    };
    std::fs::write(
        &pair_manifest_path,
        serde_json::to_string_pretty(&manifest).map_err(|e| Error::Serialization(e.to_string()))?,
    )?;

    let mut g = build_inverse_net::<T>(&cfg.model.inverse, cfg.model.inverse_seed())?;
    train_inverse(&pairs, &mut g, &cfg.attack)?;

    let mut g_manifest = Manifest::new(ArchSpec::Inverse(cfg.model.inverse.clone()));
    g_manifest.epoch = cfg.attack.epochs;
    g_manifest.seeds = SeedInfo {
        init: cfg.model.inverse_seed(),
        train: Some(cfg.attack.seed),
        split: Some(cfg.data.split_seed),
    };
    g_manifest.dataset = Some(cfg.data.dataset.name().into());
    let inverse_ckpt = out_dir.join("inverse.ckpt");
    save_checkpoint(&g, &g_manifest, &inverse_ckpt)?;

    let h_ref = transform.as_ref().map(|(h, _)| h);
    let mut report = evaluate_attack(&g, h_ref, &split.test, cfg.eval.psnr_peak, cfg.digest())?;
    let report_path = report.write(out_dir, "attack")?;

    // qualitative grid: plain / protected / estimated
    let n = cfg.eval.grid_examples.min(split.test.len());
    let plain: Vec<Array3<T>> = split.test[..n].iter().map(|i| i.pixels.clone()).collect();
    let refs: Vec<&Array3<T>> = plain.iter().collect();
    let batch = stack_pixels(&refs)?;
    let protected = match h_ref {
        Some(h) => h.infer(&batch)?,
        None => batch.clone(),
    };
    let estimated = g.infer(&protected)?;
    let grid = out_dir.join("attack_grid.png");
    export_grid(
        &[
            ("plain".to_string(), plain),
            (
                "protected".to_string(),
                (0..n).map(|i| protected.index_axis(Axis(0), i).to_owned()).collect(),
            ),
            (
                "estimated".to_string(),
                (0..n).map(|i| estimated.index_axis(Axis(0), i).to_owned()).collect(),
            ),
        ],
        &grid,
    )?;

    Ok(AttackArtifacts {
        inverse_ckpt,
        report_path,
        report,
        grid,
        pair_manifest: pair_manifest_path,
    })
}

#[derive(Clone, Debug)]
pub struct EvalArtifacts {
    pub accuracy_percent: f64,
    pub report_path: PathBuf,
    pub report: EvalReport,
    pub grid: Option<PathBuf>,
}

/// Accuracy of the classifier on the (protected) test set, plus the
/// protected-vs-plain PSNR distribution and a comparison grid when a
/// transform is given.
pub fn cmd_eval<T: Scalar>(
    transform_ckpt: Option<&Path>,
    classifier_ckpt: &Path,
    cfg: &ExperimentConfig,
    out_dir: &Path,
) -> Result<EvalArtifacts> {
    let (split, _) = cfg.load_split::<T>()?;
    let (handle, psi_manifest) = load_checkpoint::<T>(classifier_ckpt)?;
    let psi = handle.into_classifier()?;
    if psi.cfg.num_classes != split.classes {
        return Err(Error::Config(format!(
            "classifier has {} classes ({}), dataset {} has {}",
            psi.cfg.num_classes,
            psi_manifest.arch.id(),
            cfg.data.dataset.name(),
            split.classes
        )));
    }
    let transform = match transform_ckpt {
        Some(path) => Some(load_checkpoint::<T>(path)?.0.into_unet()?),
        None => None,
    };

    let acc = accuracy(transform.as_ref(), &psi, &split.test)?;

    // protected-vs-plain distortion distribution
    let mut values = Vec::with_capacity(split.test.len());
    if let Some(h) = &transform {
        for chunk in split.test.chunks(256) {
            let refs: Vec<&Array3<T>> = chunk.iter().map(|i| &i.pixels).collect();
            let batch = stack_pixels(&refs)?;
            let protected = h.infer(&batch)?;
            for (i, img) in chunk.iter().enumerate() {
                values.push(psnr(
                    &protected.index_axis(Axis(0), i).to_owned(),
                    &img.pixels,
                    cfg.eval.psnr_peak,
                )?);
            }
        }
    }
    let mut report = EvalReport::from_psnr_values(values, cfg.digest())?;
    report.accuracy_percent = Some(acc);

    std::fs::create_dir_all(out_dir)?;
    let grid = if let Some(h) = &transform {
        let n = cfg.eval.grid_examples.min(split.test.len());
        let plain: Vec<Array3<T>> = split.test[..n].iter().map(|i| i.pixels.clone()).collect();
        let refs: Vec<&Array3<T>> = plain.iter().collect();
        let protected = h.infer(&stack_pixels(&refs)?)?;
        let grid_path = out_dir.join("eval_grid.png");
        export_grid(
            &[
                ("plain".to_string(), plain),
                (
                    "protected".to_string(),
                    (0..n).map(|i| protected.index_axis(Axis(0), i).to_owned()).collect(),
                ),
            ],
            &grid_path,
        )?;
        report.grid_paths.push(grid_path.display().to_string());
        Some(grid_path)
    } else {
        None
    };

    let report_path = report.write(out_dir, "eval")?;
    Ok(EvalArtifacts {
        accuracy_percent: acc,
        report_path,
        report,
        grid,
    })
}

/// Load a classifier checkpoint and serve it.
pub fn cmd_serve<T: Scalar + 'static>(
    classifier_ckpt: &Path,
    addr: &str,
) -> Result<crate::service::ServerHandle> {
    let digest = checkpoint_digest(classifier_ckpt)?;
    let (handle, _) = load_checkpoint::<T>(classifier_ckpt)?;
    let psi = handle.into_classifier()?;
    crate::service::serve_classifier(psi, digest, addr)
}

/// Protect an image file locally and submit it to a running service.
pub fn cmd_submit<T: Scalar>(
    transform_ckpt: &Path,
    image_path: &Path,
    addr: &str,
    retries: usize,
) -> Result<crate::service::ClassifyResponse> {
    let (handle, _) = load_checkpoint::<T>(transform_ckpt)?;
    let h = handle.into_unet()?;
    let image = imageio::read_png::<T>(image_path)?;
    let (response, _) = crate::service::client_protect_and_submit(&h, &image, addr, retries)?;
    Ok(response)
}
