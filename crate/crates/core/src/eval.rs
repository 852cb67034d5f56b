//! Quantitative evaluation: classification accuracy on protected images,
//! per-image PSNR distributions with box statistics, and lossless image-grid
//! export for visual inspection.

use std::path::{Path, PathBuf};

use ndarray::{Array3, Array4, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::data::LabeledImage;
use crate::error::{Error, Result};
use crate::imageio;
use crate::models::{ResNet, UNet};
use crate::scalar::Scalar;

/// Evaluation batch size; results are independent of this chunking.
const EVAL_CHUNK: usize = 256;

/// Five-number box summary. Whiskers are clipped to observed values inside
/// `[q1 − 1.5·IQR, q3 + 1.5·IQR]`; outliers beyond them are not represented.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxStats {
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub whisker_low: f64,
    pub whisker_high: f64,
    pub n: usize,
}

fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = q * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let frac = pos - lo as f64;
    if lo + 1 < n {
        sorted[lo] * (1.0 - frac) + sorted[lo + 1] * frac
    } else {
        sorted[n - 1]
    }
}

/// Quartiles by linear interpolation between order statistics, whiskers per
/// the 1.5·IQR rule.
pub fn box_stats(values: &[f64]) -> Result<BoxStats> {
    if values.is_empty() {
        return Err(Error::Domain("box statistics of an empty list".into()));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain(
            "box statistics require finite values; filter sentinels first".into(),
        ));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite values compare"));
    let q1 = quantile_sorted(&sorted, 0.25);
    let median = quantile_sorted(&sorted, 0.5);
    let q3 = quantile_sorted(&sorted, 0.75);
    let iqr = q3 - q1;
    let lo_fence = q1 - 1.5 * iqr;
    let hi_fence = q3 + 1.5 * iqr;
    let whisker_low = sorted
        .iter()
        .cloned()
        .find(|&v| v >= lo_fence)
        .expect("q1 is inside the fence");
    let whisker_high = sorted
        .iter()
        .rev()
        .cloned()
        .find(|&v| v <= hi_fence)
        .expect("q3 is inside the fence");
    Ok(BoxStats {
        q1,
        median,
        q3,
        whisker_low,
        whisker_high,
        n: sorted.len(),
    })
}

/// `10·log10(peak²/MSE)` in dB; identical images give `+∞`.
pub fn psnr<T: Scalar>(a: &Array3<T>, b: &Array3<T>, peak: f64) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Domain(format!(
            "psnr inputs differ in shape: {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    if peak <= 0.0 {
        return Err(Error::Domain(format!("psnr peak must be positive, got {peak}")));
    }
    let mut mse = 0.0f64;
    for (&va, &vb) in a.iter().zip(b.iter()) {
        let d = va.as_f64() - vb.as_f64();
        mse += d * d;
    }
    mse /= a.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

/// Argmax with ties broken by the lowest class index.
pub fn argmax_row<T: Scalar>(row: ArrayView1<'_, T>) -> usize {
    let mut best = 0;
    let mut best_v = row[0];
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > best_v {
            best_v = v;
            best = i;
        }
    }
    best
}

/// Stack images into a `[m, C, H, W]` batch.
pub fn stack_pixels<T: Scalar>(images: &[&Array3<T>]) -> Result<Array4<T>> {
    let first = images
        .first()
        .ok_or_else(|| Error::Domain("cannot stack an empty image list".into()))?;
    let (c, h, w) = first.dim();
    let mut out = Array4::zeros((images.len(), c, h, w));
    for (i, img) in images.iter().enumerate() {
        if img.dim() != (c, h, w) {
            return Err(Error::Domain(format!(
                "image {i} has shape {:?}, expected {:?}",
                img.dim(),
                (c, h, w)
            )));
        }
        out.index_axis_mut(Axis(0), i).assign(img);
    }
    Ok(out)
}

/// Percent of test images whose protected form the classifier labels
/// correctly. With `transform = None` the classifier sees plain images.
pub fn accuracy<T: Scalar>(
    transform: Option<&UNet<T>>,
    psi: &ResNet<T>,
    test: &[LabeledImage<T>],
) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::Domain("accuracy over an empty test set".into()));
    }
    let mut correct = 0usize;
    for chunk in test.chunks(EVAL_CHUNK) {
        let refs: Vec<&Array3<T>> = chunk.iter().map(|img| &img.pixels).collect();
        let mut batch = stack_pixels(&refs)?;
        if let Some(h) = transform {
            batch = h.infer(&batch)?;
        }
        let probs = psi.classify(&batch)?;
        for (row, img) in probs.outer_iter().zip(chunk.iter()) {
            if argmax_row(row) == img.label {
                correct += 1;
            }
        }
    }
    Ok(100.0 * correct as f64 / test.len() as f64)
}

/// Everything a run reports: accuracy, the PSNR distribution and its box
/// summary, exported grids, and a digest of the configuration that produced
/// it.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy_percent: Option<f64>,
    /// Raw per-image PSNR values (may contain `+∞` sentinels).
    #[serde(skip)]
    pub psnr_values: Vec<f64>,
    /// Count of `+∞` sentinels excluded from the box statistics.
    pub excluded_infinite: usize,
    pub box_stats: Option<BoxStats>,
    pub mean_psnr_db: Option<f64>,
    pub grid_paths: Vec<String>,
    pub config_digest: String,
    /// Set when the report is written to disk.
    pub distribution_file: Option<String>,
}

impl EvalReport {
    pub fn from_psnr_values(values: Vec<f64>, config_digest: String) -> Result<Self> {
        let finite: Vec<f64> = values.iter().cloned().filter(|v| v.is_finite()).collect();
        let excluded = values.len() - finite.len();
        let stats = if finite.is_empty() {
            None
        } else {
            Some(box_stats(&finite)?)
        };
        let mean = if finite.is_empty() {
            None
        } else {
            Some(finite.iter().sum::<f64>() / finite.len() as f64)
        };
        Ok(EvalReport {
            accuracy_percent: None,
            psnr_values: values,
            excluded_infinite: excluded,
            box_stats: stats,
            mean_psnr_db: mean,
            grid_paths: Vec::new(),
            config_digest,
            distribution_file: None,
        })
    }

    /// Write `<stem>.report.json` and `<stem>.psnr.txt` under `dir`.
    pub fn write(&mut self, dir: &Path, stem: &str) -> Result<PathBuf> {
        std::fs::create_dir_all(dir)?;
        let dist_path = dir.join(format!("{stem}.psnr.txt"));
        let mut lines = String::new();
        for v in &self.psnr_values {
            if v.is_finite() {
                lines.push_str(&format!("{v:.6}\n"));
            } else {
                lines.push_str("inf\n");
            }
        }
        std::fs::write(&dist_path, lines)
            .map_err(|e| Error::File(format!("cannot write {}: {e}", dist_path.display())))?;
        self.distribution_file = Some(dist_path.file_name().unwrap().to_string_lossy().into());
        let report_path = dir.join(format!("{stem}.report.json"));
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Serialization(format!("report encode failed: {e}")))?;
        std::fs::write(&report_path, json)
            .map_err(|e| Error::File(format!("cannot write {}: {e}", report_path.display())))?;
        Ok(report_path)
    }
}

/// Run the trained inverse net against protected test images and report the
/// per-image PSNR between estimates and the plain originals. `transform =
/// None` means the identity transform (the attack-sanity control).
pub fn evaluate_attack<T: Scalar>(
    g: &UNet<T>,
    transform: Option<&UNet<T>>,
    test: &[LabeledImage<T>],
    peak: f64,
    config_digest: String,
) -> Result<EvalReport> {
    if test.is_empty() {
        return Err(Error::Domain("attack evaluation over an empty test set".into()));
    }
    let mut values = Vec::with_capacity(test.len());
    for chunk in test.chunks(EVAL_CHUNK) {
        let refs: Vec<&Array3<T>> = chunk.iter().map(|img| &img.pixels).collect();
        let batch = stack_pixels(&refs)?;
        let protected = match transform {
            Some(h) => h.infer(&batch)?,
            None => batch,
        };
        let estimated = g.infer(&protected)?;
        for (i, img) in chunk.iter().enumerate() {
            let est = estimated.index_axis(Axis(0), i).to_owned();
            values.push(psnr(&est, &img.pixels, peak)?);
        }
    }
    EvalReport::from_psnr_values(values, config_digest)
}

/// Compose labeled image rows into one lossless PNG (no borders, rows
/// stacked top to bottom) plus a sidecar text file listing the row labels.
pub fn export_grid<T: Scalar>(
    rows: &[(String, Vec<Array3<T>>)],
    path: &Path,
) -> Result<()> {
    if rows.is_empty() || rows.iter().any(|(_, imgs)| imgs.is_empty()) {
        return Err(Error::Domain("grid export needs at least one image per row".into()));
    }
    let (c, h, w) = rows[0].1[0].dim();
    let cols = rows.iter().map(|(_, imgs)| imgs.len()).max().unwrap();
    for (label, imgs) in rows {
        for img in imgs {
            if img.dim() != (c, h, w) {
                return Err(Error::Domain(format!(
                    "grid row {label:?} mixes image shapes: {:?} vs {:?}",
                    img.dim(),
                    (c, h, w)
                )));
            }
        }
    }
    let mut canvas: Array3<T> = Array3::zeros((c, rows.len() * h, cols * w));
    for (r, (_, imgs)) in rows.iter().enumerate() {
        for (col, img) in imgs.iter().enumerate() {
            canvas
                .slice_mut(ndarray::s![.., r * h..(r + 1) * h, col * w..(col + 1) * w])
                .assign(img);
        }
    }
    imageio::write_png(&canvas, path)?;
    let labels: String = rows
        .iter()
        .map(|(label, _)| format!("{label}\n"))
        .collect();
    let label_path = path.with_extension("labels.txt");
    std::fs::write(&label_path, labels)
        .map_err(|e| Error::File(format!("cannot write {}: {e}", label_path.display())))?;
    Ok(())
}
