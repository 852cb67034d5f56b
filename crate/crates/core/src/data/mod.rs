//! Dataset ingestion, deterministic splitting, label encoding, and
//! augmentation.
//!
//! Loading and augmentation are pure functions of `(input, seed)`; per-sample
//! rng streams derive from `(seed, epoch, sample_index)` so batch assembly
//! can be reordered or parallelized without changing results.

pub mod cifar;
pub mod synthetic;

use ndarray::{Array1, Array2, Array3, s};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// An image with pixels in [0, 1] and an integer class label.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage<T: Scalar> {
    pub pixels: Array3<T>,
    pub label: usize,
}

impl<T: Scalar> LabeledImage<T> {
    pub fn validate(&self, classes: usize) -> Result<()> {
        if self.label >= classes {
            return Err(Error::Domain(format!(
                "label {} out of range for {classes} classes",
                self.label
            )));
        }
        if self
            .pixels
            .iter()
            .any(|&v| v < T::zero() || v > T::one() || !v.is_finite())
        {
            return Err(Error::Domain("pixel values must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// One-hot encoded label: a single 1 at the class index, 0 elsewhere.
#[derive(Clone, Debug, PartialEq)]
pub struct OneHotLabel<T: Scalar> {
    pub entries: Array1<T>,
}

impl<T: Scalar> OneHotLabel<T> {
    pub fn class_index(&self) -> usize {
        self.entries
            .iter()
            .position(|&v| v == T::one())
            .expect("one-hot has a 1 entry")
    }
}

/// Encode `label` over `c` classes.
pub fn one_hot<T: Scalar>(label: usize, c: usize) -> Result<OneHotLabel<T>> {
    if c == 0 || label >= c {
        return Err(Error::Domain(format!(
            "label {label} out of range for {c} classes"
        )));
    }
    let mut entries = Array1::zeros(c);
    entries[label] = T::one();
    Ok(OneHotLabel { entries })
}

/// One-hot rows for a whole batch, shape `[m, c]`.
pub fn one_hot_matrix<T: Scalar>(labels: &[usize], c: usize) -> Result<Array2<T>> {
    let mut out = Array2::zeros((labels.len(), c));
    for (i, &label) in labels.iter().enumerate() {
        if label >= c {
            return Err(Error::Domain(format!(
                "label {label} out of range for {c} classes"
            )));
        }
        out[[i, label]] = T::one();
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentationPolicy {
    /// Zero padding added on each side before the random crop.
    pub crop_padding: usize,
    pub flip_probability: f64,
    pub enabled: bool,
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        // the usual CIFAR recipe: 4-pixel pad-and-crop plus a coin-flip mirror
        AugmentationPolicy {
            crop_padding: 4,
            flip_probability: 0.5,
            enabled: true,
        }
    }
}

impl AugmentationPolicy {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.flip_probability) {
            return Err(Error::Config(format!(
                "flip_probability {} outside [0, 1]",
                self.flip_probability
            )));
        }
        Ok(())
    }
}

/// Crop an `[C, H, W]` window out of the zero-padded image at offset
/// `(oy, ox)`; offsets range over `0..=2*pad`.
pub fn crop_padded<T: Scalar>(pixels: &Array3<T>, pad: usize, oy: usize, ox: usize) -> Array3<T> {
    let (c, h, w) = pixels.dim();
    if pad == 0 {
        return pixels.clone();
    }
    let mut padded = Array3::zeros((c, h + 2 * pad, w + 2 * pad));
    padded
        .slice_mut(s![.., pad..pad + h, pad..pad + w])
        .assign(pixels);
    padded.slice(s![.., oy..oy + h, ox..ox + w]).to_owned()
}

/// Mirror along the width axis.
pub fn hflip<T: Scalar>(pixels: &Array3<T>) -> Array3<T> {
    pixels.slice(s![.., .., ..;-1]).to_owned()
}

/// Random crop from the zero-padded image followed by a random horizontal
/// flip. Shape, label, and value range never change; with the policy
/// disabled this is the identity.
pub fn augment<T: Scalar, R: Rng>(
    image: &LabeledImage<T>,
    policy: &AugmentationPolicy,
    rng: &mut R,
) -> LabeledImage<T> {
    if !policy.enabled {
        return image.clone();
    }
    let pad = policy.crop_padding;
    let (oy, ox) = if pad > 0 {
        (rng.gen_range(0..=2 * pad), rng.gen_range(0..=2 * pad))
    } else {
        (0, 0)
    };
    let mut pixels = crop_padded(&image.pixels, pad, oy, ox);
    if rng.gen::<f64>() < policy.flip_probability {
        pixels = hflip(&pixels);
    }
    LabeledImage {
        pixels,
        label: image.label,
    }
}

/// Deterministic per-sample rng stream derived from
/// `(seed, epoch, sample_index)`.
pub fn sample_rng(seed: u64, epoch: usize, sample_index: usize) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&(epoch as u64).to_le_bytes());
    key[16..24].copy_from_slice(&(sample_index as u64).to_le_bytes());
    key[24..32].copy_from_slice(b"pxv-aug\0");
    ChaCha8Rng::from_seed(key)
}

/// Which dataset profile to load.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetId {
    Cifar10,
    Cifar100,
}

impl DatasetId {
    pub fn classes(self) -> usize {
        match self {
            DatasetId::Cifar10 => 10,
            DatasetId::Cifar100 => 100,
        }
    }

    pub fn train_size(self) -> usize {
        match self {
            DatasetId::Cifar10 => 45_000,
            DatasetId::Cifar100 => 47_500,
        }
    }

    pub fn val_size(self) -> usize {
        match self {
            DatasetId::Cifar10 => 5_000,
            DatasetId::Cifar100 => 2_500,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DatasetId::Cifar10 => "cifar10",
            DatasetId::Cifar100 => "cifar100",
        }
    }
}

impl std::str::FromStr for DatasetId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cifar10" => Ok(DatasetId::Cifar10),
            "cifar100" => Ok(DatasetId::Cifar100),
            other => Err(Error::Config(format!(
                "unknown dataset id {other:?}, expected cifar10 or cifar100"
            ))),
        }
    }
}

/// Disjoint train/validation/test partitions of one dataset.
#[derive(Clone, Debug)]
pub struct DatasetSplit<T: Scalar> {
    pub train: Vec<LabeledImage<T>>,
    pub val: Vec<LabeledImage<T>>,
    pub test: Vec<LabeledImage<T>>,
    pub classes: usize,
}

impl<T: Scalar> DatasetSplit<T> {
    /// Deterministic prefix subset, for reduced-scale runs.
    pub fn subset(&self, train_n: usize, val_n: usize, test_n: usize) -> Result<DatasetSplit<T>> {
        if train_n > self.train.len() || val_n > self.val.len() || test_n > self.test.len() {
            return Err(Error::Config(format!(
                "subset sizes ({train_n}/{val_n}/{test_n}) exceed split sizes ({}/{}/{})",
                self.train.len(),
                self.val.len(),
                self.test.len()
            )));
        }
        Ok(DatasetSplit {
            train: self.train[..train_n].to_vec(),
            val: self.val[..val_n].to_vec(),
            test: self.test[..test_n].to_vec(),
            classes: self.classes,
        })
    }
}

/// Load a CIFAR-format dataset from `root` and split the training archive
/// into train/validation parts with a `split_seed`-derived permutation.
/// Membership is a deterministic function of `(name, split_seed)`.
pub fn load_dataset<T: Scalar>(
    id: DatasetId,
    root: &std::path::Path,
    split_seed: u64,
) -> Result<DatasetSplit<T>> {
    let (train_all, test) = cifar::read_archives::<T>(id, root)?;
    let mut order: Vec<usize> = (0..train_all.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(split_seed);
    // Fisher-Yates, fixed traversal so membership only depends on the seed
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let n_train = id.train_size();
    let mut train_all: Vec<Option<LabeledImage<T>>> = train_all.into_iter().map(Some).collect();
    let mut train = Vec::with_capacity(n_train);
    let mut val = Vec::with_capacity(id.val_size());
    for (pos, &idx) in order.iter().enumerate() {
        let img = train_all[idx].take().expect("each index visited once");
        if pos < n_train {
            train.push(img);
        } else {
            val.push(img);
        }
    }
    Ok(DatasetSplit {
        train,
        val,
        test,
        classes: id.classes(),
    })
}
