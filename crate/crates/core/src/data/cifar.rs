//! Readers for the CIFAR binary archive layouts.
//!
//! CIFAR-10: `data_batch_{1..5}.bin` + `test_batch.bin`, each record
//! `1 label byte + 3072 pixel bytes` (three 32×32 planes, R then G then B).
//! CIFAR-100: `train.bin` + `test.bin`, each record
//! `1 coarse byte + 1 fine byte + 3072 pixel bytes`; the fine label is used.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array3;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::{DatasetId, LabeledImage};

pub const IMAGE_PIXEL_BYTES: usize = 3 * 32 * 32;
pub const CIFAR10_RECORD: usize = 1 + IMAGE_PIXEL_BYTES;
pub const CIFAR100_RECORD: usize = 2 + IMAGE_PIXEL_BYTES;
pub const RECORDS_PER_CIFAR10_FILE: usize = 10_000;

pub const CIFAR10_DIR: &str = "cifar-10-batches-bin";
pub const CIFAR100_DIR: &str = "cifar-100-binary";

pub fn cifar10_train_files() -> Vec<String> {
    (1..=5).map(|i| format!("data_batch_{i}.bin")).collect()
}

/// Find the directory holding the archive files: either `root` itself or the
/// conventional extracted subdirectory.
fn archive_dir(id: DatasetId, root: &Path) -> Result<PathBuf> {
    let sub = match id {
        DatasetId::Cifar10 => CIFAR10_DIR,
        DatasetId::Cifar100 => CIFAR100_DIR,
    };
    let probe = match id {
        DatasetId::Cifar10 => "data_batch_1.bin",
        DatasetId::Cifar100 => "train.bin",
    };
    for candidate in [root.join(sub), root.to_path_buf()] {
        if candidate.join(probe).is_file() {
            return Ok(candidate);
        }
    }
    Err(Error::Ingestion(format!(
        "no {} archive under {} (expected {} or {}; downloads are not performed)",
        id.name(),
        root.display(),
        root.join(sub).join(probe).display(),
        root.join(probe).display(),
    )))
}

fn decode_records<T: Scalar>(
    bytes: &[u8],
    record_len: usize,
    label_offset: usize,
    file: &Path,
    out: &mut Vec<LabeledImage<T>>,
) -> Result<()> {
    if bytes.len() % record_len != 0 {
        return Err(Error::Ingestion(format!(
            "{} is corrupt: {} bytes is not a multiple of the {record_len}-byte record",
            file.display(),
            bytes.len()
        )));
    }
    let inv255 = T::from_f64(1.0 / 255.0);
    for record in bytes.chunks_exact(record_len) {
        let label = record[label_offset] as usize;
        let pixels = &record[label_offset + 1..];
        let data: Vec<T> = pixels
            .iter()
            .map(|&b| T::from_f64(b as f64) * inv255)
            .collect();
        out.push(LabeledImage {
            pixels: Array3::from_shape_vec((3, 32, 32), data).expect("fixed record size"),
            label,
        });
    }
    Ok(())
}

fn read_file(path: &Path, expect_len: usize) -> Result<Vec<u8>> {
    let bytes = fs::read(path).map_err(|e| {
        Error::Ingestion(format!("cannot read archive file {}: {e}", path.display()))
    })?;
    if bytes.len() != expect_len {
        return Err(Error::Ingestion(format!(
            "{} is corrupt: {} bytes, expected {expect_len}",
            path.display(),
            bytes.len()
        )));
    }
    Ok(bytes)
}

/// Read `(all_training_images, test_images)` for a dataset. Class counts are
/// checked against the profile.
pub fn read_archives<T: Scalar>(
    id: DatasetId,
    root: &Path,
) -> Result<(Vec<LabeledImage<T>>, Vec<LabeledImage<T>>)> {
    let dir = archive_dir(id, root)?;
    let mut train = Vec::with_capacity(50_000);
    let mut test = Vec::with_capacity(10_000);
    match id {
        DatasetId::Cifar10 => {
            for name in cifar10_train_files() {
                let path = dir.join(name);
                let bytes = read_file(&path, RECORDS_PER_CIFAR10_FILE * CIFAR10_RECORD)?;
                decode_records(&bytes, CIFAR10_RECORD, 0, &path, &mut train)?;
            }
            let path = dir.join("test_batch.bin");
            let bytes = read_file(&path, RECORDS_PER_CIFAR10_FILE * CIFAR10_RECORD)?;
            decode_records(&bytes, CIFAR10_RECORD, 0, &path, &mut test)?;
        }
        DatasetId::Cifar100 => {
            let path = dir.join("train.bin");
            let bytes = read_file(&path, 50_000 * CIFAR100_RECORD)?;
            decode_records(&bytes, CIFAR100_RECORD, 1, &path, &mut train)?;
            let path = dir.join("test.bin");
            let bytes = read_file(&path, 10_000 * CIFAR100_RECORD)?;
            decode_records(&bytes, CIFAR100_RECORD, 1, &path, &mut test)?;
        }
    }
    let classes = id.classes();
    for img in train.iter().chain(test.iter()) {
        if img.label >= classes {
            return Err(Error::Ingestion(format!(
                "archive under {} is corrupt: label {} out of range for {classes} classes",
                dir.display(),
                img.label
            )));
        }
    }
    Ok((train, test))
}
