//! Procedural dataset generator that writes archives in the exact CIFAR
//! binary layout, so they load through the normal ingestion path.
//!
//! Each class gets a smooth random color template; every image is a shifted,
//! noised variant of its class template. The classes are easily separable,
//! which makes the generated sets useful for offline pipeline tests and
//! demos on machines without the real archives.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

use super::cifar::{
    cifar10_train_files, CIFAR100_DIR, CIFAR10_DIR, RECORDS_PER_CIFAR10_FILE,
};
use super::DatasetId;

const SIDE: usize = 32;
/// Class templates are very coarse; per-image detail fields are finer.
const CLASS_GRID: usize = 4;
const DETAIL_GRID: usize = 8;

/// Bump when the rendering recipe changes so cached archives regenerate.
pub const GENERATOR_VERSION: u32 = 2;

/// Bilinear upsample of a coarse grid×grid field to SIDE×SIDE.
fn upsample(coarse: &[f64], grid: usize) -> Vec<f64> {
    let scale = grid as f64 / SIDE as f64;
    let mut out = vec![0.0; SIDE * SIDE];
    for y in 0..SIDE {
        for x in 0..SIDE {
            let fy = (y as f64 + 0.5) * scale - 0.5;
            let fx = (x as f64 + 0.5) * scale - 0.5;
            let y0 = fy.floor().clamp(0.0, (grid - 1) as f64) as usize;
            let x0 = fx.floor().clamp(0.0, (grid - 1) as f64) as usize;
            let y1 = (y0 + 1).min(grid - 1);
            let x1 = (x0 + 1).min(grid - 1);
            let ty = (fy - y0 as f64).clamp(0.0, 1.0);
            let tx = (fx - x0 as f64).clamp(0.0, 1.0);
            let v00 = coarse[y0 * grid + x0];
            let v01 = coarse[y0 * grid + x1];
            let v10 = coarse[y1 * grid + x0];
            let v11 = coarse[y1 * grid + x1];
            out[y * SIDE + x] = v00 * (1.0 - ty) * (1.0 - tx)
                + v01 * (1.0 - ty) * tx
                + v10 * ty * (1.0 - tx)
                + v11 * ty * tx;
        }
    }
    out
}

fn class_template(seed: u64, class: usize) -> [Vec<f64>; 3] {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (class as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut planes: [Vec<f64>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for plane in planes.iter_mut() {
        let coarse: Vec<f64> = (0..CLASS_GRID * CLASS_GRID).map(|_| rng.gen::<f64>()).collect();
        *plane = upsample(&coarse, CLASS_GRID)
            .into_iter()
            .map(|v| 0.15 + 0.7 * v)
            .collect();
    }
    planes
}

/// One record's pixel bytes, planes R then G then B: a shifted class
/// template carrying the label signal, blended with a per-image random
/// detail field and pixel noise so each image holds content of its own that
/// a class-mean predictor cannot reproduce.
fn render_image(template: &[Vec<f64>; 3], rng: &mut ChaCha8Rng) -> Vec<u8> {
    let dy = rng.gen_range(0..SIDE);
    let dx = rng.gen_range(0..SIDE / 2) as i64 - (SIDE / 4) as i64;
    let mut bytes = Vec::with_capacity(3 * SIDE * SIDE);
    for plane in template {
        let detail: Vec<f64> = {
            let coarse: Vec<f64> = (0..DETAIL_GRID * DETAIL_GRID)
                .map(|_| rng.gen::<f64>())
                .collect();
            upsample(&coarse, DETAIL_GRID)
        };
        for y in 0..SIDE {
            for x in 0..SIDE {
                let sy = (y + dy) % SIDE;
                let sx = ((x as i64 + dx).rem_euclid(SIDE as i64)) as usize;
                let v = 0.45 * plane[sy * SIDE + sx]
                    + 0.55 * detail[y * SIDE + x]
                    + 0.05 * (rng.gen::<f64>() - 0.5);
                bytes.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    bytes
}

fn generate_records(
    id: DatasetId,
    seed: u64,
    count: usize,
    stream_tag: u64,
) -> Vec<(usize, Vec<u8>)> {
    let classes = id.classes();
    let templates: Vec<[Vec<f64>; 3]> =
        (0..classes).map(|k| class_template(seed, k)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ stream_tag);
    (0..count)
        .map(|i| {
            let class = i % classes;
            (class, render_image(&templates[class], &mut rng))
        })
        .collect()
}

/// Write a full synthetic archive (50,000 train + 10,000 test records) under
/// `root`, in the layout `load_dataset` expects for `id`. Deterministic in
/// `(id, seed)`. Returns the archive directory.
pub fn write_archive(id: DatasetId, root: &Path, seed: u64) -> Result<std::path::PathBuf> {
    write_archive_sized(id, root, seed, 50_000, 10_000)
}

/// Same as [`write_archive`] but with custom record counts. CIFAR-10 splits
/// the training records over five batch files, so `train_count` must be a
/// multiple of 5 for that profile.
pub fn write_archive_sized(
    id: DatasetId,
    root: &Path,
    seed: u64,
    train_count: usize,
    test_count: usize,
) -> Result<std::path::PathBuf> {
    let train = generate_records(id, seed, train_count, 0x7261_696e);
    let test = generate_records(id, seed, test_count, 0x7465_7374);
    match id {
        DatasetId::Cifar10 => {
            if train_count % 5 != 0 {
                return Err(Error::Config(
                    "cifar10 train_count must be a multiple of 5".into(),
                ));
            }
            let dir = root.join(CIFAR10_DIR);
            fs::create_dir_all(&dir)?;
            let per_file = train_count / 5;
            for (f, name) in cifar10_train_files().iter().enumerate() {
                let mut bytes = Vec::with_capacity(per_file * (1 + 3072));
                for (label, pixels) in &train[f * per_file..(f + 1) * per_file] {
                    bytes.push(*label as u8);
                    bytes.extend_from_slice(pixels);
                }
                fs::write(dir.join(name), bytes)?;
            }
            let mut bytes = Vec::with_capacity(test.len() * (1 + 3072));
            for (label, pixels) in &test {
                bytes.push(*label as u8);
                bytes.extend_from_slice(pixels);
            }
            fs::write(dir.join("test_batch.bin"), bytes)?;
            Ok(dir)
        }
        DatasetId::Cifar100 => {
            let dir = root.join(CIFAR100_DIR);
            fs::create_dir_all(&dir)?;
            for (name, records) in [("train.bin", &train), ("test.bin", &test)] {
                let mut bytes = Vec::with_capacity(records.len() * (2 + 3072));
                for (label, pixels) in records.iter() {
                    bytes.push((*label / 5) as u8); // coarse label, unused by the reader
                    bytes.push(*label as u8);
                    bytes.extend_from_slice(pixels);
                }
                fs::write(dir.join(name), bytes)?;
            }
            Ok(dir)
        }
    }
}

/// Ensure an archive for `id` exists under `root`: keep whatever is already
/// there (e.g. the real dataset), otherwise generate a synthetic one.
/// Returns true when a synthetic archive was written.
pub fn ensure_archive(id: DatasetId, root: &Path, seed: u64) -> Result<bool> {
    let probe = match id {
        DatasetId::Cifar10 => root.join(CIFAR10_DIR).join("data_batch_1.bin"),
        DatasetId::Cifar100 => root.join(CIFAR100_DIR).join("train.bin"),
    };
    let direct = match id {
        DatasetId::Cifar10 => root.join("data_batch_1.bin"),
        DatasetId::Cifar100 => root.join("train.bin"),
    };
    if probe.is_file() || direct.is_file() {
        return Ok(false);
    }
    write_archive(id, root, seed)?;
    Ok(true)
}

const _: () = assert!(RECORDS_PER_CIFAR10_FILE == 10_000);
