//! Scalar abstraction so the whole stack runs in either f32 or f64.
//!
//! f32 is the practical choice for training speed; f64 is what the
//! finite-difference gradient checks run in.

use ndarray::{LinalgScalar, NdFloat};
use rand::distributions::uniform::SampleUniform;
use rand::Rng;
use rand_distr::StandardNormal;

/// Element type of every tensor in the crate.
pub trait Scalar:
    NdFloat + LinalgScalar + SampleUniform + std::iter::Sum + 'static
{
    /// Tag written into checkpoint headers.
    const DTYPE: &'static str;

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;

    /// One sample from N(0, 1).
    fn sample_standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self;

    /// Append the little-endian bytes of `vals` to `buf`.
    fn write_le_bytes(vals: &[Self], buf: &mut Vec<u8>);

    /// Decode little-endian bytes; `bytes.len()` must be a multiple of the
    /// scalar width.
    fn read_le_bytes(bytes: &[u8]) -> Option<Vec<Self>>;
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";

    fn from_f64(v: f64) -> Self {
        v as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }

    fn sample_standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        rng.sample(StandardNormal)
    }

    fn write_le_bytes(vals: &[Self], buf: &mut Vec<u8>) {
        for v in vals {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    fn read_le_bytes(bytes: &[u8]) -> Option<Vec<Self>> {
        if bytes.len() % 4 != 0 {
            return None;
        }
        Some(
            bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect(),
        )
    }
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";

    fn from_f64(v: f64) -> Self {
        v
    }

    fn as_f64(self) -> f64 {
        self
    }

    fn sample_standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        rng.sample(StandardNormal)
    }

    fn write_le_bytes(vals: &[Self], buf: &mut Vec<u8>) {
        for v in vals {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    fn read_le_bytes(bytes: &[u8]) -> Option<Vec<Self>> {
        if bytes.len() % 8 != 0 {
            return None;
        }
        Some(
            bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]))
                .collect(),
        )
    }
}
