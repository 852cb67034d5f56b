//! Networks and their plumbing: the image-to-image transform family, the
//! residual classifier, feature extraction taps, and checkpoint archives.

pub mod checkpoint;
pub mod features;
pub mod layers;
pub mod ops;
mod ops_conv;
pub mod resnet;
pub mod unet;

pub use checkpoint::{
    checkpoint_digest, config_digest, load_checkpoint, load_manifest, save_checkpoint, ArchSpec,
    Manifest, ModelHandle, SeedInfo,
};
pub use features::{FeatureExtractor, FeatureSpec};
pub use layers::{Mode, ParamKind, Params};
pub use resnet::{ResNet, ResNetConfig};
pub use unet::{UNet, UNetConfig};

use crate::error::Result;
use crate::scalar::Scalar;
use ndarray::{Array2, Array4};

/// Build a transformation network (plain image → protected image) with
/// deterministic, seed-derived initialization.
pub fn build_transform_net<T: Scalar>(cfg: &UNetConfig, init_seed: u64) -> Result<UNet<T>> {
    UNet::build(cfg, init_seed)
}

/// Build an inverse network (protected image → estimated plain image); same
/// family and contracts as the transform net.
pub fn build_inverse_net<T: Scalar>(cfg: &UNetConfig, init_seed: u64) -> Result<UNet<T>> {
    UNet::build(cfg, init_seed)
}

/// Apply the transform in inference mode. Output shape equals input shape
/// and every value lies in [0, 1].
pub fn forward_transform<T: Scalar>(net: &UNet<T>, x: &Array4<T>) -> Result<Array4<T>> {
    net.infer(x)
}

/// Class-probability rows for a batch; each row sums to 1 within 1e-5.
pub fn classify<T: Scalar>(net: &ResNet<T>, x: &Array4<T>) -> Result<Array2<T>> {
    net.classify(x)
}

/// Feature maps `[m, C_k, H_k, W_k]` from the extractor's tap point.
pub fn extract_features<T: Scalar>(
    phi: &FeatureExtractor<'_, T>,
    x: &Array4<T>,
) -> Result<Array4<T>> {
    phi.extract(x)
}
