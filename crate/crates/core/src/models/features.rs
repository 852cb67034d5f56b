//! Feature maps used by the feature-reconstruction loss.
//!
//! The extractor either passes raw pixels through unchanged or taps an
//! internal stage of the classifier. Extraction always runs with eval
//! semantics so a feature map depends only on the image and the parameters,
//! never on batch composition.

use crate::error::Result;
use crate::scalar::Scalar;
use ndarray::Array4;
use serde::{Deserialize, Serialize};

use super::resnet::ResNet;

/// Which network layer supplies feature maps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum FeatureSpec {
    /// Layer 0: the image itself.
    Identity,
    /// Tap the classifier after `stage` (1 = stem, 2 = first residual
    /// stage, ...).
    ClassifierStage { stage: usize },
}

impl Default for FeatureSpec {
    fn default() -> Self {
        FeatureSpec::ClassifierStage { stage: 2 }
    }
}

/// A feature spec bound to the network that supplies the features.
pub enum FeatureExtractor<'a, T: Scalar> {
    Identity,
    ClassifierStage { net: &'a ResNet<T>, stage: usize },
}

impl<'a, T: Scalar> FeatureExtractor<'a, T> {
    /// Validates the layer index against the classifier topology.
    pub fn bind(spec: FeatureSpec, classifier: &'a ResNet<T>) -> Result<Self> {
        match spec {
            FeatureSpec::Identity => Ok(FeatureExtractor::Identity),
            FeatureSpec::ClassifierStage { stage } => {
                classifier.prefix_dims(stage, 32, 32)?;
                Ok(FeatureExtractor::ClassifierStage {
                    net: classifier,
                    stage,
                })
            }
        }
    }

    /// An extractor that needs no backing network.
    pub fn identity() -> FeatureExtractor<'static, T> {
        FeatureExtractor::Identity
    }

    /// Feature maps for a batch, shape `[m, C_k, H_k, W_k]`.
    pub fn extract(&self, x: &Array4<T>) -> Result<Array4<T>> {
        match self {
            FeatureExtractor::Identity => Ok(x.clone()),
            FeatureExtractor::ClassifierStage { net, stage } => net.infer_prefix(x, *stage),
        }
    }

    /// `(C_k, H_k, W_k)` for an input of the given spatial size.
    pub fn out_dims(&self, channels: usize, h: usize, w: usize) -> Result<(usize, usize, usize)> {
        match self {
            FeatureExtractor::Identity => Ok((channels, h, w)),
            FeatureExtractor::ClassifierStage { net, stage } => net.prefix_dims(*stage, h, w),
        }
    }
}
