//! Inverse-network attack harness: an adversary who holds the public
//! transform builds (plain, protected) pairs, trains an inverse network on
//! them with a pixel MSE objective, and tries to reconstruct plain images
//! from protected ones.

use ndarray::{Array3, Array4, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::stack_pixels;
use crate::models::{Mode, Params, UNet};
use crate::scalar::Scalar;
use crate::training::{make_lr_schedule, Sgd};

/// One training example for the attacker. The invariant
/// `protected == transform(plain)` is recomputable; see [`verify_pairs`].
#[derive(Clone, Debug, PartialEq)]
pub struct AttackPair<T: Scalar> {
    pub plain: Array3<T>,
    pub protected: Array3<T>,
}

/// Which split the attacker builds its pair set from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitId {
    Train,
    Val,
    Test,
}

impl Default for SplitId {
    fn default() -> Self {
        SplitId::Train
    }
}

/// Attacker hyperparameters; optimizer semantics match the protection
/// training recipe.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub lr_factor: f64,
    pub lr_milestones: Vec<usize>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub pair_source: SplitId,
    /// Cap on how many pairs the attacker uses (0 = all available).
    pub pair_limit: usize,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            epochs: 200,
            batch_size: 128,
            base_lr: 0.1,
            lr_factor: 0.2,
            lr_milestones: vec![60, 120, 160],
            momentum: 0.9,
            weight_decay: 0.0005,
            seed: 0,
            pair_source: SplitId::Train,
            pair_limit: 0,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 1 {
            return Err(Error::Config("attack batch_size must be >= 1".into()));
        }
        if !self.lr_milestones.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Config(
                "attack lr_milestones must be strictly increasing".into(),
            ));
        }
        if self.base_lr <= 0.0 || self.lr_factor <= 0.0 {
            return Err(Error::Config(
                "attack base_lr and lr_factor must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Pair metadata written next to attack artifacts: which transform
/// checkpoint generated the pairs.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PairManifest {
    pub transform_digest: String,
    pub pair_count: usize,
    pub source: SplitId,
}

/// Push every image through the public transform; order is preserved and
/// `pairs[i].protected == transform(pairs[i].plain)` exactly.
pub fn generate_pairs<T: Scalar>(
    transform: &UNet<T>,
    images: &[Array3<T>],
) -> Result<Vec<AttackPair<T>>> {
    if images.is_empty() {
        return Err(Error::Domain("cannot build pairs from an empty image list".into()));
    }
    let mut pairs = Vec::with_capacity(images.len());
    for chunk in images.chunks(256) {
        let refs: Vec<&Array3<T>> = chunk.iter().collect();
        let batch = stack_pixels(&refs)?;
        let protected = transform.infer(&batch)?;
        for (i, plain) in chunk.iter().enumerate() {
            pairs.push(AttackPair {
                plain: (*plain).clone(),
                protected: protected.index_axis(Axis(0), i).to_owned(),
            });
        }
    }
    Ok(pairs)
}

/// Pairs under the identity transform (the attack-sanity control).
pub fn generate_identity_pairs<T: Scalar>(images: &[Array3<T>]) -> Result<Vec<AttackPair<T>>> {
    if images.is_empty() {
        return Err(Error::Domain("cannot build pairs from an empty image list".into()));
    }
    Ok(images
        .iter()
        .map(|img| AttackPair {
            plain: img.clone(),
            protected: img.clone(),
        })
        .collect())
}

/// Recompute the transform on every plain image and demand bitwise equality
/// with the stored protected image. Guards against pairs generated by a
/// stale transform version.
pub fn verify_pairs<T: Scalar>(transform: &UNet<T>, pairs: &[AttackPair<T>]) -> Result<()> {
    for chunk in pairs.chunks(256) {
        let refs: Vec<&Array3<T>> = chunk.iter().map(|p| &p.plain).collect();
        let batch = stack_pixels(&refs)?;
        let protected = transform.infer(&batch)?;
        for (i, pair) in chunk.iter().enumerate() {
            if protected.index_axis(Axis(0), i) != pair.protected {
                return Err(Error::Domain(
                    "pair set does not match the transform that generated it".into(),
                ));
            }
        }
    }
    Ok(())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct InverseEpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_mse: f64,
}

fn batch_of<T: Scalar>(
    pairs: &[AttackPair<T>],
    indices: &[usize],
) -> Result<(Array4<T>, Array4<T>)> {
    let protected: Vec<&Array3<T>> = indices.iter().map(|&i| &pairs[i].protected).collect();
    let plain: Vec<&Array3<T>> = indices.iter().map(|&i| &pairs[i].plain).collect();
    Ok((stack_pixels(&protected)?, stack_pixels(&plain)?))
}

/// Train the inverse net to minimize mean squared pixel error between
/// `g(protected)` and `plain`. `epochs = 0` returns the network untouched.
pub fn train_inverse<T: Scalar>(
    pairs: &[AttackPair<T>],
    g: &mut UNet<T>,
    cfg: &AttackConfig,
) -> Result<Vec<InverseEpochRecord>> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::Domain("cannot train the inverse net on zero pairs".into()));
    }
    let schedule = make_lr_schedule(cfg.base_lr, &cfg.lr_milestones, cfg.lr_factor)?;
    let mut opt = Sgd::new(T::from_f64(cfg.momentum), T::from_f64(cfg.weight_decay));
    let mut records = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        let lr = schedule.lr(epoch);
        let lr_t = T::from_f64(lr);
        let order = permutation(cfg.seed, epoch, pairs.len());
        let mut mse_sum = 0.0f64;
        let mut seen = 0usize;
        for (batch_idx, part) in order.chunks(cfg.batch_size).enumerate() {
            let (protected, plain) = batch_of(pairs, part)?;
            let y = g.forward(&protected, Mode::Train)?;
            let numel = T::from_f64(y.len() as f64);
            let two = T::from_f64(2.0);
            let mut diff = &y - &plain;
            let mut mse = T::zero();
            for &d in diff.iter() {
                mse = mse + d * d;
            }
            mse = mse / numel;
            if !mse.as_f64().is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    batch: batch_idx,
                    detail: format!("inverse-net mse {}", mse.as_f64()),
                });
            }
            diff.mapv_inplace(|v| v * two / numel);
            g.zero_grads();
            g.backward(&diff, true);
            opt.step(g, lr_t)?;
            mse_sum += mse.as_f64() * part.len() as f64;
            seen += part.len();
        }
        records.push(InverseEpochRecord {
            epoch,
            lr,
            train_mse: mse_sum / seen as f64,
        });
    }
    Ok(records)
}

/// Reconstructions for a batch of protected images; shape-, range-, and
/// determinism-preserving.
pub fn estimate<T: Scalar>(g: &UNet<T>, protected: &Array4<T>) -> Result<Array4<T>> {
    g.infer(protected)
}

fn permutation(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(
        seed ^ (epoch as u64).wrapping_mul(0xA076_1D64_78BD_642F),
    );
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    order
}

/// Mean squared error of the inverse net over a pair list (no training).
pub fn inverse_mse<T: Scalar>(pairs: &[AttackPair<T>], g: &UNet<T>) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Domain("mse over zero pairs".into()));
    }
    let mut sum = 0.0f64;
    let mut count = 0usize;
    for chunk in pairs.chunks(256) {
        let indices: Vec<usize> = (0..chunk.len()).collect();
        let (protected, plain) = batch_of(chunk, &indices)?;
        let est = g.infer(&protected)?;
        for (&a, &b) in est.iter().zip(plain.iter()) {
            let d = a.as_f64() - b.as_f64();
            sum += d * d;
        }
        count += est.len();
    }
    Ok(sum / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::UNetConfig;
    use ndarray::Array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy_unet(seed: u64) -> UNet<f64> {
        UNet::build(
            &UNetConfig {
                base_width: 4,
                depth: 1,
                batch_norm: false,
                ..Default::default()
            },
            seed,
        )
        .unwrap()
    }

    fn demo_images(n: usize, seed: u64) -> Vec<Array3<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| Array::from_shape_simple_fn((3, 8, 8), || rng.gen::<f64>()))
            .collect()
    }

    #[test]
    fn pairs_match_transform_output_in_order() {
        let h = toy_unet(1);
        let images = demo_images(5, 2);
        let pairs = generate_pairs(&h, &images).unwrap();
        assert_eq!(pairs.len(), 5);
        for (img, pair) in images.iter().zip(pairs.iter()) {
            assert_eq!(&pair.plain, img);
            let batch = stack_pixels(&[img]).unwrap();
            let expect = h.infer(&batch).unwrap().index_axis(Axis(0), 0).to_owned();
            assert_eq!(pair.protected, expect);
        }
        verify_pairs(&h, &pairs).unwrap();

        // a different transform fails fidelity
        let other = toy_unet(9);
        assert!(matches!(
            verify_pairs(&other, &pairs),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn identity_pairs_have_equal_sides() {
        let images = demo_images(3, 4);
        let pairs = generate_identity_pairs(&images).unwrap();
        for pair in &pairs {
            assert_eq!(pair.plain, pair.protected);
        }
        assert!(matches!(
            generate_identity_pairs::<f64>(&[]),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn zero_epochs_leaves_parameters_untouched() {
        let images = demo_images(4, 5);
        let pairs = generate_identity_pairs(&images).unwrap();
        let mut g = toy_unet(7);
        let mut before = Vec::new();
        g.visit("", &mut |_, _, v| before.push(v.to_owned()));
        let records = train_inverse(
            &pairs,
            &mut g,
            &AttackConfig {
                epochs: 0,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(records.is_empty());
        let mut idx = 0;
        g.visit("", &mut |_, _, v| {
            assert_eq!(v, before[idx].view());
            idx += 1;
        });
    }

    #[test]
    fn descent_on_learnable_identity_task() {
        let images = demo_images(32, 6);
        let pairs = generate_identity_pairs(&images).unwrap();
        let mut g = toy_unet(8);
        let initial = inverse_mse(&pairs, &g).unwrap();
        let cfg = AttackConfig {
            epochs: 10,
            batch_size: 8,
            base_lr: 0.05,
            lr_milestones: vec![],
            weight_decay: 0.0,
            ..Default::default()
        };
        let records = train_inverse(&pairs, &mut g, &cfg).unwrap();
        assert_eq!(records.len(), 10);
        let last = records.last().unwrap().train_mse;
        assert!(
            last < initial,
            "training mse {last} should drop below initial {initial}"
        );
    }

    #[test]
    fn training_is_reproducible() {
        let images = demo_images(16, 10);
        let pairs = generate_identity_pairs(&images).unwrap();
        let cfg = AttackConfig {
            epochs: 3,
            batch_size: 8,
            base_lr: 0.05,
            lr_milestones: vec![],
            ..Default::default()
        };
        let mut g1 = toy_unet(11);
        let mut g2 = toy_unet(11);
        train_inverse(&pairs, &mut g1, &cfg).unwrap();
        train_inverse(&pairs, &mut g2, &cfg).unwrap();
        let mut params1 = Vec::new();
        g1.visit("", &mut |_, _, v| params1.push(v.to_owned()));
        let mut idx = 0;
        g2.visit("", &mut |_, _, v| {
            assert_eq!(v, params1[idx].view(), "tensor {idx} differs");
            idx += 1;
        });
    }

    #[test]
    fn estimate_preserves_shape_range_determinism() {
        let g = toy_unet(12);
        let images = demo_images(4, 13);
        let refs: Vec<&Array3<f64>> = images.iter().collect();
        let batch = stack_pixels(&refs).unwrap();
        let e1 = estimate(&g, &batch).unwrap();
        let e2 = estimate(&g, &batch).unwrap();
        assert_eq!(e1.dim(), batch.dim());
        assert_eq!(e1, e2);
        assert!(e1.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}
