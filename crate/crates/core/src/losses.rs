//! The composite training objective: cross-entropy on protected images minus
//! a weighted feature-reconstruction term.
//!
//! The feature term measures the mean squared distance between feature maps
//! of the plain and protected image; subtracting it (weight `alpha`) pushes
//! the transform to *destroy* feature-level similarity while the class term
//! keeps the protected image classifiable.

use ndarray::{Array1, Array2, Array4, ArrayView1, Axis};

use crate::data::OneHotLabel;
use crate::error::{Error, Result};
use crate::models::{FeatureExtractor, ResNet, UNet};
use crate::scalar::Scalar;

/// Probability floor that keeps `ln` finite when a class gets zero mass.
pub const PROB_FLOOR: f64 = 1e-12;

/// Per-image loss terms. `total = class_term - alpha * feat_term`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown<T: Scalar> {
    pub class_term: T,
    pub feat_term: T,
    pub alpha: T,
    pub total: T,
}

impl<T: Scalar> LossBreakdown<T> {
    pub fn compose(class_term: T, feat_term: T, alpha: T) -> Self {
        LossBreakdown {
            class_term,
            feat_term,
            alpha,
            total: class_term - alpha * feat_term,
        }
    }
}

/// Cross-entropy `-Σ_j y(j)·ln(ŷ(j))` with natural log and the probability
/// floor applied before the log.
pub fn classification_loss<T: Scalar>(
    y_hat: ArrayView1<'_, T>,
    y: &OneHotLabel<T>,
) -> Result<T> {
    if y_hat.len() != y.entries.len() {
        return Err(Error::Domain(format!(
            "probability vector has length {}, one-hot label has length {}",
            y_hat.len(),
            y.entries.len()
        )));
    }
    let floor = T::from_f64(PROB_FLOOR);
    let mut loss = T::zero();
    for (&p, &t) in y_hat.iter().zip(y.entries.iter()) {
        if t != T::zero() {
            loss = loss - t * p.max(floor).ln();
        }
    }
    Ok(loss)
}

/// Per-sample cross-entropy for whole batches of probability rows.
pub fn classification_loss_batch<T: Scalar>(
    probs: &Array2<T>,
    targets: &Array2<T>,
) -> Result<Array1<T>> {
    if probs.dim() != targets.dim() {
        return Err(Error::Domain(format!(
            "probability matrix {:?} does not match target matrix {:?}",
            probs.dim(),
            targets.dim()
        )));
    }
    let floor = T::from_f64(PROB_FLOOR);
    let mut out = Array1::zeros(probs.dim().0);
    for (i, (p, t)) in probs.outer_iter().zip(targets.outer_iter()).enumerate() {
        let mut loss = T::zero();
        for (&pj, &tj) in p.iter().zip(t.iter()) {
            if tj != T::zero() {
                loss = loss - tj * pj.max(floor).ln();
            }
        }
        out[i] = loss;
    }
    Ok(out)
}

/// Mean squared feature distance `‖φ(x̂) − φ(x)‖² / (C_k·H_k·W_k)` for one
/// image pair.
pub fn feature_loss<T: Scalar>(
    x: &Array4<T>,
    x_hat: &Array4<T>,
    phi: &FeatureExtractor<'_, T>,
) -> Result<T> {
    if x.dim() != x_hat.dim() {
        return Err(Error::Domain(format!(
            "feature loss inputs differ in shape: {:?} vs {:?}",
            x.dim(),
            x_hat.dim()
        )));
    }
    let per_sample = feature_loss_batch(x, x_hat, phi)?;
    let m = T::from_f64(per_sample.len() as f64);
    Ok(per_sample.sum() / m)
}

/// Per-sample feature losses for a batch.
pub fn feature_loss_batch<T: Scalar>(
    x: &Array4<T>,
    x_hat: &Array4<T>,
    phi: &FeatureExtractor<'_, T>,
) -> Result<Array1<T>> {
    if x.dim() != x_hat.dim() {
        return Err(Error::Domain(format!(
            "feature loss inputs differ in shape: {:?} vs {:?}",
            x.dim(),
            x_hat.dim()
        )));
    }
    let fx = phi.extract(x)?;
    let fxh = phi.extract(x_hat)?;
    Ok(feature_distance_per_sample(&fx, &fxh))
}

/// Mean squared difference per sample of two feature batches.
pub fn feature_distance_per_sample<T: Scalar>(fx: &Array4<T>, fxh: &Array4<T>) -> Array1<T> {
    let (m, c, h, w) = fx.dim();
    let n = T::from_f64((c * h * w) as f64);
    let mut out = Array1::zeros(m);
    for i in 0..m {
        let a = fx.index_axis(Axis(0), i);
        let b = fxh.index_axis(Axis(0), i);
        let mut acc = T::zero();
        ndarray::Zip::from(&a).and(&b).for_each(|&va, &vb| {
            let d = vb - va;
            acc = acc + d * d;
        });
        out[i] = acc / n;
    }
    out
}

/// Composite loss for one image: classification term on the protected image
/// minus `alpha` times the feature term.
pub fn transformation_loss<T: Scalar>(
    x: &Array4<T>,
    x_hat: &Array4<T>,
    y: &OneHotLabel<T>,
    psi: &ResNet<T>,
    phi: &FeatureExtractor<'_, T>,
    alpha: T,
) -> Result<LossBreakdown<T>> {
    if alpha < T::zero() {
        return Err(Error::Domain("alpha must be nonnegative".into()));
    }
    let probs = psi.classify(x_hat)?;
    let class_term = classification_loss(probs.row(0), y)?;
    let feat_term = feature_loss(x, x_hat, phi)?;
    Ok(LossBreakdown::compose(class_term, feat_term, alpha))
}

/// Batch objective: mean composite loss over the batch with
/// `x̂_i = h(x_i)`, evaluated with inference semantics (pure in its inputs).
pub fn batch_objective<T: Scalar>(
    x: &Array4<T>,
    targets: &Array2<T>,
    h: &UNet<T>,
    psi: &ResNet<T>,
    phi: &FeatureExtractor<'_, T>,
    alpha: T,
) -> Result<T> {
    let m = x.dim().0;
    if m == 0 {
        return Err(Error::Domain("batch objective over an empty batch".into()));
    }
    if targets.dim().0 != m {
        return Err(Error::Domain(format!(
            "batch has {m} images but {} target rows",
            targets.dim().0
        )));
    }
    let x_hat = h.infer(x)?;
    let probs = psi.classify(&x_hat)?;
    let class = classification_loss_batch(&probs, targets)?;
    let feat = feature_loss_batch(x, &x_hat, phi)?;
    let mf = T::from_f64(m as f64);
    Ok((class.sum() - alpha * feat.sum()) / mf)
}

/// Numerically stable per-sample cross-entropy straight from logits, plus
/// the unscaled logit gradient `softmax(z) − y`.
pub fn softmax_ce_with_grad<T: Scalar>(
    logits: &Array2<T>,
    targets: &Array2<T>,
) -> (Array1<T>, Array2<T>) {
    assert_eq!(
        logits.dim(),
        targets.dim(),
        "logit and target matrices must agree"
    );
    let (m, _) = logits.dim();
    let mut ce = Array1::zeros(m);
    let mut dlogits = logits.clone();
    for (i, (mut zrow, trow)) in dlogits
        .outer_iter_mut()
        .zip(targets.outer_iter())
        .enumerate()
    {
        let max = zrow.iter().cloned().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in zrow.iter() {
            sum = sum + (*v - max).exp();
        }
        let lse = max + sum.ln();
        let mut loss = T::zero();
        for (v, &t) in zrow.iter_mut().zip(trow.iter()) {
            let logp = *v - lse;
            if t != T::zero() {
                loss = loss - t * logp;
            }
            *v = logp.exp() - t;
        }
        ce[i] = loss;
    }
    (ce, dlogits)
}
