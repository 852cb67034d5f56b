//! Tensor primitives with hand-written forward/backward passes.
//!
//! Everything here is a pure function of its inputs so the same code path
//! serves training, inference, and the finite-difference checks. Batches are
//! `[m, C, H, W]` in standard (row-major) layout; the hot loops work on raw
//! slices per image plane.

use crate::scalar::Scalar;
use ndarray::{s, Array1, Array2, Array4, Axis};

pub use super::ops_conv::{conv2d_backward, conv2d_forward, conv_out_dim};

use crate::error::{Error, Result};

/// Cache from a train-mode batchnorm forward.
pub struct BnTrainCache<T> {
    pub xhat: Array4<T>,
    pub inv_std: Array1<T>,
}

/// Train-mode batchnorm: normalize with batch statistics and fold the batch
/// into the running estimates (unbiased variance for the running update).
pub fn batchnorm_train_forward<T: Scalar>(
    x: &Array4<T>,
    gamma: &Array1<T>,
    beta: &Array1<T>,
    running_mean: &mut Array1<T>,
    running_var: &mut Array1<T>,
    momentum: T,
    eps: T,
) -> (Array4<T>, BnTrainCache<T>) {
    let (m, c, h, w) = x.dim();
    let plane = h * w;
    let count = m * plane;
    let n = T::from_f64(count as f64);
    let mut y = Array4::zeros((m, c, h, w));
    let mut xhat = Array4::zeros((m, c, h, w));
    let mut inv_std = Array1::zeros(c);
    let xs = x.as_slice().expect("input is contiguous");
    let ys = y.as_slice_mut().expect("output is contiguous");
    let hs = xhat.as_slice_mut().expect("xhat is contiguous");
    for ch in 0..c {
        let mut sum = T::zero();
        for i in 0..m {
            let off = (i * c + ch) * plane;
            for &v in &xs[off..off + plane] {
                sum = sum + v;
            }
        }
        let mean = sum / n;
        let mut var = T::zero();
        for i in 0..m {
            let off = (i * c + ch) * plane;
            for &v in &xs[off..off + plane] {
                let d = v - mean;
                var = var + d * d;
            }
        }
        var = var / n;
        let istd = (var + eps).sqrt().recip();
        inv_std[ch] = istd;

        let unbiased = if count > 1 {
            var * T::from_f64(count as f64 / (count - 1) as f64)
        } else {
            var
        };
        running_mean[ch] = (T::one() - momentum) * running_mean[ch] + momentum * mean;
        running_var[ch] = (T::one() - momentum) * running_var[ch] + momentum * unbiased;

        let g = gamma[ch];
        let b = beta[ch];
        for i in 0..m {
            let off = (i * c + ch) * plane;
            for j in off..off + plane {
                let norm = (xs[j] - mean) * istd;
                hs[j] = norm;
                ys[j] = g * norm + b;
            }
        }
    }
    (y, BnTrainCache { xhat, inv_std })
}

/// Backward through train-mode batchnorm. Returns `(dx, dgamma, dbeta)`.
pub fn batchnorm_train_backward<T: Scalar>(
    cache: &BnTrainCache<T>,
    gamma: &Array1<T>,
    dy: &Array4<T>,
) -> (Array4<T>, Array1<T>, Array1<T>) {
    let (m, c, h, w) = dy.dim();
    let plane = h * w;
    let n = T::from_f64((m * plane) as f64);
    let mut dx = Array4::zeros((m, c, h, w));
    let mut dgamma = Array1::zeros(c);
    let mut dbeta = Array1::zeros(c);
    let dys = dy.as_slice().expect("dy is contiguous");
    let hs = cache.xhat.as_slice().expect("xhat is contiguous");
    let dxs = dx.as_slice_mut().expect("dx is contiguous");
    for ch in 0..c {
        let mut sum_dy = T::zero();
        let mut sum_dy_xhat = T::zero();
        for i in 0..m {
            let off = (i * c + ch) * plane;
            for j in off..off + plane {
                sum_dy = sum_dy + dys[j];
                sum_dy_xhat = sum_dy_xhat + dys[j] * hs[j];
            }
        }
        dbeta[ch] = sum_dy;
        dgamma[ch] = sum_dy_xhat;
        let scale = gamma[ch] * cache.inv_std[ch] / n;
        for i in 0..m {
            let off = (i * c + ch) * plane;
            for j in off..off + plane {
                dxs[j] = scale * (n * dys[j] - sum_dy - hs[j] * sum_dy_xhat);
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// Eval-mode batchnorm is a per-channel affine map using the running stats.
pub fn batchnorm_eval_forward<T: Scalar>(
    x: &ndarray::ArrayView4<'_, T>,
    gamma: &Array1<T>,
    beta: &Array1<T>,
    running_mean: &Array1<T>,
    running_var: &Array1<T>,
    eps: T,
) -> Array4<T> {
    let (m, c, h, w) = x.dim();
    let plane = h * w;
    let mut y = x.to_owned();
    let ys = y.as_slice_mut().expect("output is contiguous");
    for ch in 0..c {
        let scale = gamma[ch] * (running_var[ch] + eps).sqrt().recip();
        let shift = beta[ch] - running_mean[ch] * scale;
        for i in 0..m {
            let off = (i * c + ch) * plane;
            for v in &mut ys[off..off + plane] {
                *v = *v * scale + shift;
            }
        }
    }
    y
}

/// Input gradient of the eval-mode (affine) batchnorm.
pub fn batchnorm_eval_backward<T: Scalar>(
    gamma: &Array1<T>,
    running_var: &Array1<T>,
    eps: T,
    dy: &Array4<T>,
) -> Array4<T> {
    let (m, c, h, w) = dy.dim();
    let plane = h * w;
    let mut dx = dy.clone();
    let ds = dx.as_slice_mut().expect("dx is contiguous");
    for ch in 0..c {
        let scale = gamma[ch] * (running_var[ch] + eps).sqrt().recip();
        for i in 0..m {
            let off = (i * c + ch) * plane;
            for v in &mut ds[off..off + plane] {
                *v = *v * scale;
            }
        }
    }
    dx
}

pub fn relu_forward<T: Scalar>(x: &Array4<T>) -> Array4<T> {
    x.mapv(|v| if v > T::zero() { v } else { T::zero() })
}

/// `y` is the relu output; its sign pattern is the mask.
pub fn relu_backward<T: Scalar>(y: &Array4<T>, dy: &Array4<T>) -> Array4<T> {
    let mut dx = dy.clone();
    ndarray::Zip::from(&mut dx).and(y).for_each(|d, &yv| {
        if yv <= T::zero() {
            *d = T::zero();
        }
    });
    dx
}

pub fn sigmoid_forward<T: Scalar>(x: &Array4<T>) -> Array4<T> {
    x.mapv(|v| T::one() / (T::one() + (-v).exp()))
}

pub fn sigmoid_backward<T: Scalar>(y: &Array4<T>, dy: &Array4<T>) -> Array4<T> {
    let mut dx = dy.clone();
    ndarray::Zip::from(&mut dx).and(y).for_each(|d, &yv| {
        *d = *d * yv * (T::one() - yv);
    });
    dx
}

/// 2×2 max pool, stride 2. Returns the pooled map and the winning position
/// (0..4, row-major within each window) for the backward pass.
pub fn maxpool2_forward<T: Scalar>(x: &Array4<T>) -> Result<(Array4<T>, Array4<u8>)> {
    let (m, c, h, w) = x.dim();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Domain(format!(
            "maxpool2 needs even spatial dims, got {h}x{w}"
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut y = Array4::zeros((m, c, oh, ow));
    let mut idx = Array4::zeros((m, c, oh, ow));
    let xs = x.as_slice().expect("input is contiguous");
    let ys = y.as_slice_mut().expect("output is contiguous");
    let is = idx.as_slice_mut().expect("idx is contiguous");
    let planes = m * c;
    for p in 0..planes {
        let src = &xs[p * h * w..(p + 1) * h * w];
        let dst_base = p * oh * ow;
        for yy in 0..oh {
            let r0 = 2 * yy * w;
            let r1 = r0 + w;
            let dst_row = dst_base + yy * ow;
            for xx in 0..ow {
                let cands = [
                    src[r0 + 2 * xx],
                    src[r0 + 2 * xx + 1],
                    src[r1 + 2 * xx],
                    src[r1 + 2 * xx + 1],
                ];
                let mut best = cands[0];
                let mut pos = 0u8;
                for (q, &v) in cands.iter().enumerate().skip(1) {
                    if v > best {
                        best = v;
                        pos = q as u8;
                    }
                }
                ys[dst_row + xx] = best;
                is[dst_row + xx] = pos;
            }
        }
    }
    Ok((y, idx))
}

pub fn maxpool2_backward<T: Scalar>(idx: &Array4<u8>, dy: &Array4<T>) -> Array4<T> {
    let (m, c, oh, ow) = dy.dim();
    let (h, w) = (oh * 2, ow * 2);
    let mut dx = Array4::zeros((m, c, h, w));
    let is = idx.as_slice().expect("idx is contiguous");
    let dys = dy.as_slice().expect("dy is contiguous");
    let dxs = dx.as_slice_mut().expect("dx is contiguous");
    let planes = m * c;
    for p in 0..planes {
        let src_base = p * oh * ow;
        let dst_base = p * h * w;
        for yy in 0..oh {
            let src_row = src_base + yy * ow;
            let r0 = dst_base + 2 * yy * w;
            let r1 = r0 + w;
            for xx in 0..ow {
                let pos = is[src_row + xx] as usize;
                let dst = if pos < 2 { r0 + 2 * xx + pos } else { r1 + 2 * xx + pos - 2 };
                dxs[dst] = dys[src_row + xx];
            }
        }
    }
    dx
}

/// Nearest-neighbour ×2 upsample.
pub fn upsample2_forward<T: Scalar>(x: &Array4<T>) -> Array4<T> {
    let (m, c, h, w) = x.dim();
    let mut y = Array4::zeros((m, c, h * 2, w * 2));
    let xs = x.as_slice().expect("input is contiguous");
    let ys = y.as_slice_mut().expect("output is contiguous");
    let planes = m * c;
    let w2 = 2 * w;
    for p in 0..planes {
        let src_base = p * h * w;
        let dst_base = p * h * w * 4;
        for yy in 0..h {
            let src = &xs[src_base + yy * w..src_base + (yy + 1) * w];
            let d0 = dst_base + 2 * yy * w2;
            for xx in 0..w {
                let v = src[xx];
                ys[d0 + 2 * xx] = v;
                ys[d0 + 2 * xx + 1] = v;
            }
            ys.copy_within(d0..d0 + w2, d0 + w2);
        }
    }
    y
}

pub fn upsample2_backward<T: Scalar>(dy: &Array4<T>) -> Array4<T> {
    let (m, c, h2, w2) = dy.dim();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut dx = Array4::zeros((m, c, h, w));
    let dys = dy.as_slice().expect("dy is contiguous");
    let dxs = dx.as_slice_mut().expect("dx is contiguous");
    let planes = m * c;
    for p in 0..planes {
        let dst_base = p * h * w;
        let src_base = p * h2 * w2;
        for yy in 0..h {
            let r0 = src_base + 2 * yy * w2;
            let r1 = r0 + w2;
            let dst = dst_base + yy * w;
            for xx in 0..w {
                dxs[dst + xx] = dys[r0 + 2 * xx]
                    + dys[r0 + 2 * xx + 1]
                    + dys[r1 + 2 * xx]
                    + dys[r1 + 2 * xx + 1];
            }
        }
    }
    dx
}

/// Concatenate along the channel axis.
pub fn concat_channels<T: Scalar>(a: &Array4<T>, b: &Array4<T>) -> Array4<T> {
    ndarray::concatenate(Axis(1), &[a.view(), b.view()]).expect("concat shapes agree")
}

/// Split a channel-concat gradient back into its two parts.
pub fn split_channels<T: Scalar>(dy: &Array4<T>, ca: usize) -> (Array4<T>, Array4<T>) {
    let da = dy.slice(s![.., ..ca, .., ..]).to_owned();
    let db = dy.slice(s![.., ca.., .., ..]).to_owned();
    (da, db)
}

pub fn global_avg_pool<T: Scalar>(x: &Array4<T>) -> Array2<T> {
    let (_, _, h, w) = x.dim();
    let n = T::from_f64((h * w) as f64);
    x.sum_axis(Axis(3)).sum_axis(Axis(2)).mapv(|v| v / n)
}

pub fn global_avg_pool_backward<T: Scalar>(dy: &Array2<T>, spatial: (usize, usize)) -> Array4<T> {
    let (m, c) = dy.dim();
    let (h, w) = spatial;
    let n = T::from_f64((h * w) as f64);
    let mut dx = Array4::zeros((m, c, h, w));
    for i in 0..m {
        for ch in 0..c {
            let g = dy[[i, ch]] / n;
            dx.slice_mut(s![i, ch, .., ..]).fill(g);
        }
    }
    dx
}

/// Fully connected layer. `x: [m,d]`, `w: [c,d]`, `b: [c]`.
pub fn linear_forward<T: Scalar>(x: &Array2<T>, w: &Array2<T>, b: &Array1<T>) -> Array2<T> {
    let mut y = x.dot(&w.t());
    for mut row in y.outer_iter_mut() {
        row += b;
    }
    y
}

pub fn linear_backward<T: Scalar>(
    x: &Array2<T>,
    w: &Array2<T>,
    dy: &Array2<T>,
) -> (Array2<T>, Array2<T>, Array1<T>) {
    let dx = dy.dot(w);
    let dw = dy.t().dot(x);
    let db = dy.sum_axis(Axis(0));
    (dx, dw, db)
}

/// Row-wise numerically stable softmax.
pub fn softmax_rows<T: Scalar>(z: &Array2<T>) -> Array2<T> {
    let mut p = z.clone();
    for mut row in p.outer_iter_mut() {
        let max = row.iter().cloned().fold(T::neg_infinity(), T::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    p
}
