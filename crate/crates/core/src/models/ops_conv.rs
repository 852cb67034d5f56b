//! Convolution kernels: im2col over fixed image chunks feeding one matrix
//! multiply per chunk. Chunks are processed in parallel but reduced in a
//! fixed order, so results are deterministic under any thread schedule.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use ndarray::linalg::general_mat_mul;
use ndarray::parallel::prelude::*;
use ndarray::{s, Array1, Array2, Array3, Array4, ArrayView3, ArrayView4, Axis};

/// Images per rayon work item.
const CONV_CHUNK: usize = 8;

pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

fn pad_image<T: Scalar>(x: &ArrayView3<'_, T>, pad: usize) -> Array3<T> {
    let (c, h, w) = x.dim();
    if pad == 0 {
        return x.to_owned();
    }
    let mut out = Array3::zeros((c, h + 2 * pad, w + 2 * pad));
    out.slice_mut(s![.., pad..pad + h, pad..pad + w]).assign(x);
    out
}

/// Write the receptive fields of one padded image into a column block of a
/// chunk-wide im2col matrix. `row_stride` is the full matrix width, and
/// `col_base` the first column of this image's block.
fn im2col_into<T: Scalar>(
    padded: &Array3<T>,
    kernel: usize,
    stride: usize,
    oh: usize,
    ow: usize,
    col: &mut [T],
    row_stride: usize,
    col_base: usize,
) {
    let c = padded.dim().0;
    let ph = padded.dim().1;
    let pw = padded.dim().2;
    let psl = padded.as_slice().expect("padded image is contiguous");
    let plane = ph * pw;
    for cc in 0..c {
        for kh in 0..kernel {
            for kw in 0..kernel {
                let row = (cc * kernel + kh) * kernel + kw;
                let dst_row = row * row_stride + col_base;
                for y in 0..oh {
                    let src = cc * plane + (y * stride + kh) * pw + kw;
                    let dst = dst_row + y * ow;
                    if stride == 1 {
                        col[dst..dst + ow].copy_from_slice(&psl[src..src + ow]);
                    } else {
                        for xo in 0..ow {
                            col[dst + xo] = psl[src + xo * stride];
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-add one image's column block back onto its padded gradient.
fn col2im_add<T: Scalar>(
    col: &[T],
    row_stride: usize,
    col_base: usize,
    padded: &mut Array3<T>,
    kernel: usize,
    stride: usize,
    oh: usize,
    ow: usize,
) {
    let c = padded.dim().0;
    let ph = padded.dim().1;
    let pw = padded.dim().2;
    let plane = ph * pw;
    let psl = padded.as_slice_mut().expect("padded image is contiguous");
    for cc in 0..c {
        for kh in 0..kernel {
            for kw in 0..kernel {
                let row = (cc * kernel + kh) * kernel + kw;
                let src_row = row * row_stride + col_base;
                for y in 0..oh {
                    let dst = cc * plane + (y * stride + kh) * pw + kw;
                    let src = src_row + y * ow;
                    if stride == 1 {
                        let d = &mut psl[dst..dst + ow];
                        let s_ = &col[src..src + ow];
                        for (dv, &sv) in d.iter_mut().zip(s_) {
                            *dv = *dv + sv;
                        }
                    } else {
                        for xo in 0..ow {
                            psl[dst + xo * stride] = psl[dst + xo * stride] + col[src + xo];
                        }
                    }
                }
            }
        }
    }
}

fn check_conv_shapes<T: Scalar>(
    x: &ArrayView4<'_, T>,
    w: &Array4<T>,
    stride: usize,
    pad: usize,
) -> Result<(usize, usize)> {
    let (_, cx, h, wd) = x.dim();
    let (_, cw, kh, kw) = w.dim();
    if kh != kw {
        return Err(Error::Config(format!("non-square conv kernel {kh}x{kw}")));
    }
    if cx != cw {
        return Err(Error::Domain(format!(
            "conv input has {cx} channels, weight expects {cw}"
        )));
    }
    if h + 2 * pad < kh || wd + 2 * pad < kh {
        return Err(Error::Domain(format!(
            "conv input {h}x{wd} smaller than kernel {kh} with pad {pad}"
        )));
    }
    Ok((conv_out_dim(h, kh, stride, pad), conv_out_dim(wd, kh, stride, pad)))
}

/// 2-D convolution. `x: [m,C,H,W]`, `w: [F,C,k,k]`, `b: [F]`.
pub fn conv2d_forward<T: Scalar>(
    x: &ArrayView4<'_, T>,
    w: &Array4<T>,
    b: &Array1<T>,
    stride: usize,
    pad: usize,
) -> Result<Array4<T>> {
    let (m, _, _, _) = x.dim();
    let (f, c, k, _) = w.dim();
    let (oh, ow) = check_conv_shapes(x, w, stride, pad)?;
    let ckk = c * k * k;
    let ohow = oh * ow;
    let w2 = w
        .view()
        .into_shape_with_order((f, ckk))
        .expect("conv weight is contiguous");
    let mut out = Array4::zeros((m, f, oh, ow));
    x.axis_chunks_iter(Axis(0), CONV_CHUNK)
        .into_par_iter()
        .zip(out.axis_chunks_iter_mut(Axis(0), CONV_CHUNK).into_par_iter())
        .for_each(|(xc, mut oc)| {
            let n = xc.dim().0;
            let width = n * ohow;
            let mut col = Array2::<T>::zeros((ckk, width));
            {
                let csl = col.as_slice_mut().expect("col is contiguous");
                for i in 0..n {
                    let padded = pad_image(&xc.index_axis(Axis(0), i), pad);
                    im2col_into(&padded, k, stride, oh, ow, csl, width, i * ohow);
                }
            }
            let mut y2 = Array2::<T>::zeros((f, width));
            general_mat_mul(T::one(), &w2, &col, T::zero(), &mut y2);
            let ysl = y2.as_slice().expect("gemm output is contiguous");
            let osl = oc.as_slice_mut().expect("output chunk is contiguous");
            for i in 0..n {
                for fi in 0..f {
                    let dst = (i * f + fi) * ohow;
                    let src = fi * width + i * ohow;
                    let bias = b[fi];
                    let dslice = &mut osl[dst..dst + ohow];
                    let sslice = &ysl[src..src + ohow];
                    for (dv, &sv) in dslice.iter_mut().zip(sslice) {
                        *dv = sv + bias;
                    }
                }
            }
        });
    Ok(out)
}

/// Gradients of `conv2d_forward`: returns `(dx, dw, db)`.
pub fn conv2d_backward<T: Scalar>(
    x: &ArrayView4<'_, T>,
    w: &Array4<T>,
    dy: &Array4<T>,
    stride: usize,
    pad: usize,
) -> Result<(Array4<T>, Array4<T>, Array1<T>)> {
    let (m, c, h, wd) = x.dim();
    let (f, _, k, _) = w.dim();
    let (oh, ow) = check_conv_shapes(x, w, stride, pad)?;
    assert_eq!(dy.dim(), (m, f, oh, ow), "conv backward dy shape");
    let ckk = c * k * k;
    let ohow = oh * ow;

    let w2 = w
        .view()
        .into_shape_with_order((f, ckk))
        .expect("conv weight is contiguous");

    let db = dy.sum_axis(Axis(3)).sum_axis(Axis(2)).sum_axis(Axis(0));

    let mut dx = Array4::zeros((m, c, h, wd));
    // per-chunk dw partials reduced in chunk order for determinism
    let partials: Vec<Array2<T>> = x
        .axis_chunks_iter(Axis(0), CONV_CHUNK)
        .into_par_iter()
        .zip(dy.axis_chunks_iter(Axis(0), CONV_CHUNK).into_par_iter())
        .zip(dx.axis_chunks_iter_mut(Axis(0), CONV_CHUNK).into_par_iter())
        .map(|((xc, dyc), mut dxc)| {
            let n = xc.dim().0;
            let width = n * ohow;
            let mut col = Array2::<T>::zeros((ckk, width));
            {
                let csl = col.as_slice_mut().expect("col is contiguous");
                for i in 0..n {
                    let padded = pad_image(&xc.index_axis(Axis(0), i), pad);
                    im2col_into(&padded, k, stride, oh, ow, csl, width, i * ohow);
                }
            }
            // dy transposed into [F, n*ohow] blocks
            let mut dy2 = Array2::<T>::zeros((f, width));
            {
                let dsl = dy2.as_slice_mut().expect("dy2 is contiguous");
                let src_all = dyc.as_slice().expect("dy chunk is contiguous");
                for i in 0..n {
                    for fi in 0..f {
                        let src = (i * f + fi) * ohow;
                        let dst = fi * width + i * ohow;
                        dsl[dst..dst + ohow].copy_from_slice(&src_all[src..src + ohow]);
                    }
                }
            }
            let mut dw2 = Array2::<T>::zeros((f, ckk));
            general_mat_mul(T::one(), &dy2, &col.t(), T::one(), &mut dw2);
            let mut dcol = Array2::<T>::zeros((ckk, width));
            general_mat_mul(T::one(), &w2.t(), &dy2, T::zero(), &mut dcol);
            let dcol_sl = dcol.as_slice().expect("dcol is contiguous");
            for i in 0..n {
                let mut dpad = Array3::zeros((c, h + 2 * pad, wd + 2 * pad));
                col2im_add(dcol_sl, width, i * ohow, &mut dpad, k, stride, oh, ow);
                dxc.index_axis_mut(Axis(0), i)
                    .assign(&dpad.slice(s![.., pad..pad + h, pad..pad + wd]));
            }
            dw2
        })
        .collect();
    let mut dw2 = Array2::zeros((f, ckk));
    for p in partials {
        dw2 += &p;
    }
    let dw = dw2
        .into_shape_with_order((f, c, k, k))
        .expect("dw is contiguous");
    Ok((dx, dw, db))
}
