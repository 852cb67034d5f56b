//! Lossless raster I/O. Images cross the process boundary as 8-bit RGB PNG;
//! quantization to and from bytes is the canonical public form of a
//! protected image, so client, server, and files all see identical pixels.

use std::io::Cursor;
use std::path::Path;

use image::{ImageFormat, RgbImage};
use ndarray::Array3;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Round `[0,1]` pixels to bytes.
pub fn to_u8<T: Scalar>(pixels: &Array3<T>) -> Result<Array3<u8>> {
    let (c, h, w) = pixels.dim();
    if c != 3 {
        return Err(Error::Domain(format!("raster I/O expects 3 channels, got {c}")));
    }
    let mut out = Array3::zeros((c, h, w));
    for (dst, &src) in out.iter_mut().zip(pixels.iter()) {
        let v = src.as_f64().clamp(0.0, 1.0);
        *dst = (v * 255.0).round() as u8;
    }
    Ok(out)
}

pub fn from_u8<T: Scalar>(bytes: &Array3<u8>) -> Array3<T> {
    bytes.mapv(|b| T::from_f64(b as f64 / 255.0))
}

/// Quantize to the 8-bit grid that files and the wire carry.
pub fn quantize<T: Scalar>(pixels: &Array3<T>) -> Result<Array3<T>> {
    Ok(from_u8(&to_u8(pixels)?))
}

fn rgb_from_chw(bytes: &Array3<u8>) -> RgbImage {
    let (_, h, w) = bytes.dim();
    let mut img = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            img.put_pixel(
                x as u32,
                y as u32,
                image::Rgb([bytes[[0, y, x]], bytes[[1, y, x]], bytes[[2, y, x]]]),
            );
        }
    }
    img
}

fn chw_from_rgb(img: &RgbImage) -> Array3<u8> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = Array3::zeros((3, h, w));
    for y in 0..h {
        for x in 0..w {
            let p = img.get_pixel(x as u32, y as u32);
            out[[0, y, x]] = p[0];
            out[[1, y, x]] = p[1];
            out[[2, y, x]] = p[2];
        }
    }
    out
}

/// PNG-encode an image (quantizing to 8 bits).
pub fn encode_png<T: Scalar>(pixels: &Array3<T>) -> Result<Vec<u8>> {
    let img = rgb_from_chw(&to_u8(pixels)?);
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png)
        .map_err(|e| Error::Serialization(format!("png encode failed: {e}")))?;
    Ok(buf.into_inner())
}

pub fn decode_png<T: Scalar>(bytes: &[u8]) -> Result<Array3<T>> {
    let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)
        .map_err(|e| Error::Protocol(format!("payload is not a valid png: {e}")))?
        .to_rgb8();
    Ok(from_u8(&chw_from_rgb(&img)))
}

pub fn write_png<T: Scalar>(pixels: &Array3<T>, path: &Path) -> Result<()> {
    let bytes = encode_png(pixels)?;
    std::fs::write(path, bytes)
        .map_err(|e| Error::File(format!("cannot write {}: {e}", path.display())))
}

pub fn read_png<T: Scalar>(path: &Path) -> Result<Array3<T>> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::File(format!("cannot read {}: {e}", path.display())))?;
    let img = image::load_from_memory(&bytes)
        .map_err(|e| Error::File(format!("{} is not a readable image: {e}", path.display())))?
        .to_rgb8();
    Ok(from_u8(&chw_from_rgb(&img)))
}
