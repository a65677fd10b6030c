//! Separable bicubic resampling with the Keys kernel (`a = -0.5`).
//!
//! Sample positions follow the pixel-centre convention
//! `u = (i + 0.5) / scale - 0.5`. When shrinking, the kernel is stretched by
//! `1 / scale` so it also acts as the anti-aliasing filter. Taps that fall
//! outside the image are clamped to the nearest edge pixel.

use super::image::ImageBuffer;
use crate::error::{Error, Result};

pub const KEYS_A: f64 = -0.5;

/// Keys cubic convolution kernel.
pub fn cubic(x: f64) -> f64 {
    let a = KEYS_A;
    let x = x.abs();
    if x <= 1.0 {
        ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a
    } else {
        0.0
    }
}

/// Source indices and normalised weights for each output position along one axis.
fn contributions(in_len: usize, out_len: usize) -> Vec<(Vec<usize>, Vec<f64>)> {
    let scale = out_len as f64 / in_len as f64;
    let k = scale.min(1.0);
    let support = 2.0 / k;
    (0..out_len)
        .map(|i| {
            let u = (i as f64 + 0.5) / scale - 0.5;
            let first = (u - support).floor() as i64;
            let last = (u + support).ceil() as i64;
            let mut idx = Vec::new();
            let mut wts = Vec::new();
            for j in first..=last {
                let w = k * cubic(k * (u - j as f64));
                if w != 0.0 {
                    idx.push(j.clamp(0, in_len as i64 - 1) as usize);
                    wts.push(w);
                }
            }
            let sum: f64 = wts.iter().sum();
            wts.iter_mut().for_each(|w| *w /= sum);
            (idx, wts)
        })
        .collect()
}

/// Resizes a row-major `w x h` float plane to `new_w x new_h`.
pub fn resize_plane(src: &[f64], w: usize, h: usize, new_w: usize, new_h: usize) -> Vec<f64> {
    assert_eq!(src.len(), w * h, "plane size");
    let cols = contributions(w, new_w);
    let mut tmp = vec![0.0; new_w * h];
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        for (x, (idx, wts)) in cols.iter().enumerate() {
            tmp[y * new_w + x] = idx.iter().zip(wts).map(|(&j, &wt)| row[j] * wt).sum();
        }
    }
    let rows = contributions(h, new_h);
    let mut out = vec![0.0; new_w * new_h];
    for (y, (idx, wts)) in rows.iter().enumerate() {
        for x in 0..new_w {
            out[y * new_w + x] = idx.iter().zip(wts).map(|(&j, &wt)| tmp[j * new_w + x] * wt).sum();
        }
    }
    out
}

/// Bicubic resize to explicit dimensions.
pub fn bicubic_resize(img: &ImageBuffer, new_w: usize, new_h: usize) -> Result<ImageBuffer> {
    if new_w == 0 || new_h == 0 {
        return Err(Error::InvalidArgument(format!(
            "target size {new_w}x{new_h} must be positive"
        )));
    }
    let (w, h) = (img.width(), img.height());
    let planes: Vec<Vec<f64>> = (0..3)
        .map(|c| resize_plane(&img.channel(c), w, h, new_w, new_h))
        .collect();
    ImageBuffer::from_channels(new_w, new_h, [&planes[0], &planes[1], &planes[2]])
}

/// Bicubic resize by a factor; target sizes are rounded and at least 1.
pub fn bicubic_scale(img: &ImageBuffer, factor: f64) -> Result<ImageBuffer> {
    if !(factor > 0.0 && factor.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "scale factor {factor} must be positive"
        )));
    }
    let dim = |d: usize| ((d as f64 * factor).round() as usize).max(1);
    bicubic_resize(img, dim(img.width()), dim(img.height()))
}

/// Bicubic degradation by an integer factor; dimensions are floored.
pub fn downscale(img: &ImageBuffer, s: usize) -> Result<ImageBuffer> {
    let (w, h) = (img.width() / s.max(1), img.height() / s.max(1));
    if s == 0 || w == 0 || h == 0 {
        return Err(Error::InvalidArgument(format!(
            "cannot downscale {}x{} by {s}",
            img.width(),
            img.height()
        )));
    }
    bicubic_resize(img, w, h)
}
