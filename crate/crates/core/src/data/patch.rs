use rand::Rng;

use super::image::ImageBuffer;
use super::resize::bicubic_resize;
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

pub const DEFAULT_PATCH: usize = 48;

/// Transform applied to a training pair, in order: horizontal flip,
/// vertical flip, 90 degree rotation (counter-clockwise).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Augment {
    pub flip_h: bool,
    pub flip_v: bool,
    pub rot90: bool,
}

impl Augment {
    pub fn random(rng: &mut impl Rng) -> Self {
        Self {
            flip_h: rng.gen_bool(0.5),
            flip_v: rng.gen_bool(0.5),
            rot90: rng.gen_bool(0.5),
        }
    }

    pub fn apply<T: Real>(&self, t: &Tensor<T>) -> Tensor<T> {
        let mut out = t.clone();
        if self.flip_h {
            out = flip_h(&out);
        }
        if self.flip_v {
            out = flip_v(&out);
        }
        if self.rot90 {
            out = rot90(&out);
        }
        out
    }

    pub fn invert<T: Real>(&self, t: &Tensor<T>) -> Tensor<T> {
        let mut out = t.clone();
        if self.rot90 {
            out = rot90(&rot90(&rot90(&out)));
        }
        if self.flip_v {
            out = flip_v(&out);
        }
        if self.flip_h {
            out = flip_h(&out);
        }
        out
    }
}

pub fn flip_h<T: Real>(t: &Tensor<T>) -> Tensor<T> {
    let w = t.w();
    Tensor::from_fn(t.shape(), |[n, c, y, x]| t.at(n, c, y, w - 1 - x))
}

pub fn flip_v<T: Real>(t: &Tensor<T>) -> Tensor<T> {
    let h = t.h();
    Tensor::from_fn(t.shape(), |[n, c, y, x]| t.at(n, c, h - 1 - y, x))
}

/// Counter-clockwise quarter turn; `(h, w)` becomes `(w, h)`.
pub fn rot90<T: Real>(t: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = t.shape();
    Tensor::from_fn([n, c, w, h], |[b, ch, y, x]| t.at(b, ch, x, w - 1 - y))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplePair {
    pub lr: Tensor<f32>,
    pub hr: Tensor<f32>,
    pub augment: Augment,
    /// Top-left corner of the LR crop; the HR crop starts at `scale` times this.
    pub lr_origin: (usize, usize),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PatchOptions {
    pub patch: usize,
    pub scale: usize,
    pub augment: bool,
    pub rgb_range: f64,
}

impl PatchOptions {
    pub fn new(scale: usize) -> Self {
        Self {
            patch: DEFAULT_PATCH,
            scale,
            augment: true,
            rgb_range: 1.0,
        }
    }
}

/// LR patch of `hr` at LR coordinates `(x, y)`: either cropped from a paired
/// LR image or produced by bicubic downscaling of the matching HR crop.
pub fn crop_pair(
    hr: &ImageBuffer,
    lr: Option<&ImageBuffer>,
    opts: &PatchOptions,
    x: usize,
    y: usize,
) -> Result<(ImageBuffer, ImageBuffer)> {
    let (p, s) = (opts.patch, opts.scale);
    let hr_crop = hr.crop(s * x, s * y, s * p, s * p)?;
    let lr_crop = match lr {
        Some(img) => img.crop(x, y, p, p)?,
        None => bicubic_resize(&hr_crop, p, p)?,
    };
    Ok((lr_crop, hr_crop))
}

/// Uniformly placed, scale-aligned crop with optional augmentation.
pub fn sample_patch(
    hr: &ImageBuffer,
    lr: Option<&ImageBuffer>,
    opts: &PatchOptions,
    rng: &mut impl Rng,
) -> Result<SamplePair> {
    let (p, s) = (opts.patch, opts.scale);
    if p == 0 || s == 0 {
        return Err(Error::InvalidArgument("patch size and scale must be positive".into()));
    }
    let (mut max_x, mut max_y) = (hr.width() / s, hr.height() / s);
    if let Some(img) = lr {
        max_x = max_x.min(img.width());
        max_y = max_y.min(img.height());
    }
    if max_x < p || max_y < p {
        return Err(Error::InvalidArgument(format!(
            "{}x{} image is too small for a {}x{} crop at scale {s}",
            hr.width(),
            hr.height(),
            p * s,
            p * s
        )));
    }
    let x = rng.gen_range(0..=max_x - p);
    let y = rng.gen_range(0..=max_y - p);
    let (lr_crop, hr_crop) = crop_pair(hr, lr, opts, x, y)?;
    let augment = if opts.augment {
        Augment::random(rng)
    } else {
        Augment::default()
    };
    Ok(SamplePair {
        lr: augment.apply(&lr_crop.to_tensor(opts.rgb_range)),
        hr: augment.apply(&hr_crop.to_tensor(opts.rgb_range)),
        augment,
        lr_origin: (x, y),
    })
}

/// Stacks single-item tensors along the batch axis.
pub fn stack<T: Real>(items: &[Tensor<T>]) -> Result<Tensor<T>> {
    let first = items
        .first()
        .ok_or_else(|| Error::InvalidArgument("cannot stack an empty list".into()))?;
    let [_, c, h, w] = first.shape();
    let mut data = Vec::with_capacity(items.len() * first.len());
    for t in items {
        if t.shape() != [1, c, h, w] {
            return Err(Error::shape("stack", format!("{:?} vs {:?}", t.shape(), first.shape())));
        }
        data.extend_from_slice(t.data());
    }
    Tensor::from_vec([items.len(), c, h, w], data)
}
