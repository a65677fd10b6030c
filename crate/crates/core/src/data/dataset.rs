use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::image::ImageBuffer;
use super::patch::{sample_patch, stack, PatchOptions};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Item {
    pub name: String,
    pub hr: ImageBuffer,
    pub lr: Option<ImageBuffer>,
}

/// HR images, optionally paired with pre-computed LR images.
#[derive(Clone, Debug)]
pub struct Dataset {
    scale: usize,
    items: Vec<Item>,
}

/// Sorted `*.png` files in `dir`.
pub fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::InvalidArgument(format!("{}: {e}", dir.display())))? {
        let path = entry?.path();
        if path.is_file() && path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// `LR_x{s}` next to `hr_dir`, if it exists.
pub fn lr_sibling(hr_dir: &Path, scale: usize) -> Option<PathBuf> {
    let dir = hr_dir.parent()?.join(format!("LR_x{scale}"));
    dir.is_dir().then_some(dir)
}

/// LR file for `stem` in `lr_dir`: `stem.png` or `stem` + `x{s}.png`.
pub fn find_lr(lr_dir: &Path, stem: &str, scale: usize) -> Option<PathBuf> {
    [format!("{stem}.png"), format!("{stem}x{scale}.png")]
        .into_iter()
        .map(|f| lr_dir.join(f))
        .find(|p| p.is_file())
}

impl Dataset {
    pub fn from_images(scale: usize, images: Vec<(String, ImageBuffer)>) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::InvalidArgument("dataset is empty".into()));
        }
        let items = images
            .into_iter()
            .map(|(name, hr)| Item { name, hr, lr: None })
            .collect();
        Ok(Self { scale, items })
    }

    /// Loads every PNG in `hr_dir`. LR partners are taken from `lr_dir`, or
    /// from an `LR_x{s}` sibling directory when none is given; images without
    /// a partner are degraded on the fly.
    pub fn load_dir(hr_dir: &Path, lr_dir: Option<&Path>, scale: usize) -> Result<Self> {
        let lr_dir = lr_dir.map(Path::to_path_buf).or_else(|| lr_sibling(hr_dir, scale));
        let mut items = Vec::new();
        for path in list_pngs(hr_dir)? {
            let name = stem(&path);
            let hr = ImageBuffer::load_png(&path)?;
            let lr = match lr_dir.as_deref().and_then(|d| find_lr(d, &name, scale)) {
                Some(p) => Some(ImageBuffer::load_png(&p)?),
                None => None,
            };
            if let Some(l) = &lr {
                if l.width() * scale > hr.width() || l.height() * scale > hr.height() {
                    return Err(Error::InvalidArgument(format!(
                        "LR image for {name} is {}x{}, too large for {}x{} at scale {scale}",
                        l.width(),
                        l.height(),
                        hr.width(),
                        hr.height()
                    )));
                }
            }
            items.push(Item { name, hr, lr });
        }
        if items.is_empty() {
            return Err(Error::InvalidArgument(format!("no PNG images in {}", hr_dir.display())));
        }
        Ok(Self { scale, items })
    }

    /// Smooth gradients, oriented stripes and a few hard-edged boxes.
    pub fn synthetic(count: usize, size: usize, scale: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let images = (0..count)
            .map(|i| {
                let freq: f64 = rng.gen_range(0.05..0.3);
                let angle: f64 = rng.gen_range(0.0..std::f64::consts::PI);
                let (ca, sa) = (angle.cos(), angle.sin());
                let tint: [f64; 3] = [
                    rng.gen_range(0.3..1.0),
                    rng.gen_range(0.3..1.0),
                    rng.gen_range(0.3..1.0),
                ];
                let boxes: Vec<(usize, usize, usize, [u8; 3])> = (0..3)
                    .map(|_| {
                        let w = rng.gen_range(size / 8..size / 3);
                        (
                            rng.gen_range(0..size - w),
                            rng.gen_range(0..size - w),
                            w,
                            [rng.gen(), rng.gen(), rng.gen()],
                        )
                    })
                    .collect();
                let img = ImageBuffer::from_fn(size, size, |x, y| {
                    for &(bx, by, bw, col) in &boxes {
                        if (bx..bx + bw).contains(&x) && (by..by + bw).contains(&y) {
                            return col;
                        }
                    }
                    let t = (x as f64 * ca + y as f64 * sa) * freq;
                    let ramp = (x + y) as f64 / (2 * size) as f64;
                    let v = 0.5 + 0.35 * t.sin() + 0.15 * (ramp - 0.5);
                    tint.map(|k| (255.0 * (v * k).clamp(0.0, 1.0)).round() as u8)
                })?;
                Ok((format!("synthetic_{i:02}"), img))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_images(scale, images)
    }

    pub fn scale(&self) -> usize {
        self.scale
    }

    pub fn items(&self) -> &[Item] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// `batch` pairs drawn with replacement, stacked to `(batch, 3, p, p)` and
    /// `(batch, 3, s p, s p)`.
    pub fn sample_batch(
        &self,
        batch: usize,
        opts: &PatchOptions,
        rng: &mut impl Rng,
    ) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let mut lrs = Vec::with_capacity(batch);
        let mut hrs = Vec::with_capacity(batch);
        for _ in 0..batch {
            let item = &self.items[rng.gen_range(0..self.items.len())];
            let pair = sample_patch(&item.hr, item.lr.as_ref(), opts, rng)
                .map_err(|e| Error::InvalidArgument(format!("{}: {e}", item.name)))?;
            lrs.push(pair.lr);
            hrs.push(pair.hr);
        }
        Ok((stack(&lrs)?, stack(&hrs)?))
    }
}
