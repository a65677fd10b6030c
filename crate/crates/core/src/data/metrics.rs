//! Quality metrics on the BT.601 luminance channel.

use super::image::ImageBuffer;
use crate::error::{Error, Result};

/// Row-major float plane.
#[derive(Clone, Debug, PartialEq)]
pub struct Plane {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Plane {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::InvalidArgument(format!(
                "{width}x{height} plane needs {} values, got {}",
                width * height,
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, v: f64) -> Self {
        Self {
            width,
            height,
            data: vec![v; width * height],
        }
    }

    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    /// Drops `border` pixels from every side; an over-large border yields an error.
    pub fn shave(&self, border: usize) -> Result<Self> {
        if border == 0 {
            return Ok(self.clone());
        }
        if 2 * border >= self.width || 2 * border >= self.height {
            return Err(Error::InvalidArgument(format!(
                "cannot crop {border} pixels from a {}x{} plane",
                self.width, self.height
            )));
        }
        let (w, h) = (self.width - 2 * border, self.height - 2 * border);
        let mut data = Vec::with_capacity(w * h);
        for y in border..border + h {
            data.extend_from_slice(&self.data[y * self.width + border..y * self.width + border + w]);
        }
        Self::new(w, h, data)
    }

    fn check_pair(&self, other: &Self, op: &'static str) -> Result<()> {
        if (self.width, self.height) != (other.width, other.height) {
            return Err(Error::shape(
                op,
                format!("{}x{} vs {}x{}", self.width, self.height, other.width, other.height),
            ));
        }
        Ok(())
    }
}

/// BT.601 studio-range luma: `16 + (65.738 R + 129.057 G + 25.064 B) / 256`.
pub fn luma(rgb: [u8; 3]) -> f64 {
    16.0 + (65.738 * rgb[0] as f64 + 129.057 * rgb[1] as f64 + 25.064 * rgb[2] as f64) / 256.0
}

pub fn luminance(img: &ImageBuffer) -> Plane {
    let data = img.pixels().chunks_exact(3).map(|p| luma([p[0], p[1], p[2]])).collect();
    Plane {
        width: img.width(),
        height: img.height(),
        data,
    }
}

/// `10 log10(255^2 / MSE)`; identical planes give `+inf`.
pub fn psnr_planes(a: &Plane, b: &Plane) -> Result<f64> {
    a.check_pair(b, "psnr")?;
    let mse = a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.data.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (255.0 * 255.0 / mse).log10())
}

/// PSNR on luminance after cropping `border` pixels from each side.
pub fn psnr(a: &ImageBuffer, b: &ImageBuffer, border: usize) -> Result<f64> {
    psnr_planes(&luminance(a).shave(border)?, &luminance(b).shave(border)?)
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;
const PEAK: f64 = 255.0;

fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut taps = [0.0; SSIM_WINDOW];
    for (i, t) in taps.iter_mut().enumerate() {
        let d = i as f64 - r;
        *t = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let sum: f64 = taps.iter().sum();
    taps.map(|t| t / sum)
}

/// Separable Gaussian filter keeping only fully covered positions.
fn filter_valid(data: &[f64], w: usize, h: usize) -> Vec<f64> {
    let taps = gaussian_taps();
    let (ow, oh) = (w + 1 - SSIM_WINDOW, h + 1 - SSIM_WINDOW);
    let mut tmp = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            tmp[y * ow + x] = taps.iter().enumerate().map(|(k, t)| t * data[y * w + x + k]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = taps.iter().enumerate().map(|(k, t)| t * tmp[(y + k) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM over all valid 11x11 Gaussian windows.
pub fn ssim_planes(a: &Plane, b: &Plane) -> Result<f64> {
    a.check_pair(b, "ssim")?;
    let (w, h) = (a.width, a.height);
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::InvalidArgument(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {w}x{h}"
        )));
    }
    let c1 = (K1 * PEAK) * (K1 * PEAK);
    let c2 = (K2 * PEAK) * (K2 * PEAK);
    let prod =
        |f: &dyn Fn(f64, f64) -> f64| -> Vec<f64> { a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect() };
    let mu_a = filter_valid(&a.data, w, h);
    let mu_b = filter_valid(&b.data, w, h);
    let e_aa = filter_valid(&prod(&|x, _| x * x), w, h);
    let e_bb = filter_valid(&prod(&|_, y| y * y), w, h);
    let e_ab = filter_valid(&prod(&|x, y| x * y), w, h);
    let n = mu_a.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = e_aa[i] - ma * ma;
            let vb = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .sum();
    Ok(total / n as f64)
}

/// SSIM on luminance after cropping `border` pixels from each side.
pub fn ssim(a: &ImageBuffer, b: &ImageBuffer, border: usize) -> Result<f64> {
    ssim_planes(&luminance(a).shave(border)?, &luminance(b).shave(border)?)
}
