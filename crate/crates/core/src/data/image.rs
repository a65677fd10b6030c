use std::path::Path;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// 8-bit RGB image, pixels interleaved row by row.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageBuffer {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl ImageBuffer {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidArgument(format!(
                "image dimensions must be positive, got {width}x{height}"
            )));
        }
        if pixels.len() != width * height * 3 {
            return Err(Error::InvalidArgument(format!(
                "{width}x{height} RGB image needs {} bytes, got {}",
                width * height * 3,
                pixels.len()
            )));
        }
        Ok(Self { width, height, pixels })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Result<Self> {
        Self::new(width, height, rgb.repeat(width * height))
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [u8; 3]) -> Result<Self> {
        let mut pixels = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                pixels.extend_from_slice(&f(x, y));
            }
        }
        Self::new(width, height, pixels)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    /// `w x h` window with top-left corner `(x, y)`.
    pub fn crop(&self, x: usize, y: usize, w: usize, h: usize) -> Result<Self> {
        if x + w > self.width || y + h > self.height {
            return Err(Error::InvalidArgument(format!(
                "crop {w}x{h} at ({x}, {y}) exceeds {}x{}",
                self.width, self.height
            )));
        }
        Self::from_fn(w, h, |cx, cy| self.get(x + cx, y + cy))
    }

    /// Channel `c` as floats.
    pub fn channel(&self, c: usize) -> Vec<f64> {
        self.pixels.iter().skip(c).step_by(3).map(|&p| p as f64).collect()
    }

    /// Rebuilds an image from three float planes, rounding and clamping to `[0, 255]`.
    pub fn from_channels(width: usize, height: usize, planes: [&[f64]; 3]) -> Result<Self> {
        let mut pixels = Vec::with_capacity(width * height * 3);
        for i in 0..width * height {
            for p in planes {
                pixels.push(quantize(p[i]));
            }
        }
        Self::new(width, height, pixels)
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?
            .to_rgb8();
        let (w, h) = img.dimensions();
        Self::new(w as usize, h as usize, img.into_raw())
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        image::save_buffer_with_format(
            path,
            &self.pixels,
            self.width as u32,
            self.height as u32,
            image::ExtendedColorType::Rgb8,
            image::ImageFormat::Png,
        )
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))
    }

    /// `(1, 3, h, w)` tensor with values `pixel / 255 * range`.
    pub fn to_tensor<T: Real>(&self, range: f64) -> Tensor<T> {
        let k = range / 255.0;
        Tensor::from_fn([1, 3, self.height, self.width], |[_, c, y, x]| {
            T::lit(self.pixels[(y * self.width + x) * 3 + c] as f64 * k)
        })
    }

    /// Inverse of [`ImageBuffer::to_tensor`] for batch item `item`.
    pub fn from_tensor<T: Real>(t: &Tensor<T>, item: usize, range: f64) -> Result<Self> {
        let [n, c, h, w] = t.shape();
        if c != 3 || item >= n {
            return Err(Error::shape(
                "from_tensor",
                format!("cannot read RGB item {item} from {:?}", t.shape()),
            ));
        }
        let k = 255.0 / range;
        Self::from_fn(w, h, |x, y| {
            [0, 1, 2].map(|ch| quantize(t.at(item, ch, y, x).as_f64() * k))
        })
    }
}

pub fn quantize(v: f64) -> u8 {
    if v.is_nan() {
        0
    } else {
        v.round().clamp(0.0, 255.0) as u8
    }
}

/// Writes an 8-bit grayscale PNG.
pub fn save_gray_png(path: &Path, width: usize, height: usize, values: &[u8]) -> Result<()> {
    if values.len() != width * height {
        return Err(Error::InvalidArgument(format!(
            "{width}x{height} gray image needs {} values, got {}",
            width * height,
            values.len()
        )));
    }
    image::save_buffer_with_format(
        path,
        values,
        width as u32,
        height as u32,
        image::ExtendedColorType::L8,
        image::ImageFormat::Png,
    )
    .map_err(|e| Error::Image(format!("{}: {e}", path.display())))
}
