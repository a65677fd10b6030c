//! Images, resampling, training patches and quality metrics.

pub mod dataset;
pub mod image;
pub mod metrics;
pub mod patch;
pub mod resize;

pub use dataset::Dataset;
pub use image::ImageBuffer;
pub use metrics::{luminance, psnr, ssim, Plane};
pub use patch::{sample_patch, Augment, PatchOptions, SamplePair};
pub use resize::{bicubic_resize, bicubic_scale, downscale};
