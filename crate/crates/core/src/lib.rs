//! Detail-fidelity attention network for single-image super-resolution.
//!
//! The crate bundles a small reverse-mode tensor engine ([`autodiff`],
//! [`conv`], [`optim`]), closed-form multi-scale Hessian filtering
//! ([`hessian`]), the dilated encoder-decoder ([`diendec`]), the distribution
//! alignment cell ([`dac`]), the assembled network ([`model`]), image and
//! metric utilities ([`data`]), the training loop ([`train`]) and the
//! `defian` command line ([`cli`]).

pub mod autodiff;
pub mod cli;
pub mod config_file;
pub mod conv;
pub mod dac;
pub mod data;
pub mod diendec;
pub mod error;
pub mod hessian;
pub mod lmap;
pub mod model;
pub mod nn;
pub mod optim;
pub mod real;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use real::Real;
pub use tensor::Tensor;

pub const THREADS_ENV: &str = "DEFIAN_THREADS";

/// Sizes the kernel thread pool from `DEFIAN_THREADS` if set. Returns the
/// requested count; later calls after the pool exists are no-ops.
pub fn init_threads() -> Result<Option<usize>> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(None);
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::InvalidArgument(format!("{THREADS_ENV}={raw:?} is not a positive integer")))?;
    // Fails only if a global pool already exists, which keeps its size.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(Some(n))
}
