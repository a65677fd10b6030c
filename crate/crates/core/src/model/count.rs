use super::config::ModelConfig;
use super::network::DefianModel;
use crate::conv::ConvSpec;
use crate::dac::hidden_width;
use crate::diendec::DiEnDecConfig;
use crate::error::{Error, Result};
use crate::hessian::HessianBank;
use crate::real::Real;

/// Frame used for the complexity figures: a 480x360 RGB output.
pub const REFERENCE_FRAME: (usize, usize) = (480, 360);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamCount {
    pub trainable: usize,
    /// Fixed Hessian filter taps and biases.
    pub frozen: usize,
}

impl ParamCount {
    pub fn total(&self) -> usize {
        self.trainable + self.frozen
    }
}

/// Element counts of the instantiated parameter store.
pub fn count_params<T: Real>(model: &DefianModel<T>) -> ParamCount {
    let (trainable, frozen) = model.store().element_counts();
    ParamCount { trainable, frozen }
}

/// Parameter count derived from the configuration alone.
pub fn expected_params(cfg: &ModelConfig) -> ParamCount {
    let c = cfg.channels;
    let conv = |i, o| ConvSpec::same(i, o, 3, 1).param_count();
    let fc = |i: usize, o: usize| i * o + o;
    let ca_hidden = hidden_width(c, cfg.ca_reduction);
    let dac_hidden = hidden_width(c, cfg.dac_reduction);
    let block = 2 * conv(c, c) + fc(c, ca_hidden) + fc(ca_hidden, c);
    let mut module = cfg.n_blocks * block;
    let mut frozen_module = 0;
    if cfg.components.mshf {
        frozen_module += cfg.mshf_scales.len() * HessianBank::elements_per_scale(c);
    }
    if cfg.components.diendec {
        module += diendec_config(cfg).param_count();
    }
    if cfg.components.dac {
        module += 2 * (fc(c, dac_hidden) + fc(dac_hidden, c));
    }
    let upsampler: usize = cfg.upsample_stages().iter().map(|f| conv(c, c * f * f)).sum();
    ParamCount {
        trainable: conv(3, c) + cfg.n_modules * module + upsampler + conv(c, 3),
        frozen: cfg.n_modules * frozen_module,
    }
}

fn diendec_config(cfg: &ModelConfig) -> DiEnDecConfig {
    DiEnDecConfig {
        in_channels: cfg.diendec_inputs(),
        width: cfg.diendec_width,
        ..DiEnDecConfig::default()
    }
}

/// Multiply-accumulates of one forward pass producing an `hr_w x hr_h` image,
/// over convolutions, transposed convolutions, depthwise filters and fully
/// connected layers.
pub fn count_flops(cfg: &ModelConfig, hr_w: usize, hr_h: usize) -> Result<u64> {
    let s = cfg.scale;
    if !hr_w.is_multiple_of(s) || !hr_h.is_multiple_of(s) || hr_w == 0 || hr_h == 0 {
        return Err(Error::InvalidArgument(format!(
            "{hr_w}x{hr_h} is not a positive multiple of the scale {s}"
        )));
    }
    let c = cfg.channels as u64;
    let lr = ((hr_w / s) * (hr_h / s)) as u64;
    let conv = |i: u64, o: u64| 9 * i * o;
    let ca_hidden = hidden_width(cfg.channels, cfg.ca_reduction) as u64;
    let dac_hidden = hidden_width(cfg.channels, cfg.dac_reduction) as u64;

    let block = 2 * conv(c, c) * lr + 2 * c * ca_hidden;
    let mut module = cfg.n_blocks as u64 * block;
    if cfg.components.mshf {
        module += cfg.mshf_scales.len() as u64 * 3 * 9 * c * lr;
    }
    if cfg.components.diendec {
        module += diendec_config(cfg).macs_per_pixel() as u64 * lr;
    }
    if cfg.components.dac {
        module += 2 * 2 * c * dac_hidden;
    }
    let mut total = conv(3, c) * lr + cfg.n_modules as u64 * module;
    let mut pixels = lr;
    for f in cfg.upsample_stages() {
        let f2 = (f * f) as u64;
        total += conv(c, c * f2) * pixels;
        pixels *= f2;
    }
    total += conv(c, 3) * pixels;
    Ok(total)
}

/// [`count_flops`] at the 480x360 reference frame.
pub fn count_reference_flops(cfg: &ModelConfig) -> Result<u64> {
    count_flops(cfg, REFERENCE_FRAME.0, REFERENCE_FRAME.1)
}
