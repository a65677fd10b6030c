//! Dilated encoder-decoder: three dilated convolutions followed by three
//! dilated transposed convolutions, all size-preserving.

use std::collections::BTreeSet;

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::conv::ConvSpec;
use crate::error::{Error, Result};
use crate::nn::{ConvLayer, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

/// Accumulated receptive field of `depth` stacked `k x k` layers whose
/// dilations grow as `(k-1)^i`: `1 + sum_{i=1..depth} (k-1)^i`.
pub fn arf(k: usize, depth: u32) -> u64 {
    let base = (k as u64).saturating_sub(1);
    1 + (1..=depth).map(|i| base.pow(i)).sum::<u64>()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DiEnDecConfig {
    pub in_channels: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel_size: usize,
    /// Encoder dilations; the decoder mirrors them.
    pub dilations: Vec<usize>,
}

impl Default for DiEnDecConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            width: 16,
            out_channels: 1,
            kernel_size: 3,
            dilations: vec![1, 2, 4],
        }
    }
}

impl DiEnDecConfig {
    /// Layer specs in execution order: encoder convs, then decoder deconvs.
    pub fn layer_specs(&self) -> Vec<(ConvSpec, bool)> {
        let k = self.kernel_size;
        let depth = self.dilations.len();
        let mut specs = Vec::with_capacity(2 * depth);
        for (i, &d) in self.dilations.iter().enumerate() {
            let cin = if i == 0 { self.in_channels } else { self.width };
            specs.push((ConvSpec::same(cin, self.width, k, d), false));
        }
        for (i, &d) in self.dilations.iter().rev().enumerate() {
            let cout = if i + 1 == depth { self.out_channels } else { self.width };
            specs.push((ConvSpec::same(self.width, cout, k, d), true));
        }
        specs
    }

    pub fn param_count(&self) -> usize {
        self.layer_specs().iter().map(|(s, _)| s.param_count()).sum()
    }

    pub fn macs_per_pixel(&self) -> usize {
        self.layer_specs().iter().map(|(s, _)| s.macs_per_pixel()).sum()
    }
}

#[derive(Clone, Debug)]
pub struct DiEnDec {
    config: DiEnDecConfig,
    layers: Vec<ConvLayer>,
}

impl DiEnDec {
    pub fn register<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        config: DiEnDecConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let depth = config.dilations.len();
        let layers = config
            .layer_specs()
            .into_iter()
            .enumerate()
            .map(|(i, (spec, transposed))| {
                let name = if transposed {
                    format!("{prefix}.dec{}", i - depth)
                } else {
                    format!("{prefix}.enc{i}")
                };
                ConvLayer::register(store, &name, spec, transposed, rng)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { config, layers })
    }

    pub fn config(&self) -> &DiEnDecConfig {
        &self.config
    }

    pub fn layers(&self) -> &[ConvLayer] {
        &self.layers
    }

    fn check_input<T: Real>(&self, g: &Graph<T>, x: Var) -> Result<()> {
        let c = g.value(x).c();
        if c != self.config.in_channels {
            return Err(Error::shape(
                "diendec_forward",
                format!("input has {c} channels, expected {}", self.config.in_channels),
            ));
        }
        Ok(())
    }

    fn layer<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, i: usize, x: Var) -> Result<Var> {
        self.layers[i].forward(g, store, x)
    }

    /// Output of the first `depth` encoder layers (each followed by ReLU).
    pub fn encode<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, depth: usize) -> Result<Var> {
        self.check_input(g, x)?;
        let depth = depth.min(self.config.dilations.len());
        let mut h = x;
        for i in 0..depth {
            h = self.layer(g, store, i, h)?;
            h = g.relu(h);
        }
        Ok(h)
    }

    /// Full encoder-decoder; the last layer has no activation.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        self.check_input(g, x)?;
        let last = self.layers.len() - 1;
        let mut h = x;
        for i in 0..self.layers.len() {
            h = self.layer(g, store, i, h)?;
            if i != last {
                h = g.relu(h);
            }
        }
        Ok(h)
    }
}

/// How far into the network [`receptive_field_probe`] looks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProbeDepth {
    Encoder(usize),
    Full,
}

/// Input pixels `(y, x)` whose gradient reaches output pixel `(y, x)` of
/// channel 0, for batch item 0.
pub fn receptive_field_probe<T: Real>(
    net: &DiEnDec,
    store: &ParamStore<T>,
    input: &Tensor<T>,
    depth: ProbeDepth,
    out_pixel: (usize, usize),
) -> Result<BTreeSet<(usize, usize)>> {
    let mut g = Graph::new();
    let x = g.leaf(input.clone(), true);
    let out = match depth {
        ProbeDepth::Encoder(d) => net.encode(&mut g, store, x, d)?,
        ProbeDepth::Full => net.forward(&mut g, store, x)?,
    };
    let (py, px) = out_pixel;
    let ov = g.value(out);
    if py >= ov.h() || px >= ov.w() {
        return Err(Error::InvalidArgument(format!(
            "probe pixel {out_pixel:?} outside {:?}",
            ov.shape()
        )));
    }
    let idx = ov.offset(0, 0, py, px);
    let sel = g.pick(out, idx)?;
    g.backward(sel)?;
    let mut support = BTreeSet::new();
    if let Some(grad) = g.grad(x) {
        for c in 0..grad.c() {
            for y in 0..grad.h() {
                for xx in 0..grad.w() {
                    if grad.at(0, c, y, xx) != T::zero() {
                        support.insert((y, xx));
                    }
                }
            }
        }
    }
    Ok(support)
}
