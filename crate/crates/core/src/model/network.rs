use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use crate::autodiff::{Graph, Var};
use crate::conv::ConvSpec;
use crate::dac::{Dac, FcStack};
use crate::diendec::{DiEnDec, DiEnDecConfig};
use crate::error::{Error, Result};
use crate::hessian::HessianBank;
use crate::nn::{ConvLayer, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

/// How the gate of a module is produced.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Attention {
    /// Computed by the attention branch.
    #[default]
    Learned,
    /// Gate fixed to 1; the module reduces to `x + FEM(x)`.
    Ones,
    /// Gate fixed to 0; the module returns its input.
    Zeros,
}

/// Residual block with channel attention.
#[derive(Clone, Debug)]
pub struct Rcab {
    pub conv1: ConvLayer,
    pub conv2: ConvLayer,
    pub ca: FcStack,
}

#[derive(Clone, Debug)]
struct Branch {
    bank: Option<HessianBank>,
    diendec: Option<DiEnDec>,
    dac: Option<Dac>,
}

#[derive(Clone, Debug)]
struct Module {
    blocks: Vec<Rcab>,
    branch: Branch,
}

#[derive(Clone, Debug)]
pub struct DefianModel<T> {
    config: ModelConfig,
    store: ParamStore<T>,
    head: ConvLayer,
    modules: Vec<Module>,
    upsampler: Vec<(ConvLayer, usize)>,
    tail: ConvLayer,
}

impl<T: Real> DefianModel<T> {
    /// Builds the network with weights drawn from a seeded generator.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rng = &mut rng;
        let c = config.channels;
        let mut store = ParamStore::new();
        let head = ConvLayer::register(&mut store, "head", ConvSpec::same(3, c, 3, 1), false, rng)?;
        let mut modules = Vec::with_capacity(config.n_modules);
        for i in 0..config.n_modules {
            let p = format!("body.{i}");
            let hidden = crate::dac::hidden_width(c, config.ca_reduction);
            let blocks = (0..config.n_blocks)
                .map(|j| {
                    let b = format!("{p}.fem.{j}");
                    Ok(Rcab {
                        conv1: ConvLayer::register(
                            &mut store,
                            &format!("{b}.conv1"),
                            ConvSpec::same(c, c, 3, 1),
                            false,
                            rng,
                        )?,
                        conv2: ConvLayer::register(
                            &mut store,
                            &format!("{b}.conv2"),
                            ConvSpec::same(c, c, 3, 1),
                            false,
                            rng,
                        )?,
                        ca: FcStack::register(&mut store, &format!("{b}.ca"), c, hidden, rng)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let comp = config.components;
            let bank = if comp.mshf {
                Some(HessianBank::register(
                    &mut store,
                    &format!("{p}.mshf"),
                    c,
                    &config.mshf_scales,
                )?)
            } else {
                None
            };
            let diendec = if comp.diendec {
                let dcfg = DiEnDecConfig {
                    in_channels: config.diendec_inputs(),
                    width: config.diendec_width,
                    ..DiEnDecConfig::default()
                };
                Some(DiEnDec::register(&mut store, &format!("{p}.diendec"), dcfg, rng)?)
            } else {
                None
            };
            let dac = if comp.dac {
                Some(Dac::register(
                    &mut store,
                    &format!("{p}.dac"),
                    c,
                    config.dac_reduction,
                    config.dac_eps,
                    rng,
                )?)
            } else {
                None
            };
            modules.push(Module {
                blocks,
                branch: Branch { bank, diendec, dac },
            });
        }
        let mut upsampler = Vec::new();
        for (k, f) in config.upsample_stages().into_iter().enumerate() {
            let layer = ConvLayer::register(
                &mut store,
                &format!("upsample.{k}"),
                ConvSpec::same(c, c * f * f, 3, 1),
                false,
                rng,
            )?;
            upsampler.push((layer, f));
        }
        let tail = ConvLayer::register(&mut store, "tail", ConvSpec::same(c, 3, 3, 1), false, rng)?;
        Ok(Self {
            config,
            store,
            head,
            modules,
            upsampler,
            tail,
        })
    }

    /// Builds the layout for `config` and fills it from `store`, which must
    /// hold exactly the same names and shapes.
    pub fn from_store(config: ModelConfig, store: ParamStore<T>) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        if store.len() != model.store.len() {
            return Err(Error::InvalidArgument(format!(
                "parameter set has {} tensors, model layout needs {}",
                store.len(),
                model.store.len()
            )));
        }
        for (_, p) in store.iter() {
            let id = model
                .store
                .id(&p.name)
                .ok_or_else(|| Error::InvalidArgument(format!("unexpected parameter {}", p.name)))?;
            let slot = model.store.value_mut(id);
            if slot.shape() != p.value.shape() {
                return Err(Error::InvalidArgument(format!(
                    "parameter {} has shape {:?}, layout needs {:?}",
                    p.name,
                    p.value.shape(),
                    slot.shape()
                )));
            }
            *slot = p.value.clone();
        }
        Ok(model)
    }

    /// The same network with parameters converted to `U`.
    pub fn cast<U: Real>(&self) -> DefianModel<U> {
        DefianModel {
            config: self.config.clone(),
            store: self.store.cast(),
            head: self.head,
            modules: self.modules.clone(),
            upsampler: self.upsampler.clone(),
            tail: self.tail,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn rcab(&self, module: usize, block: usize) -> &Rcab {
        &self.modules[module].blocks[block]
    }

    fn check_channels(&self, g: &Graph<T>, x: Var, op: &'static str) -> Result<()> {
        let c = g.value(x).c();
        if c != self.config.channels {
            return Err(Error::shape(
                op,
                format!("input has {c} channels, expected {}", self.config.channels),
            ));
        }
        Ok(())
    }

    /// `x + conv(relu(conv(x))) * ca(...)`, with the channel gate broadcast spatially.
    pub fn rcab_forward(&self, g: &mut Graph<T>, module: usize, block: usize, x: Var) -> Result<Var> {
        self.check_channels(g, x, "rcab_forward")?;
        let b = &self.modules[module].blocks[block];
        let h = b.conv1.forward(g, &self.store, x)?;
        let h = g.relu(h);
        let f = b.conv2.forward(g, &self.store, h)?;
        let pooled = g.global_avg_pool(f);
        let gate = b.ca.forward(g, &self.store, pooled)?;
        let gate = g.sigmoid(gate);
        let scaled = g.mul_channel(f, gate)?;
        g.add(x, scaled)
    }

    /// The module's chain of residual blocks.
    pub fn fem_forward(&self, g: &mut Graph<T>, module: usize, x: Var) -> Result<Var> {
        self.check_channels(g, x, "fem_forward")?;
        let mut h = x;
        for j in 0..self.modules[module].blocks.len() {
            h = self.rcab_forward(g, module, j, h)?;
        }
        Ok(h)
    }

    /// Gate pre-activation `(n, C, h, w)` from the extracted features and the module input.
    pub fn attention_logits(&self, g: &mut Graph<T>, module: usize, features: Var, x: Var) -> Result<Var> {
        let br = &self.modules[module].branch;
        let c = self.config.channels;
        let maps = match &br.bank {
            Some(bank) => bank.forward(g, &self.store, features)?,
            None => {
                let mean = g.channel_mean(features);
                g.expand_channels(mean, 3)?
            }
        };
        let v = match &br.diendec {
            Some(net) => net.forward(g, &self.store, maps)?,
            None => g.channel_mean(maps),
        };
        match &br.dac {
            Some(dac) => dac.forward(g, &self.store, v, x),
            None => g.expand_channels(v, c),
        }
    }

    /// `x + FEM(x) * gate`.
    pub fn defiam_forward(&self, g: &mut Graph<T>, module: usize, x: Var, attention: Attention) -> Result<Var> {
        self.check_channels(g, x, "defiam_forward")?;
        let features = self.fem_forward(g, module, x)?;
        let gate = match attention {
            Attention::Learned => {
                let logits = self.attention_logits(g, module, features, x)?;
                g.sigmoid(logits)
            }
            Attention::Ones => g.input(Tensor::full(g.value(features).shape(), T::one())),
            Attention::Zeros => g.input(Tensor::zeros(g.value(features).shape())),
        };
        let gated = g.mul(features, gate)?;
        g.add(x, gated)
    }

    fn mean_shift(&self, g: &mut Graph<T>, x: Var, sign: f64) -> Result<Var> {
        let r = self.config.rgb_range;
        let m = self.config.rgb_mean.map(|m| T::lit(sign * m * r));
        let shift = g.input(Tensor::from_vec([1, 3, 1, 1], m.to_vec())?);
        g.add_channel(x, shift)
    }

    /// Full network on an `(n, 3, h, w)` image in `[0, rgb_range]`.
    pub fn forward(&self, g: &mut Graph<T>, input: Var, attention: Attention) -> Result<Var> {
        let c = g.value(input).c();
        if c != 3 {
            return Err(Error::shape(
                "defian_forward",
                format!("expected an RGB input, found {c} channels"),
            ));
        }
        let x = self.mean_shift(g, input, -1.0)?;
        let head = self.head.forward(g, &self.store, x)?;
        let mut h = head;
        for i in 0..self.modules.len() {
            h = self.defiam_forward(g, i, h, attention)?;
        }
        h = g.add(h, head)?;
        for (layer, f) in &self.upsampler {
            h = layer.forward(g, &self.store, h)?;
            h = g.pixel_shuffle(h, *f)?;
        }
        let out = self.tail.forward(g, &self.store, h)?;
        self.mean_shift(g, out, 1.0)
    }

    /// Forward pass on a plain tensor.
    pub fn infer(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let x = g.input(input.clone());
        let y = self.forward(&mut g, x, Attention::Learned)?;
        Ok(g.value(y).clone())
    }
}
