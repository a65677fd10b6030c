//! Named parameter storage and weight initialisation.

use std::collections::{BTreeMap, HashMap};

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::conv::ConvSpec;
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    /// Frozen tensors take part in the forward pass but are never updated.
    pub trainable: bool,
}

/// Insertion-ordered collection of named tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    index: HashMap<String, ParamId>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, trainable: bool) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.params.len());
        self.index.insert(name.clone(), id);
        self.params.push(Param { name, value, trainable });
        Ok(id)
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Param<T>)> {
        self.params.iter_mut().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Element counts `(trainable, frozen)`.
    pub fn element_counts(&self) -> (usize, usize) {
        self.params.iter().fold((0, 0), |(t, f), p| {
            if p.trainable {
                (t + p.value.len(), f)
            } else {
                (t, f + p.value.len())
            }
        })
    }

    /// Same names and ids with values converted to `U`.
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    trainable: p.trainable,
                })
                .collect(),
            index: self.index.clone(),
        }
    }

    /// Sets every tensor to zero.
    pub fn zero_all(&mut self) {
        for p in &mut self.params {
            p.value.data_mut().fill(T::zero());
        }
    }
}

/// Gradients keyed by parameter.
#[derive(Clone, Debug, Default)]
pub struct Grads<T> {
    pub(crate) map: BTreeMap<ParamId, Tensor<T>>,
}

impl<T: Real> Grads<T> {
    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.map.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.map.iter().map(|(k, v)| (*k, v))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn global_norm(&self) -> f64 {
        self.map.values().map(|g| g.norm_sq().as_f64()).sum::<f64>().sqrt()
    }

    /// Rescales all gradients so the global L2 norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            let k = T::lit(max_norm / norm);
            for g in self.map.values_mut() {
                g.data_mut().iter_mut().for_each(|v| *v *= k);
            }
        }
        norm
    }

    pub fn all_finite(&self) -> bool {
        self.map.values().all(Tensor::all_finite)
    }
}

/// Fan-in scaled uniform initialisation, bound `1/sqrt(fan_in)`.
pub fn fan_in_uniform<T: Real>(shape: [usize; 4], fan_in: usize, rng: &mut impl Rng) -> Tensor<T> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Tensor::uniform(shape, -bound, bound, rng)
}

/// Parameter handles of one convolution or transposed-convolution layer.
#[derive(Clone, Copy, Debug)]
pub struct ConvLayer {
    pub spec: ConvSpec,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub transposed: bool,
}

impl ConvLayer {
    pub fn register<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        spec: ConvSpec,
        transposed: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let k2 = spec.kernel_size * spec.kernel_size;
        let (shape, fan_in) = if transposed {
            (spec.deconv_weight_shape(), spec.out_channels * k2)
        } else {
            (spec.conv_weight_shape(), spec.in_channels * k2)
        };
        let weight = store.add(format!("{name}.weight"), fan_in_uniform(shape, fan_in, rng), true)?;
        let bias = if spec.has_bias {
            Some(store.add(
                format!("{name}.bias"),
                Tensor::zeros([1, spec.out_channels, 1, 1]),
                true,
            )?)
        } else {
            None
        };
        Ok(Self {
            spec,
            weight,
            bias,
            transposed,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = self.bias.map(|b| g.param(store, b));
        if self.transposed {
            g.deconv2d(x, w, b, self.spec)
        } else {
            g.conv2d(x, w, b, self.spec)
        }
    }
}

/// Parameter handles of a fully connected layer; weights `(out, in, 1, 1)`.
#[derive(Clone, Copy, Debug)]
pub struct LinearLayer {
    pub in_features: usize,
    pub out_features: usize,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl LinearLayer {
    pub fn register<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        in_features: usize,
        out_features: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let weight = store.add(
            format!("{name}.weight"),
            fan_in_uniform([out_features, in_features, 1, 1], in_features, rng),
            true,
        )?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros([1, out_features, 1, 1]), true)?;
        Ok(Self {
            in_features,
            out_features,
            weight,
            bias,
        })
    }

    pub fn param_count(&self) -> usize {
        self.in_features * self.out_features + self.out_features
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.linear(x, w, Some(b))
    }
}
