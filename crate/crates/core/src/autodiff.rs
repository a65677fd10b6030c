//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation of one forward pass in creation order,
//! which is already a topological order, so [`Graph::backward`] visits each
//! node exactly once walking the tape backwards. Graphs are rebuilt for every
//! forward pass.

use std::collections::BTreeMap;

use crate::conv::{self, ConvSpec, DepthwiseSpec};
use crate::error::{Error, Result};
use crate::nn::{Grads, ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddChannel(Var, Var),
    MulChannel(Var, Var),
    ExpandChannels(Var),
    ChannelMean(Var),
    Concat(Vec<Var>),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: ConvSpec,
    },
    Deconv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: ConvSpec,
    },
    Depthwise {
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: DepthwiseSpec,
    },
    Relu(Var),
    Sigmoid(Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    GlobalAvgPool(Var),
    SpatialStd(Var),
    Standardize {
        x: Var,
        eps: T,
    },
    PixelShuffle(Var, usize),
    MaxEigenvalue(Var, Var, Var),
    Mae(Var, Var),
    Sum(Var),
    SumSquares(Var),
    Pick(Var, usize),
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddChannel(..) => "add_channel",
            Op::MulChannel(..) => "mul_channel",
            Op::ExpandChannels(..) => "expand_channels",
            Op::ChannelMean(..) => "channel_mean",
            Op::Concat(..) => "concat",
            Op::Conv2d { .. } => "conv2d",
            Op::Deconv2d { .. } => "deconv2d",
            Op::Depthwise { .. } => "depthwise_conv2d",
            Op::Relu(..) => "relu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Linear { .. } => "linear",
            Op::GlobalAvgPool(..) => "global_avg_pool",
            Op::SpatialStd(..) => "spatial_std",
            Op::Standardize { .. } => "standardize",
            Op::PixelShuffle(..) => "pixel_shuffle",
            Op::MaxEigenvalue(..) => "max_eigenvalue",
            Op::Mae(..) => "mae",
            Op::Sum(..) => "sum",
            Op::SumSquares(..) => "sum_squares",
            Op::Pick(..) => "pick",
        }
    }
}

#[derive(Clone, Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    label: Option<String>,
}

/// One forward pass worth of values, plus gradients after [`Graph::backward`].
#[derive(Debug)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    params: BTreeMap<ParamId, Var>,
    macs: u64,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// `x` broadcast-shaped per-channel operand: `(n, c, 1, 1)` or `(1, c, 1, 1)`.
fn check_channel_operand<T: Real>(op: &'static str, x: &Tensor<T>, s: &Tensor<T>) -> Result<()> {
    let [sn, sc, sh, sw] = s.shape();
    if sc != x.c() || sh != 1 || sw != 1 || !(sn == x.n() || sn == 1) {
        return Err(Error::shape(
            op,
            format!(
                "per-channel operand {:?} does not broadcast onto {:?}",
                s.shape(),
                x.shape()
            ),
        ));
    }
    Ok(())
}

#[inline]
fn channel_index(s: &Tensor<impl Real>, n: usize, c: usize) -> usize {
    if s.n() == 1 {
        c
    } else {
        n * s.c() + c
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            params: BTreeMap::new(),
            macs: 0,
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            label: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn push_op(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let rg = self.needs(parents);
        self.push(value, op, rg)
    }

    /// Constant input that receives no gradient.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Binds a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let p = store.get(id);
        let v = self.push(p.value.clone(), Op::Leaf, p.trainable);
        self.nodes[v.0].label = Some(p.name.clone());
        self.params.insert(id, v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient after [`Graph::backward`]; `None` if the node was not reached.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-accumulates executed by conv, deconv, depthwise and linear nodes.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    /// Describes the first node whose value holds NaN or Inf.
    pub fn first_non_finite(&self) -> Option<String> {
        self.nodes
            .iter()
            .enumerate()
            .find(|(_, n)| !n.value.all_finite())
            .map(|(i, n)| match &n.label {
                Some(l) => format!("node {i} ({}: {l}, shape {:?})", n.op.name(), n.value.shape()),
                None => format!("node {i} ({}, shape {:?})", n.op.name(), n.value.shape()),
            })
    }

    // ---- elementwise -------------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push_op(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        Ok(self.push_op(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push_op(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, k: T) -> Var {
        let out = self.value(a).scale(k);
        self.push_op(out, Op::Scale(a, k), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push_op(out, Op::Relu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push_op(out, Op::Sigmoid(a), &[a])
    }

    // ---- channel broadcasting ----------------------------------------------

    /// `x + b` with `b` of shape `(n|1, c, 1, 1)`.
    pub fn add_channel(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        check_channel_operand("add_channel", xv, bv)?;
        let mut out = xv.clone();
        let (n, c) = (xv.n(), xv.c());
        for i in 0..n {
            for ch in 0..c {
                let k = bv.data()[channel_index(bv, i, ch)];
                out.plane_mut(i, ch).iter_mut().for_each(|v| *v += k);
            }
        }
        Ok(self.push_op(out, Op::AddChannel(x, b), &[x, b]))
    }

    /// `x * s` with `s` of shape `(n|1, c, 1, 1)`.
    pub fn mul_channel(&mut self, x: Var, s: Var) -> Result<Var> {
        let (xv, sv) = (self.value(x), self.value(s));
        check_channel_operand("mul_channel", xv, sv)?;
        let mut out = xv.clone();
        let (n, c) = (xv.n(), xv.c());
        for i in 0..n {
            for ch in 0..c {
                let k = sv.data()[channel_index(sv, i, ch)];
                out.plane_mut(i, ch).iter_mut().for_each(|v| *v *= k);
            }
        }
        Ok(self.push_op(out, Op::MulChannel(x, s), &[x, s]))
    }

    /// Replicates a single-channel map `(n, 1, h, w)` to `c` channels.
    pub fn expand_channels(&mut self, x: Var, c: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.c() != 1 || c == 0 {
            return Err(Error::shape(
                "expand_channels",
                format!("need a single-channel input, got {:?}", xv.shape()),
            ));
        }
        let [n, _, h, w] = xv.shape();
        let out = Tensor::from_fn([n, c, h, w], |[i, _, y, xx]| xv.at(i, 0, y, xx));
        Ok(self.push_op(out, Op::ExpandChannels(x), &[x]))
    }

    /// Mean over channels: `(n, c, h, w) -> (n, 1, h, w)`.
    pub fn channel_mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let [n, c, h, w] = xv.shape();
        let inv = T::lit(1.0 / c as f64);
        let mut out = Tensor::zeros([n, 1, h, w]);
        for i in 0..n {
            for ch in 0..c {
                for (o, &v) in out.plane_mut(i, 0).iter_mut().zip(xv.plane(i, ch)) {
                    *o += v;
                }
            }
        }
        out.data_mut().iter_mut().for_each(|v| *v *= inv);
        self.push_op(out, Op::ChannelMean(x), &[x])
    }

    /// Concatenation along the channel axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
        let [n, _, h, w] = self.value(*first).shape();
        let mut total = 0;
        for &p in parts {
            let [pn, pc, ph, pw] = self.value(p).shape();
            if (pn, ph, pw) != (n, h, w) {
                return Err(Error::shape(
                    "concat",
                    format!("{:?} vs {:?}", self.value(p).shape(), [n, 0, h, w]),
                ));
            }
            total += pc;
        }
        let mut data = Vec::with_capacity(n * total * h * w);
        for i in 0..n {
            for &p in parts {
                data.extend_from_slice(self.value(p).item(i));
            }
        }
        let out = Tensor::from_vec([n, total, h, w], data)?;
        Ok(self.push_op(out, Op::Concat(parts.to_vec()), parts))
    }

    // ---- layers ------------------------------------------------------------

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let out = conv::conv2d(self.value(x), &spec, self.value(w), b.map(|b| self.value(b)))?;
        self.macs += (spec.macs_per_pixel() * out.n() * out.plane_len()) as u64;
        let parents: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push_op(out, Op::Conv2d { x, w, b, spec }, &parents))
    }

    pub fn deconv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let out = conv::deconv2d(self.value(x), &spec, self.value(w), b.map(|b| self.value(b)))?;
        // each input pixel scatters through all taps
        self.macs += (spec.macs_per_pixel() * out.n() * self.value(x).plane_len()) as u64;
        let parents: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push_op(out, Op::Deconv2d { x, w, b, spec }, &parents))
    }

    pub fn depthwise_conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: DepthwiseSpec) -> Result<Var> {
        let out = conv::depthwise_conv2d(self.value(x), &spec, self.value(w), b.map(|b| self.value(b)))?;
        self.macs += (spec.kernel_size * spec.kernel_size * out.len()) as u64;
        let parents: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push_op(out, Op::Depthwise { x, w, b, spec }, &parents))
    }

    /// Affine map on `(n, in, 1, 1)` vectors; weights `(out, in, 1, 1)`, bias `(1, out, 1, 1)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let [n, fin, h, ww] = xv.shape();
        let [fout, win, wh, www] = wv.shape();
        if h != 1 || ww != 1 || win != fin || wh != 1 || www != 1 {
            return Err(Error::shape(
                "linear",
                format!("input {:?} against weights {:?}", xv.shape(), wv.shape()),
            ));
        }
        if let Some(b) = b {
            if self.value(b).shape() != [1, fout, 1, 1] {
                return Err(Error::shape(
                    "linear",
                    format!("bias {:?}, expected [1, {fout}, 1, 1]", self.value(b).shape()),
                ));
            }
        }
        let mut out = Tensor::zeros([n, fout, 1, 1]);
        for i in 0..n {
            let xi = xv.item(i);
            for o in 0..fout {
                let row = &wv.data()[o * fin..(o + 1) * fin];
                let mut acc: T = row.iter().zip(xi).map(|(&a, &b)| a * b).sum();
                if let Some(b) = b {
                    acc += self.value(b).data()[o];
                }
                out.data_mut()[i * fout + o] = acc;
            }
        }
        self.macs += (n * fin * fout) as u64;
        let parents: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push_op(out, Op::Linear { x, w, b }, &parents))
    }

    /// Per-channel spatial mean: `(n, c, h, w) -> (n, c, 1, 1)`.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let [n, c, _, _] = xv.shape();
        let inv = T::lit(1.0 / xv.plane_len() as f64);
        let out = Tensor::from_fn([n, c, 1, 1], |[i, ch, _, _]| {
            xv.plane(i, ch).iter().copied().sum::<T>() * inv
        });
        self.push_op(out, Op::GlobalAvgPool(x), &[x])
    }

    /// Per-channel spatial (population) standard deviation.
    pub fn spatial_std(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let [n, c, _, _] = xv.shape();
        let out = Tensor::from_fn([n, c, 1, 1], |[i, ch, _, _]| {
            let (_, var) = plane_stats(xv.plane(i, ch));
            var.sqrt()
        });
        self.push_op(out, Op::SpatialStd(x), &[x])
    }

    /// `(x - mean) / sqrt(var + eps)` per `(n, c)` plane.
    pub fn standardize(&mut self, x: Var, eps: T) -> Var {
        let xv = self.value(x);
        let mut out = xv.clone();
        for (i, chunk) in out.data_mut().chunks_mut(xv.plane_len()).enumerate() {
            let (mean, var) = plane_stats(&xv.data()[i * chunk.len()..(i + 1) * chunk.len()]);
            let inv = T::one() / (var + eps).sqrt();
            chunk.iter_mut().for_each(|v| *v = (*v - mean) * inv);
        }
        self.push_op(out, Op::Standardize { x, eps }, &[x])
    }

    pub fn pixel_shuffle(&mut self, x: Var, s: usize) -> Result<Var> {
        let out = conv::pixel_shuffle(self.value(x), s)?;
        Ok(self.push_op(out, Op::PixelShuffle(x, s), &[x]))
    }

    /// Pointwise larger eigenvalue of `[[hh, hv], [hv, vv]]`.
    pub fn max_eigenvalue(&mut self, hh: Var, vv: Var, hv: Var) -> Result<Var> {
        let (a, b, c) = (self.value(hh), self.value(vv), self.value(hv));
        a.expect_same_shape("max_eigenvalue", b)?;
        a.expect_same_shape("max_eigenvalue", c)?;
        let data = a
            .data()
            .iter()
            .zip(b.data())
            .zip(c.data())
            .map(|((&a, &b), &c)| crate::hessian::closed_form_max_eig(a, b, c))
            .collect();
        let out = Tensor::from_vec(a.shape(), data)?;
        Ok(self.push_op(out, Op::MaxEigenvalue(hh, vv, hv), &[hh, vv, hv]))
    }

    // ---- reductions --------------------------------------------------------

    /// Mean absolute error over all elements, as a `(1, 1, 1, 1)` scalar.
    pub fn mae(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (p, t) = (self.value(pred), self.value(target));
        p.expect_same_shape("mae_loss", t)?;
        let sum: T = p.data().iter().zip(t.data()).map(|(&a, &b)| (a - b).abs()).sum();
        let out = Tensor::scalar(sum / T::lit(p.len() as f64));
        Ok(self.push_op(out, Op::Mae(pred, target), &[pred, target]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push_op(out, Op::Sum(x), &[x])
    }

    pub fn sum_squares(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).norm_sq());
        self.push_op(out, Op::SumSquares(x), &[x])
    }

    /// Selects one element (flat row-major index) as a scalar.
    pub fn pick(&mut self, x: Var, index: usize) -> Result<Var> {
        let xv = self.value(x);
        let v = *xv
            .data()
            .get(index)
            .ok_or_else(|| Error::InvalidArgument(format!("index {index} out of range for {:?}", xv.shape())))?;
        Ok(self.push_op(Tensor::scalar(v), Op::Pick(x, index), &[x]))
    }

    // ---- backward ----------------------------------------------------------

    /// Back-propagates from a scalar node, filling gradients of every
    /// `requires_grad` ancestor. Previous gradients are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be a scalar, got {:?}", self.value(loss).shape()),
            ));
        }
        self.grads = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));
        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            if self.nodes[i].requires_grad {
                self.propagate(i, &g)?;
            }
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, g: Tensor<T>) -> Result<()> {
        if !self.nodes[v.0].requires_grad {
            return Ok(());
        }
        match &mut self.grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => {
                *slot = Some(g);
                Ok(())
            }
        }
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&mut self, i: usize, g: &Tensor<T>) -> Result<()> {
        let op = self.nodes[i].op.clone();
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(a, g.clone())?;
                self.accumulate(b, g.clone())?;
            }
            Op::Sub(a, b) => {
                self.accumulate(a, g.clone())?;
                self.accumulate(b, g.scale(-T::one()))?;
            }
            Op::Mul(a, b) => {
                if self.rg(a) {
                    let ga = g.zip_map(self.value(b), |g, y| g * y)?;
                    self.accumulate(a, ga)?;
                }
                if self.rg(b) {
                    let gb = g.zip_map(self.value(a), |g, x| g * x)?;
                    self.accumulate(b, gb)?;
                }
            }
            Op::Scale(a, k) => self.accumulate(a, g.scale(k))?,
            Op::AddChannel(x, b) => {
                self.accumulate(x, g.clone())?;
                if self.rg(b) {
                    let bv = self.value(b);
                    let mut gb = Tensor::zeros(bv.shape());
                    for n in 0..g.n() {
                        for c in 0..g.c() {
                            gb.data_mut()[channel_index(bv, n, c)] += g.plane(n, c).iter().copied().sum::<T>();
                        }
                    }
                    self.accumulate(b, gb)?;
                }
            }
            Op::MulChannel(x, s) => {
                let sv = self.value(s).clone();
                if self.rg(x) {
                    let mut gx = g.clone();
                    for n in 0..g.n() {
                        for c in 0..g.c() {
                            let k = sv.data()[channel_index(&sv, n, c)];
                            gx.plane_mut(n, c).iter_mut().for_each(|v| *v *= k);
                        }
                    }
                    self.accumulate(x, gx)?;
                }
                if self.rg(s) {
                    let xv = self.value(x);
                    let mut gs = Tensor::zeros(sv.shape());
                    for n in 0..g.n() {
                        for c in 0..g.c() {
                            let d: T = g.plane(n, c).iter().zip(xv.plane(n, c)).map(|(&a, &b)| a * b).sum();
                            gs.data_mut()[channel_index(&sv, n, c)] += d;
                        }
                    }
                    self.accumulate(s, gs)?;
                }
            }
            Op::ExpandChannels(x) => {
                let [n, c, h, w] = g.shape();
                let mut gx = Tensor::zeros([n, 1, h, w]);
                for i in 0..n {
                    for ch in 0..c {
                        for (o, &v) in gx.plane_mut(i, 0).iter_mut().zip(g.plane(i, ch)) {
                            *o += v;
                        }
                    }
                }
                self.accumulate(x, gx)?;
            }
            Op::ChannelMean(x) => {
                let shape = self.value(x).shape();
                let inv = T::lit(1.0 / shape[1] as f64);
                let gx = Tensor::from_fn(shape, |[n, _, y, xx]| g.at(n, 0, y, xx) * inv);
                self.accumulate(x, gx)?;
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for p in parts {
                    let shape = self.value(p).shape();
                    let gp = Tensor::from_fn(shape, |[n, c, y, x]| g.at(n, offset + c, y, x));
                    offset += shape[1];
                    self.accumulate(p, gp)?;
                }
            }
            Op::Conv2d { x, w, b, spec } => {
                let need = [self.rg(x), self.rg(w), b.is_some_and(|b| self.rg(b))];
                let (gx, gw, gb) = conv::conv2d_backward(self.value(x), &spec, self.value(w), g, need)?;
                self.scatter3(x, w, b, gx, gw, gb)?;
            }
            Op::Deconv2d { x, w, b, spec } => {
                let need = [self.rg(x), self.rg(w), b.is_some_and(|b| self.rg(b))];
                let (gx, gw, gb) = conv::deconv2d_backward(self.value(x), &spec, self.value(w), g, need)?;
                self.scatter3(x, w, b, gx, gw, gb)?;
            }
            Op::Depthwise { x, w, b, spec } => {
                let need = [self.rg(x), self.rg(w), b.is_some_and(|b| self.rg(b))];
                let (gx, gw, gb) = conv::depthwise_conv2d_backward(self.value(x), &spec, self.value(w), g, need)?;
                self.scatter3(x, w, b, gx, gw, gb)?;
            }
            Op::Relu(x) => {
                let gx = g.zip_map(self.value(x), |g, v| if v > T::zero() { g } else { T::zero() })?;
                self.accumulate(x, gx)?;
            }
            Op::Sigmoid(x) => {
                let y = &self.nodes[i].value;
                let gx = g.zip_map(y, |g, y| g * y * (T::one() - y))?;
                self.accumulate(x, gx)?;
            }
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(x), self.value(w));
                let (n, fin, fout) = (xv.n(), xv.c(), wv.n());
                let gx = self.rg(x).then(|| {
                    Tensor::from_fn(xv.shape(), |[s, j, _, _]| {
                        (0..fout).map(|o| wv.data()[o * fin + j] * g.data()[s * fout + o]).sum()
                    })
                });
                let gw = self.rg(w).then(|| {
                    Tensor::from_fn(wv.shape(), |[o, j, _, _]| {
                        (0..n).map(|s| g.data()[s * fout + o] * xv.data()[s * fin + j]).sum()
                    })
                });
                let gb = b.filter(|&b| self.rg(b)).map(|_| {
                    Tensor::from_fn([1, fout, 1, 1], |[_, o, _, _]| {
                        (0..n).map(|s| g.data()[s * fout + o]).sum()
                    })
                });
                self.scatter3(x, w, b, gx, gw, gb)?;
            }
            Op::GlobalAvgPool(x) => {
                let xv = self.value(x);
                let inv = T::lit(1.0 / xv.plane_len() as f64);
                let gx = Tensor::from_fn(xv.shape(), |[n, c, _, _]| g.at(n, c, 0, 0) * inv);
                self.accumulate(x, gx)?;
            }
            Op::SpatialStd(x) => {
                let xv = self.value(x);
                let sigma = &self.nodes[i].value;
                let len = xv.plane_len();
                let mut gx = Tensor::zeros(xv.shape());
                for n in 0..xv.n() {
                    for c in 0..xv.c() {
                        let s = sigma.at(n, c, 0, 0);
                        if s <= T::zero() {
                            continue;
                        }
                        let (mean, _) = plane_stats(xv.plane(n, c));
                        let k = g.at(n, c, 0, 0) / (T::lit(len as f64) * s);
                        for (o, &v) in gx.plane_mut(n, c).iter_mut().zip(xv.plane(n, c)) {
                            *o = k * (v - mean);
                        }
                    }
                }
                self.accumulate(x, gx)?;
            }
            Op::Standardize { x, eps } => {
                let xv = self.value(x);
                let y = &self.nodes[i].value;
                let len = xv.plane_len();
                let inv_len = T::lit(1.0 / len as f64);
                let mut gx = Tensor::zeros(xv.shape());
                for p in 0..xv.n() * xv.c() {
                    let range = p * len..(p + 1) * len;
                    let (_, var) = plane_stats(&xv.data()[range.clone()]);
                    let inv_std = T::one() / (var + eps).sqrt();
                    let gp = &g.data()[range.clone()];
                    let yp = &y.data()[range.clone()];
                    let mean_g = gp.iter().copied().sum::<T>() * inv_len;
                    let mean_gy = gp.iter().zip(yp).map(|(&a, &b)| a * b).sum::<T>() * inv_len;
                    // y is (x - mu)/s; with eps, d/dx uses (x - mu)/(var + eps) = y/s
                    for ((o, &gv), &yv) in gx.data_mut()[range].iter_mut().zip(gp).zip(yp) {
                        *o = inv_std * (gv - mean_g - yv * mean_gy);
                    }
                }
                self.accumulate(x, gx)?;
            }
            Op::PixelShuffle(x, s) => self.accumulate(x, conv::pixel_unshuffle(g, s)?)?,
            Op::MaxEigenvalue(hh, vv, hv) => {
                let (a, b, c) = (self.value(hh), self.value(vv), self.value(hv));
                let len = a.len();
                let (mut ga, mut gb, mut gc) = (vec![T::zero(); len], vec![T::zero(); len], vec![T::zero(); len]);
                let half = T::lit(0.5);
                for j in 0..len {
                    let (x, y, z) = (a.data()[j], b.data()[j], c.data()[j]);
                    let d = x - y;
                    let r = (d * d + T::lit(4.0) * z * z).max(T::zero()).sqrt();
                    // the square root is not differentiable where both
                    // off-trace terms vanish; use the zero subgradient there
                    let (t, u) = if r > T::zero() {
                        (d / r, T::lit(4.0) * z / r)
                    } else {
                        (T::zero(), T::zero())
                    };
                    let gj = g.data()[j];
                    ga[j] = gj * half * (T::one() + t);
                    gb[j] = gj * half * (T::one() - t);
                    gc[j] = gj * half * u;
                }
                let shape = a.shape();
                self.accumulate(hh, Tensor::from_vec(shape, ga)?)?;
                self.accumulate(vv, Tensor::from_vec(shape, gb)?)?;
                self.accumulate(hv, Tensor::from_vec(shape, gc)?)?;
            }
            Op::Mae(p, t) => {
                let (pv, tv) = (self.value(p), self.value(t));
                let k = g.data()[0] / T::lit(pv.len() as f64);
                let gp = pv.zip_map(tv, |a, b| {
                    if a > b {
                        k
                    } else if a < b {
                        -k
                    } else {
                        T::zero()
                    }
                })?;
                if self.rg(t) {
                    self.accumulate(t, gp.scale(-T::one()))?;
                }
                self.accumulate(p, gp)?;
            }
            Op::Sum(x) => {
                let gx = Tensor::full(self.value(x).shape(), g.data()[0]);
                self.accumulate(x, gx)?;
            }
            Op::SumSquares(x) => {
                let k = g.data()[0] * T::lit(2.0);
                let gx = self.value(x).scale(k);
                self.accumulate(x, gx)?;
            }
            Op::Pick(x, index) => {
                let mut gx = Tensor::zeros(self.value(x).shape());
                gx.data_mut()[index] = g.data()[0];
                self.accumulate(x, gx)?;
            }
        }
        Ok(())
    }

    fn scatter3(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        gx: Option<Tensor<T>>,
        gw: Option<Tensor<T>>,
        gb: Option<Tensor<T>>,
    ) -> Result<()> {
        if let Some(gx) = gx {
            self.accumulate(x, gx)?;
        }
        if let Some(gw) = gw {
            self.accumulate(w, gw)?;
        }
        if let (Some(b), Some(gb)) = (b, gb) {
            let shape = self.value(b).shape();
            self.accumulate(b, gb.reshape(shape)?)?;
        }
        Ok(())
    }

    /// Gradients of every bound trainable parameter reached by the last backward pass.
    pub fn param_grads(&self) -> Grads<T> {
        let map = self
            .params
            .iter()
            .filter_map(|(&id, &v)| self.grad(v).map(|g| (id, g.clone())))
            .collect();
        Grads { map }
    }
}

/// Mean and population variance of a slice.
pub(crate) fn plane_stats<T: Real>(xs: &[T]) -> (T, T) {
    let n = T::lit(xs.len() as f64);
    let mean = xs.iter().copied().sum::<T>() / n;
    let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
    (mean, var)
}

#[inline]
pub(crate) fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: [usize; 4], v: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn sum_of_squares_gradient_is_2x() {
        let mut g = Graph::new();
        let x = g.leaf(t([1, 1, 1, 3], &[1.0, -2.0, 0.5]), true);
        let l = g.sum_squares(x);
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn untouched_parameter_has_zero_gradient() {
        let mut store = ParamStore::new();
        let a = store.add("a", t([1, 1, 1, 2], &[1.0, 2.0]), true).unwrap();
        let b = store.add("b", t([1, 1, 1, 2], &[3.0, 4.0]), true).unwrap();
        let mut g = Graph::new();
        let va = g.param(&store, a);
        let _vb = g.param(&store, b);
        let l = g.sum(va);
        g.backward(l).unwrap();
        let grads = g.param_grads();
        assert_eq!(grads.get(a).unwrap().data(), &[1.0, 1.0]);
        assert!(grads.get(b).is_none_or(|gb| gb.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let x = g.leaf(t([1, 1, 1, 2], &[1.0, 2.0]), true);
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn relu_and_sigmoid_values() {
        let mut g = Graph::new();
        let x = g.leaf(t([1, 1, 1, 3], &[-3.0, 2.0, 0.0]), true);
        let r = g.relu(x);
        assert_eq!(g.value(r).data(), &[0.0, 2.0, 0.0]);
        let s = g.sigmoid(x);
        assert_eq!(g.value(s).data()[2], 0.5);
        let p = g.pick(s, 2).unwrap();
        g.backward(p).unwrap();
        assert_eq!(g.grad(x).unwrap().data()[2], 0.25);
    }

    #[test]
    fn shared_node_accumulates() {
        let mut g = Graph::new();
        let x = g.leaf(t([1, 1, 1, 1], &[3.0]), true);
        let y = g.mul(x, x).unwrap();
        let z = g.add(y, x).unwrap();
        let l = g.sum(z);
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[7.0]);
    }

    #[test]
    fn non_finite_node_is_named() {
        let mut g = Graph::new();
        let x = g.input(t([1, 1, 1, 2], &[1.0, f64::NAN]));
        let _ = g.relu(x);
        let msg = g.first_non_finite().unwrap();
        assert!(msg.contains("node 0"), "{msg}");
    }
}
