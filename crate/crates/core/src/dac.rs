//! Distribution alignment cell.
//!
//! The single-channel attention representation `v` is standardised per batch
//! item, replicated to `C` channels, then scaled and shifted per channel by
//! learned transforms of the reference features' channel statistics:
//!
//! ```text
//! out[c] = (v - mean(v)) / sqrt(var(v) + eps) * sigma_hat[c] + mu_hat[c]
//! mu_hat    = fc(relu(fc(mean(x_ref))))
//! sigma_hat = fc(relu(fc(std(x_ref))))
//! ```
//!
//! Statistics are instance statistics (per batch item), never batch-wide.

use rand::Rng;

use crate::autodiff::{plane_stats, Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{LinearLayer, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;

/// Per-channel spatial mean and (population) standard deviation, `(n, c, 1, 1)` each.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelStats<T> {
    pub mu: Tensor<T>,
    pub sigma: Tensor<T>,
}

pub fn channel_stats<T: Real>(x: &Tensor<T>) -> ChannelStats<T> {
    let [n, c, _, _] = x.shape();
    let stats: Vec<(T, T)> = (0..n * c).map(|i| plane_stats(x.plane(i / c, i % c))).collect();
    ChannelStats {
        mu: Tensor::from_vec([n, c, 1, 1], stats.iter().map(|s| s.0).collect()).expect("stats length"),
        sigma: Tensor::from_vec([n, c, 1, 1], stats.iter().map(|s| s.1.sqrt()).collect()).expect("stats length"),
    }
}

/// `(v - mean) / sqrt(var + eps)` for every `(n, c)` plane.
pub fn normalize_observed<T: Real>(v: &Tensor<T>, eps: T) -> Tensor<T> {
    let mut g = Graph::new();
    let x = g.input(v.clone());
    let y = g.standardize(x, eps);
    g.value(y).clone()
}

/// `fc -> relu -> fc`, `C -> C/r -> C`.
#[derive(Clone, Copy, Debug)]
pub struct FcStack {
    pub fc1: LinearLayer,
    pub fc2: LinearLayer,
}

impl FcStack {
    pub fn register<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        channels: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            fc1: LinearLayer::register(store, &format!("{prefix}.fc1"), channels, hidden, rng)?,
            fc2: LinearLayer::register(store, &format!("{prefix}.fc2"), hidden, channels, rng)?,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, store, x)?;
        let h = g.relu(h);
        self.fc2.forward(g, store, h)
    }

    pub fn param_count(&self) -> usize {
        self.fc1.param_count() + self.fc2.param_count()
    }

    pub fn macs(&self) -> usize {
        self.fc1.in_features * self.fc1.out_features + self.fc2.in_features * self.fc2.out_features
    }
}

/// Hidden width of the statistic transforms for `channels` and reduction `r`.
pub fn hidden_width(channels: usize, reduction: usize) -> usize {
    (channels / reduction.max(1)).max(1)
}

#[derive(Clone, Debug)]
pub struct Dac {
    channels: usize,
    eps: f64,
    mu: FcStack,
    sigma: FcStack,
}

impl Dac {
    pub fn register<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        channels: usize,
        reduction: usize,
        eps: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let hidden = hidden_width(channels, reduction);
        Ok(Self {
            channels,
            eps,
            mu: FcStack::register(store, &format!("{prefix}.mu"), channels, hidden, rng)?,
            sigma: FcStack::register(store, &format!("{prefix}.sigma"), channels, hidden, rng)?,
        })
    }

    pub fn mu_stack(&self) -> &FcStack {
        &self.mu
    }

    pub fn sigma_stack(&self) -> &FcStack {
        &self.sigma
    }

    pub fn param_count(&self) -> usize {
        self.mu.param_count() + self.sigma.param_count()
    }

    /// `(mu_hat, sigma_hat)` from the reference features, `(n, C, 1, 1)` each.
    pub fn parameterize<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x_ref: Var) -> Result<(Var, Var)> {
        if g.value(x_ref).c() != self.channels {
            return Err(Error::shape(
                "dac",
                format!(
                    "reference has {} channels, cell expects {}",
                    g.value(x_ref).c(),
                    self.channels
                ),
            ));
        }
        let mu = g.global_avg_pool(x_ref);
        let sigma = g.spatial_std(x_ref);
        let mu_hat = self.mu.forward(g, store, mu)?;
        let sigma_hat = self.sigma.forward(g, store, sigma)?;
        Ok((mu_hat, sigma_hat))
    }

    /// Aligns `v` onto the learned statistics of `x_ref`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, v: Var, x_ref: Var) -> Result<Var> {
        check_pair(g, v, x_ref)?;
        let (mu_hat, sigma_hat) = self.parameterize(g, store, x_ref)?;
        align_to(g, v, mu_hat, sigma_hat, T::lit(self.eps))
    }
}

fn check_pair<T: Real>(g: &Graph<T>, v: Var, x_ref: Var) -> Result<()> {
    let [vn, vc, vh, vw] = g.value(v).shape();
    let [rn, _, rh, rw] = g.value(x_ref).shape();
    if vc != 1 || (vn, vh, vw) != (rn, rh, rw) {
        return Err(Error::shape(
            "dac",
            format!(
                "observed {:?} does not pair with reference {:?}",
                g.value(v).shape(),
                g.value(x_ref).shape()
            ),
        ));
    }
    Ok(())
}

/// Standardises `v`, replicates it to `C` channels and applies
/// `* sigma_hat + mu_hat` per channel.
pub fn align_to<T: Real>(g: &mut Graph<T>, v: Var, mu_hat: Var, sigma_hat: Var, eps: T) -> Result<Var> {
    let c = g.value(mu_hat).c();
    if g.value(sigma_hat).shape() != g.value(mu_hat).shape() {
        return Err(Error::shape(
            "dac",
            format!(
                "mu_hat {:?} vs sigma_hat {:?}",
                g.value(mu_hat).shape(),
                g.value(sigma_hat).shape()
            ),
        ));
    }
    let norm = g.standardize(v, eps);
    let wide = g.expand_channels(norm, c)?;
    let scaled = g.mul_channel(wide, sigma_hat)?;
    g.add_channel(scaled, mu_hat)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_input_normalises_to_zero() {
        let v = Tensor::<f64>::full([2, 1, 4, 4], 3.5);
        let out = normalize_observed(&v, 1e-5);
        assert!(out.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn plus_minus_one_is_already_standard() {
        let v = Tensor::<f64>::from_fn([1, 1, 4, 4], |[_, _, y, x]| if (x + y) % 2 == 0 { 1.0 } else { -1.0 });
        let out = normalize_observed(&v, 1e-5);
        for (a, b) in out.data().iter().zip(v.data()) {
            // 1/sqrt(1 + eps) - 1 ~ -eps/2
            assert!((a - b).abs() <= 1e-5);
        }
    }

    #[test]
    fn zero_sigma_hat_gives_constant_channel() {
        let mut g = Graph::<f64>::new();
        let v = g.input(Tensor::from_fn([1, 1, 5, 5], |[_, _, y, x]| (y * 5 + x) as f64));
        let mu = g.input(Tensor::from_vec([1, 2, 1, 1], vec![0.3, -1.0]).unwrap());
        let sigma = g.input(Tensor::from_vec([1, 2, 1, 1], vec![2.0, 0.0]).unwrap());
        let out = align_to(&mut g, v, mu, sigma, 1e-5).unwrap();
        assert!(g.value(out).plane(0, 1).iter().all(|&x| x == -1.0));
    }

    #[test]
    fn mismatched_pair_is_an_error() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = rand::thread_rng();
        let dac = Dac::register(&mut store, "dac", 4, 4, 1e-5, &mut rng).unwrap();
        let mut g = Graph::new();
        let v = g.input(Tensor::zeros([1, 1, 4, 4]));
        let x = g.input(Tensor::zeros([1, 4, 5, 4]));
        assert!(dac.forward(&mut g, &store, v, x).is_err());
    }
}
