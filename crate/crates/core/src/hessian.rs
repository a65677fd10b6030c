//! Hessian filtering: per-pixel maximum eigenvalue of the 2x2 image Hessian.
//!
//! Second derivatives come from fixed stencils applied depthwise with zero
//! padding; the larger eigenvalue is then the closed form
//! `(hh + vv)/2 + sqrt((hh - vv)^2 + 4 hv^2)/2`. Coarser scales reuse the
//! 3x3 stencils with their taps spread `(ker - 1)/2` pixels apart.
//!
//! A generic Jacobi eigen-solver is kept alongside as the reference path for
//! tests and for [`bench_eigen`].

use std::time::Instant;

use rand::{Rng, SeedableRng};

use crate::autodiff::{Graph, Var};
use crate::conv::{self, DepthwiseSpec};
use crate::error::{Error, Result};
use crate::nn::{ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

pub const SUPPORTED_SCALES: [usize; 3] = [3, 5, 7];

/// Larger eigenvalue of the symmetric matrix `[[hh, hv], [hv, vv]]`.
#[inline]
pub fn closed_form_max_eig<T: Real>(hh: T, vv: T, hv: T) -> T {
    let half = T::lit(0.5);
    let d = hh - vv;
    let radicand = (d * d + T::lit(4.0) * hv * hv).max(T::zero());
    (hh + vv) * half + radicand.sqrt() * half
}

/// Which second derivative a stencil extracts.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Derivative {
    Hh,
    Vv,
    Hv,
}

impl Derivative {
    pub const ALL: [Derivative; 3] = [Derivative::Hh, Derivative::Vv, Derivative::Hv];

    pub fn name(self) -> &'static str {
        match self {
            Derivative::Hh => "hh",
            Derivative::Vv => "vv",
            Derivative::Hv => "hv",
        }
    }

    /// The 3x3 taps (row-major) before spreading.
    ///
    /// `hh` and `vv` are symmetric and `hv` is invariant under a 180 degree
    /// rotation, so correlation and convolution agree for all three.
    pub fn taps(self) -> [f64; 9] {
        match self {
            Derivative::Hh => [0.0, 0.0, 0.0, 1.0, -2.0, 1.0, 0.0, 0.0, 0.0],
            Derivative::Vv => [0.0, 1.0, 0.0, 0.0, -2.0, 0.0, 0.0, 1.0, 0.0],
            Derivative::Hv => [1.0, 0.0, -1.0, 0.0, 0.0, 0.0, -1.0, 0.0, 1.0],
        }
    }
}

/// The three second-derivative stencils at one scale.
#[derive(Clone, Debug, PartialEq)]
pub struct HessianKernelSet {
    ker: usize,
    hh: Vec<f64>,
    vv: Vec<f64>,
    hv: Vec<f64>,
}

impl HessianKernelSet {
    pub fn new(ker: usize) -> Result<Self> {
        if !SUPPORTED_SCALES.contains(&ker) {
            return Err(Error::InvalidArgument(format!(
                "unsupported Hessian scale {ker}; supported scales are 3, 5, 7"
            )));
        }
        let spread = |d: Derivative| {
            let gap = (ker - 1) / 2;
            let taps = d.taps();
            let mut dense = vec![0.0; ker * ker];
            for ky in 0..3 {
                for kx in 0..3 {
                    dense[ky * gap * ker + kx * gap] = taps[ky * 3 + kx];
                }
            }
            dense
        };
        Ok(Self {
            ker,
            hh: spread(Derivative::Hh),
            vv: spread(Derivative::Vv),
            hv: spread(Derivative::Hv),
        })
    }

    pub fn ker(&self) -> usize {
        self.ker
    }

    /// Spacing between neighbouring taps.
    pub fn dilation(&self) -> usize {
        (self.ker - 1) / 2
    }

    /// Dense `ker x ker` stencil, row-major.
    pub fn stencil(&self, d: Derivative) -> &[f64] {
        match d {
            Derivative::Hh => &self.hh,
            Derivative::Vv => &self.vv,
            Derivative::Hv => &self.hv,
        }
    }

    fn depthwise_weights<T: Real>(&self, d: Derivative, channels: usize) -> Tensor<T> {
        let k = self.ker;
        let s = self.stencil(d);
        Tensor::from_fn([channels, 1, k, k], |[_, _, y, x]| T::lit(s[y * k + x]))
    }
}

/// Per-pixel maximum Hessian eigenvalue, same shape as the filtered input.
#[derive(Clone, Debug, PartialEq)]
pub struct EigenMap<T> {
    pub lambda: Tensor<T>,
}

fn gradients_any_size<T: Real>(x: &Tensor<T>, ks: &HessianKernelSet) -> Result<[Tensor<T>; 3]> {
    let spec = DepthwiseSpec::same(ks.ker, 1);
    let run = |d| conv::depthwise_conv2d(x, &spec, &ks.depthwise_weights(d, x.c()), None);
    Ok([run(Derivative::Hh)?, run(Derivative::Vv)?, run(Derivative::Hv)?])
}

/// Second derivatives `(g_hh, g_vv, g_hv)`, each channel filtered independently.
pub fn hessian_gradients<T: Real>(x: &Tensor<T>, ks: &HessianKernelSet) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    if x.h() < ks.ker || x.w() < ks.ker {
        return Err(Error::shape(
            "hessian_gradients",
            format!(
                "{}x{} input is smaller than the {}x{} stencil",
                x.h(),
                x.w(),
                ks.ker,
                ks.ker
            ),
        ));
    }
    let [hh, vv, hv] = gradients_any_size(x, ks)?;
    Ok((hh, vv, hv))
}

pub fn max_eigenvalue<T: Real>(hh: &Tensor<T>, vv: &Tensor<T>, hv: &Tensor<T>) -> Result<EigenMap<T>> {
    hh.expect_same_shape("max_eigenvalue", vv)?;
    hh.expect_same_shape("max_eigenvalue", hv)?;
    let data = hh
        .data()
        .iter()
        .zip(vv.data())
        .zip(hv.data())
        .map(|((&a, &b), &c)| closed_form_max_eig(a, b, c))
        .collect();
    Ok(EigenMap {
        lambda: Tensor::from_vec(hh.shape(), data)?,
    })
}

pub fn scaled_hessian_filter<T: Real>(x: &Tensor<T>, ker: usize) -> Result<EigenMap<T>> {
    let ks = HessianKernelSet::new(ker)?;
    let (hh, vv, hv) = hessian_gradients(x, &ks)?;
    max_eigenvalue(&hh, &vv, &hv)
}

fn check_scales(scales: &[usize]) -> Result<()> {
    if scales.is_empty() {
        return Err(Error::InvalidArgument(
            "multi-scale Hessian filtering needs at least one scale".into(),
        ));
    }
    if let Some(bad) = scales.iter().find(|s| !SUPPORTED_SCALES.contains(s)) {
        return Err(Error::InvalidArgument(format!(
            "unsupported Hessian scale {bad}; supported scales are 3, 5, 7"
        )));
    }
    Ok(())
}

/// Channel-averaged eigenvalue maps, one output channel per scale in the given order.
pub fn mshf<T: Real>(x: &Tensor<T>, scales: &[usize]) -> Result<Tensor<T>> {
    check_scales(scales)?;
    let [n, c, h, w] = x.shape();
    let inv = T::lit(1.0 / c as f64);
    let mut out = Tensor::zeros([n, scales.len(), h, w]);
    for (s, &ker) in scales.iter().enumerate() {
        let lambda = scaled_hessian_filter(x, ker)?.lambda;
        for i in 0..n {
            for ch in 0..c {
                for (o, &v) in out.plane_mut(i, s).iter_mut().zip(lambda.plane(i, ch)) {
                    *o += v;
                }
            }
            out.plane_mut(i, s).iter_mut().for_each(|v| *v *= inv);
        }
    }
    Ok(out)
}

// ---- reference eigen-solver ----------------------------------------------

/// Eigenvalues of a dense symmetric `n x n` matrix by cyclic Jacobi rotations,
/// sorted in decreasing order.
pub fn jacobi_eigenvalues(matrix: &[f64], n: usize) -> Vec<f64> {
    assert_eq!(matrix.len(), n * n, "matrix must be n x n");
    let mut a = matrix.to_vec();
    for _sweep in 0..64 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * n + j] * a[i * n + j])
            .sum();
        let scale: f64 = a.iter().map(|v| v * v).sum();
        if off <= 1e-30 * scale.max(f64::MIN_POSITIVE) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut eig: Vec<f64> = (0..n).map(|i| a[i * n + i]).collect();
    eig.sort_by(|x, y| y.total_cmp(x));
    eig
}

/// `(max, min)` eigenvalue maps from the reference solver, one 2x2
/// decomposition per pixel.
pub fn oracle_eigenvalues<T: Real>(
    hh: &Tensor<T>,
    vv: &Tensor<T>,
    hv: &Tensor<T>,
) -> Result<(Tensor<f64>, Tensor<f64>)> {
    hh.expect_same_shape("oracle_eigenvalues", vv)?;
    hh.expect_same_shape("oracle_eigenvalues", hv)?;
    let mut max = Vec::with_capacity(hh.len());
    let mut min = Vec::with_capacity(hh.len());
    for ((&a, &b), &c) in hh.data().iter().zip(vv.data()).zip(hv.data()) {
        let (a, b, c) = (a.as_f64(), b.as_f64(), c.as_f64());
        let e = jacobi_eigenvalues(&[a, c, c, b], 2);
        max.push(e[0]);
        min.push(e[1]);
    }
    Ok((Tensor::from_vec(hh.shape(), max)?, Tensor::from_vec(hh.shape(), min)?))
}

// ---- differentiable filter bank ------------------------------------------

/// Depthwise Hessian filter banks for a multi-scale filter inside a network.
///
/// Each scale holds three `(c, 1, 3, 3)` tap tensors (dilated by the scale's
/// gap) and matching biases. The tensors are frozen: they are initialised to
/// the stencils and never trained, but they are part of the parameter store.
#[derive(Clone, Debug)]
pub struct HessianBank {
    channels: usize,
    scales: Vec<(usize, [(ParamId, ParamId); 3])>,
}

impl HessianBank {
    pub fn register<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        channels: usize,
        scales: &[usize],
    ) -> Result<Self> {
        check_scales(scales)?;
        let mut out = Vec::with_capacity(scales.len());
        for &ker in scales {
            let mut ids = Vec::with_capacity(3);
            for d in Derivative::ALL {
                let taps = d.taps();
                let w = Tensor::from_fn([channels, 1, 3, 3], |[_, _, y, x]| T::lit(taps[y * 3 + x]));
                let wid = store.add(format!("{prefix}.k{ker}.{}.weight", d.name()), w, false)?;
                let bid = store.add(
                    format!("{prefix}.k{ker}.{}.bias", d.name()),
                    Tensor::zeros([1, channels, 1, 1]),
                    false,
                )?;
                ids.push((wid, bid));
            }
            out.push((ker, [ids[0], ids[1], ids[2]]));
        }
        Ok(Self { channels, scales: out })
    }

    pub fn scales(&self) -> Vec<usize> {
        self.scales.iter().map(|(k, _)| *k).collect()
    }

    /// Element count of one scale's bank for `channels` channels.
    pub fn elements_per_scale(channels: usize) -> usize {
        3 * channels * (9 + 1)
    }

    /// `[lambda_bar_k for k in scales]` as an `(n, |scales|, h, w)` node.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        if g.value(x).c() != self.channels {
            return Err(Error::shape(
                "mshf",
                format!("input has {} channels, bank expects {}", g.value(x).c(), self.channels),
            ));
        }
        let mut maps = Vec::with_capacity(self.scales.len());
        for (ker, ids) in &self.scales {
            let spec = DepthwiseSpec::same(3, (ker - 1) / 2);
            let mut grads = Vec::with_capacity(3);
            for &(wid, bid) in ids {
                let w = g.param(store, wid);
                let b = g.param(store, bid);
                grads.push(g.depthwise_conv2d(x, w, Some(b), spec)?);
            }
            let lambda = g.max_eigenvalue(grads[0], grads[1], grads[2])?;
            maps.push(g.channel_mean(lambda));
        }
        g.concat(&maps)
    }
}

// ---- benchmark -----------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EigenMethod {
    ClosedForm,
    Oracle,
}

impl EigenMethod {
    pub fn name(self) -> &'static str {
        match self {
            EigenMethod::ClosedForm => "closed_form",
            EigenMethod::Oracle => "eigen_solver",
        }
    }
}

#[derive(Clone, Debug)]
pub struct BenchRow {
    /// `(channels, height, width)`.
    pub size: (usize, usize, usize),
    pub method: EigenMethod,
    pub mean_ms: f64,
    pub stddev_ms: f64,
}

#[derive(Clone, Debug, Default)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    /// Largest closed-form vs. reference disagreement seen in the correctness gate.
    pub max_abs_diff: f64,
}

impl BenchReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("size,method,mean_ms,stddev_ms\n");
        for r in &self.rows {
            let (c, h, w) = r.size;
            s.push_str(&format!(
                "{c}x{h}x{w},{},{:.6},{:.6}\n",
                r.method.name(),
                r.mean_ms,
                r.stddev_ms
            ));
        }
        s
    }

    pub fn mean_ms(&self, size: (usize, usize, usize), method: EigenMethod) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.size == size && r.method == method)
            .map(|r| r.mean_ms)
    }
}

fn closed_form_path(x: &Tensor<f32>, ks: &HessianKernelSet) -> Result<Tensor<f32>> {
    let [hh, vv, hv] = gradients_any_size(x, ks)?;
    Ok(max_eigenvalue(&hh, &vv, &hv)?.lambda)
}

fn oracle_path(x: &Tensor<f32>, ks: &HessianKernelSet) -> Result<Tensor<f64>> {
    let [hh, vv, hv] = gradients_any_size(x, ks)?;
    Ok(oracle_eigenvalues(&hh, &vv, &hv)?.0)
}

fn time_ms(reps: usize, mut f: impl FnMut() -> Result<()>) -> Result<(f64, f64)> {
    let mut samples = Vec::with_capacity(reps);
    for _ in 0..reps {
        let t0 = Instant::now();
        f()?;
        samples.push(t0.elapsed().as_secs_f64() * 1e3);
    }
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / n;
    Ok((mean, var.sqrt()))
}

/// Times the closed-form Hessian filter against per-pixel eigen-decomposition
/// for each `(c, h, w)` size (generic 3x3 stencils, batch of one).
///
/// Both paths are first checked to agree within `1e-5` on every size.
pub fn bench_eigen(sizes: &[(usize, usize, usize)], reps: usize, seed: u64) -> Result<BenchReport> {
    let reps = reps.max(1);
    let ks = HessianKernelSet::new(3)?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut report = BenchReport::default();
    for &(c, h, w) in sizes {
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::InvalidArgument(format!(
                "benchmark size {c}x{h}x{w} has a zero extent"
            )));
        }
        let x: Tensor<f32> = Tensor::from_fn([1, c, h, w], |_| rng.gen_range(0.0f32..1.0));
        let fast = closed_form_path(&x, &ks)?;
        let slow = oracle_path(&x, &ks)?;
        let diff = fast
            .data()
            .iter()
            .zip(slow.data())
            .map(|(&a, &b)| (a as f64 - b).abs())
            .fold(0.0, f64::max);
        if diff > 1e-5 {
            return Err(Error::InvalidArgument(format!(
                "closed-form and reference eigenvalues disagree by {diff:e} at {c}x{h}x{w}"
            )));
        }
        report.max_abs_diff = report.max_abs_diff.max(diff);
        let (m, s) = time_ms(reps, || closed_form_path(&x, &ks).map(drop))?;
        report.rows.push(BenchRow {
            size: (c, h, w),
            method: EigenMethod::ClosedForm,
            mean_ms: m,
            stddev_ms: s,
        });
        let (m, s) = time_ms(reps, || oracle_path(&x, &ks).map(drop))?;
        report.rows.push(BenchRow {
            size: (c, h, w),
            method: EigenMethod::Oracle,
            mean_ms: m,
            stddev_ms: s,
        });
    }
    Ok(report)
}

/// Channels {1, 4, 16, 64} by spatial sizes {1, 2, 4, 8} squared.
pub fn default_bench_sizes() -> Vec<(usize, usize, usize)> {
    let mut v = Vec::new();
    for c in [1, 4, 16, 64] {
        for s in [1, 2, 4, 8] {
            v.push((c, s, s));
        }
    }
    v
}
