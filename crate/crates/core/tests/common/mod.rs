//! Reference implementations used as oracles by the integration tests.
//! Everything here is written as plain loops, independent of the library kernels.
#![allow(dead_code)]

use defian::autodiff::{Graph, Var};
use defian::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random(shape: [usize; 4], rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Cross-correlation with zero padding, straight from the definition.
pub fn naive_conv2d(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    b: Option<&Tensor<f64>>,
    dilation: usize,
    padding: usize,
) -> Tensor<f64> {
    let [n, cin, h, wd] = x.shape();
    let [cout, wcin, k, _] = w.shape();
    assert_eq!(cin, wcin);
    let span = dilation * (k - 1);
    let oh = h + 2 * padding - span;
    let ow = wd + 2 * padding - span;
    let mut out = Tensor::zeros([n, cout, oh, ow]);
    for b_ in 0..n {
        for o in 0..cout {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = b.map(|b| b.data()[o]).unwrap_or(0.0);
                    for i in 0..cin {
                        for ky in 0..k {
                            for kx in 0..k {
                                let sy = (y + ky * dilation) as isize - padding as isize;
                                let sx = (xx + kx * dilation) as isize - padding as isize;
                                if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < wd {
                                    acc += x.at(b_, i, sy as usize, sx as usize) * w.at(o, i, ky, kx);
                                }
                            }
                        }
                    }
                    out.set(b_, o, y, xx, acc);
                }
            }
        }
    }
    out
}

/// Transposed convolution by scattering every input value through the kernel.
/// Weights are `(in, out, k, k)`.
pub fn naive_deconv2d(
    y: &Tensor<f64>,
    w: &Tensor<f64>,
    b: Option<&Tensor<f64>>,
    dilation: usize,
    padding: usize,
) -> Tensor<f64> {
    let [n, cin, h, wd] = y.shape();
    let [wcin, cout, k, _] = w.shape();
    assert_eq!(cin, wcin);
    let span = dilation * (k - 1);
    let oh = h + span - 2 * padding;
    let ow = wd + span - 2 * padding;
    let mut out = Tensor::zeros([n, cout, oh, ow]);
    for b_ in 0..n {
        for i in 0..cin {
            for sy in 0..h {
                for sx in 0..wd {
                    let v = y.at(b_, i, sy, sx);
                    for o in 0..cout {
                        for ky in 0..k {
                            for kx in 0..k {
                                let ty = (sy + ky * dilation) as isize - padding as isize;
                                let tx = (sx + kx * dilation) as isize - padding as isize;
                                if ty >= 0 && tx >= 0 && (ty as usize) < oh && (tx as usize) < ow {
                                    let cur = out.at(b_, o, ty as usize, tx as usize);
                                    out.set(b_, o, ty as usize, tx as usize, cur + v * w.at(i, o, ky, kx));
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    if let Some(b) = b {
        for b_ in 0..n {
            for o in 0..cout {
                for v in out.plane_mut(b_, o) {
                    *v += b.data()[o];
                }
            }
        }
    }
    out
}

/// Dense `k x k` correlation of each channel with `stencil`, zero padded, same size.
pub fn naive_stencil(x: &Tensor<f64>, stencil: &[f64], k: usize) -> Tensor<f64> {
    let r = (k / 2) as isize;
    Tensor::from_fn(x.shape(), |[n, c, y, xx]| {
        let mut acc = 0.0;
        for ky in 0..k {
            for kx in 0..k {
                let sy = y as isize + ky as isize - r;
                let sx = xx as isize + kx as isize - r;
                if sy >= 0 && sx >= 0 && (sy as usize) < x.h() && (sx as usize) < x.w() {
                    acc += stencil[ky * k + kx] * x.at(n, c, sy as usize, sx as usize);
                }
            }
        }
        acc
    })
}

/// `y[n, o] = sum_i W[o, i] x[n, i] + b[o]`.
pub fn naive_linear(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    let [n, fin, _, _] = x.shape();
    let fout = w.n();
    Tensor::from_fn([n, fout, 1, 1], |[b_, o, _, _]| {
        (0..fin).map(|i| w.at(o, i, 0, 0) * x.at(b_, i, 0, 0)).sum::<f64>() + b.data()[o]
    })
}

pub fn naive_gap(x: &Tensor<f64>) -> Tensor<f64> {
    let [n, c, h, w] = x.shape();
    Tensor::from_fn([n, c, 1, 1], |[b, ch, _, _]| {
        let mut s = 0.0;
        for y in 0..h {
            for xx in 0..w {
                s += x.at(b, ch, y, xx);
            }
        }
        s / (h * w) as f64
    })
}

/// Eigenvalues of `[[a, b], [b, d]]` by rotating the matrix diagonal with an
/// explicit Givens rotation, returned `(max, min)`.
pub fn givens_eig2(a: f64, d: f64, b: f64) -> (f64, f64) {
    if b == 0.0 {
        return (a.max(d), a.min(d));
    }
    let theta = 0.5 * (2.0 * b).atan2(a - d);
    let (c, s) = (theta.cos(), theta.sin());
    let l1 = c * c * a + 2.0 * s * c * b + s * s * d;
    let l2 = s * s * a - 2.0 * s * c * b + c * c * d;
    (l1.max(l2), l1.min(l2))
}

/// Outcome of a gradient check.
#[derive(Debug)]
pub struct GradReport {
    pub worst_rel: f64,
    pub checked: usize,
}

/// Relative error with a small floor so that exact zeros compare sanely.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Compares reverse-mode gradients of `sum(r * f(inputs))` with central
/// differences at `coords` random positions per input.
pub fn check_op_grads(
    inputs: &[Tensor<f64>],
    f: impl Fn(&mut Graph<f64>, &[Var]) -> Var,
    coords: usize,
    eps: f64,
    seed: u64,
) -> GradReport {
    let mut r = rng(seed);
    let probe_shape = {
        let mut g = Graph::new();
        let vs: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let out = f(&mut g, &vs);
        g.value(out).shape()
    };
    let weights = random(probe_shape, &mut r);
    let loss_of = |ins: &[Tensor<f64>]| -> f64 {
        let mut g = Graph::new();
        let vs: Vec<Var> = ins.iter().map(|t| g.input(t.clone())).collect();
        let out = f(&mut g, &vs);
        g.value(out).data().iter().zip(weights.data()).map(|(a, b)| a * b).sum()
    };
    let mut g = Graph::new();
    let vs: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = f(&mut g, &vs);
    let wv = g.input(weights.clone());
    let prod = g.mul(out, wv).unwrap();
    let loss = g.sum(prod);
    g.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for (k, v) in vs.iter().enumerate() {
        let zeros = Tensor::zeros(inputs[k].shape());
        let analytic = g.grad(*v).cloned().unwrap_or(zeros);
        let len = inputs[k].len();
        for _ in 0..coords.min(len) {
            let idx = r.gen_range(0..len);
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[idx] += eps;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[idx] -= eps;
            let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * eps);
            worst = worst.max(rel_err(analytic.data()[idx], fd, 1e-6));
            checked += 1;
        }
    }
    GradReport {
        worst_rel: worst,
        checked,
    }
}

fn away_from_zero(t: Tensor<f64>, gap: f64) -> Tensor<f64> {
    t.map(|v| if v >= 0.0 { v + gap } else { v - gap })
}

/// Finite-difference reports for every differentiable graph operation.
pub fn op_gradient_reports(seed: u64) -> Vec<(&'static str, GradReport)> {
    use defian::conv::{ConvSpec, DepthwiseSpec};
    let mut r = rng(seed);
    let x = random([2, 3, 5, 4], &mut r);
    let y = random([2, 3, 5, 4], &mut r);
    let per_ch = random([1, 3, 1, 1], &mut r);
    let per_item = random([2, 3, 1, 1], &mut r);
    let single = random([2, 1, 5, 4], &mut r);
    let (eps, n) = (1e-5, 20);
    let mut out = Vec::new();
    let mut run = |name, ins: Vec<Tensor<f64>>, f: &dyn Fn(&mut Graph<f64>, &[Var]) -> Var| {
        out.push((name, check_op_grads(&ins, f, n, eps, seed ^ 0x5eed)));
    };
    run("add", vec![x.clone(), y.clone()], &|g, v| g.add(v[0], v[1]).unwrap());
    run("sub", vec![x.clone(), y.clone()], &|g, v| g.sub(v[0], v[1]).unwrap());
    run("mul", vec![x.clone(), y.clone()], &|g, v| g.mul(v[0], v[1]).unwrap());
    run("scale", vec![x.clone()], &|g, v| g.scale(v[0], -1.7));
    run("relu", vec![away_from_zero(x.clone(), 0.05)], &|g, v| g.relu(v[0]));
    run("sigmoid", vec![x.scale(3.0)], &|g, v| g.sigmoid(v[0]));
    run("add_channel", vec![x.clone(), per_ch.clone()], &|g, v| {
        g.add_channel(v[0], v[1]).unwrap()
    });
    run("add_channel_per_item", vec![x.clone(), per_item.clone()], &|g, v| {
        g.add_channel(v[0], v[1]).unwrap()
    });
    run("mul_channel", vec![x.clone(), per_item.clone()], &|g, v| {
        g.mul_channel(v[0], v[1]).unwrap()
    });
    run("expand_channels", vec![single.clone()], &|g, v| {
        g.expand_channels(v[0], 4).unwrap()
    });
    run("channel_mean", vec![x.clone()], &|g, v| g.channel_mean(v[0]));
    run("concat", vec![x.clone(), single.clone()], &|g, v| {
        g.concat(&[v[0], v[1]]).unwrap()
    });
    let spec = ConvSpec::same(3, 2, 3, 2);
    run(
        "conv2d",
        vec![
            x.clone(),
            random(spec.conv_weight_shape(), &mut r),
            random([1, 2, 1, 1], &mut r),
        ],
        &|g, v| g.conv2d(v[0], v[1], Some(v[2]), spec).unwrap(),
    );
    run(
        "deconv2d",
        vec![
            x.clone(),
            random(spec.deconv_weight_shape(), &mut r),
            random([1, 2, 1, 1], &mut r),
        ],
        &|g, v| g.deconv2d(v[0], v[1], Some(v[2]), spec).unwrap(),
    );
    let dw = DepthwiseSpec::same(3, 1);
    run(
        "depthwise_conv2d",
        vec![x.clone(), random([3, 1, 3, 3], &mut r), random([1, 3, 1, 1], &mut r)],
        &|g, v| g.depthwise_conv2d(v[0], v[1], Some(v[2]), dw).unwrap(),
    );
    run(
        "linear",
        vec![
            random([2, 5, 1, 1], &mut r),
            random([3, 5, 1, 1], &mut r),
            random([1, 3, 1, 1], &mut r),
        ],
        &|g, v| g.linear(v[0], v[1], Some(v[2])).unwrap(),
    );
    run("global_avg_pool", vec![x.clone()], &|g, v| g.global_avg_pool(v[0]));
    run("spatial_std", vec![x.clone()], &|g, v| g.spatial_std(v[0]));
    run("standardize", vec![x.clone()], &|g, v| g.standardize(v[0], 1e-5));
    run("pixel_shuffle", vec![random([2, 8, 3, 2], &mut r)], &|g, v| {
        g.pixel_shuffle(v[0], 2).unwrap()
    });
    run(
        "max_eigenvalue",
        vec![x.clone(), y.clone(), random([2, 3, 5, 4], &mut r)],
        &|g, v| g.max_eigenvalue(v[0], v[1], v[2]).unwrap(),
    );
    let target = x
        .zip_map(&away_from_zero(random([2, 3, 5, 4], &mut r), 0.05), |a, b| a + b)
        .unwrap();
    run("mae", vec![x.clone(), target], &|g, v| g.mae(v[0], v[1]).unwrap());
    run("sum", vec![x.clone()], &|g, v| g.sum(v[0]));
    run("sum_squares", vec![x.clone()], &|g, v| g.sum_squares(v[0]));
    run("pick", vec![x.clone()], &|g, v| g.pick(v[0], 7).unwrap());
    out
}

/// Finite-difference check of the whole micro network (one module, one block,
/// `C = 4`, 8x8 input, x2). Gradients are computed in `T` and compared with
/// central differences of the float64 network at `coords` parameter
/// coordinates plus `coords` input coordinates.
pub fn micro_e2e_report<T: defian::Real>(seed: u64, coords: usize, eps: f64) -> GradReport {
    use defian::model::{Attention, DefianModel, ModelConfig};
    let model = DefianModel::<f64>::new(ModelConfig::micro(4, 2), seed).unwrap();
    let mut r = rng(seed ^ 0xe2e);
    let input = Tensor::from_fn([1, 3, 8, 8], |_| r.gen_range(0.0..1.0));
    let weights = random([1, 3, 16, 16], &mut r);
    let loss64 = |m: &DefianModel<f64>, x: &Tensor<f64>| m.infer(x).unwrap().dot(&weights).unwrap();

    let mt = model.cast::<T>();
    let mut g = Graph::<T>::new();
    let xv = g.leaf(input.cast::<T>(), true);
    let out = mt.forward(&mut g, xv, Attention::Learned).unwrap();
    let wv = g.input(weights.cast::<T>());
    let prod = g.mul(out, wv).unwrap();
    let loss = g.sum(prod);
    g.backward(loss).unwrap();
    let grads = g.param_grads();
    let input_grad = g.grad(xv).unwrap().cast::<f64>();

    let trainable: Vec<_> = model
        .store()
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(id, p)| (id, p.value.len()))
        .collect();
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for _ in 0..coords {
        let (id, len) = trainable[r.gen_range(0..trainable.len())];
        let idx = r.gen_range(0..len);
        let analytic = grads.get(id).map(|t| t.data()[idx].as_f64()).unwrap_or(0.0);
        let mut plus = model.clone();
        plus.store_mut().value_mut(id).data_mut()[idx] += eps;
        let mut minus = model.clone();
        minus.store_mut().value_mut(id).data_mut()[idx] -= eps;
        let fd = (loss64(&plus, &input) - loss64(&minus, &input)) / (2.0 * eps);
        worst = worst.max(rel_err(analytic, fd, 1e-6));
        checked += 1;
    }
    for _ in 0..coords {
        let idx = r.gen_range(0..input.len());
        let mut plus = input.clone();
        plus.data_mut()[idx] += eps;
        let mut minus = input.clone();
        minus.data_mut()[idx] -= eps;
        let fd = (loss64(&model, &plus) - loss64(&model, &minus)) / (2.0 * eps);
        worst = worst.max(rel_err(input_grad.data()[idx], fd, 1e-6));
        checked += 1;
    }
    GradReport {
        worst_rel: worst,
        checked,
    }
}

/// Population mean and standard deviation of a slice.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, var.sqrt())
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// One random alignment case: a cell with random weights and inputs of
/// random size. Checks the per-channel statistics contract and argmax
/// preservation; returns a description of the first violation.
pub fn dac_contract_case(seed: u64) -> Result<(), String> {
    use defian::dac::Dac;
    use defian::nn::ParamStore;
    let mut r = rng(seed);
    let c = [4usize, 8, 16, 32][r.gen_range(0..4)];
    let (n, h, w) = (r.gen_range(1..3), r.gen_range(4..12), r.gen_range(4..12));
    let mut store = ParamStore::<f64>::new();
    let dac = Dac::register(&mut store, "dac", c, 4, 1e-5, &mut r).unwrap();
    let v = Tensor::from_fn([n, 1, h, w], |_| r.gen_range(-2.0..2.0));
    let x_ref = Tensor::from_fn([n, c, h, w], |_| r.gen_range(-1.0..3.0));
    let mut g = Graph::new();
    let (vv, xv) = (g.input(v.clone()), g.input(x_ref));
    let (mu_hat, sigma_hat) = dac.parameterize(&mut g, &store, xv).unwrap();
    let out = dac.forward(&mut g, &store, vv, xv).unwrap();
    let (out, mu_hat, sigma_hat) = (g.value(out), g.value(mu_hat), g.value(sigma_hat));
    for i in 0..n {
        let vmax = argmax(v.plane(i, 0));
        for ch in 0..c {
            let (m, s) = mean_std(out.plane(i, ch));
            let (mh, sh) = (mu_hat.at(i, ch, 0, 0), sigma_hat.at(i, ch, 0, 0));
            if (m - mh).abs() > 1e-4 {
                return Err(format!("seed {seed} item {i} channel {ch}: mean {m} vs {mh}"));
            }
            if (s - sh.abs()).abs() > 1e-3 {
                return Err(format!("seed {seed} item {i} channel {ch}: std {s} vs {}", sh.abs()));
            }
            if sh > 0.0 && argmax(out.plane(i, ch)) != vmax {
                return Err(format!("seed {seed} item {i} channel {ch}: argmax moved"));
            }
        }
    }
    Ok(())
}

/// Ablation variants from fewest to most parameters.
pub fn ablation_order() -> Vec<defian::model::Components> {
    use defian::model::Components;
    let c = |mshf, diendec, dac| Components { mshf, diendec, dac };
    vec![
        Components::NONE,
        c(false, false, true),
        c(true, false, false),
        c(false, true, false),
        c(true, false, true),
        c(false, true, true),
        c(true, true, false),
        Components::ALL,
    ]
}

pub fn within(value: f64, target: f64, rel: f64) -> bool {
    (value - target).abs() <= rel * target
}

/// Micro model (one block, one FEM, 8 channels, x2) trained on four synthetic images.
pub fn desk_config(seed: u64) -> defian::train::TrainConfig {
    defian::train::TrainConfig {
        batch_size: 4,
        patch: 16,
        total_updates: 300,
        seed,
        grad_clip: Some(10.0),
        prefetch: 0,
        ..Default::default()
    }
}

pub fn desk_run(seed: u64, cfg: &defian::train::TrainConfig) -> Vec<defian::train::LossRecord> {
    let data = defian::data::Dataset::synthetic(4, 64, 2, seed).unwrap();
    let model = defian::model::DefianModel::<f32>::new(defian::model::ModelConfig::micro(8, 2), seed).unwrap();
    defian::train::train(model, &data, cfg, None).unwrap().trace
}

/// (initial, final) loss under a trailing moving average of 50.
pub fn desk_halving(trace: &[defian::train::LossRecord]) -> (f64, f64) {
    let s = defian::train::smoothed(trace, 50);
    let initial = trace[..50].iter().map(|r| r.loss).sum::<f64>() / 50.0;
    (initial, *s.last().unwrap())
}
