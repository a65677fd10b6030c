mod common;

use common::*;
use defian::autodiff::Graph;
use defian::diendec::{arf, receptive_field_probe, DiEnDec, DiEnDecConfig, ProbeDepth};
use defian::nn::ParamStore;
use defian::Tensor;

fn build(seed: u64) -> (DiEnDec, ParamStore<f64>) {
    let mut store = ParamStore::new();
    let net = DiEnDec::register(&mut store, "d", DiEnDecConfig::default(), &mut rng(seed)).unwrap();
    (net, store)
}

fn positive(mut store: ParamStore<f64>) -> ParamStore<f64> {
    for (_, p) in store.iter_mut() {
        p.value.data_mut().iter_mut().for_each(|v| *v = v.abs() + 1e-3);
    }
    store
}

fn run(net: &DiEnDec, store: &ParamStore<f64>, x: &Tensor<f64>, depth: Option<usize>) -> Tensor<f64> {
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let y = match depth {
        Some(d) => net.encode(&mut g, store, xv, d).unwrap(),
        None => net.forward(&mut g, store, xv).unwrap(),
    };
    g.value(y).clone()
}

fn window(points: &std::collections::BTreeSet<(usize, usize)>) -> (usize, usize, usize, usize) {
    let ys: Vec<usize> = points.iter().map(|p| p.0).collect();
    let xs: Vec<usize> = points.iter().map(|p| p.1).collect();
    (
        *ys.iter().min().unwrap(),
        *ys.iter().max().unwrap(),
        *xs.iter().min().unwrap(),
        *xs.iter().max().unwrap(),
    )
}

#[test]
fn arf_law() {
    for d in 0..=8u32 {
        assert_eq!(arf(3, d), (1u64 << (d + 1)) - 1);
        assert!(arf(3, d + 1) > arf(3, d));
    }
    assert_eq!(arf(3, 2), 7);
    assert_eq!(arf(3, 3), 15);
}

#[test]
fn output_shapes() {
    let (net, store) = build(1);
    for s in [8, 17, 32] {
        let x = random([2, 3, s, s], &mut rng(s as u64));
        assert_eq!(run(&net, &store, &x, None).shape(), [2, 1, s, s]);
    }
    let mut g = Graph::new();
    let bad = g.input(Tensor::zeros([1, 4, 8, 8]));
    assert!(net.forward(&mut g, &store, bad).is_err());
}

#[test]
fn zero_weights_give_zero() {
    let (net, mut store) = build(2);
    store.zero_all();
    let x = random([1, 3, 9, 9], &mut rng(3));
    assert!(run(&net, &store, &x, None).data().iter().all(|&v| v == 0.0));
}

#[test]
fn perturbation_outside_encoder_field_is_invisible() {
    let (net, store) = build(4);
    let x = random([1, 3, 32, 32], &mut rng(5));
    let base = run(&net, &store, &x, Some(3));
    let (cy, cx) = (16usize, 16usize);
    for (dy, dx) in [(8isize, 0isize), (-8, 0), (0, 8), (0, -8), (8, 8), (-8, 5), (3, -9)] {
        let mut p = x.clone();
        let (y, xx) = ((cy as isize + dy) as usize, (cx as isize + dx) as usize);
        for c in 0..3 {
            p.set(0, c, y, xx, p.at(0, c, y, xx) + 10.0);
        }
        let out = run(&net, &store, &p, Some(3));
        for ch in 0..out.c() {
            assert_eq!(out.at(0, ch, cy, cx), base.at(0, ch, cy, cx), "offset ({dy}, {dx})");
        }
    }
    // Inside the window the same perturbation does move the output.
    let mut p = x.clone();
    p.set(0, 0, cy + 7, cx + 7, p.at(0, 0, cy + 7, cx + 7) + 10.0);
    let pos = positive(store);
    let a = run(&net, &pos, &x, Some(3));
    let b = run(&net, &pos, &p, Some(3));
    assert_ne!(a.at(0, 0, cy, cx), b.at(0, 0, cy, cx));
}

#[test]
fn probe_supports() {
    let (net, store) = build(6);
    let store = positive(store);
    let x = Tensor::from_fn([1, 3, 40, 40], |[_, c, y, xx]| {
        0.1 + ((c + y * 3 + xx * 7) % 11) as f64 / 11.0
    });
    let centre = (20, 20);
    for (depth, side) in [(1usize, 3usize), (2, 7), (3, 15)] {
        let s = receptive_field_probe(&net, &store, &x, ProbeDepth::Encoder(depth), centre).unwrap();
        let r = side / 2;
        assert_eq!(window(&s), (20 - r, 20 + r, 20 - r, 20 + r), "depth {depth}");
        // Dense: no gridding holes.
        assert_eq!(s.len(), side * side, "depth {depth}");
        for &(y, xx) in &s {
            assert!(s.contains(&(40 - y, 40 - xx)), "symmetric around the centre");
        }
    }
    let full = receptive_field_probe(&net, &store, &x, ProbeDepth::Full, centre).unwrap();
    assert_eq!(full.len(), 29 * 29);
    assert!(receptive_field_probe(&net, &store, &x, ProbeDepth::Full, (40, 0)).is_err());
}

#[test]
fn random_sign_weights_stay_inside_15x15() {
    let mut nonempty = 0;
    for seed in 0..5 {
        let (net, store) = build(100 + seed);
        let x = random([1, 3, 32, 32], &mut rng(200 + seed));
        for (py, px) in [(16, 16), (12, 19), (20, 10)] {
            let s = receptive_field_probe(&net, &store, &x, ProbeDepth::Encoder(3), (py, px)).unwrap();
            if s.is_empty() {
                // Channel 0 is switched off by the ReLU at this pixel.
                continue;
            }
            nonempty += 1;
            let (y0, y1, x0, x1) = window(&s);
            assert!(y0 + 7 >= py && y1 <= py + 7 && x0 + 7 >= px && x1 <= px + 7);
        }
    }
    assert!(nonempty >= 5);
}

#[test]
fn input_gradient_matches_finite_differences() {
    let (net, store) = build(7);
    let x = random([1, 3, 9, 9], &mut rng(8));
    let report = check_op_grads(&[x], |g, v| net.forward(g, &store, v[0]).unwrap(), 20, 1e-5, 9);
    assert!(report.worst_rel <= 1e-6, "{report:?}");
}

#[test]
fn layer_geometry() {
    let specs = DiEnDecConfig::default().layer_specs();
    let dil: Vec<usize> = specs.iter().map(|(s, _)| s.dilation).collect();
    assert_eq!(dil, [1, 2, 4, 4, 2, 1]);
    assert!(specs.iter().all(|(s, _)| s.padding == s.dilation && s.kernel_size == 3));
    assert_eq!(specs.iter().filter(|(_, t)| *t).count(), 3);
    assert!(specs[..3].iter().all(|(_, t)| !t));
}
