mod common;

use common::*;
use defian::data::image::quantize;
use defian::data::metrics::{luma, psnr_planes, ssim_planes};
use defian::data::patch::{crop_pair, flip_h, flip_v, rot90};
use defian::data::resize::cubic;
use defian::data::{
    bicubic_resize, bicubic_scale, downscale, luminance, psnr, sample_patch, ssim, Augment, Dataset, ImageBuffer,
    PatchOptions, Plane,
};
use defian::Tensor;
use proptest::prelude::*;
use rand::Rng;

fn noise_image(w: usize, h: usize, seed: u64) -> ImageBuffer {
    let mut r = rng(seed);
    ImageBuffer::from_fn(w, h, |_, _| [r.gen(), r.gen(), r.gen()]).unwrap()
}

/// Direct 2-D weighting of every source pixel followed by decimation.
fn conv_decimate(src: &[f64], w: usize, h: usize, s: usize) -> Vec<f64> {
    let (ow, oh) = (w / s, h / s);
    let k = 1.0 / s as f64;
    let mut out = vec![0.0; ow * oh];
    for oy in 0..oh {
        for ox in 0..ow {
            let cy = (oy as f64 + 0.5) * s as f64 - 0.5;
            let cx = (ox as f64 + 0.5) * s as f64 - 0.5;
            let (mut acc, mut norm) = (0.0, 0.0);
            let reach = 2 * s as i64 + 2;
            for dy in -reach..=reach {
                for dx in -reach..=reach {
                    let sy = cy.floor() as i64 + dy;
                    let sx = cx.floor() as i64 + dx;
                    let wgt = cubic(k * (cy - sy as f64)) * cubic(k * (cx - sx as f64));
                    if wgt == 0.0 {
                        continue;
                    }
                    let py = sy.clamp(0, h as i64 - 1) as usize;
                    let px = sx.clamp(0, w as i64 - 1) as usize;
                    acc += wgt * src[py * w + px];
                    norm += wgt;
                }
            }
            out[oy * ow + ox] = acc / norm;
        }
    }
    out
}

#[test]
fn resize_constant_and_identity() {
    let flat = ImageBuffer::filled(13, 9, [10, 200, 77]).unwrap();
    for (w, h) in [(26, 18), (39, 27), (6, 4), (5, 11), (1, 1)] {
        let out = bicubic_resize(&flat, w, h).unwrap();
        assert!(out.pixels().chunks(3).all(|p| p == [10, 200, 77]), "{w}x{h}");
    }
    let img = noise_image(17, 11, 1);
    assert_eq!(bicubic_scale(&img, 1.0).unwrap(), img);
    assert!(bicubic_resize(&img, 0, 3).is_err());
    assert!(bicubic_scale(&img, -1.0).is_err());
}

#[test]
fn ramp_downscale_matches_direct_oracle() {
    for s in [2, 3, 4] {
        let (w, h) = (48, 36);
        let img = ImageBuffer::from_fn(w, h, |x, y| [(x * 5) as u8, (y * 7) as u8, ((x + y) * 2) as u8]).unwrap();
        let small = downscale(&img, s).unwrap();
        assert_eq!((small.width(), small.height()), (w / s, h / s));
        for c in 0..3 {
            let want = conv_decimate(&img.channel(c), w, h, s);
            let got = small.channel(c);
            for (g, o) in got.iter().zip(&want) {
                assert!((g - quantize(*o) as f64).abs() <= 1.0, "s={s} c={c}: {g} vs {o}");
            }
        }
    }
    assert!(downscale(&ImageBuffer::filled(3, 3, [0; 3]).unwrap(), 4).is_err());
}

#[test]
fn patch_at_origin_is_bicubic_of_crop() {
    let hr = noise_image(40, 40, 2);
    let mut opts = PatchOptions::new(2);
    opts.patch = 12;
    opts.augment = false;
    let (lr, hr_crop) = crop_pair(&hr, None, &opts, 0, 0).unwrap();
    assert_eq!(hr_crop, hr.crop(0, 0, 24, 24).unwrap());
    assert_eq!(lr, bicubic_resize(&hr_crop, 12, 12).unwrap());
}

#[test]
fn flips_and_rotation() {
    let t = random([1, 3, 4, 6], &mut rng(3));
    assert_eq!(flip_h(&flip_h(&t)), t);
    assert_eq!(flip_v(&flip_v(&t)), t);
    let r = rot90(&t);
    assert_eq!(r.shape(), [1, 3, 6, 4]);
    assert_eq!(rot90(&rot90(&rot90(&r))), t);
    // Top-right corner moves to top-left under a counter-clockwise turn.
    assert_eq!(r.at(0, 0, 0, 0), t.at(0, 0, 0, 5));
}

#[test]
fn alignment_audit_and_inverse_augmentation() {
    let hr = noise_image(61, 53, 4);
    let lr_img = downscale(&hr, 3).unwrap();
    let mut r = rng(5);
    let mut opts = PatchOptions::new(3);
    opts.patch = 8;
    for draw in 0..1000 {
        let paired = draw % 2 == 0;
        let pair = sample_patch(&hr, paired.then_some(&lr_img), &opts, &mut r).unwrap();
        let (x, y) = pair.lr_origin;
        // Corners of the LR patch scaled by s land inside the HR image, on the HR crop.
        assert!((x + 8) * 3 <= hr.width() && (y + 8) * 3 <= hr.height());
        let hr_crop = hr.crop(3 * x, 3 * y, 24, 24).unwrap().to_tensor::<f32>(1.0);
        assert_eq!(pair.augment.invert(&pair.hr), hr_crop, "draw {draw}");
        let lr_crop = if paired {
            lr_img.crop(x, y, 8, 8).unwrap()
        } else {
            bicubic_resize(&hr.crop(3 * x, 3 * y, 24, 24).unwrap(), 8, 8).unwrap()
        };
        assert_eq!(pair.augment.invert(&pair.lr), lr_crop.to_tensor::<f32>(1.0));
    }
    opts.patch = 30;
    assert!(sample_patch(&hr, None, &opts, &mut r).is_err());
}

#[test]
fn augmentations_are_roughly_balanced() {
    let mut r = rng(6);
    let draws: Vec<Augment> = (0..4000).map(|_| Augment::random(&mut r)).collect();
    for count in [
        draws.iter().filter(|a| a.flip_h).count(),
        draws.iter().filter(|a| a.flip_v).count(),
        draws.iter().filter(|a| a.rot90).count(),
    ] {
        assert!((1800..2200).contains(&count), "{count}");
    }
}

#[test]
fn psnr_examples() {
    let a = Plane::filled(8, 8, 100.0);
    assert_eq!(psnr_planes(&a, &a).unwrap(), f64::INFINITY);
    let z = Plane::filled(8, 8, 0.0);
    let full = Plane::filled(8, 8, 255.0);
    assert!(psnr_planes(&z, &full).unwrap().abs() < 1e-12);
    let one = Plane::filled(8, 8, 101.0);
    assert!((psnr_planes(&a, &one).unwrap() - 20.0 * 255f64.log10()).abs() < 1e-9);
    assert!((psnr_planes(&a, &one).unwrap() - 48.13).abs() < 0.01);
    assert!(psnr_planes(&a, &Plane::filled(8, 7, 0.0)).is_err());
}

#[test]
fn psnr_decreases_with_noise() {
    let base = Plane::new(16, 16, (0..256).map(|i| (i % 200) as f64 + 20.0).collect()).unwrap();
    let mut last = f64::INFINITY;
    for amp in 1..10 {
        let noisy = Plane::new(
            16,
            16,
            base.data
                .iter()
                .enumerate()
                .map(|(i, v)| v + if i % 2 == 0 { amp as f64 } else { -(amp as f64) })
                .collect(),
        )
        .unwrap();
        let p = psnr_planes(&base, &noisy).unwrap();
        assert!(p < last);
        assert_eq!(p, psnr_planes(&noisy, &base).unwrap());
        last = p;
    }
}

/// SSIM with each 11x11 Gaussian window evaluated directly in 2-D.
fn ssim_oracle(a: &Plane, b: &Plane) -> f64 {
    let (w, h) = (a.width, a.height);
    let mut g = [[0.0; 11]; 11];
    let mut sum = 0.0;
    for (y, row) in g.iter_mut().enumerate() {
        for (x, v) in row.iter_mut().enumerate() {
            let (dy, dx) = (y as f64 - 5.0, x as f64 - 5.0);
            *v = (-(dx * dx + dy * dy) / (2.0 * 1.5 * 1.5)).exp();
            sum += *v;
        }
    }
    let (c1, c2) = ((0.01f64 * 255.0).powi(2), (0.03f64 * 255.0).powi(2));
    let mut total = 0.0;
    let mut count = 0;
    for oy in 0..=h - 11 {
        for ox in 0..=w - 11 {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for (y, row) in g.iter().enumerate() {
                for (x, &wt) in row.iter().enumerate() {
                    let wt = wt / sum;
                    let (va, vb) = (a.at(ox + x, oy + y), b.at(ox + x, oy + y));
                    ma += wt * va;
                    mb += wt * vb;
                    saa += wt * va * va;
                    sbb += wt * vb * vb;
                    sab += wt * va * vb;
                }
            }
            let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    total / count as f64
}

#[test]
fn ssim_matches_windowed_oracle() {
    let mut r = rng(7);
    let a = Plane::new(19, 14, (0..19 * 14).map(|_| r.gen_range(0.0..255.0)).collect()).unwrap();
    let b = Plane::new(
        19,
        14,
        a.data
            .iter()
            .map(|v| (v + r.gen_range(-30.0..30.0)).clamp(0.0, 255.0))
            .collect(),
    )
    .unwrap();
    let got = ssim_planes(&a, &b).unwrap();
    assert!((got - ssim_oracle(&a, &b)).abs() <= 1e-9);
    assert!((ssim_planes(&a, &a).unwrap() - 1.0).abs() <= 1e-12);
    assert_eq!(got, ssim_planes(&b, &a).unwrap());
    assert!(ssim_planes(&Plane::filled(10, 20, 0.0), &Plane::filled(10, 20, 0.0)).is_err());
}

#[test]
fn ssim_of_negative_pattern_is_negative() {
    let a = Plane::new(
        24,
        24,
        (0..576)
            .map(|i| {
                if (i % 24 / 2 + i / 24 / 2) % 2 == 0 {
                    40.0
                } else {
                    215.0
                }
            })
            .collect(),
    )
    .unwrap();
    let neg = Plane::new(24, 24, a.data.iter().map(|v| 255.0 - v).collect()).unwrap();
    let s = ssim_planes(&a, &neg).unwrap();
    assert!(s < 0.0, "{s}");
    assert!((s - ssim_oracle(&a, &neg)).abs() <= 1e-9);
}

#[test]
fn ssim_of_two_constants_is_the_luminance_term() {
    let (x, y) = (50.0, 180.0);
    let c1 = (0.01f64 * 255.0).powi(2);
    let want = (2.0 * x * y + c1) / (x * x + y * y + c1);
    let s = ssim_planes(&Plane::filled(12, 12, x), &Plane::filled(12, 12, y)).unwrap();
    assert!((s - want).abs() < 1e-12);
    assert!(s < 1.0);
}

#[test]
fn luminance_values() {
    assert!((luma([255, 255, 255]) - 235.0).abs() <= 0.5);
    assert!((luma([0, 0, 0]) - 16.0).abs() <= 0.5);
    assert!((luma([128, 128, 128]) - 125.9).abs() < 0.05);
    let img = ImageBuffer::from_fn(3, 2, |x, y| [(x * 80) as u8, (y * 90) as u8, 7]).unwrap();
    let p = luminance(&img);
    assert_eq!((p.width, p.height), (3, 2));
    assert_eq!(
        p.at(2, 1),
        16.0 + (65.738 * 160.0 + 129.057 * 90.0 + 25.064 * 7.0) / 256.0
    );
}

#[test]
fn image_metrics_with_border() {
    let a = noise_image(30, 30, 8);
    let mut b = a.clone();
    b = ImageBuffer::from_fn(30, 30, |x, y| if x < 2 { [0; 3] } else { b.get(x, y) }).unwrap();
    assert_eq!(psnr(&a, &b, 2).unwrap(), f64::INFINITY);
    assert!(psnr(&a, &b, 0).unwrap().is_finite());
    assert!((ssim(&a, &b, 2).unwrap() - 1.0).abs() < 1e-12);
    assert!(psnr(&a, &b, 15).is_err());
}

#[test]
fn png_round_trip_and_tensor_conversion() {
    let dir = tempfile::tempdir().unwrap();
    let img = noise_image(7, 5, 9);
    let path = dir.path().join("x.png");
    img.save_png(&path).unwrap();
    assert_eq!(ImageBuffer::load_png(&path).unwrap(), img);
    let t = img.to_tensor::<f32>(1.0);
    assert_eq!(t.shape(), [1, 3, 5, 7]);
    assert_eq!(ImageBuffer::from_tensor(&t, 0, 1.0).unwrap(), img);
    let t255 = img.to_tensor::<f64>(255.0);
    assert_eq!(t255.at(0, 1, 2, 3), img.get(3, 2)[1] as f64);
}

#[test]
fn dataset_directory_layouts() {
    let root = tempfile::tempdir().unwrap();
    let hr_dir = root.path().join("HR");
    std::fs::create_dir(&hr_dir).unwrap();
    for i in 0..3 {
        noise_image(32, 32, 10 + i)
            .save_png(&hr_dir.join(format!("img{i}.png")))
            .unwrap();
    }
    std::fs::write(hr_dir.join("notes.txt"), "skip me").unwrap();
    let ds = Dataset::load_dir(&hr_dir, None, 2).unwrap();
    assert_eq!(ds.len(), 3);
    assert!(ds.items().iter().all(|i| i.lr.is_none()));

    let lr_dir = root.path().join("LR_x2");
    std::fs::create_dir(&lr_dir).unwrap();
    noise_image(16, 16, 20).save_png(&lr_dir.join("img0x2.png")).unwrap();
    noise_image(16, 16, 21).save_png(&lr_dir.join("img1.png")).unwrap();
    let ds = Dataset::load_dir(&hr_dir, None, 2).unwrap();
    let with_lr = ds.items().iter().filter(|i| i.lr.is_some()).count();
    assert_eq!(with_lr, 2);

    let mut opts = PatchOptions::new(2);
    opts.patch = 8;
    let (lr, hr) = ds.sample_batch(5, &opts, &mut rng(22)).unwrap();
    assert_eq!(lr.shape(), [5, 3, 8, 8]);
    assert_eq!(hr.shape(), [5, 3, 16, 16]);

    let empty = root.path().join("empty");
    std::fs::create_dir(&empty).unwrap();
    assert!(Dataset::load_dir(&empty, None, 2).is_err());
}

#[test]
fn synthetic_dataset_shapes() {
    let ds = Dataset::synthetic(4, 48, 2, 1).unwrap();
    assert_eq!(ds.len(), 4);
    assert!(ds.items().iter().all(|i| i.hr.width() == 48 && i.hr.height() == 48));
    let a = Dataset::synthetic(4, 48, 2, 1).unwrap();
    assert_eq!(a.items()[3].hr, ds.items()[3].hr);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn augment_inverse_recovers_input(seed in any::<u64>(), h in 1usize..7, w in 1usize..7) {
        let mut r = rng(seed);
        let t = Tensor::from_fn([1, 3, h, w], |_| r.gen_range(0.0f32..1.0));
        let a = Augment::random(&mut r);
        prop_assert_eq!(a.invert(&a.apply(&t)), t);
    }

    #[test]
    fn ssim_bounded_and_symmetric(seed in any::<u64>()) {
        let mut r = rng(seed);
        let a = Plane::new(12, 13, (0..156).map(|_| r.gen_range(0.0..255.0)).collect()).unwrap();
        let b = Plane::new(12, 13, (0..156).map(|_| r.gen_range(0.0..255.0)).collect()).unwrap();
        let s = ssim_planes(&a, &b).unwrap();
        prop_assert!(s.abs() <= 1.0);
        prop_assert!((s - ssim_planes(&b, &a).unwrap()).abs() <= 1e-15);
    }

    #[test]
    fn resize_output_dimensions(seed in any::<u64>(), w in 2usize..20, h in 2usize..20, nw in 1usize..40, nh in 1usize..40) {
        let img = noise_image(w, h, seed);
        let out = bicubic_resize(&img, nw, nh).unwrap();
        prop_assert_eq!((out.width(), out.height()), (nw, nh));
    }
}
