mod common;

use common::{random_tensor, rng};
use proptest::prelude::*;
use rand::Rng;
use sfae_core::ssim::{calibrate_dynamic_range, mssim, ssim_loss, ssim_map, SsimConfig, WindowKind};
use sfae_core::Tensor;

fn uniform(size: usize) -> SsimConfig {
    SsimConfig {
        window_size: size,
        window: WindowKind::Uniform,
        ..SsimConfig::default()
    }
}

/// SSIM of two equally weighted patches straight from the closed form.
fn patch_ssim(p: &[f64], q: &[f64], w: &[f64], cfg: &SsimConfig) -> f64 {
    let mp: f64 = p.iter().zip(w).map(|(a, w)| a * w).sum();
    let mq: f64 = q.iter().zip(w).map(|(a, w)| a * w).sum();
    let vp: f64 = p.iter().zip(w).map(|(a, w)| w * (a - mp) * (a - mp)).sum();
    let vq: f64 = q.iter().zip(w).map(|(a, w)| w * (a - mq) * (a - mq)).sum();
    let cov: f64 = p.iter().zip(q).zip(w).map(|((a, b), w)| w * (a - mp) * (b - mq)).sum();
    let (c1, c2) = ((cfg.k1 * cfg.dynamic_range).powi(2), (cfg.k2 * cfg.dynamic_range).powi(2));
    (2.0 * mp * mq + c1) * (2.0 * cov + c2) / ((mp * mp + mq * mq + c1) * (vp + vq + c2))
}

fn gaussian_weights(size: usize, sigma: f64) -> Vec<f64> {
    let r = (size / 2) as f64;
    let g: Vec<f64> = (0..size).map(|i| (-((i as f64 - r).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = g.iter().sum();
    let mut w = Vec::with_capacity(size * size);
    for a in &g {
        for b in &g {
            w.push(a * b / (s * s));
        }
    }
    w
}

/// Window of `img` centered on `(r, c)` with out-of-range indices clamped.
fn replicated_window(img: &[f32], h: usize, w: usize, r: usize, c: usize, size: usize) -> Vec<f64> {
    let half = (size / 2) as isize;
    let mut out = Vec::with_capacity(size * size);
    for dr in -half..=half {
        for dc in -half..=half {
            let rr = (r as isize + dr).clamp(0, h as isize - 1) as usize;
            let cc = (c as isize + dc).clamp(0, w as isize - 1) as usize;
            out.push(img[rr * w + cc] as f64);
        }
    }
    out
}

#[test]
fn single_patch_matches_scalar_formula() {
    let cfg = uniform(11);
    let w = vec![1.0 / 121.0; 121];
    for seed in 0..120 {
        let x = random_tensor([1, 1, 11, 11], seed);
        let y = random_tensor([1, 1, 11, 11], seed + 1000);
        let map = ssim_map(&x, &y, &cfg).unwrap();
        let p: Vec<f64> = x.data().iter().map(|&v| v as f64).collect();
        let q: Vec<f64> = y.data().iter().map(|&v| v as f64).collect();
        let expect = patch_ssim(&p, &q, &w, &cfg);
        assert!((map.values[5 * 11 + 5] - expect).abs() <= 1e-6, "seed {seed}");
    }
}

#[test]
fn every_pixel_matches_edge_replicated_gaussian_oracle() {
    let cfg = SsimConfig::default().with_dynamic_range(2.0);
    let WindowKind::Gaussian { sigma } = cfg.window else { unreachable!() };
    let wts = gaussian_weights(cfg.window_size, sigma);
    let (h, w) = (13, 17);
    let x = random_tensor([2, 2, h, w], 7);
    let y = random_tensor([2, 2, h, w], 8);
    let map = ssim_map(&x, &y, &cfg).unwrap();
    assert_eq!((map.batch, map.height, map.width), (2, h, w));
    for n in 0..2 {
        for r in 0..h {
            for c in 0..w {
                let mean: f64 = (0..2)
                    .map(|ch| {
                        let p = replicated_window(x.plane(n, ch), h, w, r, c, 11);
                        let q = replicated_window(y.plane(n, ch), h, w, r, c, 11);
                        patch_ssim(&p, &q, &wts, &cfg)
                    })
                    .sum::<f64>()
                    / 2.0;
                assert!((map.plane(n)[r * w + c] - mean).abs() <= 1e-6, "({n}, {r}, {c})");
            }
        }
    }
}

#[test]
fn constant_patches_closed_form() {
    let x = Tensor::zeros([1, 1, 11, 11]);
    let y = Tensor::full([1, 1, 11, 11], 1.0);
    let map = ssim_map(&x, &y, &SsimConfig::default()).unwrap();
    let c1 = 1e-4;
    for v in map.values {
        assert!((v - c1 / (1.0 + c1)).abs() < 1e-12);
    }
}

#[test]
fn mssim_is_mean_of_map() {
    let x = random_tensor([2, 3, 9, 10], 1);
    let y = random_tensor([2, 3, 9, 10], 2);
    let cfg = SsimConfig::default();
    let map = ssim_map(&x, &y, &cfg).unwrap();
    let mean = map.values.iter().sum::<f64>() / map.values.len() as f64;
    assert!((mssim(&x, &y, &cfg).unwrap() - mean).abs() < 1e-12);
    assert!((ssim_loss(&x, &y, &cfg, false, false).unwrap().loss - (1.0 - mean)).abs() < 1e-12);
}

/// Values on a dyadic grid so `y ± h` is exact in f32.
fn dyadic_tensor(shape: [usize; 4], seed: u64) -> Tensor {
    let mut r = rng(seed);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| r.random_range(64..960) as f32 / 1024.0).collect()).unwrap()
}

fn gradient_relative_error(seed: u64, wrt_y: bool) -> f64 {
    let x = dyadic_tensor([1, 2, 8, 8], seed);
    let y = dyadic_tensor([1, 2, 8, 8], seed + 100);
    let cfg = SsimConfig::default();
    let out = ssim_loss(&x, &y, &cfg, !wrt_y, wrt_y).unwrap();
    let analytic = if wrt_y { out.grad_y.unwrap() } else { out.grad_x.unwrap() };
    let h = 1.0 / 1024.0;
    let (mut diff, mut norm) = (0.0f64, 0.0f64);
    for i in 0..x.len() {
        let eval = |delta: f32| {
            let (mut a, mut b) = (x.clone(), y.clone());
            if wrt_y {
                b.data_mut()[i] += delta;
            } else {
                a.data_mut()[i] += delta;
            }
            ssim_loss(&a, &b, &cfg, false, false).unwrap().loss
        };
        let fd = (eval(h as f32) - eval(-h as f32)) / (2.0 * h);
        diff += (analytic.data()[i] as f64 - fd).powi(2);
        norm += fd * fd;
    }
    (diff / norm).sqrt()
}

#[test]
fn gradient_matches_central_differences() {
    for seed in 0..10 {
        let e = gradient_relative_error(seed, true);
        assert!(e <= 1e-3, "seed {seed}: relative error {e}");
    }
    for seed in 0..3 {
        let e = gradient_relative_error(seed, false);
        assert!(e <= 1e-3, "seed {seed} (x): relative error {e}");
    }
}

#[test]
fn gradient_of_perfect_reconstruction_vanishes() {
    let x = random_tensor([1, 2, 8, 8], 4);
    let out = ssim_loss(&x, &x, &SsimConfig::default(), false, true).unwrap();
    assert!(out.loss.abs() < 1e-12);
    assert!(out.grad_y.unwrap().data().iter().all(|g| g.abs() < 1e-6));
}

#[test]
fn calibration_examples() {
    let t = |v: Vec<f32>| Tensor::from_vec([1, 1, 1, v.len()], v).unwrap();
    assert_eq!(calibrate_dynamic_range([&t(vec![-2.0, 0.5, 6.0])]).unwrap(), 8.0);
    assert_eq!(calibrate_dynamic_range([&t(vec![0.0; 4])]).unwrap(), 1e-3);
    assert_eq!(calibrate_dynamic_range([&t(vec![0.0, 1.0]), &t(vec![-1.0, 3.0])]).unwrap(), 4.0);
    assert!(calibrate_dynamic_range(std::iter::empty::<&Tensor>()).is_err());
}

#[test]
fn mismatched_shapes_are_rejected() {
    let x = Tensor::zeros([1, 1, 8, 8]);
    let y = Tensor::zeros([1, 2, 8, 8]);
    assert!(ssim_map(&x, &y, &SsimConfig::default()).is_err());
}

fn pair() -> impl Strategy<Value = (Tensor, Tensor, bool)> {
    (1usize..3, 1usize..3, 3usize..14, 3usize..14, any::<u64>(), any::<bool>()).prop_map(|(n, c, h, w, seed, gauss)| {
        let mut r = rng(seed);
        let scale = r.random_range(0.1f32..20.0);
        let shift = r.random_range(-5.0f32..5.0);
        let len = n * c * h * w;
        let mut v = || (0..len).map(|_| r.random_range(0.0f32..1.0) * scale + shift).collect::<Vec<_>>();
        let x = Tensor::from_vec([n, c, h, w], v()).unwrap();
        let y = Tensor::from_vec([n, c, h, w], v()).unwrap();
        (x, y, gauss)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn identity_symmetry_and_range((x, y, gauss) in pair()) {
        let cfg = if gauss { SsimConfig::default() } else { uniform(5) }.with_dynamic_range(10.0);
        let same = ssim_map(&x, &x, &cfg).unwrap();
        prop_assert!(same.values.iter().all(|v| (v - 1.0).abs() <= 1e-6));
        let xy = ssim_map(&x, &y, &cfg).unwrap();
        let yx = ssim_map(&y, &x, &cfg).unwrap();
        for (a, b) in xy.values.iter().zip(&yx.values) {
            prop_assert!((a - b).abs() <= 1e-6);
            prop_assert!((-1.0 - 1e-6..=1.0 + 1e-6).contains(a));
        }
        prop_assert!((mssim(&x, &y, &cfg).unwrap() - mssim(&y, &x, &cfg).unwrap()).abs() <= 1e-7);
    }

    #[test]
    fn window_weights_sum_to_one(size in (1usize..8).prop_map(|k| 2 * k + 1), sigma in 0.3f64..5.0) {
        for window in [WindowKind::Uniform, WindowKind::Gaussian { sigma }] {
            let cfg = SsimConfig { window_size: size, window, ..SsimConfig::default() };
            prop_assert!((cfg.kernel_2d().iter().sum::<f64>() - 1.0).abs() <= 1e-7);
        }
    }
}
