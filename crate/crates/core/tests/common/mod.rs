#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sfae_core::dataset::LabeledDataset;
use sfae_core::phantom::{make_phantom, PhantomConfig};
use sfae_core::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: [usize; 4], seed: u64) -> Tensor {
    let mut r = rng(seed);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| r.random_range(0.0f32..1.0)).collect()).unwrap()
}

/// Small phantom: 12 slices of 64x64 per volume.
pub fn tiny_config() -> PhantomConfig {
    PhantomConfig {
        slices: 16,
        rows: 72,
        cols: 72,
        n_center_slices: 12,
        out_size: 64,
        ..PhantomConfig::default()
    }
}

pub fn tiny_phantom(n_volumes: usize, seed: u64) -> LabeledDataset {
    make_phantom(n_volumes, seed, &tiny_config()).unwrap()
}

/// Asymptotic Kolmogorov-Smirnov p-value for samples that should be U(0, 1).
pub fn ks_uniform_p(samples: &[f64]) -> f64 {
    let mut s = samples.to_vec();
    s.sort_by(|a, b| a.total_cmp(b));
    let n = s.len() as f64;
    let d = s
        .iter()
        .enumerate()
        .map(|(i, &x)| (x - i as f64 / n).max((i + 1) as f64 / n - x))
        .fold(0.0f64, f64::max);
    let sq = n.sqrt();
    let lambda = (sq + 0.12 + 0.11 / sq) * d;
    let mut p = 0.0;
    for k in 1..=100 {
        let k = k as f64;
        let term = 2.0 * (-1.0f64).powi(k as i32 - 1) * (-2.0 * k * k * lambda * lambda).exp();
        p += term;
        if term.abs() < 1e-12 {
            break;
        }
    }
    p.clamp(0.0, 1.0)
}
