//! Synthetic brain-like volumes and the labeled dataset built from them.
//!
//! Each volume is an ellipsoid with a bright rim, two dark ventricles, a
//! folded cortical texture and smooth low-frequency noise, warped by a
//! per-volume sinusoidal deformation. Volumes go through [`preprocess`] like
//! real scans; half of the validation and test slices then receive one sink.

use alloc::string::String;
use alloc::vec::Vec;
use core::f32::consts::PI;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{preprocess, DatasetSplit, Volume};
use crate::dataset::{assemble_dataset, LabeledDataset};
use crate::error::{bail, Result};

/// Generator settings. `version` changes whenever the generator's output does.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomConfig {
    pub version: u32,
    pub slices: usize,
    pub rows: usize,
    pub cols: usize,
    pub n_center_slices: usize,
    pub out_size: usize,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            version: 2,
            slices: 155,
            rows: 136,
            cols: 136,
            n_center_slices: 80,
            out_size: 128,
        }
    }
}

struct Wave {
    k: [f32; 3],
    phase: f32,
    amp: f32,
}

/// Synthesizes one raw volume.
pub fn phantom_volume(id: &str, seed: u64, cfg: &PhantomConfig) -> Result<Volume> {
    let (ns, nr, nc) = (cfg.slices, cfg.rows, cfg.cols);
    if ns == 0 || nr < 16 || nc < 16 {
        bail!(Range, "phantom volume {ns}x{nr}x{nc} is too small");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut u = |lo: f32, hi: f32| rng.random_range(lo..hi);
    let axes = [u(0.44, 0.49) * ns as f32, u(0.38, 0.43) * nr as f32, u(0.31, 0.36) * nc as f32];
    let center = [ns as f32 / 2.0 + u(-2.0, 2.0), nr as f32 / 2.0 + u(-3.0, 3.0), nc as f32 / 2.0 + u(-3.0, 3.0)];
    let warp = [u(1.0, 3.0), u(0.03, 0.06), u(0.0, 2.0 * PI), u(1.0, 3.0), u(0.03, 0.06), u(0.0, 2.0 * PI)];
    let base = u(0.45, 0.55);
    let rim = u(0.75, 0.85);
    let ventricle = u(0.12, 0.2);
    let v_off = u(0.12, 0.18);
    let fold = [u(5.0, 7.0), u(3.0, 5.0), u(0.0, 2.0 * PI), u(0.1, 0.16)];
    let waves: Vec<Wave> = (0..6)
        .map(|_| {
            let wavelength = u(18.0, 60.0);
            let (theta, phi) = (u(0.0, PI), u(0.0, 2.0 * PI));
            let m = 2.0 * PI / wavelength;
            Wave {
                k: [m * libm::cosf(theta), m * libm::sinf(theta) * libm::cosf(phi), m * libm::sinf(theta) * libm::sinf(phi)],
                phase: u(0.0, 2.0 * PI),
                amp: u(0.015, 0.035),
            }
        })
        .collect();
    let grain = u(0.008, 0.015);

    let mut voxels = alloc::vec![0.0f32; ns * nr * nc];
    for s in 0..ns {
        let z = (s as f32 - center[0]) / axes[0];
        for r in 0..nr {
            let rw = r as f32 + warp[0] * libm::sinf(warp[1] * s as f32 + warp[2]);
            for c in 0..nc {
                let cw = c as f32 + warp[3] * libm::sinf(warp[4] * r as f32 + warp[5]);
                let y = (rw - center[1]) / axes[1];
                let x = (cw - center[2]) / axes[2];
                let rho = libm::sqrtf(z * z + y * y + x * x);
                if rho >= 1.0 {
                    continue;
                }
                let mut v = base;
                if rho > 0.88 {
                    v = rim;
                } else if rho > 0.45 {
                    let theta = libm::atan2f(y, x);
                    let folds = libm::sinf(2.0 * PI * fold[0] * rho + fold[1] * libm::sinf(4.0 * theta + 3.0 * z + fold[2]));
                    v += fold[3] * folds;
                }
                // Paired ventricles either side of the midline.
                let vy = y / 0.35;
                let vz = z / 0.45;
                for side in [-1.0f32, 1.0] {
                    let vx = (x - side * v_off) / 0.1;
                    if vx * vx + vy * vy + vz * vz < 1.0 {
                        v = ventricle;
                    }
                }
                let (sf, rf, cf) = (s as f32, r as f32, c as f32);
                for w in &waves {
                    v += w.amp * libm::cosf(w.k[0] * sf + w.k[1] * rf + w.k[2] * cf + w.phase);
                }
                v += grain * (rng_hash(seed, s, r, c) - 0.5);
                voxels[(s * nr + r) * nc + c] = v.clamp(0.01, 1.0);
            }
        }
    }
    Volume::new(id, [ns, nr, nc], [1.0, 1.0, 1.0], voxels)
}

/// Cheap deterministic per-voxel value in `[0, 1)`.
fn rng_hash(seed: u64, s: usize, r: usize, c: usize) -> f32 {
    let mut h = seed ^ ((s as u64) << 42) ^ ((r as u64) << 21) ^ c as u64;
    h = (h ^ (h >> 33)).wrapping_mul(0xff51_afd7_ed55_8ccd);
    h = (h ^ (h >> 33)).wrapping_mul(0xc4ce_b9fe_1a85_ec53);
    h ^= h >> 33;
    (h >> 40) as f32 / (1u64 << 24) as f32
}

/// Builds the default phantom dataset.
pub fn make_phantom_dataset(n_volumes: usize, seed: u64) -> Result<DatasetSplit> {
    Ok(make_phantom(n_volumes, seed, &PhantomConfig::default())?.split)
}

/// Phantom dataset with its volume assignment and injected sinks.
pub fn make_phantom(n_volumes: usize, seed: u64, cfg: &PhantomConfig) -> Result<LabeledDataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5048_414e_544f_4d00);
    let volume_seeds: Vec<u64> = (0..n_volumes).map(|_| rng.random()).collect();
    let names: Vec<String> = (0..n_volumes).map(|i| alloc::format!("phantom-{i:03}")).collect();
    assemble_dataset(&names, seed, |i| preprocess(&phantom_volume(&names[i], volume_seeds[i], cfg)?, cfg.n_center_slices, cfg.out_size))
}
