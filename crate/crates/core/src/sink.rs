//! Synthetic sink-deformation anomalies with exact ground-truth masks.
//!
//! A sink pulls image content toward a center point. An output pixel at
//! distance `d < radius` from the center is resampled (bilinearly) from the
//! point on the same ray displaced outward by
//!
//! ```text
//! strength · (1 − d / radius) · radius
//! ```
//!
//! so the source annulus `[strength·radius, radius]` is squeezed onto the whole
//! disk. Pixels at `d ≥ radius` are untouched. The ground-truth mask marks the
//! pixels whose displacement is at least [`MASK_DISPLACEMENT`] pixels.

use alloc::vec::Vec;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::resize::sample_bilinear;

pub const MIN_RADIUS: f64 = 8.0;
pub const MAX_RADIUS: f64 = 24.0;
pub const MIN_STRENGTH: f64 = 0.3;
pub const MAX_STRENGTH: f64 = 0.9;
/// Displacement (pixels) at which a pixel counts as anomalous.
pub const MASK_DISPLACEMENT: f64 = 0.5;

/// Parameters of one sink deformation. `center` is `(row, col)` in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SinkSpec {
    pub center: (f64, f64),
    pub radius: f64,
    pub strength: f64,
    pub seed: u64,
}

impl SinkSpec {
    fn displacement(&self, d: f64) -> f64 {
        self.strength * (1.0 - d / self.radius) * self.radius
    }

    fn check(&self, height: usize, width: usize) -> Result<()> {
        if !(self.strength > 0.0 && self.strength <= 1.0) {
            bail!(Range, "sink strength {} outside (0, 1]", self.strength);
        }
        if !(self.radius > 0.0) {
            bail!(Range, "sink radius {} must be positive", self.radius);
        }
        let (r, c) = self.center;
        // Distance from the center to the first row/column outside the image.
        let clearance = (r + 1.0)
            .min(height as f64 - r)
            .min(c + 1.0)
            .min(width as f64 - c);
        if clearance < self.radius {
            bail!(Range, "sink disk at ({r}, {c}) radius {} leaves the {height}x{width} image", self.radius);
        }
        Ok(())
    }
}

/// Squared Euclidean distance from each pixel to the nearest background
/// pixel, treating everything outside the image as background.
pub fn background_distance_sq(foreground: &[bool], height: usize, width: usize) -> Vec<f64> {
    // Work on a grid padded by one background pixel on each side.
    let (ph, pw) = (height + 2, width + 2);
    let inf = 1e20;
    let mut grid = alloc::vec![inf; ph * pw];
    for r in 0..ph {
        for c in 0..pw {
            let inside = r >= 1 && r <= height && c >= 1 && c <= width;
            if !inside || !foreground[(r - 1) * width + (c - 1)] {
                grid[r * pw + c] = 0.0;
            }
        }
    }
    let mut buf = Vec::new();
    for c in 0..pw {
        let col: Vec<f64> = (0..ph).map(|r| grid[r * pw + c]).collect();
        transform_1d(&col, &mut buf);
        for r in 0..ph {
            grid[r * pw + c] = buf[r];
        }
    }
    for r in 0..ph {
        let row = grid[r * pw..(r + 1) * pw].to_vec();
        transform_1d(&row, &mut buf);
        grid[r * pw..(r + 1) * pw].copy_from_slice(&buf);
    }
    let mut out = Vec::with_capacity(height * width);
    for r in 1..=height {
        out.extend_from_slice(&grid[r * pw + 1..r * pw + 1 + width]);
    }
    out
}

/// 1-D squared distance transform (lower envelope of parabolas).
fn transform_1d(f: &[f64], out: &mut Vec<f64>) {
    let n = f.len();
    out.clear();
    out.resize(n, 0.0);
    let mut v = alloc::vec![0usize; n];
    let mut z = alloc::vec![0.0f64; n + 1];
    let mut k = 0usize;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        loop {
            let p = v[k];
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * q as f64 - 2.0 * p as f64);
            if s <= z[k] && k > 0 {
                k -= 1;
                continue;
            }
            if s <= z[k] {
                // k == 0 and the new parabola dominates everywhere.
                v[0] = q;
                z[1] = f64::INFINITY;
                break;
            }
            k += 1;
            v[k] = q;
            z[k] = s;
            z[k + 1] = f64::INFINITY;
            break;
        }
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Samples a sink that fits inside the foreground.
///
/// The radius is uniform on `[MIN_RADIUS, min(MAX_RADIUS, r_fit)]` where
/// `r_fit` is the largest disk the foreground admits; the center is uniform
/// over pixels whose disk of that radius stays in the foreground; the strength
/// is uniform on `[MIN_STRENGTH, MAX_STRENGTH]`.
pub fn sample_sink_spec(image: &[f32], foreground: &[bool], height: usize, width: usize, rng_seed: u64) -> Result<SinkSpec> {
    if image.len() != height * width || foreground.len() != height * width {
        bail!(Shape, "image/foreground lengths {}/{} for {}x{}", image.len(), foreground.len(), height, width);
    }
    let dist = background_distance_sq(foreground, height, width);
    let best = dist.iter().copied().fold(0.0f64, f64::max);
    let fit = libm::sqrt(best);
    let hi = MAX_RADIUS.min(fit);
    if hi < MIN_RADIUS {
        bail!(Placement, "largest admissible disk radius {:.2} is below {}", fit, MIN_RADIUS);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let radius = if hi > MIN_RADIUS { rng.random_range(MIN_RADIUS..=hi) } else { MIN_RADIUS };
    let candidates: Vec<usize> = dist
        .iter()
        .enumerate()
        .filter(|(_, &d)| d >= radius * radius)
        .map(|(i, _)| i)
        .collect();
    // Non-empty: the pixel attaining `best` always qualifies.
    let idx = candidates[rng.random_range(0..candidates.len())];
    let strength = rng.random_range(MIN_STRENGTH..=MAX_STRENGTH);
    Ok(SinkSpec {
        center: ((idx / width) as f64, (idx % width) as f64),
        radius,
        strength,
        seed: rng_seed,
    })
}

/// Deforms `image` by the sink and returns `(deformed, mask)`.
pub fn apply_sink(image: &[f32], height: usize, width: usize, spec: &SinkSpec) -> Result<(Vec<f32>, Vec<u8>)> {
    if image.len() != height * width {
        bail!(Shape, "image has {} pixels, expected {}x{}", image.len(), height, width);
    }
    spec.check(height, width)?;
    let mut out = image.to_vec();
    let mut mask = alloc::vec![0u8; height * width];
    let (cr, cc) = spec.center;
    let r0 = libm::floor(cr - spec.radius).max(0.0) as usize;
    let r1 = (libm::ceil(cr + spec.radius) as usize).min(height - 1);
    let c0 = libm::floor(cc - spec.radius).max(0.0) as usize;
    let c1 = (libm::ceil(cc + spec.radius) as usize).min(width - 1);
    for r in r0..=r1 {
        for c in c0..=c1 {
            let dr = r as f64 - cr;
            let dc = c as f64 - cc;
            let d = libm::sqrt(dr * dr + dc * dc);
            if d >= spec.radius {
                continue;
            }
            let shift = spec.displacement(d);
            // The exact center has no ray direction; pick the +row axis.
            let (ur, uc) = if d > 0.0 { (dr / d, dc / d) } else { (1.0, 0.0) };
            let src_r = r as f64 + ur * shift;
            let src_c = c as f64 + uc * shift;
            out[r * width + c] = sample_bilinear(image, height, width, src_r, src_c);
            if shift >= MASK_DISPLACEMENT {
                mask[r * width + c] = 1;
            }
        }
    }
    Ok((out, mask))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn disk(size: usize, center: (f64, f64), radius: f64) -> Vec<bool> {
        (0..size * size)
            .map(|i| {
                let dr = (i / size) as f64 - center.0;
                let dc = (i % size) as f64 - center.1;
                dr * dr + dc * dc <= radius * radius
            })
            .collect()
    }

    fn brute_distance_sq(fg: &[bool], h: usize, w: usize) -> Vec<f64> {
        let mut bg = Vec::new();
        for r in -1..=h as i64 {
            for c in -1..=w as i64 {
                let inside = r >= 0 && c >= 0 && r < h as i64 && c < w as i64;
                if !inside || !fg[r as usize * w + c as usize] {
                    bg.push((r, c));
                }
            }
        }
        (0..h * w)
            .map(|i| {
                let (r, c) = ((i / w) as i64, (i % w) as i64);
                bg.iter()
                    .map(|&(br, bc)| ((br - r).pow(2) + (bc - c).pow(2)) as f64)
                    .fold(f64::INFINITY, f64::min)
            })
            .collect()
    }

    #[test]
    fn distance_transform_matches_brute_force() {
        let fg = disk(21, (9.0, 12.0), 7.5);
        let mut fg2 = fg.clone();
        fg2[9 * 21 + 12] = false;
        for f in [&fg, &fg2, &vec![true; 21 * 21]] {
            assert_eq!(background_distance_sq(f, 21, 21), brute_distance_sq(f, 21, 21));
        }
    }

    #[test]
    fn sampling_is_deterministic() {
        let img = vec![0.5f32; 128 * 128];
        let fg = vec![true; 128 * 128];
        let a = sample_sink_spec(&img, &fg, 128, 128, 7).unwrap();
        let b = sample_sink_spec(&img, &fg, 128, 128, 7).unwrap();
        assert_eq!(a, b);
        assert!((MIN_RADIUS..=MAX_RADIUS).contains(&a.radius));
        assert!((MIN_STRENGTH..=MAX_STRENGTH).contains(&a.strength));
    }

    #[test]
    fn small_disk_forces_center() {
        let img = vec![0.5f32; 64 * 64];
        let fg = disk(64, (30.0, 33.0), 10.0);
        for seed in 0..20 {
            let s = sample_sink_spec(&img, &fg, 64, 64, seed).unwrap();
            let off = libm::sqrt((s.center.0 - 30.0).powi(2) + (s.center.1 - 33.0).powi(2));
            assert!(off <= 2.0, "seed {seed}: center {:?}", s.center);
        }
    }

    #[test]
    fn no_room_is_a_placement_error() {
        let img = vec![0.5f32; 64 * 64];
        let fg = disk(64, (30.0, 30.0), 6.0);
        assert!(matches!(sample_sink_spec(&img, &fg, 64, 64, 1), Err(crate::Error::Placement(_))));
    }

    #[test]
    fn vanishing_strength_is_identity() {
        let img: Vec<f32> = (0..64 * 64).map(|i| ((i * 37) % 101) as f32 / 100.0).collect();
        let spec = SinkSpec { center: (32.0, 32.0), radius: 12.0, strength: 1e-9, seed: 0 };
        let (out, mask) = apply_sink(&img, 64, 64, &spec).unwrap();
        assert!(mask.iter().all(|&m| m == 0));
        for (a, b) in out.iter().zip(img.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn constant_image_is_unchanged() {
        let img = vec![0.42f32; 64 * 64];
        let spec = SinkSpec { center: (30.0, 31.0), radius: 16.0, strength: 0.9, seed: 0 };
        let (out, mask) = apply_sink(&img, 64, 64, &spec).unwrap();
        assert!(out.iter().all(|&v| (v - 0.42).abs() < 1e-7));
        assert!(mask.contains(&1));
    }

    #[test]
    fn disk_leaving_image_is_a_range_error() {
        let img = vec![0.0f32; 32 * 32];
        let spec = SinkSpec { center: (3.0, 16.0), radius: 8.0, strength: 0.5, seed: 0 };
        assert!(matches!(apply_sink(&img, 32, 32, &spec), Err(crate::Error::Range(_))));
    }

    /// Reference resampler: builds the full displacement field first, then
    /// resamples every pixel through it.
    fn dense_reference(img: &[f32], n: usize, spec: &SinkSpec) -> Vec<f32> {
        let mut field = vec![(0.0f64, 0.0f64); n * n];
        for (i, f) in field.iter_mut().enumerate() {
            let (r, c) = ((i / n) as f64, (i % n) as f64);
            let (dr, dc) = (r - spec.center.0, c - spec.center.1);
            let d = (dr * dr + dc * dc).sqrt();
            if d < spec.radius && d > 0.0 {
                let m = spec.strength * (spec.radius - d);
                *f = (dr / d * m, dc / d * m);
            } else if d == 0.0 {
                *f = (spec.strength * spec.radius, 0.0);
            }
        }
        field
            .iter()
            .enumerate()
            .map(|(i, &(fr, fc))| {
                if fr == 0.0 && fc == 0.0 {
                    img[i]
                } else {
                    sample_bilinear(img, n, n, (i / n) as f64 + fr, (i % n) as f64 + fc)
                }
            })
            .collect()
    }

    #[test]
    fn gradient_image_matches_dense_reference() {
        let n = 64;
        let img: Vec<f32> = (0..n * n).map(|i| ((i % n) as f32 + 0.5 * (i / n) as f32) / 96.0).collect();
        let spec = SinkSpec { center: (32.0, 32.0), radius: 16.0, strength: 0.9, seed: 0 };
        let (out, _) = apply_sink(&img, n, n, &spec).unwrap();
        let reference = dense_reference(&img, n, &spec);
        let mut max_change = (0.0f32, 0usize);
        for i in 0..n * n {
            assert!((out[i] - reference[i]).abs() < 1e-6);
            let d = ((i / n) as f64 - 32.0).hypot((i % n) as f64 - 32.0);
            let change = (out[i] - img[i]).abs();
            if d >= spec.radius {
                assert_eq!(out[i], img[i]);
            } else if change > max_change.0 {
                max_change = (change, i);
            }
        }
        assert!(max_change.0 > 0.0);
    }
}
