mod common;

use common::{ks_uniform_p, rng};
use proptest::prelude::*;
use rand::Rng;
use sfae_core::sink::{apply_sink, sample_sink_spec, SinkSpec, MAX_RADIUS, MAX_STRENGTH, MIN_RADIUS, MIN_STRENGTH};
use sfae_core::Error;

fn in_disk(spec: &SinkSpec, r: usize, c: usize) -> bool {
    let (dr, dc) = (r as f64 - spec.center.0, c as f64 - spec.center.1);
    (dr * dr + dc * dc).sqrt() < spec.radius
}

fn textured(size: usize, seed: u64) -> Vec<f32> {
    let mut g = rng(seed);
    (0..size * size).map(|_| g.random_range(0.05f32..1.0)).collect()
}

#[test]
fn sampling_is_deterministic() {
    let img = textured(64, 0);
    let fg = vec![true; 64 * 64];
    let a = sample_sink_spec(&img, &fg, 64, 64, 7).unwrap();
    assert_eq!(a, sample_sink_spec(&img, &fg, 64, 64, 7).unwrap());
    assert_ne!(a, sample_sink_spec(&img, &fg, 64, 64, 8).unwrap());
}

#[test]
fn narrow_foreground_forces_the_center() {
    let size = 48;
    let center = (23.0, 25.0);
    let fg: Vec<bool> = (0..size * size)
        .map(|i| {
            let (dr, dc) = ((i / size) as f64 - center.0, (i % size) as f64 - center.1);
            dr * dr + dc * dc <= 100.0
        })
        .collect();
    let img = textured(size, 1);
    for seed in 0..20 {
        let s = sample_sink_spec(&img, &fg, size, size, seed).unwrap();
        let off = ((s.center.0 - center.0).powi(2) + (s.center.1 - center.1).powi(2)).sqrt();
        assert!(off <= 2.0, "seed {seed}: center {:?}", s.center);
        assert!(s.radius >= MIN_RADIUS);
    }
}

#[test]
fn radius_is_uniform() {
    let size = 96;
    let img = textured(size, 2);
    let fg = vec![true; size * size];
    let specs: Vec<SinkSpec> = (0..1000).map(|s| sample_sink_spec(&img, &fg, size, size, s).unwrap()).collect();
    let radii: Vec<f64> = specs.iter().map(|s| (s.radius - MIN_RADIUS) / (MAX_RADIUS - MIN_RADIUS)).collect();
    assert!(ks_uniform_p(&radii) > 0.01);
    for s in &specs {
        assert!((MIN_STRENGTH..=MAX_STRENGTH).contains(&s.strength) && s.strength <= 1.0);
        // The whole disk stays inside the (all-foreground) image.
        assert!(s.center.0 + 1.0 >= s.radius && size as f64 - s.center.0 >= s.radius);
        assert!(s.center.1 + 1.0 >= s.radius && size as f64 - s.center.1 >= s.radius);
    }
}

#[test]
fn disk_stays_inside_the_foreground() {
    let p = common::tiny_phantom(3, 0);
    let t = &p.split.test;
    let size = t.size();
    for i in 0..t.len() {
        let img = t.image(i);
        let fg: Vec<bool> = img.iter().map(|&v| v > 0.0).collect();
        let Ok(s) = sample_sink_spec(img, &fg, size, size, i as u64) else { continue };
        for r in 0..size {
            for c in 0..size {
                if in_disk(&s, r, c) {
                    assert!(fg[r * size + c], "slice {i}: ({r}, {c}) in disk but background");
                }
            }
        }
    }
}

#[test]
fn no_room_is_a_placement_error() {
    let fg: Vec<bool> = (0..32 * 32).map(|i| i % 32 < 6).collect();
    let err = sample_sink_spec(&vec![0.5; 32 * 32], &fg, 32, 32, 0).unwrap_err();
    assert!(matches!(err, Error::Placement(_)));
}

#[test]
fn tiny_strength_is_identity() {
    let img = textured(40, 3);
    let spec = SinkSpec {
        center: (20.0, 20.0),
        radius: 12.0,
        strength: 1e-9,
        seed: 0,
    };
    let (out, mask) = apply_sink(&img, 40, 40, &spec).unwrap();
    for (a, b) in out.iter().zip(&img) {
        assert!((a - b).abs() < 1e-6);
    }
    assert!(mask.iter().all(|&m| m == 0));
}

#[test]
fn constant_image_is_unchanged() {
    let img = vec![0.37f32; 40 * 40];
    let spec = SinkSpec {
        center: (19.0, 21.0),
        radius: 15.0,
        strength: 0.9,
        seed: 0,
    };
    let (out, mask) = apply_sink(&img, 40, 40, &spec).unwrap();
    assert_eq!(out, img);
    assert!(mask.contains(&1));
}

#[test]
fn gradient_image_changes_only_inside_the_disk() {
    let size = 64;
    let img: Vec<f32> = (0..size * size).map(|i| (i % size) as f32 / size as f32).collect();
    let spec = SinkSpec {
        center: (32.0, 32.0),
        radius: 16.0,
        strength: 0.9,
        seed: 0,
    };
    let (out, _) = apply_sink(&img, size, size, &spec).unwrap();
    let (mut best, mut at) = (0.0f32, (0, 0));
    for r in 0..size {
        for c in 0..size {
            let d = (out[r * size + c] - img[r * size + c]).abs();
            if !in_disk(&spec, r, c) {
                assert_eq!(d, 0.0);
            }
            if d > best {
                (best, at) = (d, (r, c));
            }
        }
    }
    assert!(best > 0.0 && in_disk(&spec, at.0, at.1));
}

fn case() -> impl Strategy<Value = (Vec<f32>, usize, SinkSpec)> {
    (20usize..64, any::<u64>(), 0.01f64..=1.0).prop_map(|(size, seed, strength)| {
        let mut g = rng(seed);
        let radius = g.random_range(1.0..(size as f64 / 2.0));
        let lo = radius - 1.0;
        let hi = size as f64 - radius;
        let center = (g.random_range(lo..=hi).round().clamp(lo.ceil(), hi.floor()), g.random_range(lo..=hi).round().clamp(lo.ceil(), hi.floor()));
        let img: Vec<f32> = (0..size * size).map(|_| g.random_range(-2.0f32..3.0)).collect();
        (img, size, SinkSpec { center, radius, strength, seed })
    })
}

proptest! {
    #[test]
    fn sink_properties((img, size, spec) in case()) {
        let (out, mask) = apply_sink(&img, size, size, &spec).unwrap();
        let (lo, hi) = img.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        for r in 0..size {
            for c in 0..size {
                let i = r * size + c;
                if !in_disk(&spec, r, c) {
                    prop_assert_eq!(out[i].to_bits(), img[i].to_bits());
                    prop_assert_eq!(mask[i], 0);
                }
                prop_assert!(out[i] >= lo - 1e-5 && out[i] <= hi + 1e-5);
            }
        }
        if spec.strength * spec.radius >= 1.0 {
            prop_assert!(mask.contains(&1));
        }
        let again = apply_sink(&img, size, size, &spec).unwrap();
        prop_assert_eq!((out, mask), again);
    }
}
