//! Bilinear resampling with half-pixel centers (`align_corners = false`).

use alloc::vec;
use alloc::vec::Vec;

use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
struct Tap {
    lo: usize,
    hi: usize,
    frac: f32,
}

fn taps(src_len: usize, dst_len: usize) -> Vec<Tap> {
    let scale = src_len as f64 / dst_len as f64;
    (0..dst_len)
        .map(|i| {
            let pos = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (libm::floor(pos) as usize).min(src_len - 1);
            let hi = (lo + 1).min(src_len - 1);
            Tap {
                lo,
                hi,
                frac: (pos - lo as f64) as f32,
            }
        })
        .collect()
}

/// Resizes one row-major `h × w` plane to `out_h × out_w`.
pub fn resize_plane(src: &[f32], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f32> {
    debug_assert_eq!(src.len(), h * w);
    if h == out_h && w == out_w {
        return src.to_vec();
    }
    let rows = taps(h, out_h);
    let cols = taps(w, out_w);
    let mut out = vec![0.0f32; out_h * out_w];
    for (oy, ry) in rows.iter().enumerate() {
        let top = &src[ry.lo * w..(ry.lo + 1) * w];
        let bottom = &src[ry.hi * w..(ry.hi + 1) * w];
        let dst = &mut out[oy * out_w..(oy + 1) * out_w];
        for (d, cx) in dst.iter_mut().zip(cols.iter()) {
            let t = top[cx.lo] + (top[cx.hi] - top[cx.lo]) * cx.frac;
            let b = bottom[cx.lo] + (bottom[cx.hi] - bottom[cx.lo]) * cx.frac;
            *d = t + (b - t) * ry.frac;
        }
    }
    out
}

/// Resizes every plane of a tensor.
pub fn resize_tensor(t: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    let [n, c, h, w] = t.shape();
    if h == out_h && w == out_w {
        return t.clone();
    }
    let mut data = Vec::with_capacity(n * c * out_h * out_w);
    for i in 0..n {
        for ch in 0..c {
            data.extend(resize_plane(t.plane(i, ch), h, w, out_h, out_w));
        }
    }
    Tensor::from_vec([n, c, out_h, out_w], data).expect("resize geometry")
}

/// Samples a plane at fractional `(row, col)`, clamping to the border.
pub fn sample_bilinear(src: &[f32], h: usize, w: usize, row: f64, col: f64) -> f32 {
    let r = row.clamp(0.0, (h - 1) as f64);
    let c = col.clamp(0.0, (w - 1) as f64);
    let r0 = libm::floor(r) as usize;
    let c0 = libm::floor(c) as usize;
    let r1 = (r0 + 1).min(h - 1);
    let c1 = (c0 + 1).min(w - 1);
    let fr = r - r0 as f64;
    let fc = c - c0 as f64;
    let v00 = src[r0 * w + c0] as f64;
    let v01 = src[r0 * w + c1] as f64;
    let v10 = src[r1 * w + c0] as f64;
    let v11 = src[r1 * w + c1] as f64;
    let top = v00 + (v01 - v00) * fc;
    let bottom = v10 + (v11 - v10) * fc;
    (top + (bottom - top) * fr) as f32
}
