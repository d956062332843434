//! Windowed structural similarity, its mean, and the analytic gradient of
//! `1 − MSSIM`.
//!
//! Local statistics are weighted window averages with edge-replicated
//! ("same") padding, so the map has the input's spatial size. Per pixel and
//! channel
//!
//! ```text
//! SSIM = (2 μx μy + C1)(2 σxy + C2) / ((μx² + μy² + C1)(σx² + σy² + C2))
//! ```
//!
//! with `C1 = (K1 L)²`, `C2 = (K2 L)²`; channels are averaged into a
//! single-channel map. All arithmetic is in `f64`.

use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::tensor::Tensor;

/// Floor applied by the dynamic range calibrator.
pub const MIN_DYNAMIC_RANGE: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WindowKind {
    Gaussian { sigma: f64 },
    Uniform,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SsimConfig {
    pub window_size: usize,
    pub window: WindowKind,
    pub k1: f64,
    pub k2: f64,
    pub dynamic_range: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        Self {
            window_size: 11,
            window: WindowKind::Gaussian { sigma: 1.5 },
            k1: 0.01,
            k2: 0.03,
            dynamic_range: 1.0,
        }
    }
}

impl SsimConfig {
    pub fn with_dynamic_range(self, dynamic_range: f64) -> Self {
        Self { dynamic_range, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if self.window_size < 3 || self.window_size.is_multiple_of(2) {
            bail!(Range, "window size {} must be odd and at least 3", self.window_size);
        }
        if !(self.k1 > 0.0 && self.k2 > 0.0) {
            bail!(Range, "K1 and K2 must be positive");
        }
        if !(self.dynamic_range > 0.0) || !self.dynamic_range.is_finite() {
            bail!(Range, "dynamic range {} must be positive", self.dynamic_range);
        }
        if let WindowKind::Gaussian { sigma } = self.window {
            if !(sigma > 0.0) {
                bail!(Range, "gaussian sigma {} must be positive", sigma);
            }
        }
        Ok(())
    }

    pub fn c1(&self) -> f64 {
        let v = self.k1 * self.dynamic_range;
        v * v
    }

    pub fn c2(&self) -> f64 {
        let v = self.k2 * self.dynamic_range;
        v * v
    }

    /// Normalized 1-D window; the 2-D window is its outer product.
    pub fn kernel_1d(&self) -> Vec<f64> {
        let n = self.window_size;
        let half = (n / 2) as f64;
        let raw: Vec<f64> = match self.window {
            WindowKind::Uniform => vec![1.0; n],
            WindowKind::Gaussian { sigma } => (0..n)
                .map(|i| {
                    let d = i as f64 - half;
                    libm::exp(-d * d / (2.0 * sigma * sigma))
                })
                .collect(),
        };
        let total: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / total).collect()
    }

    /// Full 2-D window, row-major `window_size × window_size`.
    pub fn kernel_2d(&self) -> Vec<f64> {
        let k = self.kernel_1d();
        k.iter().flat_map(|a| k.iter().map(move |b| a * b)).collect()
    }
}

/// Per-pixel SSIM averaged over channels: `batch × height × width`.
#[derive(Clone, Debug, PartialEq)]
pub struct SsimMap {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl SsimMap {
    pub fn plane(&self, n: usize) -> &[f64] {
        let len = self.height * self.width;
        &self.values[n * len..(n + 1) * len]
    }
}

/// Separable edge-replicated filtering of an `h × w` plane.
struct Filter {
    kernel: Vec<f64>,
    h: usize,
    w: usize,
    tmp: Vec<f64>,
    row: Vec<f64>,
}

impl Filter {
    fn new(kernel: Vec<f64>, h: usize, w: usize) -> Self {
        let kernel_len = kernel.len();
        Self {
            kernel,
            h,
            w,
            tmp: vec![0.0; h * w],
            row: vec![0.0; w + kernel_len],
        }
    }

    #[inline]
    fn clamp(i: isize, n: usize) -> usize {
        i.clamp(0, n as isize - 1) as usize
    }

    /// `out = W ⊛ src`
    fn apply(&mut self, src: &[f64], out: &mut [f64]) {
        let (h, w) = (self.h, self.w);
        let half = self.kernel.len() / 2;
        for r in 0..h {
            let row = &src[r * w..(r + 1) * w];
            let padded = &mut self.row[..w + 2 * half];
            padded[..half].iter_mut().for_each(|v| *v = row[0]);
            padded[half..half + w].copy_from_slice(row);
            padded[half + w..].iter_mut().for_each(|v| *v = row[w - 1]);
            let dst = &mut self.tmp[r * w..(r + 1) * w];
            dst.iter_mut().for_each(|v| *v = 0.0);
            for (o, &k) in self.kernel.iter().enumerate() {
                for (d, &s) in dst.iter_mut().zip(&padded[o..o + w]) {
                    *d += k * s;
                }
            }
        }
        out[..h * w].iter_mut().for_each(|v| *v = 0.0);
        let half = half as isize;
        for (o, &k) in self.kernel.iter().enumerate() {
            for r in 0..h {
                let sr = Self::clamp(r as isize + o as isize - half, h);
                let src_row = &self.tmp[sr * w..(sr + 1) * w];
                let dst = &mut out[r * w..(r + 1) * w];
                for (d, &s) in dst.iter_mut().zip(src_row) {
                    *d += k * s;
                }
            }
        }
    }

    /// `out = Wᵀ ⊛ grad`, the adjoint of [`Filter::apply`].
    fn adjoint(&mut self, grad: &[f64], out: &mut [f64]) {
        let (h, w) = (self.h, self.w);
        let half = self.kernel.len() / 2;
        self.tmp.iter_mut().for_each(|v| *v = 0.0);
        for (o, &k) in self.kernel.iter().enumerate() {
            for r in 0..h {
                let sr = Self::clamp(r as isize + o as isize - half as isize, h);
                let g_row = &grad[r * w..(r + 1) * w];
                let dst = &mut self.tmp[sr * w..(sr + 1) * w];
                for (d, &g) in dst.iter_mut().zip(g_row) {
                    *d += k * g;
                }
            }
        }
        for r in 0..h {
            let row = &self.tmp[r * w..(r + 1) * w];
            let padded = &mut self.row[..w + 2 * half];
            padded.iter_mut().for_each(|v| *v = 0.0);
            for (o, &k) in self.kernel.iter().enumerate() {
                for (d, &g) in padded[o..o + w].iter_mut().zip(row) {
                    *d += k * g;
                }
            }
            let dst = &mut out[r * w..(r + 1) * w];
            dst.copy_from_slice(&padded[half..half + w]);
            dst[0] += padded[..half].iter().sum::<f64>();
            dst[w - 1] += padded[half + w..].iter().sum::<f64>();
        }
    }
}

/// Filtered local statistics of one channel pair.
struct LocalStats {
    mu_x: Vec<f64>,
    mu_y: Vec<f64>,
    e_xx: Vec<f64>,
    e_yy: Vec<f64>,
    e_xy: Vec<f64>,
}

struct Workspace {
    filter: Filter,
    x: Vec<f64>,
    y: Vec<f64>,
    prod: Vec<f64>,
    stats: LocalStats,
}

impl Workspace {
    fn new(cfg: &SsimConfig, h: usize, w: usize) -> Self {
        let z = || vec![0.0; h * w];
        Self {
            filter: Filter::new(cfg.kernel_1d(), h, w),
            x: z(),
            y: z(),
            prod: z(),
            stats: LocalStats {
                mu_x: z(),
                mu_y: z(),
                e_xx: z(),
                e_yy: z(),
                e_xy: z(),
            },
        }
    }

    fn load(&mut self, x: &[f32], y: &[f32]) {
        for (d, &s) in self.x.iter_mut().zip(x) {
            *d = s as f64;
        }
        for (d, &s) in self.y.iter_mut().zip(y) {
            *d = s as f64;
        }
        let s = &mut self.stats;
        self.filter.apply(&self.x, &mut s.mu_x);
        self.filter.apply(&self.y, &mut s.mu_y);
        for (p, &v) in self.prod.iter_mut().zip(&self.x) {
            *p = v * v;
        }
        self.filter.apply(&self.prod, &mut s.e_xx);
        for (p, &v) in self.prod.iter_mut().zip(&self.y) {
            *p = v * v;
        }
        self.filter.apply(&self.prod, &mut s.e_yy);
        for ((p, &a), &b) in self.prod.iter_mut().zip(&self.x).zip(&self.y) {
            *p = a * b;
        }
        self.filter.apply(&self.prod, &mut s.e_xy);
    }
}

#[inline]
fn ssim_terms(mx: f64, my: f64, exx: f64, eyy: f64, exy: f64, c1: f64, c2: f64) -> (f64, f64, f64, f64) {
    let a1 = 2.0 * mx * my + c1;
    let a2 = 2.0 * (exy - mx * my) + c2;
    let b1 = mx * mx + my * my + c1;
    let b2 = (exx - mx * mx) + (eyy - my * my) + c2;
    (a1, a2, b1, b2)
}

fn check_pair(x: &Tensor, y: &Tensor, cfg: &SsimConfig) -> Result<()> {
    cfg.validate()?;
    x.ensure_same_shape(y, "ssim inputs")?;
    if x.is_empty() {
        bail!(Shape, "ssim of empty tensors");
    }
    if !x.is_finite() || !y.is_finite() {
        bail!(Contract, "ssim inputs must be finite");
    }
    Ok(())
}

/// Per-pixel SSIM between `x` and `y`, averaged over channels.
pub fn ssim_map(x: &Tensor, y: &Tensor, cfg: &SsimConfig) -> Result<SsimMap> {
    check_pair(x, y, cfg)?;
    let [n, c, h, w] = x.shape();
    let (c1, c2) = (cfg.c1(), cfg.c2());
    let mut ws = Workspace::new(cfg, h, w);
    let mut values = vec![0.0f64; n * h * w];
    let inv_c = 1.0 / c as f64;
    for i in 0..n {
        let acc = &mut values[i * h * w..(i + 1) * h * w];
        for ch in 0..c {
            ws.load(x.plane(i, ch), y.plane(i, ch));
            let s = &ws.stats;
            for p in 0..h * w {
                let (a1, a2, b1, b2) = ssim_terms(s.mu_x[p], s.mu_y[p], s.e_xx[p], s.e_yy[p], s.e_xy[p], c1, c2);
                acc[p] += a1 * a2 / (b1 * b2) * inv_c;
            }
        }
    }
    Ok(SsimMap {
        batch: n,
        height: h,
        width: w,
        values,
    })
}

/// Mean SSIM over all pixels, channels and batch entries.
pub fn mssim(x: &Tensor, y: &Tensor, cfg: &SsimConfig) -> Result<f64> {
    let map = ssim_map(x, y, cfg)?;
    Ok(map.values.iter().sum::<f64>() / map.values.len() as f64)
}

/// `1 − MSSIM` and its gradients with respect to `x` and/or `y`.
pub struct SsimLoss {
    pub loss: f64,
    pub grad_x: Option<Tensor>,
    pub grad_y: Option<Tensor>,
}

/// Evaluates `1 − MSSIM(x, y)` with analytic gradients.
pub fn ssim_loss(x: &Tensor, y: &Tensor, cfg: &SsimConfig, want_x: bool, want_y: bool) -> Result<SsimLoss> {
    check_pair(x, y, cfg)?;
    let [n, c, h, w] = x.shape();
    let (c1, c2) = (cfg.c1(), cfg.c2());
    let plane = h * w;
    let scale = -1.0 / x.len() as f64;
    let mut ws = Workspace::new(cfg, h, w);
    let mut grad_x = want_x.then(|| Tensor::zeros(x.shape()));
    let mut grad_y = want_y.then(|| Tensor::zeros(x.shape()));
    let z = || vec![0.0f64; plane];
    let (mut g_mx, mut g_my, mut g_xx, mut g_yy, mut g_xy) = (z(), z(), z(), z(), z());
    let (mut adj_a, mut adj_b, mut adj_c) = (z(), z(), z());
    let mut total = 0.0f64;
    for i in 0..n {
        for ch in 0..c {
            ws.load(x.plane(i, ch), y.plane(i, ch));
            let s = &ws.stats;
            for p in 0..plane {
                let (mx, my) = (s.mu_x[p], s.mu_y[p]);
                let (a1, a2, b1, b2) = ssim_terms(mx, my, s.e_xx[p], s.e_yy[p], s.e_xy[p], c1, c2);
                let denom = b1 * b2;
                let ssim = a1 * a2 / denom;
                total += ssim;
                // Partial derivatives of SSIM with respect to the five local statistics.
                let d_mu_common = 2.0 * (a2 - a1) / denom;
                let d_b = ssim * (1.0 / b1 - 1.0 / b2);
                g_mx[p] = scale * (my * d_mu_common - 2.0 * mx * d_b);
                g_my[p] = scale * (mx * d_mu_common - 2.0 * my * d_b);
                g_xx[p] = scale * (-ssim / b2);
                g_yy[p] = scale * (-ssim / b2);
                g_xy[p] = scale * (2.0 * a1 / denom);
            }
            ws.filter.adjoint(&g_xy, &mut adj_c);
            if let Some(gx) = grad_x.as_mut() {
                ws.filter.adjoint(&g_mx, &mut adj_a);
                ws.filter.adjoint(&g_xx, &mut adj_b);
                for (p, d) in gx.plane_mut(i, ch).iter_mut().enumerate() {
                    *d = (adj_a[p] + 2.0 * ws.x[p] * adj_b[p] + ws.y[p] * adj_c[p]) as f32;
                }
            }
            if let Some(gy) = grad_y.as_mut() {
                ws.filter.adjoint(&g_my, &mut adj_a);
                ws.filter.adjoint(&g_yy, &mut adj_b);
                for (p, d) in gy.plane_mut(i, ch).iter_mut().enumerate() {
                    *d = (adj_a[p] + 2.0 * ws.y[p] * adj_b[p] + ws.x[p] * adj_c[p]) as f32;
                }
            }
        }
    }
    Ok(SsimLoss {
        loss: 1.0 - total / x.len() as f64,
        grad_x,
        grad_y,
    })
}

/// Running `max − min` over observed feature values.
#[derive(Clone, Debug, PartialEq)]
pub struct DynamicRangeCalibrator {
    min: f64,
    max: f64,
    batches: usize,
}

impl Default for DynamicRangeCalibrator {
    fn default() -> Self {
        Self {
            min: f64::INFINITY,
            max: f64::NEG_INFINITY,
            batches: 0,
        }
    }
}

impl DynamicRangeCalibrator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn observe(&mut self, values: &[f32]) {
        for &v in values {
            let v = v as f64;
            self.min = self.min.min(v);
            self.max = self.max.max(v);
        }
        self.batches += 1;
    }

    pub fn batches(&self) -> usize {
        self.batches
    }

    /// Current range estimate, clamped below at [`MIN_DYNAMIC_RANGE`].
    pub fn range(&self) -> Result<f64> {
        if self.batches == 0 {
            bail!(Contract, "dynamic range needs at least one batch");
        }
        if self.min > self.max {
            return Ok(MIN_DYNAMIC_RANGE);
        }
        Ok((self.max - self.min).max(MIN_DYNAMIC_RANGE))
    }
}

/// Calibrates `L` from a stream of feature batches.
pub fn calibrate_dynamic_range<'a>(batches: impl IntoIterator<Item = &'a Tensor>) -> Result<f64> {
    let mut cal = DynamicRangeCalibrator::new();
    for b in batches {
        cal.observe(b.data());
    }
    cal.range()
}
