//! Trainable layers with explicit forward/backward passes.
//!
//! Every layer has two forward paths: [`Layer::infer`] borrows the layer
//! immutably and never touches parameters or statistics, while
//! [`Layer::forward`] with [`Mode::Train`] caches whatever the matching
//! [`Layer::backward`] needs. Gradients accumulate into [`Param::grad`].

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{bail, Result};
use crate::gemm::{gemm, View};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// A trainable parameter and its accumulated gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f32>,
    pub grad: Vec<f32>,
}

impl Param {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, value: Vec<f32>) -> Self {
        let grad = vec![0.0; value.len()];
        Self {
            name: name.into(),
            shape,
            value,
            grad,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// Non-trainable per-layer state saved alongside parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Buffer {
    pub name: String,
    pub value: Vec<f32>,
}

/// Uniform initializer `U(-bound, bound)` as used by default conv layers.
pub(crate) fn uniform_init(rng: &mut ChaCha8Rng, len: usize, bound: f32) -> Vec<f32> {
    (0..len).map(|_| rng.random_range(-bound..=bound)).collect()
}

#[inline]
pub(crate) fn conv_out(size: usize, kernel: usize, stride: usize, padding: usize) -> usize {
    (size + 2 * padding - kernel) / stride + 1
}

/// Spatial geometry of a windowed operation on one plane.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Window {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl Window {
    fn rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn cols(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Unfolds one `C × H × W` sample into a `(C·k·k) × (OH·OW)` matrix whose
/// rows start `ld` elements apart.
pub(crate) fn im2col(input: &[f32], g: &Window, cols: &mut [f32], ld: usize) {
    let n_cols = g.cols();
    let mut row = 0;
    for c in 0..g.channels {
        let plane = &input[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kernel {
            for kj in 0..g.kernel {
                let dst = &mut cols[row * ld..row * ld + n_cols];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    let out_row = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.height as isize {
                        out_row.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    if g.stride == 1 {
                        let shift = kj as isize - g.padding as isize;
                        for (ox, v) in out_row.iter_mut().enumerate() {
                            let ix = ox as isize + shift;
                            *v = if ix >= 0 && ix < g.width as isize { src[ix as usize] } else { 0.0 };
                        }
                    } else {
                        for (ox, v) in out_row.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                            *v = if ix >= 0 && ix < g.width as isize { src[ix as usize] } else { 0.0 };
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: folds columns back, accumulating into `output`.
pub(crate) fn col2im(cols: &[f32], g: &Window, output: &mut [f32], ld: usize) {
    let n_cols = g.cols();
    let mut row = 0;
    for c in 0..g.channels {
        let plane = &mut output[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kernel {
            for kj in 0..g.kernel {
                let src = &cols[row * ld..row * ld + n_cols];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    let in_row = &src[oy * g.out_w..(oy + 1) * g.out_w];
                    for (ox, &v) in in_row.iter().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        if ix >= 0 && ix < g.width as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Elements allowed in one batched column matrix.
const COLUMN_BUDGET: usize = 1 << 22;

/// Samples per batched matrix product for `per_sample` column elements.
fn chunk_len(per_sample: usize, n: usize) -> usize {
    (COLUMN_BUDGET / per_sample.max(1)).clamp(1, n.max(1))
}

/// Copies samples `start..start + count` of `t` into a `C × (count·P)` matrix.
fn gather_columns(t: &Tensor, start: usize, count: usize, dst: &mut [f32]) {
    let (c, p) = (t.channels(), t.plane_len());
    let ld = count * p;
    for j in 0..count {
        let sample = t.sample(start + j);
        for ch in 0..c {
            dst[ch * ld + j * p..ch * ld + (j + 1) * p].copy_from_slice(&sample[ch * p..(ch + 1) * p]);
        }
    }
}

/// Inverse of [`gather_columns`], adding `bias` per channel when given.
fn scatter_columns(src: &[f32], t: &mut Tensor, start: usize, count: usize, bias: Option<&[f32]>) {
    let (c, p) = (t.channels(), t.plane_len());
    let ld = count * p;
    for j in 0..count {
        let sample = t.sample_mut(start + j);
        for ch in 0..c {
            let dst = &mut sample[ch * p..(ch + 1) * p];
            dst.copy_from_slice(&src[ch * ld + j * p..ch * ld + (j + 1) * p]);
            if let Some(b) = bias {
                dst.iter_mut().for_each(|v| *v += b[ch]);
            }
        }
    }
}

/// 2-D convolution, weight layout `[out, in, k, k]`.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub weight: Param,
    pub bias: Option<Param>,
    cached_input: Option<Tensor>,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let bound = 1.0 / libm::sqrtf(fan_in as f32);
        let weight = Param::new(
            alloc::format!("{name}.weight"),
            vec![out_channels, in_channels, kernel, kernel],
            uniform_init(rng, out_channels * fan_in, bound),
        );
        let bias = bias.then(|| Param::new(alloc::format!("{name}.bias"), vec![out_channels], uniform_init(rng, out_channels, bound)));
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            weight,
            bias,
            cached_input: None,
        }
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        (conv_out(h, self.kernel, self.stride, self.padding), conv_out(w, self.kernel, self.stride, self.padding))
    }

    fn window(&self, h: usize, w: usize) -> Window {
        let (out_h, out_w) = self.output_size(h, w);
        Window {
            channels: self.in_channels,
            height: h,
            width: w,
            kernel: self.kernel,
            stride: self.stride,
            padding: self.padding,
            out_h,
            out_w,
        }
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }

    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        let [n, c, h, w] = x.shape();
        if c != self.in_channels {
            bail!(Shape, "{} expects {} input channels, got {}", self.weight.name, self.in_channels, c);
        }
        let g = self.window(h, w);
        let p = g.cols();
        let mut out = Tensor::zeros([n, self.out_channels, g.out_h, g.out_w]);
        let chunk = chunk_len(g.rows().max(self.out_channels) * p, n);
        let mut cols = vec![0.0f32; g.rows() * p * chunk];
        let mut ys = vec![0.0f32; self.out_channels * p * chunk];
        let bias = self.bias.as_ref().map(|b| b.value.as_slice());
        for start in (0..n).step_by(chunk) {
            let count = chunk.min(n - start);
            let ld = count * p;
            if self.is_pointwise() {
                gather_columns(x, start, count, &mut cols);
            } else {
                for j in 0..count {
                    im2col(x.sample(start + j), &g, &mut cols[j * p..], ld);
                }
            }
            gemm(
                View::new(&self.weight.value, self.out_channels, g.rows()),
                View::new(&cols, g.rows(), ld),
                0.0,
                &mut ys[..self.out_channels * ld],
            );
            scatter_columns(&ys, &mut out, start, count, bias);
        }
        Ok(out)
    }

    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let y = self.infer(x)?;
        if mode == Mode::Train {
            self.cached_input = Some(x.clone());
        }
        Ok(y)
    }

    /// Accumulates parameter gradients; returns the input gradient when asked.
    pub fn backward(&mut self, dy: &Tensor, need_input_grad: bool) -> Result<Option<Tensor>> {
        let Some(x) = self.cached_input.take() else {
            bail!(Contract, "{}: backward without a training forward", self.weight.name);
        };
        let [n, _, h, w] = x.shape();
        let g = self.window(h, w);
        if dy.shape() != [n, self.out_channels, g.out_h, g.out_w] {
            bail!(Shape, "{}: output gradient {:?}", self.weight.name, dy.shape());
        }
        let p = g.cols();
        let mut dx = need_input_grad.then(|| Tensor::zeros(x.shape()));
        let pointwise = self.is_pointwise();
        let chunk = chunk_len(g.rows().max(self.out_channels) * p, n);
        let mut cols = vec![0.0f32; g.rows() * p * chunk];
        let mut dys = vec![0.0f32; self.out_channels * p * chunk];
        for start in (0..n).step_by(chunk) {
            let count = chunk.min(n - start);
            let ld = count * p;
            gather_columns(dy, start, count, &mut dys);
            if pointwise {
                gather_columns(&x, start, count, &mut cols);
            } else {
                for j in 0..count {
                    im2col(x.sample(start + j), &g, &mut cols[j * p..], ld);
                }
            }
            gemm(
                View::new(&dys, self.out_channels, ld),
                View::transposed(&cols, ld, g.rows()),
                1.0,
                &mut self.weight.grad,
            );
            if let Some(b) = &mut self.bias {
                for (o, row) in dys[..self.out_channels * ld].chunks(ld).enumerate() {
                    b.grad[o] += row.iter().sum::<f32>();
                }
            }
            if let Some(dx) = dx.as_mut() {
                let w_t = View::transposed(&self.weight.value, g.rows(), self.out_channels);
                gemm(w_t, View::new(&dys, self.out_channels, ld), 0.0, &mut cols[..g.rows() * ld]);
                if pointwise {
                    scatter_columns(&cols, dx, start, count, None);
                } else {
                    for j in 0..count {
                        col2im(&cols[j * p..], &g, dx.sample_mut(start + j), ld);
                    }
                }
            }
        }
        Ok(dx)
    }
}

/// Strided transpose convolution, weight layout `[in, out, k, k]`.
///
/// Output size is `(in − 1)·stride − 2·padding + kernel + output_padding`.
#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub output_padding: usize,
    pub weight: Param,
    cached_input: Option<Tensor>,
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        output_padding: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        // Default initializer computes fan-in from the second weight axis.
        let fan_in = out_channels * kernel * kernel;
        let bound = 1.0 / libm::sqrtf(fan_in as f32);
        let weight = Param::new(
            alloc::format!("{name}.weight"),
            vec![in_channels, out_channels, kernel, kernel],
            uniform_init(rng, in_channels * fan_in, bound),
        );
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            output_padding,
            weight,
            cached_input: None,
        }
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        let f = |s: usize| (s - 1) * self.stride + self.kernel + self.output_padding - 2 * self.padding;
        (f(h), f(w))
    }

    /// Window over the output plane whose positions enumerate input pixels.
    fn window(&self, h: usize, w: usize) -> Result<Window> {
        let (out_h, out_w) = self.output_size(h, w);
        let g = Window {
            channels: self.out_channels,
            height: out_h,
            width: out_w,
            kernel: self.kernel,
            stride: self.stride,
            padding: self.padding,
            out_h: h,
            out_w: w,
        };
        if conv_out(out_h, self.kernel, self.stride, self.padding) != h || conv_out(out_w, self.kernel, self.stride, self.padding) != w {
            bail!(Spec, "{}: transpose geometry does not invert for {}x{}", self.weight.name, h, w);
        }
        Ok(g)
    }

    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        let [n, c, h, w] = x.shape();
        if c != self.in_channels {
            bail!(Shape, "{} expects {} input channels, got {}", self.weight.name, self.in_channels, c);
        }
        let g = self.window(h, w)?;
        let p = g.cols();
        let mut out = Tensor::zeros([n, self.out_channels, g.height, g.width]);
        let chunk = chunk_len(g.rows().max(self.in_channels) * p, n);
        let mut xs = vec![0.0f32; self.in_channels * p * chunk];
        let mut cols = vec![0.0f32; g.rows() * p * chunk];
        for start in (0..n).step_by(chunk) {
            let count = chunk.min(n - start);
            let ld = count * p;
            gather_columns(x, start, count, &mut xs);
            gemm(
                View::transposed(&self.weight.value, g.rows(), self.in_channels),
                View::new(&xs, self.in_channels, ld),
                0.0,
                &mut cols[..g.rows() * ld],
            );
            for j in 0..count {
                col2im(&cols[j * p..], &g, out.sample_mut(start + j), ld);
            }
        }
        Ok(out)
    }

    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let y = self.infer(x)?;
        if mode == Mode::Train {
            self.cached_input = Some(x.clone());
        }
        Ok(y)
    }

    pub fn backward(&mut self, dy: &Tensor, need_input_grad: bool) -> Result<Option<Tensor>> {
        let Some(x) = self.cached_input.take() else {
            bail!(Contract, "{}: backward without a training forward", self.weight.name);
        };
        let [n, _, h, w] = x.shape();
        let g = self.window(h, w)?;
        if dy.shape() != [n, self.out_channels, g.height, g.width] {
            bail!(Shape, "{}: output gradient {:?}", self.weight.name, dy.shape());
        }
        let p = g.cols();
        let mut dx = need_input_grad.then(|| Tensor::zeros(x.shape()));
        let chunk = chunk_len(g.rows().max(self.in_channels) * p, n);
        let mut xs = vec![0.0f32; self.in_channels * p * chunk];
        let mut cols = vec![0.0f32; g.rows() * p * chunk];
        for start in (0..n).step_by(chunk) {
            let count = chunk.min(n - start);
            let ld = count * p;
            gather_columns(&x, start, count, &mut xs);
            for j in 0..count {
                im2col(dy.sample(start + j), &g, &mut cols[j * p..], ld);
            }
            gemm(
                View::new(&xs, self.in_channels, ld),
                View::transposed(&cols, ld, g.rows()),
                1.0,
                &mut self.weight.grad,
            );
            if let Some(dx) = dx.as_mut() {
                gemm(
                    View::new(&self.weight.value, self.in_channels, g.rows()),
                    View::new(&cols, g.rows(), ld),
                    0.0,
                    &mut xs[..self.in_channels * ld],
                );
                scatter_columns(&xs, dx, start, count, None);
            }
        }
        Ok(dx)
    }
}

#[derive(Clone, Debug)]
struct BnCache {
    xhat: Vec<f32>,
    inv_std: Vec<f32>,
    shape: [usize; 4],
}

/// Per-channel batch normalization with running statistics.
#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub channels: usize,
    pub eps: f32,
    pub momentum: f32,
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
    name: String,
    cache: Option<BnCache>,
}

impl BatchNorm2d {
    pub fn new(name: &str, channels: usize) -> Self {
        Self {
            channels,
            eps: 1e-5,
            momentum: 0.1,
            gamma: Param::new(alloc::format!("{name}.weight"), vec![channels], vec![1.0; channels]),
            beta: Param::new(alloc::format!("{name}.bias"), vec![channels], vec![0.0; channels]),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            name: name.into(),
            cache: None,
        }
    }

    pub fn buffers(&self) -> [Buffer; 2] {
        [
            Buffer {
                name: alloc::format!("{}.running_mean", self.name),
                value: self.running_mean.clone(),
            },
            Buffer {
                name: alloc::format!("{}.running_var", self.name),
                value: self.running_var.clone(),
            },
        ]
    }

    /// Per-channel `(scale, shift)` applying the frozen statistics.
    pub fn frozen_affine(&self) -> (Vec<f32>, Vec<f32>) {
        (0..self.channels)
            .map(|c| {
                let scale = self.gamma.value[c] / libm::sqrtf(self.running_var[c] + self.eps);
                (scale, self.beta.value[c] - self.running_mean[c] * scale)
            })
            .unzip()
    }

    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        self.check(x)?;
        let (scale, shift) = self.frozen_affine();
        let mut y = x.clone();
        let [n, c, _, _] = x.shape();
        for i in 0..n {
            for ch in 0..c {
                y.plane_mut(i, ch).iter_mut().for_each(|v| *v = *v * scale[ch] + shift[ch]);
            }
        }
        Ok(y)
    }

    fn check(&self, x: &Tensor) -> Result<()> {
        if x.channels() != self.channels {
            bail!(Shape, "{} expects {} channels, got {}", self.name, self.channels, x.channels());
        }
        Ok(())
    }

    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        if mode == Mode::Eval {
            return self.infer(x);
        }
        self.check(x)?;
        let [n, c, h, w] = x.shape();
        let count = n * h * w;
        if count < 2 {
            bail!(Contract, "{}: batch statistics need more than one value per channel", self.name);
        }
        let mut y = Tensor::zeros(x.shape());
        let mut inv_std = vec![0.0f32; c];
        for ch in 0..c {
            let mut sum = 0.0f64;
            let mut sum_sq = 0.0f64;
            for i in 0..n {
                for &v in x.plane(i, ch) {
                    sum += v as f64;
                    sum_sq += (v as f64) * (v as f64);
                }
            }
            let mean = sum / count as f64;
            let var = (sum_sq / count as f64 - mean * mean).max(0.0);
            let istd = 1.0 / libm::sqrt(var + self.eps as f64);
            inv_std[ch] = istd as f32;
            for i in 0..n {
                let src = x.plane(i, ch);
                for (d, &v) in y.plane_mut(i, ch).iter_mut().zip(src) {
                    *d = ((v as f64 - mean) * istd) as f32;
                }
            }
            let unbiased = var * count as f64 / (count - 1) as f64;
            let m = self.momentum;
            self.running_mean[ch] = (1.0 - m) * self.running_mean[ch] + m * mean as f32;
            self.running_var[ch] = (1.0 - m) * self.running_var[ch] + m * unbiased as f32;
        }
        let xhat = y.data().to_vec();
        for i in 0..n {
            for ch in 0..c {
                let (g, b) = (self.gamma.value[ch], self.beta.value[ch]);
                y.plane_mut(i, ch).iter_mut().for_each(|v| *v = *v * g + b);
            }
        }
        self.cache = Some(BnCache {
            xhat,
            inv_std,
            shape: x.shape(),
        });
        Ok(y)
    }

    pub fn backward(&mut self, dy: &Tensor) -> Result<Tensor> {
        let Some(cache) = self.cache.take() else {
            bail!(Contract, "{}: backward without a training forward", self.name);
        };
        if dy.shape() != cache.shape {
            bail!(Shape, "{}: output gradient {:?}", self.name, dy.shape());
        }
        let [n, c, h, w] = cache.shape;
        let count = (n * h * w) as f64;
        let plane = h * w;
        let mut dx = Tensor::zeros(cache.shape);
        for ch in 0..c {
            let mut sum_dy = 0.0f64;
            let mut sum_dy_xhat = 0.0f64;
            for i in 0..n {
                let off = (i * c + ch) * plane;
                for (d, xh) in dy.plane(i, ch).iter().zip(&cache.xhat[off..off + plane]) {
                    sum_dy += *d as f64;
                    sum_dy_xhat += (*d as f64) * (*xh as f64);
                }
            }
            self.gamma.grad[ch] += sum_dy_xhat as f32;
            self.beta.grad[ch] += sum_dy as f32;
            let k = self.gamma.value[ch] as f64 * cache.inv_std[ch] as f64 / count;
            for i in 0..n {
                let off = (i * c + ch) * plane;
                let xh = &cache.xhat[off..off + plane];
                let d = dy.plane(i, ch);
                for ((o, &dv), &x) in dx.plane_mut(i, ch).iter_mut().zip(d).zip(xh) {
                    *o = (k * (count * dv as f64 - sum_dy - x as f64 * sum_dy_xhat)) as f32;
                }
            }
        }
        Ok(dx)
    }
}

/// Leaky rectifier.
#[derive(Clone, Debug)]
pub struct LeakyRelu {
    pub slope: f32,
    positive: Option<Vec<bool>>,
}

impl LeakyRelu {
    pub fn new(slope: f32) -> Self {
        Self { slope, positive: None }
    }

    pub fn infer(&self, x: &Tensor) -> Tensor {
        let mut y = x.clone();
        y.data_mut().iter_mut().for_each(|v| {
            if *v < 0.0 {
                *v *= self.slope
            }
        });
        y
    }

    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Tensor {
        if mode == Mode::Train {
            self.positive = Some(x.data().iter().map(|&v| v >= 0.0).collect());
        }
        self.infer(x)
    }

    pub fn backward(&mut self, dy: &Tensor) -> Result<Tensor> {
        let Some(pos) = self.positive.take() else {
            bail!(Contract, "leaky relu: backward without a training forward");
        };
        let mut dx = dy.clone();
        dx.data_mut().iter_mut().zip(pos).for_each(|(d, p)| {
            if !p {
                *d *= self.slope
            }
        });
        Ok(dx)
    }
}

/// Elementwise dropout, active in training mode only.
#[derive(Clone, Debug)]
pub struct Dropout {
    pub p: f32,
    rng: ChaCha8Rng,
    kept: Option<Vec<bool>>,
}

impl Dropout {
    pub fn new(p: f32, seed: u64) -> Self {
        Self {
            p,
            rng: ChaCha8Rng::seed_from_u64(seed),
            kept: None,
        }
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
    }

    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Tensor {
        if mode == Mode::Eval || self.p == 0.0 {
            self.kept = None;
            return x.clone();
        }
        let scale = 1.0 / (1.0 - self.p);
        let kept: Vec<bool> = (0..x.len()).map(|_| self.rng.random::<f32>() >= self.p).collect();
        let mut y = x.clone();
        y.data_mut().iter_mut().zip(&kept).for_each(|(v, &k)| *v = if k { *v * scale } else { 0.0 });
        self.kept = Some(kept);
        y
    }

    pub fn backward(&mut self, dy: &Tensor) -> Tensor {
        let mut dx = dy.clone();
        if let Some(kept) = self.kept.take() {
            let scale = 1.0 / (1.0 - self.p);
            dx.data_mut().iter_mut().zip(kept).for_each(|(d, k)| *d = if k { *d * scale } else { 0.0 });
        }
        dx
    }
}

/// One stage of a feed-forward stack.
#[derive(Clone, Debug)]
pub enum Layer {
    Conv(Conv2d),
    ConvTranspose(ConvTranspose2d),
    BatchNorm(BatchNorm2d),
    LeakyRelu(LeakyRelu),
    Dropout(Dropout),
}

impl Layer {
    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            Layer::Conv(l) => l.infer(x),
            Layer::ConvTranspose(l) => l.infer(x),
            Layer::BatchNorm(l) => l.infer(x),
            Layer::LeakyRelu(l) => Ok(l.infer(x)),
            Layer::Dropout(_) => Ok(x.clone()),
        }
    }

    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        match self {
            Layer::Conv(l) => l.forward(x, mode),
            Layer::ConvTranspose(l) => l.forward(x, mode),
            Layer::BatchNorm(l) => l.forward(x, mode),
            Layer::LeakyRelu(l) => Ok(l.forward(x, mode)),
            Layer::Dropout(l) => Ok(l.forward(x, mode)),
        }
    }

    pub fn backward(&mut self, dy: &Tensor, need_input_grad: bool) -> Result<Option<Tensor>> {
        Ok(match self {
            Layer::Conv(l) => l.backward(dy, need_input_grad)?,
            Layer::ConvTranspose(l) => l.backward(dy, need_input_grad)?,
            Layer::BatchNorm(l) => Some(l.backward(dy)?),
            Layer::LeakyRelu(l) => Some(l.backward(dy)?),
            Layer::Dropout(l) => Some(l.backward(dy)),
        })
    }

    pub fn params(&self) -> Vec<&Param> {
        match self {
            Layer::Conv(l) => core::iter::once(&l.weight).chain(l.bias.as_ref()).collect(),
            Layer::ConvTranspose(l) => vec![&l.weight],
            Layer::BatchNorm(l) => vec![&l.gamma, &l.beta],
            _ => Vec::new(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        match self {
            Layer::Conv(l) => core::iter::once(&mut l.weight).chain(l.bias.as_mut()).collect(),
            Layer::ConvTranspose(l) => vec![&mut l.weight],
            Layer::BatchNorm(l) => vec![&mut l.gamma, &mut l.beta],
            _ => Vec::new(),
        }
    }

    pub fn buffers(&self) -> Vec<Buffer> {
        match self {
            Layer::BatchNorm(l) => l.buffers().into(),
            _ => Vec::new(),
        }
    }

    pub fn buffers_mut(&mut self) -> Vec<(String, &mut Vec<f32>)> {
        match self {
            Layer::BatchNorm(l) => vec![
                (alloc::format!("{}.running_mean", l.name), &mut l.running_mean),
                (alloc::format!("{}.running_var", l.name), &mut l.running_var),
            ],
            _ => Vec::new(),
        }
    }
}

/// Layers applied in order.
#[derive(Clone, Debug, Default)]
pub struct Sequential {
    pub layers: Vec<Layer>,
}

impl Sequential {
    pub fn push(&mut self, layer: Layer) {
        self.layers.push(layer);
    }

    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for l in &self.layers {
            h = l.infer(&h)?;
        }
        Ok(h)
    }

    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let mut h = x.clone();
        for l in &mut self.layers {
            h = l.forward(&h, mode)?;
        }
        Ok(h)
    }

    /// Backpropagates through all layers. The first layer's input gradient is
    /// computed only when `need_input_grad` is set.
    pub fn backward(&mut self, dy: &Tensor, need_input_grad: bool) -> Result<Option<Tensor>> {
        let mut grad = dy.clone();
        let last = self.layers.len();
        for (i, l) in self.layers.iter_mut().enumerate().rev() {
            let need = need_input_grad || i > 0;
            match l.backward(&grad, need)? {
                Some(g) => grad = g,
                None => {
                    debug_assert!(i == 0 || last == 0);
                    return Ok(None);
                }
            }
        }
        Ok(Some(grad))
    }

    pub fn params(&self) -> Vec<&Param> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    pub fn buffers(&self) -> Vec<Buffer> {
        self.layers.iter().flat_map(|l| l.buffers()).collect()
    }

    pub fn buffers_mut(&mut self) -> Vec<(String, &mut Vec<f32>)> {
        self.layers.iter_mut().flat_map(|l| l.buffers_mut()).collect()
    }

    pub fn reseed_dropout(&mut self, seed: u64) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            if let Layer::Dropout(d) = l {
                d.set_seed(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i as u64));
            }
        }
    }

    pub fn set_dropout(&mut self, p: f32) {
        for l in &mut self.layers {
            if let Layer::Dropout(d) = l {
                d.p = p;
            }
        }
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub step: u64,
    pub first_moments: Vec<Vec<f32>>,
    pub second_moments: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(lr: f32) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first_moments: Vec::new(),
            second_moments: Vec::new(),
        }
    }

    pub fn update(&mut self, params: &mut [&mut Param]) {
        if self.first_moments.is_empty() {
            self.first_moments = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.second_moments = params.iter().map(|p| vec![0.0; p.len()]).collect();
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - libm::pow(self.beta1 as f64, t as f64) as f32;
        let bc2 = 1.0 - libm::pow(self.beta2 as f64, t as f64) as f32;
        let step_size = self.lr / bc1;
        let bc2_sqrt = libm::sqrtf(bc2);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        for ((p, m), v) in params.iter_mut().zip(&mut self.first_moments).zip(&mut self.second_moments) {
            for (((w, &g), m), v) in p.value.iter_mut().zip(&p.grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let denom = libm::sqrtf(*v) / bc2_sqrt + eps;
                *w -= step_size * *m / denom;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_tensor(shape: [usize; 4], seed: u64) -> Tensor {
        let mut r = rng(seed);
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| r.random_range(-1.0f32..1.0)).collect()).unwrap()
    }

    /// Direct nested-loop convolution.
    fn naive_conv(x: &Tensor, conv: &Conv2d) -> Tensor {
        let [n, cin, h, w] = x.shape();
        let (oh, ow) = conv.output_size(h, w);
        let k = conv.kernel;
        let mut out = Tensor::zeros([n, conv.out_channels, oh, ow]);
        for i in 0..n {
            for o in 0..conv.out_channels {
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut acc = conv.bias.as_ref().map_or(0.0, |b| b.value[o]) as f64;
                        for c in 0..cin {
                            for ki in 0..k {
                                for kj in 0..k {
                                    let iy = (y * conv.stride + ki) as isize - conv.padding as isize;
                                    let ix = (xx * conv.stride + kj) as isize - conv.padding as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                        acc += conv.weight.value[((o * cin + c) * k + ki) * k + kj] as f64
                                            * x.at(i, c, iy as usize, ix as usize) as f64;
                                    }
                                }
                            }
                        }
                        let idx = ((i * conv.out_channels + o) * oh + y) * ow + xx;
                        out.data_mut()[idx] = acc as f32;
                    }
                }
            }
        }
        out
    }

    /// Direct scatter form of the transpose convolution.
    fn naive_conv_transpose(x: &Tensor, l: &ConvTranspose2d) -> Tensor {
        let [n, cin, h, w] = x.shape();
        let (oh, ow) = l.output_size(h, w);
        let k = l.kernel;
        let mut out = Tensor::zeros([n, l.out_channels, oh, ow]);
        for i in 0..n {
            for c in 0..cin {
                for y in 0..h {
                    for xx in 0..w {
                        for o in 0..l.out_channels {
                            for ki in 0..k {
                                for kj in 0..k {
                                    let oy = (y * l.stride + ki) as isize - l.padding as isize;
                                    let ox = (xx * l.stride + kj) as isize - l.padding as isize;
                                    if oy >= 0 && ox >= 0 && (oy as usize) < oh && (ox as usize) < ow {
                                        let idx = ((i * l.out_channels + o) * oh + oy as usize) * ow + ox as usize;
                                        out.data_mut()[idx] += l.weight.value[((c * l.out_channels + o) * k + ki) * k + kj] * x.at(i, c, y, xx);
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    fn assert_close(a: &[f32], b: &[f32], tol: f32) {
        assert_eq!(a.len(), b.len());
        for (i, (x, y)) in a.iter().zip(b).enumerate() {
            assert!((x - y).abs() <= tol * (1.0 + y.abs()), "index {i}: {x} vs {y}");
        }
    }

    #[test]
    fn conv_matches_naive_loops() {
        for &(k, s, p, bias) in &[(5, 2, 2, false), (3, 1, 1, true), (1, 1, 0, true), (7, 2, 3, false)] {
            let conv = Conv2d::new("c", 3, 4, k, s, p, bias, &mut rng(1));
            let x = random_tensor([2, 3, 10, 10], 2);
            assert_close(conv.infer(&x).unwrap().data(), naive_conv(&x, &conv).data(), 1e-5);
        }
    }

    #[test]
    fn conv_transpose_doubles_and_matches_scatter() {
        let l = ConvTranspose2d::new("t", 3, 2, 5, 2, 2, 1, &mut rng(3));
        let x = random_tensor([2, 3, 4, 4], 4);
        let y = l.infer(&x).unwrap();
        assert_eq!(y.shape(), [2, 2, 8, 8]);
        assert_close(y.data(), naive_conv_transpose(&x, &l).data(), 1e-5);
    }

    /// Finite-difference check of `sum(out · probe)` for a single layer.
    fn check_layer_grad(mut layer: Layer, x: Tensor, tol: f64) {
        let probe = random_tensor(layer.infer(&x).unwrap().shape(), 99);
        let loss = |l: &mut Layer, x: &Tensor| -> f64 {
            let y = l.forward(x, Mode::Train).unwrap();
            y.data().iter().zip(probe.data()).map(|(a, b)| *a as f64 * *b as f64).sum()
        };
        let _ = loss(&mut layer, &x);
        for p in layer.params_mut() {
            p.zero_grad();
        }
        let dx = layer.backward(&probe, true).unwrap().unwrap();
        let h = 1e-2f32;
        for idx in (0..x.len()).step_by(7) {
            let mut xp = x.clone();
            xp.data_mut()[idx] += h;
            let mut xm = x.clone();
            xm.data_mut()[idx] -= h;
            let mut lp = layer.clone();
            let mut lm = layer.clone();
            let fd = (loss(&mut lp, &xp) - loss(&mut lm, &xm)) / (2.0 * h as f64);
            let an = dx.data()[idx] as f64;
            assert!((fd - an).abs() <= tol * (1.0 + fd.abs()), "input {idx}: fd {fd} vs {an}");
        }
        let grads: Vec<Vec<f32>> = layer.params().iter().map(|p| p.grad.clone()).collect();
        for (pi, g) in grads.iter().enumerate() {
            for idx in (0..g.len()).step_by(5) {
                let mut lp = layer.clone();
                lp.params_mut()[pi].value[idx] += h;
                let mut lm = layer.clone();
                lm.params_mut()[pi].value[idx] -= h;
                let fd = (loss(&mut lp, &x) - loss(&mut lm, &x)) / (2.0 * h as f64);
                assert!((fd - g[idx] as f64).abs() <= tol * (1.0 + fd.abs()), "param {pi}[{idx}]: fd {fd} vs {}", g[idx]);
            }
        }
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        check_layer_grad(Layer::Conv(Conv2d::new("c", 2, 3, 5, 2, 2, true, &mut rng(5))), random_tensor([2, 2, 8, 8], 6), 2e-2);
        check_layer_grad(Layer::Conv(Conv2d::new("c", 3, 2, 1, 1, 0, true, &mut rng(7))), random_tensor([2, 3, 4, 4], 8), 2e-2);
    }

    #[test]
    fn conv_transpose_gradients_match_finite_differences() {
        check_layer_grad(
            Layer::ConvTranspose(ConvTranspose2d::new("t", 3, 2, 5, 2, 2, 1, &mut rng(9))),
            random_tensor([2, 3, 4, 4], 10),
            2e-2,
        );
    }

    #[test]
    fn batchnorm_gradients_match_finite_differences() {
        let mut bn = BatchNorm2d::new("bn", 3);
        bn.gamma.value = vec![0.5, 1.5, -1.0];
        bn.beta.value = vec![0.1, 0.0, -0.2];
        check_layer_grad(Layer::BatchNorm(bn), random_tensor([3, 3, 3, 3], 11), 3e-2);
    }

    #[test]
    fn leaky_relu_gradient() {
        check_layer_grad(Layer::LeakyRelu(LeakyRelu::new(0.01)), random_tensor([1, 2, 5, 5], 12), 1e-2);
    }

    #[test]
    fn batchnorm_training_normalizes_and_tracks_running_stats() {
        let mut bn = BatchNorm2d::new("bn", 2);
        let x = random_tensor([4, 2, 5, 5], 13);
        let y = bn.forward(&x, Mode::Train).unwrap();
        for c in 0..2 {
            let vals: Vec<f32> = (0..4).flat_map(|i| y.plane(i, c).to_vec()).collect();
            let mean: f32 = vals.iter().sum::<f32>() / vals.len() as f32;
            let var: f32 = vals.iter().map(|v| (v - mean).powi(2)).sum::<f32>() / vals.len() as f32;
            assert!(mean.abs() < 1e-5 && (var - 1.0).abs() < 1e-3);
        }
        assert!(bn.running_mean.iter().any(|&m| m != 0.0));
    }

    #[test]
    fn dropout_is_identity_in_eval_and_seeded_in_train() {
        let x = random_tensor([1, 1, 16, 16], 14);
        let mut d = Dropout::new(0.5, 3);
        assert_eq!(d.forward(&x, Mode::Eval), x);
        let a = d.forward(&x, Mode::Train);
        let mut d2 = Dropout::new(0.5, 3);
        assert_eq!(d2.forward(&x, Mode::Train), a);
        assert!(a.data().iter().filter(|&&v| v == 0.0).count() > 50);
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let mut p = Param::new("w", vec![2], vec![1.0, -1.0]);
        p.grad = vec![0.3, -2.0];
        let mut opt = Adam::new(0.1);
        opt.update(&mut [&mut p]);
        // With bias correction the first update is lr · sign(g).
        assert!((p.value[0] - 0.9).abs() < 1e-6);
        assert!((p.value[1] + 0.9).abs() < 1e-6);
    }
}
