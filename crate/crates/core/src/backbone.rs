//! Frozen 18-layer residual network, inference only, up to the third
//! residual stage.
//!
//! Parameter names follow the common `conv1.weight`, `bn1.running_mean`,
//! `layer2.0.downsample.0.weight`, ... layout so exported ImageNet weights
//! load without renaming. Batch normalization is folded into the preceding
//! convolution once at construction; the raw parameters are kept untouched.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{bail, Result};
use crate::nn::{conv_out, Conv2d};
use crate::tensor::Tensor;

/// Published ImageNet input statistics (RGB).
pub const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];

/// Channel widths of the stem and the first three residual stages.
pub const STAGE_CHANNELS: [usize; 4] = [64, 64, 128, 256];
/// Total downsampling factor at the output of each stage.
pub const STAGE_STRIDES: [usize; 4] = [4, 4, 8, 16];

const BN_EPS: f32 = 1e-5;

/// Named float tensors, e.g. a loaded weight file.
pub type StateDict = BTreeMap<String, (Vec<usize>, Vec<f32>)>;

/// Convolution with batch normalization folded into weight and bias.
#[derive(Clone, Debug)]
struct FoldedConv {
    conv: Conv2d,
}

impl FoldedConv {
    fn new(weights: &StateDict, conv_name: &str, bn_name: &str, stride: usize, padding: usize) -> Result<Self> {
        let (shape, w) = take(weights, &alloc::format!("{conv_name}.weight"))?;
        if shape.len() != 4 || shape[2] != shape[3] {
            bail!(Init, "{conv_name}.weight has shape {:?}", shape);
        }
        let (out_c, in_c, k) = (shape[0], shape[1], shape[2]);
        let gamma = take_vec(weights, &alloc::format!("{bn_name}.weight"), out_c)?;
        let beta = take_vec(weights, &alloc::format!("{bn_name}.bias"), out_c)?;
        let mean = take_vec(weights, &alloc::format!("{bn_name}.running_mean"), out_c)?;
        let var = take_vec(weights, &alloc::format!("{bn_name}.running_var"), out_c)?;
        let mut conv = Conv2d::new(conv_name, in_c, out_c, k, stride, padding, true, &mut ChaCha8Rng::seed_from_u64(0));
        let per_out = in_c * k * k;
        for o in 0..out_c {
            let scale = gamma[o] / libm::sqrtf(var[o] + BN_EPS);
            for (d, &s) in conv.weight.value[o * per_out..(o + 1) * per_out].iter_mut().zip(&w[o * per_out..(o + 1) * per_out]) {
                *d = s * scale;
            }
            conv.bias.as_mut().expect("folded conv has bias").value[o] = beta[o] - mean[o] * scale;
        }
        Ok(Self { conv })
    }

    fn run(&self, x: &Tensor, relu: bool) -> Result<Tensor> {
        let mut y = self.conv.infer(x)?;
        if relu {
            y.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        }
        Ok(y)
    }
}

fn take<'a>(weights: &'a StateDict, name: &str) -> Result<(&'a [usize], &'a [f32])> {
    match weights.get(name) {
        Some((s, v)) => Ok((s.as_slice(), v.as_slice())),
        None => bail!(Init, "backbone weight {name} is missing"),
    }
}

fn take_vec<'a>(weights: &'a StateDict, name: &str, len: usize) -> Result<&'a [f32]> {
    let (_, v) = take(weights, name)?;
    if v.len() != len {
        bail!(Init, "{name} has {} values, expected {}", v.len(), len);
    }
    Ok(v)
}

#[derive(Clone, Debug)]
struct BasicBlock {
    conv1: FoldedConv,
    conv2: FoldedConv,
    downsample: Option<FoldedConv>,
}

impl BasicBlock {
    fn new(weights: &StateDict, prefix: &str, stride: usize, downsample: bool) -> Result<Self> {
        Ok(Self {
            conv1: FoldedConv::new(weights, &alloc::format!("{prefix}.conv1"), &alloc::format!("{prefix}.bn1"), stride, 1)?,
            conv2: FoldedConv::new(weights, &alloc::format!("{prefix}.conv2"), &alloc::format!("{prefix}.bn2"), 1, 1)?,
            downsample: if downsample {
                Some(FoldedConv::new(
                    weights,
                    &alloc::format!("{prefix}.downsample.0"),
                    &alloc::format!("{prefix}.downsample.1"),
                    stride,
                    0,
                )?)
            } else {
                None
            },
        })
    }

    fn run(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.conv1.run(x, true)?;
        let mut out = self.conv2.run(&h, false)?;
        let identity = match &self.downsample {
            Some(d) => d.run(x, false)?,
            None => x.clone(),
        };
        out.ensure_same_shape(&identity, "residual")?;
        for (o, &i) in out.data_mut().iter_mut().zip(identity.data()) {
            *o = (*o + i).max(0.0);
        }
        Ok(out)
    }
}

/// 3×3 max pooling, stride 2, padding 1.
fn max_pool(x: &Tensor) -> Tensor {
    let [n, c, h, w] = x.shape();
    let (oh, ow) = (conv_out(h, 3, 2, 1), conv_out(w, 3, 2, 1));
    let mut out = Tensor::zeros([n, c, oh, ow]);
    for i in 0..n {
        for ch in 0..c {
            let src = x.plane(i, ch);
            let dst = out.plane_mut(i, ch);
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut m = f32::NEG_INFINITY;
                    for ky in 0..3 {
                        let iy = (oy * 2 + ky) as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..3 {
                            let ix = (ox * 2 + kx) as isize - 1;
                            if ix >= 0 && ix < w as isize {
                                m = m.max(src[iy as usize * w + ix as usize]);
                            }
                        }
                    }
                    dst[oy * ow + ox] = m;
                }
            }
        }
    }
    out
}

/// Frozen residual backbone exposing the stem (`layer0`) and stages 1–3.
#[derive(Clone, Debug)]
pub struct Backbone {
    weights: StateDict,
    stem: FoldedConv,
    stages: [Vec<BasicBlock>; 3],
}

impl Backbone {
    /// Builds the backbone from named weights; any missing tensor is an
    /// initialization error.
    pub fn from_state_dict(weights: StateDict) -> Result<Self> {
        let stem = FoldedConv::new(&weights, "conv1", "bn1", 2, 3)?;
        if stem.conv.in_channels != 3 || stem.conv.kernel != 7 {
            bail!(Init, "stem must be a 7x7 convolution over 3 channels");
        }
        let mut stages: [Vec<BasicBlock>; 3] = Default::default();
        for (s, stage) in stages.iter_mut().enumerate() {
            let layer = s + 1;
            let stride = if layer == 1 { 1 } else { 2 };
            for b in 0..2 {
                let prefix = alloc::format!("layer{layer}.{b}");
                let block_stride = if b == 0 { stride } else { 1 };
                stage.push(BasicBlock::new(&weights, &prefix, block_stride, b == 0 && layer > 1)?);
            }
        }
        Ok(Self { weights, stem, stages })
    }

    /// Randomly initialized backbone for offline use: He-normal convolutions
    /// (fan-out mode), unit batch-norm scale, zero shift, identity running
    /// statistics.
    pub fn random(seed: u64) -> Self {
        Self::from_state_dict(random_state_dict(seed)).expect("random weights are complete")
    }

    /// The raw (unfolded) weights this backbone was built from.
    pub fn state_dict(&self) -> &StateDict {
        &self.weights
    }

    /// Runs the network on normalized 3-channel input and returns the outputs
    /// of stages `0..=last_stage`.
    pub fn stages(&self, x: &Tensor, last_stage: usize) -> Result<Vec<Tensor>> {
        if last_stage > 3 {
            bail!(Range, "stage {last_stage} does not exist");
        }
        if x.channels() != 3 {
            bail!(Shape, "backbone expects 3 input channels, got {}", x.channels());
        }
        let mut outs = Vec::with_capacity(last_stage + 1);
        let stem = self.stem.run(x, true)?;
        outs.push(max_pool(&stem));
        for stage in self.stages.iter().take(last_stage) {
            let mut h = outs.last().expect("stem output").clone();
            for block in stage {
                h = block.run(&h)?;
            }
            outs.push(h);
        }
        Ok(outs)
    }
}

fn random_state_dict(seed: u64) -> StateDict {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dict = StateDict::new();
    let mut conv = |dict: &mut StateDict, name: &str, out_c: usize, in_c: usize, k: usize| {
        let std = libm::sqrtf(2.0 / (out_c * k * k) as f32);
        let normal = Normal::new(0.0f32, std).expect("valid std");
        let w: Vec<f32> = (0..out_c * in_c * k * k).map(|_| normal.sample(&mut rng)).collect();
        dict.insert(alloc::format!("{name}.weight"), (vec![out_c, in_c, k, k], w));
    };
    let bn = |dict: &mut StateDict, name: &str, c: usize| {
        for (suffix, value) in [("weight", 1.0), ("bias", 0.0), ("running_mean", 0.0), ("running_var", 1.0)] {
            dict.insert(alloc::format!("{name}.{suffix}"), (vec![c], vec![value; c]));
        }
    };
    conv(&mut dict, "conv1", 64, 3, 7);
    bn(&mut dict, "bn1", 64);
    let mut in_c = 64;
    for (layer, &out_c) in STAGE_CHANNELS[1..].iter().enumerate().map(|(i, c)| (i + 1, c)) {
        for b in 0..2 {
            let p = alloc::format!("layer{layer}.{b}");
            let block_in = if b == 0 { in_c } else { out_c };
            conv(&mut dict, &alloc::format!("{p}.conv1"), out_c, block_in, 3);
            bn(&mut dict, &alloc::format!("{p}.bn1"), out_c);
            conv(&mut dict, &alloc::format!("{p}.conv2"), out_c, out_c, 3);
            bn(&mut dict, &alloc::format!("{p}.bn2"), out_c);
            if b == 0 && layer > 1 {
                conv(&mut dict, &alloc::format!("{p}.downsample.0"), out_c, block_in, 1);
                bn(&mut dict, &alloc::format!("{p}.downsample.1"), out_c);
            }
        }
        in_c = out_c;
    }
    dict
}

/// Names every tensor a complete backbone weight file must provide.
pub fn required_weight_names() -> Vec<String> {
    random_state_dict(0).keys().map(|k| k.to_string()).collect()
}
