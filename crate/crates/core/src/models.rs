//! Reconstruction models: the strided feature autoencoder and the baselines
//! it is compared against.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::StateDict;
use crate::data::SliceBatch;
use crate::error::{bail, Result};
use crate::features::FeatureStack;
use crate::nn::{BatchNorm2d, Conv2d, ConvTranspose2d, Dropout, Layer, LeakyRelu, Mode, Param, Sequential};
use crate::tensor::Tensor;

/// Hyperparameters of the strided convolutional autoencoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureAeSpec {
    pub in_channels: usize,
    pub encoder_channels: Vec<usize>,
    pub kernel: usize,
    pub stride: usize,
    pub negative_slope: f32,
    pub dropout_p: f32,
    pub bottleneck_kernel: usize,
    pub bottleneck_channels: usize,
}

impl FeatureAeSpec {
    pub fn new(in_channels: usize) -> Self {
        Self {
            in_channels,
            encoder_channels: vec![100, 150, 200, 300],
            kernel: 5,
            stride: 2,
            negative_slope: 0.01,
            dropout_p: 0.1,
            bottleneck_kernel: 5,
            bottleneck_channels: 300,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.encoder_channels.is_empty() || self.encoder_channels.contains(&0) {
            bail!(Spec, "channel counts must be positive");
        }
        if self.kernel == 0 || self.kernel.is_multiple_of(2) || self.bottleneck_kernel == 0 || self.bottleneck_kernel.is_multiple_of(2) {
            bail!(Spec, "kernels must be odd and positive");
        }
        if self.stride == 0 || self.bottleneck_channels == 0 {
            bail!(Spec, "stride and bottleneck channels must be positive");
        }
        if !(self.negative_slope > 0.0) || !(0.0..1.0).contains(&self.dropout_p) {
            bail!(Spec, "invalid slope {} or dropout {}", self.negative_slope, self.dropout_p);
        }
        Ok(())
    }

    /// Factor the input height and width must be divisible by.
    pub fn spatial_divisor(&self) -> usize {
        self.stride.pow(self.encoder_channels.len() as u32)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    FeatureAe,
    ImageAeMse,
    ImageAeSsim,
    DfrStyle,
    DfrStyleSsim,
}

/// What a model consumes: backbone features or raw slices.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputSpace {
    Features,
    Images,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    OneMinusMssim,
    Mse,
}

impl ModelKind {
    pub const ALL: [ModelKind; 5] = [
        ModelKind::FeatureAe,
        ModelKind::ImageAeMse,
        ModelKind::ImageAeSsim,
        ModelKind::DfrStyle,
        ModelKind::DfrStyleSsim,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::FeatureAe => "feature_ae",
            ModelKind::ImageAeMse => "image_ae_mse",
            ModelKind::ImageAeSsim => "image_ae_ssim",
            ModelKind::DfrStyle => "dfr_style",
            ModelKind::DfrStyleSsim => "dfr_style_ssim",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match Self::ALL.iter().find(|k| k.name() == s) {
            Some(&k) => Ok(k),
            None => bail!(Spec, "unknown model kind {s:?}"),
        }
    }

    pub fn space(self) -> InputSpace {
        match self {
            ModelKind::ImageAeMse | ModelKind::ImageAeSsim => InputSpace::Images,
            _ => InputSpace::Features,
        }
    }

    pub fn loss(self) -> LossKind {
        match self {
            ModelKind::ImageAeMse | ModelKind::DfrStyle => LossKind::Mse,
            _ => LossKind::OneMinusMssim,
        }
    }

    pub fn default_batch_size(self) -> usize {
        match self {
            ModelKind::DfrStyle | ModelKind::DfrStyleSsim => 4,
            _ => 64,
        }
    }
}

/// Input handed to a model, tagged by the space it lives in.
#[derive(Clone, Copy, Debug)]
pub enum ModelInput<'a> {
    Features(&'a FeatureStack),
    Images(&'a SliceBatch),
}

impl<'a> ModelInput<'a> {
    pub fn space(&self) -> InputSpace {
        match self {
            ModelInput::Features(_) => InputSpace::Features,
            ModelInput::Images(_) => InputSpace::Images,
        }
    }

    pub fn tensor(&self) -> &'a Tensor {
        match self {
            ModelInput::Features(f) => &f.features,
            ModelInput::Images(b) => &b.images,
        }
    }
}

/// Encoder/decoder pair plus the metadata needed to check inputs.
#[derive(Clone, Debug)]
pub struct Model {
    pub kind: ModelKind,
    pub seed: u64,
    in_channels: usize,
    spatial_divisor: usize,
    geometry: Option<[usize; 3]>,
    encoder: Sequential,
    decoder: Sequential,
    /// Encoder layer indices whose outputs are reported as stage maps.
    taps: Vec<usize>,
}

fn push_block(seq: &mut Sequential, conv: Layer, name: &str, channels: usize, slope: f32, dropout: Option<(f32, u64)>) {
    seq.push(conv);
    seq.push(Layer::BatchNorm(BatchNorm2d::new(&alloc::format!("{name}.bn"), channels)));
    seq.push(Layer::LeakyRelu(LeakyRelu::new(slope)));
    if let Some((p, seed)) = dropout {
        seq.push(Layer::Dropout(Dropout::new(p, seed)));
    }
}

/// Builds the strided autoencoder. Parameters depend only on `spec` and `seed`.
pub fn build_feature_ae(spec: &FeatureAeSpec, seed: u64) -> Result<Model> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pad = spec.kernel / 2;
    let slope = spec.negative_slope;
    let mut encoder = Sequential::default();
    let mut taps = Vec::new();
    let mut prev = spec.in_channels;
    for (i, &c) in spec.encoder_channels.iter().enumerate() {
        let name = alloc::format!("encoder.{i}");
        let conv = Conv2d::new(&alloc::format!("{name}.conv"), prev, c, spec.kernel, spec.stride, pad, false, &mut rng);
        push_block(&mut encoder, Layer::Conv(conv), &name, c, slope, Some((spec.dropout_p, seed ^ (i as u64 + 1))));
        taps.push(encoder.layers.len() - 1);
        prev = c;
    }
    let bottleneck = Conv2d::new(
        "bottleneck",
        prev,
        spec.bottleneck_channels,
        spec.bottleneck_kernel,
        1,
        spec.bottleneck_kernel / 2,
        false,
        &mut rng,
    );
    encoder.push(Layer::Conv(bottleneck));

    let mut decoder = Sequential::default();
    let mut prev = spec.bottleneck_channels;
    let n = spec.encoder_channels.len();
    for i in 0..n {
        // Mirror the encoder; the last stage keeps the first encoder width.
        let c = if i + 1 < n { spec.encoder_channels[n - 2 - i] } else { spec.encoder_channels[0] };
        let name = alloc::format!("decoder.{i}");
        let deconv = ConvTranspose2d::new(&alloc::format!("{name}.deconv"), prev, c, spec.kernel, spec.stride, pad, spec.stride - 1, &mut rng);
        push_block(&mut decoder, Layer::ConvTranspose(deconv), &name, c, slope, Some((spec.dropout_p, seed ^ (0x100 + i as u64))));
        prev = c;
    }
    decoder.push(Layer::Conv(Conv2d::new("head", prev, spec.in_channels, 1, 1, 0, true, &mut rng)));
    Ok(Model {
        kind: ModelKind::FeatureAe,
        seed,
        in_channels: spec.in_channels,
        spatial_divisor: spec.spatial_divisor(),
        geometry: None,
        encoder,
        decoder,
        taps,
    })
}

/// Channel schedule of the 1×1 baseline for `in_channels` inputs.
pub fn dfr_channels(in_channels: usize) -> [usize; 5] {
    [128, 64, (in_channels / 2).max(1), 64, 128]
}

fn build_dfr(kind: ModelKind, in_channels: usize, seed: u64) -> Model {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let widths = dfr_channels(in_channels);
    let mut encoder = Sequential::default();
    let mut decoder = Sequential::default();
    let mut taps = Vec::new();
    let mut prev = in_channels;
    for (i, &c) in widths.iter().enumerate() {
        let (seq, name) = if i < 3 {
            (&mut encoder, alloc::format!("encoder.{i}"))
        } else {
            (&mut decoder, alloc::format!("decoder.{}", i - 3))
        };
        let conv = Conv2d::new(&alloc::format!("{name}.conv"), prev, c, 1, 1, 0, false, &mut rng);
        push_block(seq, Layer::Conv(conv), &name, c, 0.01, None);
        if i < 3 {
            taps.push(seq.layers.len() - 1);
        }
        prev = c;
    }
    decoder.push(Layer::Conv(Conv2d::new("head", prev, in_channels, 1, 1, 0, true, &mut rng)));
    Model {
        kind,
        seed,
        in_channels,
        spatial_divisor: 1,
        geometry: None,
        encoder,
        decoder,
        taps,
    }
}

/// Builds any model kind for a fixed `(C, H, W)` input geometry.
pub fn build_baseline(kind: ModelKind, geometry: (usize, usize, usize), seed: u64) -> Result<Model> {
    let (c, h, w) = geometry;
    if c == 0 || h == 0 || w == 0 {
        bail!(Spec, "empty geometry {c}x{h}x{w}");
    }
    let mut model = match kind {
        ModelKind::FeatureAe | ModelKind::ImageAeMse | ModelKind::ImageAeSsim => {
            if kind.space() == InputSpace::Images && c != 1 {
                bail!(Spec, "image models take one channel, got {c}");
            }
            let mut m = build_feature_ae(&FeatureAeSpec::new(c), seed)?;
            m.kind = kind;
            m
        }
        ModelKind::DfrStyle | ModelKind::DfrStyleSsim => build_dfr(kind, c, seed),
    };
    if h % model.spatial_divisor != 0 || w % model.spatial_divisor != 0 {
        bail!(Spec, "{h}x{w} is not divisible by {}", model.spatial_divisor);
    }
    model.geometry = Some([c, h, w]);
    Ok(model)
}

impl Model {
    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn geometry(&self) -> Option<[usize; 3]> {
        self.geometry
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let [_, c, h, w] = x.shape();
        if let Some(g) = self.geometry {
            if g != [c, h, w] {
                bail!(Contract, "model built for {:?}, got input {:?}", g, [c, h, w]);
            }
        }
        if c != self.in_channels {
            bail!(Contract, "model expects {} channels, got {c}", self.in_channels);
        }
        if h % self.spatial_divisor != 0 || w % self.spatial_divisor != 0 {
            bail!(Spec, "{h}x{w} is not divisible by {}", self.spatial_divisor);
        }
        Ok(())
    }

    /// Inference-mode reconstruction; never mutates the model.
    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let z = self.encoder.infer(x)?;
        self.decoder.infer(&z)
    }

    /// Training-mode forward pass that caches activations for [`Model::backward`].
    pub fn forward_train(&mut self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let z = self.encoder.forward(x, Mode::Train)?;
        self.decoder.forward(&z, Mode::Train)
    }

    /// Accumulates parameter gradients for the last training forward pass.
    pub fn backward(&mut self, dy: &Tensor) -> Result<()> {
        let dz = self.decoder.backward(dy, true)?.expect("decoder input grad");
        self.encoder.backward(&dz, false)?;
        Ok(())
    }

    /// Output shape of every encoder stage, in `(C, H, W)` order.
    pub fn encoder_stage_shapes(&self, height: usize, width: usize) -> Result<Vec<[usize; 3]>> {
        let mut h = Tensor::zeros([1, self.in_channels, height, width]);
        self.check_input(&h)?;
        let mut shapes = Vec::new();
        for (i, layer) in self.encoder.layers.iter().enumerate() {
            h = layer.infer(&h)?;
            if self.taps.contains(&i) {
                shapes.push([h.channels(), h.height(), h.width()]);
            }
        }
        Ok(shapes)
    }

    /// Bottleneck output shape.
    pub fn latent_shape(&self, height: usize, width: usize) -> Result<[usize; 3]> {
        let x = Tensor::zeros([1, self.in_channels, height, width]);
        self.check_input(&x)?;
        let z = self.encoder.infer(&x)?;
        Ok([z.channels(), z.height(), z.width()])
    }

    pub fn encoder_layers(&self) -> &[Layer] {
        &self.encoder.layers
    }

    pub fn decoder_layers(&self) -> &[Layer] {
        &self.decoder.layers
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut p = self.encoder.params();
        p.extend(self.decoder.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.encoder.params_mut();
        p.extend(self.decoder.params_mut());
        p
    }

    pub fn parameter_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().into_iter().for_each(|p| p.zero_grad());
    }

    pub fn reseed_dropout(&mut self, seed: u64) {
        self.encoder.reseed_dropout(seed);
        self.decoder.reseed_dropout(seed ^ 0xD1B5_4A32_D192_ED03);
    }

    pub fn set_dropout(&mut self, p: f32) {
        self.encoder.set_dropout(p);
        self.decoder.set_dropout(p);
    }

    /// Parameters and normalization statistics keyed by name.
    pub fn state_dict(&self) -> StateDict {
        let mut sd = BTreeMap::new();
        for p in self.params() {
            sd.insert(p.name.clone(), (p.shape.clone(), p.value.clone()));
        }
        for seq in [&self.encoder, &self.decoder] {
            for b in seq.buffers() {
                sd.insert(b.name, (vec![b.value.len()], b.value));
            }
        }
        sd
    }

    /// Replaces every parameter and statistic; keys and shapes must match exactly.
    pub fn load_state_dict(&mut self, sd: &StateDict) -> Result<()> {
        let expected = self.state_dict();
        if expected.len() != sd.len() || expected.keys().any(|k| !sd.contains_key(k)) {
            let extra: Vec<&String> = sd.keys().filter(|k| !expected.contains_key(*k)).collect();
            let missing: Vec<&String> = expected.keys().filter(|k| !sd.contains_key(*k)).collect();
            bail!(Format, "state mismatch: missing {missing:?}, unexpected {extra:?}");
        }
        for (name, (shape, _)) in &expected {
            if &sd[name].0 != shape {
                bail!(Format, "{name}: expected shape {shape:?}, got {:?}", sd[name].0);
            }
        }
        for p in self.params_mut() {
            p.value.clone_from(&sd[&p.name].1);
        }
        for (name, buf) in self.encoder.buffers_mut().into_iter().chain(self.decoder.buffers_mut()) {
            buf.clone_from(&sd[&name].1);
        }
        Ok(())
    }
}

/// Inference-mode reconstruction with a check that the input lives in the
/// model's space.
pub fn reconstruct(model: &Model, input: ModelInput<'_>) -> Result<Tensor> {
    if input.space() != model.kind.space() {
        bail!(Contract, "{} consumes {:?}, got {:?}", model.kind.name(), model.kind.space(), input.space());
    }
    model.infer(input.tensor())
}
