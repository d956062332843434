//! Optimization of reconstruction models on normal slices.

use alloc::vec::Vec;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::StateDict;
use crate::data::{DatasetSplit, SliceBatch};
use crate::error::{bail, Result};
use crate::features::{FeatureCache, FeatureExtractor, FeatureStack, LayerSelection};
use crate::models::{InputSpace, LossKind, Model, ModelInput, ModelKind};
use crate::nn::Adam;
use crate::ssim::{ssim_loss, DynamicRangeCalibrator, SsimConfig};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f32,
    pub batch_size: usize,
    pub steps: usize,
    pub loss: LossKind,
    pub seed: u64,
    pub val_interval: usize,
    /// Steps over which the feature dynamic range is estimated before freezing.
    pub calibration_steps: usize,
    /// Window and constants for the SSIM loss; the dynamic range is replaced
    /// by the calibrated value.
    pub ssim: SsimConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            batch_size: 64,
            steps: 10_000,
            loss: LossKind::OneMinusMssim,
            seed: 0,
            val_interval: 500,
            calibration_steps: 100,
            ssim: SsimConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Defaults adjusted to `kind`: its loss and reference batch size.
    pub fn for_kind(kind: ModelKind) -> Self {
        Self {
            batch_size: kind.default_batch_size(),
            loss: kind.loss(),
            ..Self::default()
        }
    }

    pub fn validate(&self, kind: ModelKind) -> Result<()> {
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            bail!(Spec, "learning rate {} must be finite and non-negative", self.lr);
        }
        if self.steps == 0 || self.batch_size == 0 || self.val_interval == 0 {
            bail!(Spec, "steps, batch_size and val_interval must be positive");
        }
        if self.loss != kind.loss() {
            bail!(Spec, "{} trains with {:?}, config asks for {:?}", kind.name(), kind.loss(), self.loss);
        }
        self.ssim.validate()
    }
}

/// How slices reach a model: as images, through the backbone, or from
/// precomputed features of each split.
#[derive(Clone, Copy, Debug)]
pub enum Lifting<'a> {
    Images,
    Extract {
        extractor: &'a FeatureExtractor,
        selection: &'a LayerSelection,
    },
    Cached {
        train: Option<&'a FeatureCache>,
        val: Option<&'a FeatureCache>,
        test: Option<&'a FeatureCache>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// A batch after lifting into the model's input space.
#[derive(Clone, Debug)]
pub enum Lifted {
    Features(FeatureStack),
    Images(SliceBatch),
}

impl Lifted {
    pub fn input(&self) -> ModelInput<'_> {
        match self {
            Lifted::Features(f) => ModelInput::Features(f),
            Lifted::Images(b) => ModelInput::Images(b),
        }
    }
}

impl Lifting<'_> {
    pub fn space(&self) -> InputSpace {
        match self {
            Lifting::Images => InputSpace::Images,
            _ => InputSpace::Features,
        }
    }

    /// Lifts slices `indices` of `source`, which is the `split` partition.
    pub fn lift(&self, source: &SliceBatch, indices: &[usize], split: Split) -> Result<Lifted> {
        Ok(match self {
            Lifting::Images => Lifted::Images(source.select(indices)),
            Lifting::Extract { extractor, selection } => Lifted::Features(extractor.extract(&source.select(indices), selection)?),
            Lifting::Cached { train, val, test } => {
                let cache = match split {
                    Split::Train => train,
                    Split::Val => val,
                    Split::Test => test,
                };
                let Some(cache) = cache else {
                    bail!(Contract, "no cached features for the {split:?} split");
                };
                if cache.len() != source.len() {
                    bail!(Contract, "feature cache holds {} slices, split has {}", cache.len(), source.len());
                }
                Lifted::Features(cache.gather(indices))
            }
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

/// Snapshot of the weights with the lowest validation loss so far.
#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    pub step: usize,
    pub val_loss: f64,
    pub weights: StateDict,
}

/// Progress notifications emitted by [`train_with`].
#[derive(Debug)]
pub enum TrainEvent<'a> {
    Step { step: usize, loss: f64 },
    Validation {
        step: usize,
        loss: f64,
        dynamic_range: f64,
        model: &'a Model,
    },
}

/// Model, optimizer state and bookkeeping after training.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: Model,
    pub optimizer: Adam,
    pub step: usize,
    pub config: TrainConfig,
    /// Frozen SSIM dynamic range `L`.
    pub dynamic_range: f64,
    pub curve: Vec<CurvePoint>,
    pub best: Option<Snapshot>,
    /// Number of batches that went through feature lifting.
    pub lifted_batches: usize,
}

impl TrainState {
    /// SSIM settings with the frozen dynamic range applied.
    pub fn ssim_config(&self) -> SsimConfig {
        self.config.ssim.with_dynamic_range(self.dynamic_range)
    }
}

/// Loss value and its gradient with respect to the reconstruction.
pub fn loss_and_grad(recon: &Tensor, target: &Tensor, loss: LossKind, cfg: &SsimConfig, want_grad: bool) -> Result<(f64, Option<Tensor>)> {
    recon.ensure_same_shape(target, "loss")?;
    match loss {
        LossKind::OneMinusMssim => {
            let l = ssim_loss(recon, target, cfg, want_grad, false)?;
            Ok((l.loss, l.grad_x))
        }
        LossKind::Mse => {
            let n = recon.len() as f64;
            let mut sum = 0.0f64;
            let mut grad = want_grad.then(|| Tensor::zeros(recon.shape()));
            for (i, (&r, &t)) in recon.data().iter().zip(target.data()).enumerate() {
                let d = r as f64 - t as f64;
                sum += d * d;
                if let Some(g) = grad.as_mut() {
                    g.data_mut()[i] = (2.0 * d / n) as f32;
                }
            }
            Ok((sum / n, grad))
        }
    }
}

fn check_normal(batch: &SliceBatch, indices: &[usize]) -> Result<()> {
    if let Some(labels) = &batch.labels {
        if let Some(&i) = indices.iter().find(|&&i| labels[i] != 0) {
            bail!(Data, "anomalous slice {:?} in the training stream", batch.ids[i]);
        }
    }
    Ok(())
}

/// Deterministic epoch-shuffled index stream.
struct Sampler {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
}

impl Sampler {
    fn new(n: usize, seed: u64) -> Self {
        let mut s = Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            order: (0..n).collect(),
            cursor: n,
        };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        self.order.shuffle(&mut self.rng);
        self.cursor = 0;
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.cursor == self.order.len() {
                self.reshuffle();
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }
}

/// Indices of validation slices that carry no anomaly.
fn normal_indices(batch: &SliceBatch) -> Vec<usize> {
    (0..batch.len())
        .filter(|&i| batch.labels.as_ref().is_none_or(|l| l[i] == 0))
        .collect()
}

pub fn train(model: Model, data: &DatasetSplit, lifting: Lifting<'_>, cfg: &TrainConfig) -> Result<TrainState> {
    train_with(model, data, lifting, cfg, &mut |_| {})
}

/// Runs exactly `cfg.steps` Adam updates, reporting progress to `observer`.
pub fn train_with(
    mut model: Model,
    data: &DatasetSplit,
    lifting: Lifting<'_>,
    cfg: &TrainConfig,
    observer: &mut dyn FnMut(TrainEvent<'_>),
) -> Result<TrainState> {
    cfg.validate(model.kind)?;
    if lifting.space() != model.kind.space() {
        bail!(Contract, "{} needs {:?} input, lifting provides {:?}", model.kind.name(), model.kind.space(), lifting.space());
    }
    if data.train.is_empty() {
        bail!(Data, "training split is empty");
    }
    let feature_space = model.kind.space() == InputSpace::Features;
    model.reseed_dropout(cfg.seed);
    let mut optimizer = Adam::new(cfg.lr);
    let mut sampler = Sampler::new(data.train.len(), cfg.seed);
    let mut calibrator = DynamicRangeCalibrator::new();
    let mut dynamic_range = 1.0;
    let val_idx = normal_indices(&data.val);
    let mut curve = Vec::with_capacity(cfg.steps);
    let mut best: Option<Snapshot> = None;
    let mut lifted_batches = 0;

    for step in 1..=cfg.steps {
        let idx = sampler.next_batch(cfg.batch_size);
        check_normal(&data.train, &idx)?;
        let lifted = lifting.lift(&data.train, &idx, Split::Train)?;
        if feature_space {
            lifted_batches += 1;
        }
        let input = lifted.input().tensor();
        if feature_space && step <= cfg.calibration_steps {
            calibrator.observe(input.data());
            dynamic_range = calibrator.range()?;
        }
        let ssim = cfg.ssim.with_dynamic_range(dynamic_range);

        model.zero_grad();
        let recon = model.forward_train(input)?;
        let (loss, grad) = loss_and_grad(&recon, input, cfg.loss, &ssim, true)?;
        if !loss.is_finite() {
            bail!(Data, "loss diverged at step {step}");
        }
        model.backward(&grad.expect("gradient requested"))?;
        optimizer.update(&mut model.params_mut());
        observer(TrainEvent::Step { step, loss });

        let mut point = CurvePoint {
            step,
            train_loss: loss,
            val_loss: None,
        };
        if step % cfg.val_interval == 0 && !val_idx.is_empty() {
            let mut total = 0.0;
            for chunk in val_idx.chunks(cfg.batch_size) {
                let lifted = lifting.lift(&data.val, chunk, Split::Val)?;
                if feature_space {
                    lifted_batches += 1;
                }
                let x = lifted.input().tensor();
                let recon = model.infer(x)?;
                total += loss_and_grad(&recon, x, cfg.loss, &ssim, false)?.0 * chunk.len() as f64;
            }
            let val = total / val_idx.len() as f64;
            point.val_loss = Some(val);
            if best.as_ref().is_none_or(|b| val < b.val_loss) {
                best = Some(Snapshot {
                    step,
                    val_loss: val,
                    weights: model.state_dict(),
                });
            }
            observer(TrainEvent::Validation {
                step,
                loss: val,
                dynamic_range,
                model: &model,
            });
        }
        curve.push(point);
    }

    Ok(TrainState {
        model,
        optimizer,
        step: cfg.steps,
        config: cfg.clone(),
        dynamic_range,
        curve,
        best,
        lifted_batches,
    })
}

/// `(step, train_loss, val_loss)` for every step.
pub fn training_curve(state: &TrainState) -> &[CurvePoint] {
    &state.curve
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sampler_covers_each_epoch() {
        let mut s = Sampler::new(10, 3);
        let mut first: Vec<usize> = s.next_batch(10);
        first.sort_unstable();
        assert_eq!(first, (0..10).collect::<Vec<_>>());
        let again = Sampler::new(10, 3).next_batch(25);
        assert_eq!(again, Sampler::new(10, 3).next_batch(25));
    }

    #[test]
    fn mse_gradient_matches_definition() {
        let r = Tensor::from_vec([1, 1, 1, 2], vec![1.0, 3.0]).unwrap();
        let t = Tensor::from_vec([1, 1, 1, 2], vec![0.0, 1.0]).unwrap();
        let (l, g) = loss_and_grad(&r, &t, LossKind::Mse, &SsimConfig::default(), true).unwrap();
        assert_eq!(l, 2.5);
        assert_eq!(g.unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn loss_must_match_kind() {
        let mut cfg = TrainConfig::for_kind(ModelKind::ImageAeMse);
        assert!(cfg.validate(ModelKind::ImageAeMse).is_ok());
        cfg.loss = LossKind::OneMinusMssim;
        assert!(cfg.validate(ModelKind::ImageAeMse).is_err());
        assert_eq!(TrainConfig::for_kind(ModelKind::DfrStyleSsim).batch_size, 4);
    }
}
