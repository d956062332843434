//! Versioned model checkpoints stored as tensor archives.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sfae_core::backbone::StateDict;
use sfae_core::features::LayerSelection;
use sfae_core::models::{build_baseline, FeatureAeSpec, Model, ModelKind};
use sfae_core::nn::Adam;
use sfae_core::training::{TrainConfig, TrainState};

use crate::archive::{Archive, ArchiveTensor};
use crate::error::{Context, Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

const WEIGHT_PREFIX: &str = "model.";
const M_PREFIX: &str = "adam.m.";
const V_PREFIX: &str = "adam.v.";

/// Everything needed to rebuild a model and to tell where it came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub version: u32,
    pub kind: ModelKind,
    /// `(C, H, W)` of the model input.
    pub geometry: [usize; 3],
    /// Layer selection for feature-space models.
    pub selection: Option<LayerSelection>,
    /// Architecture of the strided autoencoders; `None` for 1×1 models.
    pub spec: Option<FeatureAeSpec>,
    pub seed: u64,
    pub step: usize,
    pub train_config: TrainConfig,
    /// SSIM dynamic range frozen during training.
    pub dynamic_range: f64,
    pub config_hash: String,
    pub adam_step: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub weights: StateDict,
    /// Adam moments per parameter, in parameter order.
    #[allow(clippy::type_complexity)]
    pub moments: Option<(Vec<Vec<f32>>, Vec<Vec<f32>>)>,
}

impl Checkpoint {
    pub fn from_state(state: &TrainState, selection: Option<&LayerSelection>, config_hash: &str) -> Result<Self> {
        let model = &state.model;
        let geometry = model
            .geometry()
            .ok_or_else(|| Error::Format("only models built for a fixed geometry can be checkpointed".into()))?;
        let spec = match model.kind {
            ModelKind::DfrStyle | ModelKind::DfrStyleSsim => None,
            _ => Some(FeatureAeSpec::new(geometry[0])),
        };
        let opt = &state.optimizer;
        Ok(Self {
            meta: CheckpointMeta {
                version: CHECKPOINT_VERSION,
                kind: model.kind,
                geometry,
                selection: selection.cloned(),
                spec,
                seed: model.seed,
                step: state.step,
                train_config: state.config.clone(),
                dynamic_range: state.dynamic_range,
                config_hash: config_hash.to_string(),
                adam_step: opt.step,
            },
            weights: model.state_dict(),
            moments: (!opt.first_moments.is_empty()).then(|| (opt.first_moments.clone(), opt.second_moments.clone())),
        })
    }

    /// Rebuilds the model with the stored weights.
    pub fn model(&self) -> Result<Model> {
        let [c, h, w] = self.meta.geometry;
        let mut model = build_baseline(self.meta.kind, (c, h, w), self.meta.seed)?;
        model.load_state_dict(&self.weights)?;
        Ok(model)
    }

    /// Optimizer state to resume training from.
    pub fn optimizer(&self) -> Adam {
        let mut adam = Adam::new(self.meta.train_config.lr);
        adam.step = self.meta.adam_step;
        if let Some((m, v)) = &self.moments {
            adam.first_moments = m.clone();
            adam.second_moments = v.clone();
        }
        adam
    }

    pub fn to_archive(&self) -> Result<Archive> {
        let mut archive = Archive::new(serde_json::to_value(&self.meta)?);
        for (name, (shape, values)) in &self.weights {
            archive.insert(format!("{WEIGHT_PREFIX}{name}"), ArchiveTensor::f32(shape.clone(), values.clone())?);
        }
        if let Some((m, v)) = &self.moments {
            for (i, (m, v)) in m.iter().zip(v).enumerate() {
                archive.insert(format!("{M_PREFIX}{i:04}"), ArchiveTensor::f32(vec![m.len()], m.clone())?);
                archive.insert(format!("{V_PREFIX}{i:04}"), ArchiveTensor::f32(vec![v.len()], v.clone())?);
            }
        }
        Ok(archive)
    }

    pub fn from_archive(archive: &Archive) -> Result<Self> {
        let meta: CheckpointMeta = serde_json::from_value(archive.metadata.clone())?;
        if meta.version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {}", meta.version)));
        }
        let mut weights = StateDict::new();
        let (mut m, mut v) = (Vec::new(), Vec::new());
        for (name, t) in &archive.tensors {
            let values = t
                .as_f32()
                .ok_or_else(|| Error::Format(format!("{name} must be f32")))?
                .to_vec();
            if let Some(key) = name.strip_prefix(WEIGHT_PREFIX) {
                weights.insert(key.to_string(), (t.shape.clone(), values));
            } else if name.starts_with(M_PREFIX) {
                m.push(values);
            } else if name.starts_with(V_PREFIX) {
                v.push(values);
            } else {
                return Err(Error::Format(format!("unexpected tensor {name:?} in checkpoint")));
            }
        }
        if m.len() != v.len() {
            return Err(Error::Format("incomplete optimizer moments".into()));
        }
        Ok(Self {
            meta,
            weights,
            moments: (!m.is_empty()).then_some((m, v)),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_archive()?.save(path).at(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_archive(&Archive::load(path).at(path)?).at(path)
    }
}
