//! Experiment configuration and its fingerprint.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use sfae_core::features::LayerSelection;
use sfae_core::models::{InputSpace, ModelKind};
use sfae_core::phantom::PhantomConfig;
use sfae_core::scoring::ScoringConfig;
use sfae_core::ssim::SsimConfig;
use sfae_core::training::TrainConfig;

use crate::error::{Context, Error, Result};

/// Directory searched for `resnet18.sfta` when no weight path is configured.
pub const WEIGHTS_DIR_ENV: &str = "SFAE_WEIGHTS_DIR";
pub const WEIGHTS_FILE: &str = "resnet18.sfta";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    Phantom {
        #[serde(default = "default_n_volumes")]
        n_volumes: usize,
        #[serde(default)]
        seed: u64,
        #[serde(default)]
        generator: PhantomConfig,
    },
    /// Every `.nii`, `.nii.gz` and `.sfta` volume in `path`.
    NiftiDir {
        path: PathBuf,
        #[serde(default)]
        seed: u64,
        #[serde(default = "default_center_slices")]
        n_center_slices: usize,
        #[serde(default = "default_out_size")]
        out_size: usize,
    },
}

fn default_n_volumes() -> usize {
    50
}

fn default_center_slices() -> usize {
    sfae_core::data::DEFAULT_CENTER_SLICES
}

fn default_out_size() -> usize {
    sfae_core::data::DEFAULT_SLICE_SIZE
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig::Phantom {
            n_volumes: default_n_volumes(),
            seed: 0,
            generator: PhantomConfig::default(),
        }
    }
}

impl DatasetConfig {
    pub fn slice_size(&self) -> usize {
        match self {
            DatasetConfig::Phantom { generator, .. } => generator.out_size,
            DatasetConfig::NiftiDir { out_size, .. } => *out_size,
        }
    }
}

/// Training settings shared by every cell; the loss follows the model kind.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    pub lr: f32,
    pub steps: usize,
    /// `None` uses each kind's reference batch size.
    pub batch_size: Option<usize>,
    pub val_interval: usize,
    pub calibration_steps: usize,
    /// Save a weights-only checkpoint at validations divisible by this.
    pub checkpoint_interval: Option<usize>,
}

impl Default for TrainSettings {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            lr: t.lr,
            steps: t.steps,
            batch_size: None,
            val_interval: t.val_interval,
            calibration_steps: t.calibration_steps,
            checkpoint_interval: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    /// Weight archive; falls back to `$SFAE_WEIGHTS_DIR/resnet18.sfta`.
    pub weights: Option<PathBuf>,
    /// Use a seeded random backbone when no weights are found.
    pub allow_random: bool,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureCacheConfig {
    pub enabled: bool,
    /// Larger caches fall back to extracting features per batch.
    pub memory_budget_mb: usize,
}

impl Default for FeatureCacheConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            memory_budget_mb: 3072,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub kinds: Vec<ModelKind>,
    pub selections: Vec<LayerSelection>,
    pub seeds: Vec<u64>,
    pub train: TrainSettings,
    pub ssim: SsimConfig,
    pub scoring: ScoringConfig,
    pub backbone: BackboneConfig,
    pub feature_cache: FeatureCacheConfig,
    /// Overlay PNGs written per cell for the first anomalous test slices.
    pub overlays: usize,
    /// Persist every test anomaly map of every cell.
    pub save_maps: bool,
    pub workers: usize,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetConfig::default(),
            kinds: vec![ModelKind::FeatureAe],
            selections: vec![LayerSelection::standard()],
            seeds: (0..5).collect(),
            train: TrainSettings::default(),
            ssim: SsimConfig::default(),
            scoring: ScoringConfig::default(),
            backbone: BackboneConfig::default(),
            feature_cache: FeatureCacheConfig::default(),
            overlays: 4,
            save_maps: false,
            workers: 1,
            output_dir: PathBuf::from("runs/experiment"),
        }
    }
}

/// Fields that change where or how fast a run happens but not its results.
const UNHASHED: [&str; 2] = ["output_dir", "workers"];

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(e.to_string())).at(path)?;
        Self::from_json(&text).at(path)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.seeds.is_empty() {
            return fail("at least one seed is required".into());
        }
        if self.kinds.is_empty() || self.selections.is_empty() {
            return fail("kinds and selections must be nonempty".into());
        }
        if has_duplicates(&self.seeds) || has_duplicates(&self.kinds) || has_duplicates(&self.selections) {
            return fail("seeds, kinds and selections must not repeat".into());
        }
        if self.workers == 0 {
            return fail("workers must be at least 1".into());
        }
        match &self.dataset {
            DatasetConfig::Phantom { n_volumes, generator, .. } => {
                if *n_volumes < 3 {
                    return fail(format!("a phantom dataset needs at least 3 volumes, got {n_volumes}"));
                }
                if generator.n_center_slices > generator.slices {
                    return fail("phantom volumes have fewer slices than n_center_slices".into());
                }
            }
            DatasetConfig::NiftiDir { path, .. } => {
                if !path.is_dir() {
                    return fail(format!("dataset directory {} does not exist", path.display()));
                }
            }
        }
        if let Some(w) = &self.backbone.weights {
            if !w.is_file() {
                return fail(format!("backbone weights {} do not exist", w.display()));
            }
        }
        let size = self.dataset.slice_size();
        for &kind in &self.kinds {
            let cfg = self.train_config(kind, 0);
            cfg.validate(kind).map_err(|e| Error::Config(e.to_string()))?;
            if kind.space() == InputSpace::Features {
                for sel in &self.selections {
                    let (_, h, _) = sfae_core::features::output_geometry(sel, size);
                    if kind == ModelKind::FeatureAe && h % 16 != 0 {
                        return fail(format!("{} features are {h} pixels wide, not divisible by 16", sel.label()));
                    }
                }
            } else if size % 16 != 0 {
                return fail(format!("slice size {size} is not divisible by 16"));
            }
        }
        if self.scoring.target_size != size {
            return fail(format!("scoring target size {} must equal the slice size {size}", self.scoring.target_size));
        }
        Ok(())
    }

    /// Training configuration of one cell.
    pub fn train_config(&self, kind: ModelKind, seed: u64) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            lr: t.lr,
            batch_size: t.batch_size.unwrap_or(kind.default_batch_size()),
            steps: t.steps,
            seed,
            val_interval: t.val_interval,
            calibration_steps: t.calibration_steps,
            ssim: self.ssim,
            ..TrainConfig::for_kind(kind)
        }
    }

    pub fn needs_backbone(&self) -> bool {
        self.kinds.iter().any(|k| k.space() == InputSpace::Features)
    }

    /// SHA-256 of the canonical JSON form, ignoring [`UNHASHED`] fields.
    pub fn hash(&self) -> String {
        let mut value = serde_json::to_value(self).expect("config serializes");
        if let Some(map) = value.as_object_mut() {
            for key in UNHASHED {
                map.remove(key);
            }
        }
        // serde_json maps are key-sorted, so this form is canonical.
        let text = serde_json::to_string(&value).expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    /// Weight file to load, if any.
    pub fn weights_path(&self) -> Option<PathBuf> {
        if let Some(w) = &self.backbone.weights {
            return Some(w.clone());
        }
        let dir = std::env::var_os(WEIGHTS_DIR_ENV)?;
        let p = Path::new(&dir).join(WEIGHTS_FILE);
        p.is_file().then_some(p)
    }
}

fn has_duplicates<T: PartialEq>(v: &[T]) -> bool {
    v.iter().enumerate().any(|(i, a)| v[..i].contains(a))
}
