#![allow(dead_code)]

use std::path::Path;

use sfae::config::{BackboneConfig, DatasetConfig, ExperimentConfig, TrainSettings};
use sfae_core::features::LayerSelection;
use sfae_core::models::ModelKind;
use sfae_core::phantom::PhantomConfig;
use sfae_core::scoring::ScoringConfig;

pub fn tiny_generator() -> PhantomConfig {
    PhantomConfig {
        slices: 16,
        rows: 72,
        cols: 72,
        n_center_slices: 12,
        out_size: 64,
        ..PhantomConfig::default()
    }
}

/// Three small phantom volumes, a few training steps, random backbone.
pub fn tiny_config(kinds: &[ModelKind], seeds: &[u64], dir: &Path) -> ExperimentConfig {
    ExperimentConfig {
        dataset: DatasetConfig::Phantom {
            n_volumes: 3,
            seed: 0,
            generator: tiny_generator(),
        },
        kinds: kinds.to_vec(),
        selections: vec![LayerSelection::standard()],
        seeds: seeds.to_vec(),
        train: TrainSettings {
            steps: 3,
            batch_size: Some(4),
            val_interval: 3,
            calibration_steps: 2,
            ..TrainSettings::default()
        },
        scoring: ScoringConfig {
            target_size: 64,
            ..ScoringConfig::default()
        },
        backbone: BackboneConfig {
            allow_random: true,
            ..BackboneConfig::default()
        },
        overlays: 1,
        output_dir: dir.to_path_buf(),
        ..ExperimentConfig::default()
    }
}

/// Innermost error of a chain of path annotations.
pub fn root(e: &sfae::Error) -> &sfae::Error {
    match e {
        sfae::Error::Path { source, .. } => root(source),
        other => other,
    }
}
