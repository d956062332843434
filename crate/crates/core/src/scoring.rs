//! Pixel anomaly maps and image-level scores from reconstructions.

use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::data::SliceId;
use crate::error::{bail, Result};
use crate::models::{LossKind, ModelKind};
use crate::resize::resize_plane;
use crate::ssim::{ssim_map, SsimConfig};
use crate::tensor::Tensor;

/// Reduction of a pixel map to one image score.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Reducer {
    #[default]
    Mean,
    Max,
    /// Mean of the `k` largest pixel scores.
    TopKMean { k: usize },
}

impl Reducer {
    pub fn reduce(&self, scores: &[f32]) -> f64 {
        if scores.is_empty() {
            return 0.0;
        }
        match *self {
            Reducer::Mean => scores.iter().map(|&v| v as f64).sum::<f64>() / scores.len() as f64,
            Reducer::Max => scores.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64,
            Reducer::TopKMean { k } => {
                let k = k.clamp(1, scores.len());
                let mut sorted = scores.to_vec();
                sorted.sort_unstable_by(|a, b| b.total_cmp(a));
                sorted[..k].iter().map(|&v| v as f64).sum::<f64>() / k as f64
            }
        }
    }
}

/// Per-pixel dissimilarity used for the map.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    /// `(1 − SSIM) / 2`.
    Ssim,
    /// Channel-mean squared residual divided by `L²`, capped at 1.
    SquaredError,
}

impl ScoreKind {
    /// Scores a model with the dissimilarity it was trained to minimize.
    pub fn for_kind(kind: ModelKind) -> Self {
        match kind.loss() {
            LossKind::OneMinusMssim => ScoreKind::Ssim,
            LossKind::Mse => ScoreKind::SquaredError,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScoringConfig {
    pub target_size: usize,
    pub reducer: Reducer,
    /// `None` picks [`ScoreKind::for_kind`].
    pub score: Option<ScoreKind>,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        Self {
            target_size: 128,
            reducer: Reducer::Mean,
            score: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnomalyMap {
    pub id: SliceId,
    pub size: usize,
    /// `size × size` scores in `[0, 1]`.
    pub pixel_scores: Vec<f32>,
    pub image_score: f64,
}

fn finish(planes: Vec<Vec<f64>>, h: usize, w: usize, ids: &[SliceId], target_size: usize, reducer: Reducer) -> Vec<AnomalyMap> {
    planes
        .into_iter()
        .zip(ids)
        .map(|(plane, id)| {
            let src: Vec<f32> = plane.iter().map(|&v| v.clamp(0.0, 1.0) as f32).collect();
            let mut pixel_scores = if h == target_size && w == target_size {
                src
            } else {
                resize_plane(&src, h, w, target_size, target_size)
            };
            pixel_scores.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
            let image_score = reducer.reduce(&pixel_scores);
            AnomalyMap {
                id: id.clone(),
                size: target_size,
                pixel_scores,
                image_score,
            }
        })
        .collect()
}

fn check(input: &Tensor, recon: &Tensor, ids: &[SliceId], target_size: usize) -> Result<()> {
    if input.shape() != recon.shape() {
        bail!(Contract, "reconstruction {:?} does not match input {:?}", recon.shape(), input.shape());
    }
    if ids.len() != input.batch() {
        bail!(Contract, "{} ids for {} inputs", ids.len(), input.batch());
    }
    if target_size == 0 {
        bail!(Range, "target size must be positive");
    }
    Ok(())
}

/// SSIM anomaly maps: `(1 − SSIM)/2` at input resolution, bilinearly
/// upsampled to `target_size²`, reduced to an image score.
pub fn anomaly_map(input: &Tensor, recon: &Tensor, ids: &[SliceId], cfg: &SsimConfig, target_size: usize, reducer: Reducer) -> Result<Vec<AnomalyMap>> {
    check(input, recon, ids, target_size)?;
    let map = ssim_map(input, recon, cfg)?;
    let (h, w) = (map.height, map.width);
    let planes = (0..map.batch)
        .map(|i| map.plane(i).iter().map(|&s| (1.0 - s) / 2.0).collect())
        .collect();
    Ok(finish(planes, h, w, ids, target_size, reducer))
}

/// Squared-residual anomaly maps, normalized by `dynamic_range²`.
pub fn residual_map(input: &Tensor, recon: &Tensor, ids: &[SliceId], dynamic_range: f64, target_size: usize, reducer: Reducer) -> Result<Vec<AnomalyMap>> {
    check(input, recon, ids, target_size)?;
    if !(dynamic_range > 0.0) {
        bail!(Range, "dynamic range {dynamic_range} must be positive");
    }
    let [n, c, h, w] = input.shape();
    let norm = 1.0 / (c as f64 * dynamic_range * dynamic_range);
    let planes = (0..n)
        .map(|i| {
            let mut acc = alloc::vec![0.0f64; h * w];
            for ch in 0..c {
                for ((a, &x), &y) in acc.iter_mut().zip(input.plane(i, ch)).zip(recon.plane(i, ch)) {
                    let d = x as f64 - y as f64;
                    *a += d * d * norm;
                }
            }
            acc
        })
        .collect();
    Ok(finish(planes, h, w, ids, target_size, reducer))
}

/// Binary mask of pixels scoring at least `t`.
pub fn threshold_map(map: &AnomalyMap, t: f64) -> Result<Vec<u8>> {
    if !(0.0..=1.0).contains(&t) {
        bail!(Range, "threshold {t} outside [0, 1]");
    }
    Ok(map.pixel_scores.iter().map(|&v| u8::from(v as f64 >= t)).collect())
}
