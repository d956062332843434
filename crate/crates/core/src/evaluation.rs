//! Scoring a trained model on labeled test slices and aggregating seeds.

use alloc::string::String;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::data::SliceBatch;
use crate::error::{bail, Result};
use crate::metrics::{dice_at_fpr, image_auroc, mean_std, pixel_ap, welch_t_test};
use crate::models::reconstruct;
use crate::scoring::{anomaly_map, residual_map, AnomalyMap, ScoreKind, ScoringConfig};
use crate::training::{Lifting, Split, TrainState};

/// False-positive budget for the Dice metric.
pub const DICE_FPR: f64 = 0.05;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricTriple {
    pub pixel_ap: f64,
    pub dice_at_5fpr: f64,
    pub image_auroc: f64,
}

/// Metrics of one run plus the maps they came from.
#[derive(Clone, Debug, PartialEq)]
pub struct RunEvaluation {
    pub metrics: MetricTriple,
    pub score_kind: ScoreKind,
    pub maps: Vec<AnomalyMap>,
}

/// Metrics over pooled pixel scores and per-slice image scores.
pub fn metrics_from_maps(maps: &[AnomalyMap], test: &SliceBatch) -> Result<MetricTriple> {
    let (Some(masks), Some(labels)) = (&test.masks, &test.labels) else {
        bail!(Contract, "evaluation needs labeled test data");
    };
    if maps.len() != test.len() {
        bail!(Contract, "{} maps for {} test slices", maps.len(), test.len());
    }
    let plane = test.images.plane_len();
    if maps.iter().any(|m| m.pixel_scores.len() != plane) {
        bail!(Contract, "anomaly maps must match the {}x{} test resolution", test.size(), test.size());
    }
    let pixels: Vec<f64> = maps.iter().flat_map(|m| m.pixel_scores.iter().map(|&v| v as f64)).collect();
    let images: Vec<f64> = maps.iter().map(|m| m.image_score).collect();
    Ok(MetricTriple {
        pixel_ap: pixel_ap(&pixels, masks)?,
        dice_at_5fpr: dice_at_fpr(&pixels, masks, DICE_FPR)?,
        image_auroc: image_auroc(&images, labels)?,
    })
}

/// Anomaly maps for every test slice, `chunk` slices at a time.
pub fn score_split(state: &TrainState, test: &SliceBatch, split: Split, lifting: Lifting<'_>, cfg: &ScoringConfig, chunk: usize) -> Result<(ScoreKind, Vec<AnomalyMap>)> {
    let kind = cfg.score.unwrap_or(ScoreKind::for_kind(state.model.kind));
    let ssim = state.ssim_config();
    let mut maps = Vec::with_capacity(test.len());
    let all: Vec<usize> = (0..test.len()).collect();
    for idx in all.chunks(chunk.max(1)) {
        let lifted = lifting.lift(test, idx, split)?;
        let input = lifted.input();
        let recon = reconstruct(&state.model, input)?;
        let ids: Vec<_> = idx.iter().map(|&i| test.ids[i].clone()).collect();
        let x = input.tensor();
        maps.extend(match kind {
            ScoreKind::Ssim => anomaly_map(x, &recon, &ids, &ssim, cfg.target_size, cfg.reducer)?,
            ScoreKind::SquaredError => residual_map(x, &recon, &ids, state.dynamic_range, cfg.target_size, cfg.reducer)?,
        });
    }
    Ok((kind, maps))
}

/// Scores the whole test split and computes the metric triple.
pub fn evaluate_run(state: &TrainState, test: &SliceBatch, lifting: Lifting<'_>, cfg: &ScoringConfig) -> Result<RunEvaluation> {
    if !test.is_labeled() {
        bail!(Contract, "evaluation needs labeled test data");
    }
    let (score_kind, maps) = score_split(state, test, Split::Test, lifting, cfg, 16)?;
    Ok(RunEvaluation {
        metrics: metrics_from_maps(&maps, test)?,
        score_kind,
        maps,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedMetrics {
    pub seed: u64,
    #[serde(flatten)]
    pub metrics: MetricTriple,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    PixelAp,
    #[serde(rename = "dice_at_5fpr")]
    DiceAt5Fpr,
    ImageAuroc,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::PixelAp, Metric::DiceAt5Fpr, Metric::ImageAuroc];

    pub fn name(self) -> &'static str {
        match self {
            Metric::PixelAp => "pixel_ap",
            Metric::DiceAt5Fpr => "dice_at_5fpr",
            Metric::ImageAuroc => "image_auroc",
        }
    }

    pub fn of(self, m: &MetricTriple) -> f64 {
        match self {
            Metric::PixelAp => m.pixel_ap,
            Metric::DiceAt5Fpr => m.dice_at_5fpr,
            Metric::ImageAuroc => m.image_auroc,
        }
    }
}

/// Welch test of this report's method against another row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Significance {
    pub against: String,
    pub metric: Metric,
    /// Infinite when both samples are constant and differ.
    #[serde(with = "extended_f64")]
    pub t: f64,
    pub p: f64,
}

/// `f64` that keeps infinities and NaN, which JSON numbers cannot hold, as
/// the strings `"inf"`, `"-inf"` and `"nan"`.
mod extended_f64 {
    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if v.is_nan() {
            s.serialize_str("nan")
        } else if *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr<'a> {
        Num(f64),
        Str(&'a str),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Str("inf") => Ok(f64::INFINITY),
            Repr::Str("-inf") => Ok(f64::NEG_INFINITY),
            Repr::Str("nan") => Ok(f64::NAN),
            Repr::Str(other) => Err(de::Error::invalid_value(de::Unexpected::Str(other), &"a number, inf, -inf or nan")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub per_seed: Vec<SeedMetrics>,
    pub pixel_ap: MeanStd,
    pub dice_at_5fpr: MeanStd,
    pub image_auroc: MeanStd,
    pub n_seeds: usize,
    pub config_hash: String,
    /// Free-form settings worth reporting next to the numbers.
    pub metadata: Vec<(String, String)>,
    pub significance: Vec<Significance>,
}

impl EvalReport {
    pub fn new(method: impl Into<String>, mut per_seed: Vec<SeedMetrics>, config_hash: impl Into<String>) -> Result<Self> {
        if per_seed.is_empty() {
            bail!(Contract, "a report needs at least one seed");
        }
        per_seed.sort_by_key(|s| s.seed);
        let agg = |m: Metric| {
            let v: Vec<f64> = per_seed.iter().map(|s| m.of(&s.metrics)).collect();
            let (mean, std) = mean_std(&v);
            MeanStd { mean, std }
        };
        Ok(Self {
            method: method.into(),
            pixel_ap: agg(Metric::PixelAp),
            dice_at_5fpr: agg(Metric::DiceAt5Fpr),
            image_auroc: agg(Metric::ImageAuroc),
            n_seeds: per_seed.len(),
            per_seed,
            config_hash: config_hash.into(),
            metadata: Vec::new(),
            significance: Vec::new(),
        })
    }

    pub fn values(&self, metric: Metric) -> Vec<f64> {
        self.per_seed.iter().map(|s| metric.of(&s.metrics)).collect()
    }

    pub fn summary(&self, metric: Metric) -> MeanStd {
        match metric {
            Metric::PixelAp => self.pixel_ap,
            Metric::DiceAt5Fpr => self.dice_at_5fpr,
            Metric::ImageAuroc => self.image_auroc,
        }
    }

    /// Adds Welch tests of every metric against `other`.
    pub fn compare_with(&mut self, other: &EvalReport) -> Result<()> {
        for metric in Metric::ALL {
            let (t, p) = welch_t_test(&self.values(metric), &other.values(metric))?;
            self.significance.push(Significance {
                against: other.method.clone(),
                metric,
                t,
                p,
            });
        }
        Ok(())
    }
}
