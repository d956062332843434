//! Volumes, slice batches and the slice preprocessing chain.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::resize::resize_plane;
use crate::tensor::Tensor;

/// Center slices kept per volume.
pub const DEFAULT_CENTER_SLICES: usize = 80;
/// Side length of the square slices fed to the models.
pub const DEFAULT_SLICE_SIZE: usize = 128;
/// Histogram bins for intensity equalization.
pub const EQUALIZATION_BINS: usize = 256;

/// A scalar volume stored slices-first: `[slice][row][col]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Volume {
    pub id: String,
    /// `[slices, rows, cols]`
    pub dims: [usize; 3],
    /// Physical voxel size per axis, informational only.
    pub spacing: [f32; 3],
    pub voxels: Vec<f32>,
}

impl Volume {
    pub fn new(id: impl Into<String>, dims: [usize; 3], spacing: [f32; 3], voxels: Vec<f32>) -> Result<Self> {
        let v = Self {
            id: id.into(),
            dims,
            spacing,
            voxels,
        };
        v.validate()?;
        Ok(v)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.contains(&0) {
            bail!(Format, "volume {} has an empty axis {:?}", self.id, self.dims);
        }
        if self.voxels.len() != self.dims.iter().product::<usize>() {
            bail!(Format, "volume {} holds {} voxels for dims {:?}", self.id, self.voxels.len(), self.dims);
        }
        if let Some(i) = self.voxels.iter().position(|v| !v.is_finite()) {
            bail!(Format, "volume {} has a non-finite voxel at flat index {}", self.id, i);
        }
        Ok(())
    }

    pub fn n_slices(&self) -> usize {
        self.dims[0]
    }

    pub fn slice(&self, index: usize) -> &[f32] {
        let len = self.dims[1] * self.dims[2];
        &self.voxels[index * len..(index + 1) * len]
    }
}

/// Identifies a slice by its source volume and slice index.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SliceId {
    pub volume: String,
    pub slice: usize,
}

/// A batch of `B × 1 × S × S` slices in `[0, 1]`, optionally labeled.
///
/// `masks` holds `B × S × S` binary ground truth; `labels[i]` is 1 exactly
/// when slice `i` has at least one anomalous pixel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SliceBatch {
    pub images: Tensor,
    pub masks: Option<Vec<u8>>,
    pub labels: Option<Vec<u8>>,
    pub ids: Vec<SliceId>,
}

impl SliceBatch {
    /// Unlabeled batch.
    pub fn new(images: Tensor, ids: Vec<SliceId>) -> Result<Self> {
        let b = Self {
            images,
            masks: None,
            labels: None,
            ids,
        };
        b.validate()?;
        Ok(b)
    }

    /// Labeled batch; labels are derived from the masks.
    pub fn with_masks(images: Tensor, masks: Vec<u8>, ids: Vec<SliceId>) -> Result<Self> {
        let plane = images.plane_len();
        let labels = masks
            .chunks(plane.max(1))
            .map(|m| u8::from(m.iter().any(|&v| v != 0)))
            .collect();
        let b = Self {
            images,
            masks: Some(masks),
            labels: Some(labels),
            ids,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn len(&self) -> usize {
        self.images.batch()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn size(&self) -> usize {
        self.images.height()
    }

    pub fn image(&self, i: usize) -> &[f32] {
        self.images.sample(i)
    }

    pub fn mask(&self, i: usize) -> Option<&[u8]> {
        let plane = self.images.plane_len();
        self.masks.as_ref().map(|m| &m[i * plane..(i + 1) * plane])
    }

    pub fn is_labeled(&self) -> bool {
        self.masks.is_some() && self.labels.is_some()
    }

    pub fn n_anomalous(&self) -> usize {
        self.labels
            .as_ref()
            .map_or(0, |l| l.iter().filter(|&&v| v == 1).count())
    }

    pub fn validate(&self) -> Result<()> {
        let [b, c, h, w] = self.images.shape();
        if c != 1 {
            bail!(Shape, "slice batches are single-channel, got {} channels", c);
        }
        if self.ids.len() != b {
            bail!(Shape, "{} ids for {} slices", self.ids.len(), b);
        }
        if let Some(i) = self.images.data().iter().position(|v| !(0.0..=1.0).contains(v)) {
            bail!(Range, "slice value {} at flat index {} outside [0, 1]", self.images.data()[i], i);
        }
        match (&self.masks, &self.labels) {
            (None, None) => {}
            (Some(masks), Some(labels)) => {
                if masks.len() != b * h * w || labels.len() != b {
                    bail!(Shape, "mask/label lengths {}/{} for {} slices of {}x{}", masks.len(), labels.len(), b, h, w);
                }
                for (i, (m, &l)) in masks.chunks(h * w).zip(labels.iter()).enumerate() {
                    if m.iter().any(|&v| v > 1) || l > 1 {
                        bail!(Format, "slice {} has non-binary mask or label", i);
                    }
                    if m.contains(&1) != (l == 1) {
                        bail!(Contract, "slice {} label {} disagrees with its mask", i, l);
                    }
                }
            }
            _ => bail!(Contract, "masks and labels must be given together"),
        }
        Ok(())
    }

    /// Subset of slices, carrying masks and labels along.
    pub fn select(&self, indices: &[usize]) -> SliceBatch {
        let plane = self.images.plane_len();
        SliceBatch {
            images: self.images.select(indices),
            masks: self.masks.as_ref().map(|m| {
                indices
                    .iter()
                    .flat_map(|&i| m[i * plane..(i + 1) * plane].iter().copied())
                    .collect()
            }),
            labels: self
                .labels
                .as_ref()
                .map(|l| indices.iter().map(|&i| l[i]).collect()),
            ids: indices.iter().map(|&i| self.ids[i].clone()).collect(),
        }
    }

    /// Concatenates batches. Either all or none of the parts must be labeled.
    pub fn concat(parts: &[SliceBatch]) -> Result<SliceBatch> {
        let images = Tensor::concat_batch(&parts.iter().map(|p| p.images.clone()).collect::<Vec<_>>())?;
        let labeled = parts.iter().filter(|p| p.is_labeled()).count();
        let (masks, labels) = if labeled == parts.len() {
            (
                Some(parts.iter().flat_map(|p| p.masks.clone().unwrap()).collect()),
                Some(parts.iter().flat_map(|p| p.labels.clone().unwrap()).collect()),
            )
        } else if labeled == 0 {
            (None, None)
        } else {
            bail!(Contract, "cannot mix labeled and unlabeled batches");
        };
        let batch = SliceBatch {
            images,
            masks,
            labels,
            ids: parts.iter().flat_map(|p| p.ids.iter().cloned()).collect(),
        };
        batch.validate()?;
        Ok(batch)
    }
}

/// The three dataset partitions. `train` never holds anomalous slices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: SliceBatch,
    pub val: SliceBatch,
    pub test: SliceBatch,
    pub seed: u64,
}

impl DatasetSplit {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.val.validate()?;
        self.test.validate()?;
        if self.train.n_anomalous() > 0 {
            bail!(Data, "training split holds {} anomalous slices", self.train.n_anomalous());
        }
        Ok(())
    }
}

/// Histogram-equalizes the nonzero voxels in place.
///
/// Values are binned into [`EQUALIZATION_BINS`] equal-width bins spanning the
/// nonzero range and each voxel is replaced by the cumulative fraction of its
/// bin, so foreground lands in `(0, 1]` and zero background stays zero.
pub fn equalize_histogram(voxels: &mut [f32]) {
    let mut lo = f32::INFINITY;
    let mut hi = f32::NEG_INFINITY;
    let mut count = 0usize;
    for &v in voxels.iter().filter(|&&v| v != 0.0) {
        lo = lo.min(v);
        hi = hi.max(v);
        count += 1;
    }
    if count == 0 {
        return;
    }
    let span = (hi - lo) as f64;
    let bin_of = |v: f32| -> usize {
        if span <= 0.0 {
            EQUALIZATION_BINS - 1
        } else {
            let b = ((v - lo) as f64 / span * EQUALIZATION_BINS as f64) as usize;
            b.min(EQUALIZATION_BINS - 1)
        }
    };
    let mut hist = [0usize; EQUALIZATION_BINS];
    for &v in voxels.iter().filter(|&&v| v != 0.0) {
        hist[bin_of(v)] += 1;
    }
    let mut cdf = [0.0f32; EQUALIZATION_BINS];
    let mut acc = 0usize;
    for (c, &h) in cdf.iter_mut().zip(hist.iter()) {
        acc += h;
        *c = (acc as f64 / count as f64) as f32;
    }
    for v in voxels.iter_mut().filter(|v| **v != 0.0) {
        *v = cdf[bin_of(*v)];
    }
}

/// First index of the `n` slices centered on slice `total / 2`.
pub fn center_slice_start(total: usize, n: usize) -> usize {
    (total - n) / 2
}

/// Equalizes the whole volume, keeps the `n_center_slices` center slices and
/// resizes each to `out_size × out_size`.
pub fn preprocess(volume: &Volume, n_center_slices: usize, out_size: usize) -> Result<SliceBatch> {
    volume.validate()?;
    if n_center_slices == 0 || out_size == 0 {
        bail!(Range, "need at least one slice of nonzero size");
    }
    let [slices, rows, cols] = volume.dims;
    if slices < n_center_slices {
        bail!(Range, "volume {} has {} slices, needs at least {}", volume.id, slices, n_center_slices);
    }
    let mut eq = volume.voxels.clone();
    equalize_histogram(&mut eq);
    let start = center_slice_start(slices, n_center_slices);
    let plane = rows * cols;
    let mut data = Vec::with_capacity(n_center_slices * out_size * out_size);
    let mut ids = Vec::with_capacity(n_center_slices);
    for s in start..start + n_center_slices {
        let resized = resize_plane(&eq[s * plane..(s + 1) * plane], rows, cols, out_size, out_size);
        data.extend(resized.into_iter().map(|v| v.clamp(0.0, 1.0)));
        ids.push(SliceId {
            volume: volume.id.clone(),
            slice: s,
        });
    }
    let images = Tensor::from_vec([n_center_slices, 1, out_size, out_size], data)?;
    SliceBatch::new(images, ids)
}

/// Labels every slice of an unlabeled batch as normal.
pub fn label_normal(batch: SliceBatch) -> Result<SliceBatch> {
    let masks = vec![0u8; batch.images.len()];
    SliceBatch::with_masks(batch.images, masks, batch.ids)
}
