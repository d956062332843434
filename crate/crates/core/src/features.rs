//! Multi-scale feature extraction: backbone stages resized to a common
//! resolution and stacked along channels.

use alloc::vec::Vec;
use half::f16;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, IMAGENET_MEAN, IMAGENET_STD, STAGE_CHANNELS};
use crate::data::SliceBatch;
use crate::error::{bail, Result};
use crate::nn::conv_out;
use crate::resize::resize_plane;
use crate::tensor::Tensor;

/// Ordered, non-empty subset of backbone stages `{0, 1, 2, 3}`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct LayerSelection(Vec<usize>);

impl LayerSelection {
    pub fn new(layers: &[usize]) -> Result<Self> {
        let mut v = layers.to_vec();
        v.sort_unstable();
        v.dedup();
        if v.is_empty() {
            bail!(Range, "layer selection is empty");
        }
        if let Some(&bad) = v.iter().find(|&&l| l > 3) {
            bail!(Range, "layer {bad} is not one of 0..=3");
        }
        Ok(Self(v))
    }

    /// The default `{0, 1, 2}` selection.
    pub fn standard() -> Self {
        Self(alloc::vec![0, 1, 2])
    }

    pub fn layers(&self) -> &[usize] {
        &self.0
    }

    pub fn deepest(&self) -> usize {
        *self.0.last().expect("non-empty")
    }

    /// Short label such as `layer0,1,2`.
    pub fn label(&self) -> alloc::string::String {
        let parts: Vec<alloc::string::String> = self.0.iter().map(|l| alloc::format!("{l}")).collect();
        alloc::format!("layer{}", parts.join(","))
    }
}

impl TryFrom<Vec<usize>> for LayerSelection {
    type Error = crate::Error;

    fn try_from(v: Vec<usize>) -> Result<Self> {
        Self::new(&v)
    }
}

impl From<LayerSelection> for Vec<usize> {
    fn from(s: LayerSelection) -> Self {
        s.0
    }
}

/// Spatial side length of stage `layer` for a square `input_size` input.
pub fn stage_size(layer: usize, input_size: usize) -> usize {
    let stem = conv_out(input_size, 7, 2, 3);
    let mut s = conv_out(stem, 3, 2, 1);
    for _ in 1..layer.max(1) {
        s = conv_out(s, 3, 2, 1);
    }
    s
}

/// Fused `(channels, height, width)` without running the backbone.
pub fn output_geometry(selection: &LayerSelection, input_size: usize) -> (usize, usize, usize) {
    let channels = selection.layers().iter().map(|&l| STAGE_CHANNELS[l]).sum();
    let side = selection
        .layers()
        .iter()
        .map(|&l| stage_size(l, input_size))
        .max()
        .expect("non-empty");
    (channels, side, side)
}

/// Concatenated backbone features of a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStack {
    pub features: Tensor,
    /// Channel offset of each selected layer, plus the total at the end.
    pub layer_boundaries: Vec<usize>,
    pub selection: LayerSelection,
}

/// Frozen backbone plus grayscale input adaptation.
#[derive(Clone, Debug)]
pub struct FeatureExtractor {
    backbone: Backbone,
}

impl FeatureExtractor {
    pub fn new(backbone: Backbone) -> Self {
        Self { backbone }
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    /// Replicates grayscale to three channels and applies the published
    /// ImageNet normalization.
    pub fn normalize_input(images: &Tensor) -> Result<Tensor> {
        let [n, c, h, w] = images.shape();
        if c != 1 {
            bail!(Shape, "expected grayscale slices, got {c} channels");
        }
        let mut out = Tensor::zeros([n, 3, h, w]);
        for i in 0..n {
            let src = images.plane(i, 0);
            for ch in 0..3 {
                let (m, s) = (IMAGENET_MEAN[ch], IMAGENET_STD[ch]);
                for (d, &v) in out.plane_mut(i, ch).iter_mut().zip(src) {
                    *d = (v - m) / s;
                }
            }
        }
        Ok(out)
    }

    pub fn extract(&self, batch: &SliceBatch, selection: &LayerSelection) -> Result<FeatureStack> {
        self.extract_images(&batch.images, selection)
    }

    pub fn extract_images(&self, images: &Tensor, selection: &LayerSelection) -> Result<FeatureStack> {
        if images.height() != images.width() {
            bail!(Shape, "slices must be square, got {}x{}", images.height(), images.width());
        }
        let x = Self::normalize_input(images)?;
        let stages = self.backbone.stages(&x, selection.deepest())?;
        let (channels, side, _) = output_geometry(selection, images.height());
        let n = images.batch();
        let mut features = Tensor::zeros([n, channels, side, side]);
        let mut boundaries = Vec::with_capacity(selection.layers().len() + 1);
        let mut offset = 0;
        for &l in selection.layers() {
            boundaries.push(offset);
            let map = &stages[l];
            let (c, h, w) = (map.channels(), map.height(), map.width());
            for i in 0..n {
                for ch in 0..c {
                    let dst = features.plane_mut(i, offset + ch);
                    if h == side && w == side {
                        dst.copy_from_slice(map.plane(i, ch));
                    } else {
                        dst.copy_from_slice(&resize_plane(map.plane(i, ch), h, w, side, side));
                    }
                }
            }
            offset += c;
        }
        boundaries.push(offset);
        Ok(FeatureStack {
            features,
            layer_boundaries: boundaries,
            selection: selection.clone(),
        })
    }
}

/// Half-precision store of precomputed features, indexed by slice.
#[derive(Clone, Debug)]
pub struct FeatureCache {
    shape: [usize; 3],
    selection: LayerSelection,
    boundaries: Vec<usize>,
    values: Vec<f16>,
}

impl FeatureCache {
    /// Extracts features for every slice, `chunk` slices at a time.
    pub fn build(extractor: &FeatureExtractor, images: &Tensor, selection: &LayerSelection, chunk: usize) -> Result<Self> {
        let (c, h, w) = output_geometry(selection, images.height());
        let n = images.batch();
        let mut values = Vec::with_capacity(n * c * h * w);
        let mut boundaries = Vec::new();
        let chunk = chunk.max(1);
        let mut start = 0;
        while start < n {
            let idx: Vec<usize> = (start..(start + chunk).min(n)).collect();
            let stack = extractor.extract_images(&images.select(&idx), selection)?;
            values.extend(stack.features.data().iter().map(|&v| f16::from_f32(v)));
            boundaries = stack.layer_boundaries;
            start += chunk;
        }
        Ok(Self {
            shape: [c, h, w],
            selection: selection.clone(),
            boundaries,
            values,
        })
    }

    pub fn len(&self) -> usize {
        let per: usize = self.shape.iter().product();
        self.values.len() / per.max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn selection(&self) -> &LayerSelection {
        &self.selection
    }

    pub fn gather(&self, indices: &[usize]) -> FeatureStack {
        let per: usize = self.shape.iter().product();
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend(self.values[i * per..(i + 1) * per].iter().map(|v| v.to_f32()));
        }
        let [c, h, w] = self.shape;
        FeatureStack {
            features: Tensor::from_vec([indices.len(), c, h, w], data).expect("cache geometry"),
            layer_boundaries: self.boundaries.clone(),
            selection: self.selection.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn geometry_examples() {
        let sel = |l: &[usize]| LayerSelection::new(l).unwrap();
        assert_eq!(output_geometry(&sel(&[0, 1, 2]), 128), (256, 32, 32));
        assert_eq!(output_geometry(&sel(&[0, 1, 2, 3]), 128), (512, 32, 32));
        assert_eq!(output_geometry(&sel(&[3]), 128), (256, 8, 8));
        assert_eq!(output_geometry(&sel(&[2]), 128), (128, 16, 16));
    }

    #[test]
    fn selection_is_sorted_and_validated() {
        assert_eq!(LayerSelection::new(&[2, 0, 1, 1]).unwrap().layers(), &[0, 1, 2]);
        assert!(LayerSelection::new(&[]).is_err());
        assert!(LayerSelection::new(&[4]).is_err());
        let s: LayerSelection = serde_json::from_str("[1, 0]").unwrap();
        assert_eq!(s.label(), "layer0,1");
    }

    #[test]
    fn single_layer_is_passed_through_unchanged() {
        let ex = FeatureExtractor::new(Backbone::random(1));
        let images = Tensor::full([1, 1, 64, 64], 0.5);
        let sel = LayerSelection::new(&[0]).unwrap();
        let stack = ex.extract_images(&images, &sel).unwrap();
        let x = FeatureExtractor::normalize_input(&images).unwrap();
        let raw = ex.backbone().stages(&x, 0).unwrap();
        assert_eq!(stack.features, raw[0]);
        assert_eq!(stack.layer_boundaries, vec![0, 64]);
    }
}
