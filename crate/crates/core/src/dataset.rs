//! Volume-level train/val/test assignment and sink injection.

use alloc::string::String;
use alloc::vec::Vec;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{label_normal, DatasetSplit, SliceBatch, SliceId};
use crate::error::{bail, Result};
use crate::sink::{apply_sink, sample_sink_spec, SinkSpec};
use crate::tensor::Tensor;

/// A split plus the volume assignment and the sinks injected into it.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub split: DatasetSplit,
    /// Volume ids in train, val, test order.
    pub volumes: [Vec<String>; 3],
    pub val_sinks: Vec<(SliceId, SinkSpec)>,
    pub test_sinks: Vec<(SliceId, SinkSpec)>,
}

/// Volume counts `(train, val, test)` for an 80/2/18 split.
pub fn split_sizes(n_volumes: usize) -> (usize, usize, usize) {
    let val = (libm::round(n_volumes as f64 * 0.02) as usize).max(1);
    let test = (libm::round(n_volumes as f64 * 0.18) as usize).max(1);
    (n_volumes - val - test, val, test)
}

/// Injects one sink into exactly half (rounded down) of the slices, visiting
/// slices in a seeded order and skipping those without room for a sink.
pub fn inject_half(batch: SliceBatch, seed: u64) -> Result<(SliceBatch, Vec<(SliceId, SinkSpec)>)> {
    let n = batch.len();
    let size = batch.size();
    let plane = size * size;
    let target = n / 2;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let sink_seeds: Vec<u64> = (0..n).map(|_| rng.random()).collect();
    let mut images = batch.images.clone().into_vec();
    let mut masks = alloc::vec![0u8; n * plane];
    let mut sinks = Vec::with_capacity(target);
    for (k, &i) in order.iter().enumerate() {
        if sinks.len() == target {
            break;
        }
        let img = &images[i * plane..(i + 1) * plane];
        let fg: Vec<bool> = img.iter().map(|&v| v > 0.0).collect();
        let spec = match sample_sink_spec(img, &fg, size, size, sink_seeds[k]) {
            Ok(s) => s,
            Err(crate::Error::Placement(_)) => continue,
            Err(e) => return Err(e),
        };
        let (deformed, mask) = apply_sink(img, size, size, &spec)?;
        if !mask.contains(&1) {
            continue;
        }
        images[i * plane..(i + 1) * plane].copy_from_slice(&deformed);
        masks[i * plane..(i + 1) * plane].copy_from_slice(&mask);
        sinks.push((batch.ids[i].clone(), spec));
    }
    if sinks.len() < target {
        bail!(Placement, "only {} of {} slices admit a sink", sinks.len(), target);
    }
    let images = Tensor::from_vec(batch.images.shape(), images)?;
    Ok((SliceBatch::with_masks(images, masks, batch.ids)?, sinks))
}

/// Shuffles volumes by `seed`, splits them 80/2/18 and injects sinks into
/// half of the val and test slices. `load(i)` preprocesses volume `i`.
pub fn assemble_dataset(names: &[String], seed: u64, mut load: impl FnMut(usize) -> Result<SliceBatch>) -> Result<LabeledDataset> {
    let n = names.len();
    if n < 3 {
        bail!(Range, "a dataset needs at least 3 volumes, got {n}");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let injection_seeds: [u64; 2] = [rng.random(), rng.random()];
    let (n_train, n_val, _) = split_sizes(n);
    let mut build = |idx: &[usize]| -> Result<SliceBatch> {
        let parts = idx.iter().map(|&i| load(i)).collect::<Result<Vec<_>>>()?;
        SliceBatch::concat(&parts)
    };
    let train = label_normal(build(&order[..n_train])?)?;
    let (val, val_sinks) = inject_half(build(&order[n_train..n_train + n_val])?, injection_seeds[0])?;
    let (test, test_sinks) = inject_half(build(&order[n_train + n_val..])?, injection_seeds[1])?;
    let names_of = |idx: &[usize]| idx.iter().map(|&i| names[i].clone()).collect::<Vec<_>>();
    let split = DatasetSplit { train, val, test, seed };
    split.validate()?;
    Ok(LabeledDataset {
        volumes: [names_of(&order[..n_train]), names_of(&order[n_train..n_train + n_val]), names_of(&order[n_train + n_val..])],
        split,
        val_sinks,
        test_sinks,
    })
}
