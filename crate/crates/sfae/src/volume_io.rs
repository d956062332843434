//! Loading scan volumes from NIfTI files or tensor archives, and persisting
//! volumes and datasets.

use std::path::Path;

use ndarray::{Array3, ShapeBuilder};
use nifti::writer::WriterOptions;
use nifti::{IntoNdArray, NiftiObject, ReaderOptions};
use serde::{Deserialize, Serialize};
use sfae_core::data::{DatasetSplit, SliceBatch, SliceId, Volume};
use sfae_core::Tensor;

use crate::archive::{Archive, ArchiveTensor, TensorData};
use crate::error::{Context, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VolumeFormat {
    Nifti,
    RawTensor,
}

impl VolumeFormat {
    /// Guesses the format from the file name.
    pub fn from_path(path: &Path) -> Option<Self> {
        let name = path.file_name()?.to_str()?.to_ascii_lowercase();
        if name.ends_with(".nii") || name.ends_with(".nii.gz") {
            Some(VolumeFormat::Nifti)
        } else if name.ends_with(".sfta") {
            Some(VolumeFormat::RawTensor)
        } else {
            None
        }
    }
}

/// File name without `.nii`, `.nii.gz` or `.sfta`.
pub fn volume_id(path: &Path) -> String {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("volume");
    for ext in [".nii.gz", ".nii", ".sfta"] {
        if let Some(stem) = name.strip_suffix(ext) {
            return stem.to_string();
        }
    }
    name.to_string()
}

/// Reads a volume and normalizes it to slices-first `[z, y, x]` order.
pub fn load_volume(path: &Path, format: VolumeFormat) -> Result<Volume> {
    let volume = match format {
        VolumeFormat::Nifti => load_nifti(path),
        VolumeFormat::RawTensor => load_raw(path),
    }
    .at(path)?;
    if volume.voxels.iter().any(|v| !v.is_finite()) {
        return Err(Error::Format("volume contains non-finite voxels".into()).at(path));
    }
    volume.validate().at(path)?;
    Ok(volume)
}

fn load_nifti(path: &Path) -> Result<Volume> {
    let obj = ReaderOptions::new().read_file(path).map_err(nifti_error)?;
    let pixdim = obj.header().pixdim;
    let mut data = obj.into_volume().into_ndarray::<f32>().map_err(nifti_error)?;
    // Trailing singleton axes (e.g. a one-frame time axis) are dropped.
    let mut shape: Vec<usize> = data.shape().to_vec();
    while shape.len() > 3 && shape.last() == Some(&1) {
        shape.pop();
    }
    if shape.len() != 3 {
        return Err(Error::Format(format!("expected a 3-D volume, found dimensions {:?}", data.shape())));
    }
    let (nx, ny, nz) = (shape[0], shape[1], shape[2]);
    while data.ndim() > 3 {
        let last = ndarray::Axis(data.ndim() - 1);
        data = data.index_axis_move(last, 0);
    }
    let mut voxels = Vec::with_capacity(nx * ny * nz);
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                voxels.push(data[[x, y, z].as_slice()]);
            }
        }
    }
    let spacing = [pixdim[3], pixdim[2], pixdim[1]].map(|s| if s > 0.0 { s } else { 1.0 });
    Ok(Volume {
        id: volume_id(path),
        dims: [nz, ny, nx],
        spacing,
        voxels,
    })
}

fn nifti_error(e: nifti::NiftiError) -> Error {
    match e {
        nifti::NiftiError::Io(io) => Error::Io(io),
        other => Error::Format(other.to_string()),
    }
}

#[derive(Serialize, Deserialize)]
struct VolumeMeta {
    kind: String,
    id: String,
    spacing: [f32; 3],
}

fn load_raw(path: &Path) -> Result<Volume> {
    let archive = Archive::load(path)?;
    let meta: VolumeMeta = serde_json::from_value(archive.metadata.clone())?;
    if meta.kind != "volume" {
        return Err(Error::Format(format!("archive holds a {:?}, not a volume", meta.kind)));
    }
    let t = archive.get("voxels")?;
    let (Some(voxels), [s, r, c]) = (t.as_f32(), t.shape.as_slice()) else {
        return Err(Error::Format(format!("voxels must be a 3-D f32 tensor, found shape {:?}", t.shape)));
    };
    Ok(Volume {
        id: meta.id,
        dims: [*s, *r, *c],
        spacing: meta.spacing,
        voxels: voxels.to_vec(),
    })
}

/// Writes a volume as a tensor archive.
pub fn save_volume_raw(volume: &Volume, path: &Path) -> Result<()> {
    let meta = VolumeMeta {
        kind: "volume".into(),
        id: volume.id.clone(),
        spacing: volume.spacing,
    };
    let mut archive = Archive::new(serde_json::to_value(meta)?);
    archive.insert("voxels", ArchiveTensor::f32(volume.dims.to_vec(), volume.voxels.clone())?);
    archive.save(path).at(path)
}

/// Writes a volume as NIfTI with `x` the fastest axis.
pub fn save_volume_nifti(volume: &Volume, path: &Path) -> Result<()> {
    let [nz, ny, nx] = volume.dims;
    // The slices-first buffer is exactly the Fortran-order layout of [x, y, z].
    let arr = Array3::from_shape_vec((nx, ny, nz).f(), volume.voxels.clone()).map_err(|e| Error::Format(e.to_string()))?;
    WriterOptions::new(path)
        .write_nifti(&arr)
        .map_err(nifti_error)
        .at(path)
}

/// Every `.nii`, `.nii.gz` or `.sfta` file in `dir`, sorted by name.
pub fn list_volumes(dir: &Path) -> Result<Vec<(std::path::PathBuf, VolumeFormat)>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).at(dir)? {
        let path = entry.at(dir)?.path();
        if let Some(fmt) = VolumeFormat::from_path(&path) {
            out.push((path, fmt));
        }
    }
    out.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct SplitMeta {
    kind: String,
    seed: u64,
    ids: [Vec<SliceId>; 3],
}

const SPLITS: [&str; 3] = ["train", "val", "test"];

/// Writes a dataset split (images, masks, labels, slice ids) as one archive.
pub fn save_split(split: &DatasetSplit, path: &Path) -> Result<()> {
    let parts = [&split.train, &split.val, &split.test];
    let meta = SplitMeta {
        kind: "dataset_split".into(),
        seed: split.seed,
        ids: parts.map(|b| b.ids.clone()),
    };
    let mut archive = Archive::new(serde_json::to_value(meta)?);
    for (name, b) in SPLITS.iter().zip(parts) {
        archive.insert(format!("{name}.images"), ArchiveTensor::f32(b.images.shape().to_vec(), b.images.data().to_vec())?);
        if let Some(m) = &b.masks {
            archive.insert(format!("{name}.masks"), ArchiveTensor::new(b.images.shape().to_vec(), TensorData::U8(m.clone()))?);
        }
    }
    archive.save(path).at(path)
}

pub fn load_split(path: &Path) -> Result<DatasetSplit> {
    let archive = Archive::load(path).at(path)?;
    let meta: SplitMeta = serde_json::from_value(archive.metadata.clone()).at(path)?;
    if meta.kind != "dataset_split" {
        return Err(Error::Format(format!("archive holds a {:?}, not a dataset split", meta.kind)).at(path));
    }
    let [train_ids, val_ids, test_ids] = meta.ids;
    let mut batches = Vec::new();
    for (name, ids) in SPLITS.iter().zip([train_ids, val_ids, test_ids]) {
        let t = archive.get(&format!("{name}.images")).at(path)?;
        let shape: [usize; 4] = t
            .shape
            .as_slice()
            .try_into()
            .map_err(|_| Error::Format(format!("{name} images must be 4-D")).at(path))?;
        let images = Tensor::from_vec(shape, t.as_f32().ok_or_else(|| Error::Format("images must be f32".into()))?.to_vec())?;
        let batch = match archive.tensors.get(&format!("{name}.masks")) {
            Some(m) => SliceBatch::with_masks(images, m.as_u8().ok_or_else(|| Error::Format("masks must be u8".into()))?.to_vec(), ids)?,
            None => SliceBatch::new(images, ids)?,
        };
        batches.push(batch);
    }
    let mut it = batches.into_iter();
    let split = DatasetSplit {
        train: it.next().unwrap(),
        val: it.next().unwrap(),
        test: it.next().unwrap(),
        seed: meta.seed,
    };
    split.validate().at(path)?;
    Ok(split)
}
