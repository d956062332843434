//! The raw tensor archive (`.sfta`).
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      b"SFTA"
//! version    u32                (currently 1)
//! meta_len   u32, then meta_len bytes of UTF-8 JSON metadata
//! count      u32, then `count` records:
//!   name_len u16, then name_len bytes of UTF-8
//!   dtype    u8                 (0 f32, 1 f64, 2 u8, 3 u64)
//!   ndim     u8, then ndim u64 dimensions
//!   payload  product(dims) elements
//! ```
//!
//! Records are written in name order so identical contents give identical
//! bytes.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"SFTA";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U8(Vec<u8>),
    U64(Vec<u64>),
}

impl TensorData {
    fn dtype(&self) -> u8 {
        match self {
            TensorData::F32(_) => 0,
            TensorData::F64(_) => 1,
            TensorData::U8(_) => 2,
            TensorData::U64(_) => 3,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
            TensorData::U8(v) => v.len(),
            TensorData::U64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ArchiveTensor {
    pub shape: Vec<usize>,
    pub data: TensorData,
}

impl ArchiveTensor {
    pub fn new(shape: Vec<usize>, data: TensorData) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Format(format!("shape {shape:?} holds {n} elements, data has {}", data.len())));
        }
        Ok(Self { shape, data })
    }

    pub fn f32(shape: Vec<usize>, values: Vec<f32>) -> Result<Self> {
        Self::new(shape, TensorData::F32(values))
    }

    pub fn as_f32(&self) -> Option<&[f32]> {
        match &self.data {
            TensorData::F32(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_u8(&self) -> Option<&[u8]> {
        match &self.data {
            TensorData::U8(v) => Some(v),
            _ => None,
        }
    }
}

/// JSON metadata plus named tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct Archive {
    pub metadata: serde_json::Value,
    pub tensors: BTreeMap<String, ArchiveTensor>,
}

impl Default for Archive {
    fn default() -> Self {
        Self::new(serde_json::Value::Object(Default::default()))
    }
}

impl Archive {
    pub fn new(metadata: serde_json::Value) -> Self {
        Self {
            metadata,
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: ArchiveTensor) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Result<&ArchiveTensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Format(format!("archive has no tensor named {name:?}")))
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(&MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        let meta = serde_json::to_vec(&self.metadata)?;
        w.write_all(&len_u32(meta.len())?.to_le_bytes())?;
        w.write_all(&meta)?;
        w.write_all(&len_u32(self.tensors.len())?.to_le_bytes())?;
        for (name, t) in &self.tensors {
            let name_len = u16::try_from(name.len()).map_err(|_| Error::Format(format!("tensor name {name:?} too long")))?;
            w.write_all(&name_len.to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&[t.data.dtype()])?;
            let ndim = u8::try_from(t.shape.len()).map_err(|_| Error::Format("too many dimensions".into()))?;
            w.write_all(&[ndim])?;
            for &d in &t.shape {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            match &t.data {
                TensorData::F32(v) => v.iter().try_for_each(|x| w.write_all(&x.to_le_bytes()))?,
                TensorData::F64(v) => v.iter().try_for_each(|x| w.write_all(&x.to_le_bytes()))?,
                TensorData::U8(v) => w.write_all(v)?,
                TensorData::U64(v) => v.iter().try_for_each(|x| w.write_all(&x.to_le_bytes()))?,
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if magic != MAGIC {
            return Err(Error::Format("not a tensor archive (bad magic)".into()));
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported archive version {version}")));
        }
        let meta_len = read_u32(r)? as usize;
        let meta = read_bytes(r, meta_len)?;
        let metadata = serde_json::from_slice(&meta)?;
        let count = read_u32(r)?;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let mut b2 = [0u8; 2];
            r.read_exact(&mut b2)?;
            let name = String::from_utf8(read_bytes(r, u16::from_le_bytes(b2) as usize)?)
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
            let mut b = [0u8; 2];
            r.read_exact(&mut b)?;
            let (dtype, ndim) = (b[0], b[1]);
            let mut shape = Vec::with_capacity(ndim as usize);
            for _ in 0..ndim {
                let mut d = [0u8; 8];
                r.read_exact(&mut d)?;
                shape.push(usize::try_from(u64::from_le_bytes(d)).map_err(|_| Error::Format("dimension overflows".into()))?);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::Format(format!("shape {shape:?} overflows")))?;
            let data = match dtype {
                0 => TensorData::F32(read_bytes(r, n * 4)?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()),
                1 => TensorData::F64(read_bytes(r, n * 8)?.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()),
                2 => TensorData::U8(read_bytes(r, n)?),
                3 => TensorData::U64(read_bytes(r, n * 8)?.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().unwrap())).collect()),
                d => return Err(Error::Format(format!("unknown dtype code {d}"))),
            };
            if tensors.insert(name.clone(), ArchiveTensor { shape, data }).is_some() {
                return Err(Error::Format(format!("duplicate tensor {name:?}")));
            }
        }
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing)? != 0 {
            return Err(Error::Format("trailing bytes after the last tensor".into()));
        }
        Ok(Self { metadata, tensors })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        self.write_to(&mut out)?;
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }
}

fn len_u32(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Format(format!("length {n} does not fit the archive header")))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_bytes(r: &mut impl Read, n: usize) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    r.take(n as u64).read_to_end(&mut buf)?;
    if buf.len() != n {
        return Err(Error::Format(format!("archive truncated: wanted {n} bytes, got {}", buf.len())));
    }
    Ok(buf)
}
