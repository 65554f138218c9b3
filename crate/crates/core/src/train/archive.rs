//! Binary tensor archive.
//!
//! Layout (little-endian): magic `TCA2`, version `u32`, tensor count `u32`,
//! then per tensor: name length `u16`, UTF-8 name, rank `u8`, dims `u32` each,
//! dtype `u8` (0 = binary32, 1 = binary64), payload length `u64`, payload.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use cantus_grad::{ParamStore, Tensor};
use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"TCA2";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ArchiveError {
    #[error("not a tensor archive (bad magic)")]
    BadMagic,
    #[error("unsupported archive version {0}")]
    UnsupportedVersion(u32),
    #[error("archive truncated at byte {offset} while reading {what}")]
    Truncated { offset: usize, what: &'static str },
    #[error("duplicate tensor name `{0}`")]
    DuplicateName(String),
    #[error("tensor name is not valid UTF-8 at byte {0}")]
    BadName(usize),
    #[error("tensor `{name}`: unknown dtype {dtype}")]
    UnknownDtype { name: String, dtype: u8 },
    #[error("tensor `{name}`: payload of {actual} bytes, shape needs {expected}")]
    PayloadMismatch { name: String, expected: u64, actual: u64 },
    #[error("{0} unexpected bytes after the last tensor")]
    TrailingBytes(usize),
    #[error("tensor `{0}` not found in archive")]
    Missing(String),
    #[error("tensor `{name}` has shape {actual:?}, expected {expected:?}")]
    Shape {
        name: String,
        expected: Vec<u32>,
        actual: Vec<u32>,
    },
    #[error("cannot encode: {0}")]
    Encode(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl ArchiveError {
    /// Stable numeric code per error kind.
    pub fn code(&self) -> u8 {
        match self {
            ArchiveError::BadMagic => 1,
            ArchiveError::UnsupportedVersion(_) => 2,
            ArchiveError::Truncated { .. } => 3,
            ArchiveError::DuplicateName(_) => 4,
            ArchiveError::BadName(_) => 5,
            ArchiveError::UnknownDtype { .. } => 6,
            ArchiveError::PayloadMismatch { .. } => 7,
            ArchiveError::TrailingBytes(_) => 8,
            ArchiveError::Missing(_) => 9,
            ArchiveError::Shape { .. } => 10,
            ArchiveError::Encode(_) => 11,
            ArchiveError::Io { .. } => 12,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl TensorData {
    fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
        }
    }

    fn dtype(&self) -> u8 {
        match self {
            TensorData::F32(_) => 0,
            TensorData::F64(_) => 1,
        }
    }

    fn bitwise_eq(&self, other: &TensorData) -> bool {
        match (self, other) {
            (TensorData::F32(a), TensorData::F32(b)) => {
                a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            (TensorData::F64(a), TensorData::F64(b)) => {
                a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            _ => false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ArchiveTensor {
    pub dims: Vec<u32>,
    pub data: TensorData,
}

impl ArchiveTensor {
    pub fn f32(dims: Vec<u32>, data: Vec<f32>) -> Self {
        Self {
            dims,
            data: TensorData::F32(data),
        }
    }

    pub fn f64(dims: Vec<u32>, data: Vec<f64>) -> Self {
        Self {
            dims,
            data: TensorData::F64(data),
        }
    }

    /// Lossless binary64 copy of a 2-D tensor.
    pub fn from_tensor(t: &Tensor) -> Self {
        Self::f64(vec![t.rows() as u32, t.cols() as u32], t.data().to_vec())
    }

    /// Binary32 copy of a 2-D tensor (rounds).
    pub fn from_tensor_f32(t: &Tensor) -> Self {
        Self::f32(
            vec![t.rows() as u32, t.cols() as u32],
            t.data().iter().map(|v| *v as f32).collect(),
        )
    }

    pub fn values(&self) -> Vec<f64> {
        match &self.data {
            TensorData::F32(v) => v.iter().map(|x| *x as f64).collect(),
            TensorData::F64(v) => v.clone(),
        }
    }

    /// Views the tensor as a matrix: rank 2 as-is, rank 1 as a row, rank 0
    /// as 1×1.
    pub fn to_tensor(&self) -> Tensor {
        let (r, c) = match self.dims.as_slice() {
            [] => (1, 1),
            [n] => (1, *n as usize),
            [r, c] => (*r as usize, *c as usize),
            dims => (dims[0] as usize, dims[1..].iter().map(|d| *d as usize).product()),
        };
        Tensor::from_vec(r, c, self.values())
    }

    pub fn bitwise_eq(&self, other: &ArchiveTensor) -> bool {
        self.dims == other.dims && self.data.bitwise_eq(&other.data)
    }

    fn element_count(&self) -> u64 {
        self.dims.iter().map(|d| *d as u64).product()
    }
}

/// Ordered named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TensorArchive {
    entries: Vec<(String, ArchiveTensor)>,
}

impl TensorArchive {
    pub fn new() -> Self {
        Self::default()
    }

    /// Keeps entries as given; duplicates are reported when encoding.
    pub fn from_entries(entries: Vec<(String, ArchiveTensor)>) -> Self {
        Self { entries }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: ArchiveTensor) -> Result<(), ArchiveError> {
        let name = name.into();
        if self.entries.iter().any(|(n, _)| *n == name) {
            return Err(ArchiveError::DuplicateName(name));
        }
        self.entries.push((name, tensor));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&ArchiveTensor, ArchiveError> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| ArchiveError::Missing(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.iter().any(|(n, _)| n == name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArchiveTensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn bitwise_eq(&self, other: &TensorArchive) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((na, a), (nb, b))| na == nb && a.bitwise_eq(b))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, ArchiveError> {
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let count = u32::try_from(self.entries.len()).map_err(|_| ArchiveError::Encode("too many tensors".into()))?;
        out.extend_from_slice(&count.to_le_bytes());
        for (name, t) in &self.entries {
            if !seen.insert(name.as_str()) {
                return Err(ArchiveError::DuplicateName(name.clone()));
            }
            let name_len = u16::try_from(name.len())
                .map_err(|_| ArchiveError::Encode(format!("name of {} bytes is too long", name.len())))?;
            let rank = u8::try_from(t.dims.len()).map_err(|_| ArchiveError::Encode(format!("`{name}` rank too high")))?;
            if t.element_count() != t.data.len() as u64 {
                return Err(ArchiveError::Encode(format!(
                    "`{name}` has {} values for dims {:?}",
                    t.data.len(),
                    t.dims
                )));
            }
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(rank);
            for d in &t.dims {
                out.extend_from_slice(&d.to_le_bytes());
            }
            out.push(t.data.dtype());
            match &t.data {
                TensorData::F32(v) => {
                    out.extend_from_slice(&(v.len() as u64 * 4).to_le_bytes());
                    v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
                }
                TensorData::F64(v) => {
                    out.extend_from_slice(&(v.len() as u64 * 8).to_le_bytes());
                    v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ArchiveError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(ArchiveError::BadMagic);
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(ArchiveError::UnsupportedVersion(version));
        }
        let count = r.u32("tensor count")?;
        let mut seen = HashSet::new();
        let mut entries = Vec::new();
        for _ in 0..count {
            let name_len = r.u16("name length")? as usize;
            let at = r.pos;
            let name = std::str::from_utf8(r.take(name_len, "name")?)
                .map_err(|_| ArchiveError::BadName(at))?
                .to_string();
            if !seen.insert(name.clone()) {
                return Err(ArchiveError::DuplicateName(name));
            }
            let rank = r.take(1, "rank")?[0] as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(r.u32("dims")?);
            }
            let dtype = r.take(1, "dtype")?[0];
            let width = match dtype {
                0 => 4u64,
                1 => 8,
                _ => return Err(ArchiveError::UnknownDtype { name, dtype }),
            };
            let payload_len = r.u64("payload length")?;
            let expected = dims
                .iter()
                .try_fold(width, |acc, d| acc.checked_mul(*d as u64))
                .unwrap_or(u64::MAX);
            if payload_len != expected {
                return Err(ArchiveError::PayloadMismatch {
                    name,
                    expected,
                    actual: payload_len,
                });
            }
            if payload_len > (r.bytes.len() - r.pos) as u64 {
                return Err(ArchiveError::Truncated {
                    offset: r.bytes.len(),
                    what: "payload",
                });
            }
            let payload = r.take(payload_len as usize, "payload")?;
            let data = if dtype == 0 {
                TensorData::F32(
                    payload
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                )
            } else {
                TensorData::F64(
                    payload
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                )
            };
            entries.push((name, ArchiveTensor { dims, data }));
        }
        if r.pos != bytes.len() {
            return Err(ArchiveError::TrailingBytes(bytes.len() - r.pos));
        }
        Ok(Self { entries })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], ArchiveError> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(ArchiveError::Truncated {
                offset: self.bytes.len(),
                what,
            }),
        }
    }

    fn u16(&mut self, what: &'static str) -> Result<u16, ArchiveError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, ArchiveError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64, ArchiveError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn save_archive(path: &Path, archive: &TensorArchive) -> Result<(), ArchiveError> {
    let bytes = archive.to_bytes()?;
    std::fs::write(path, bytes).map_err(|source| ArchiveError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_archive(path: &Path) -> Result<TensorArchive, ArchiveError> {
    let bytes = std::fs::read(path).map_err(|source| ArchiveError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    TensorArchive::from_bytes(&bytes)
}

/// Every parameter as a lossless binary64 tensor, prefixed with `prefix`.
pub fn store_to_archive(store: &ParamStore, prefix: &str, archive: &mut TensorArchive) -> Result<(), ArchiveError> {
    for (name, t) in store.iter() {
        archive.insert(format!("{prefix}{name}"), ArchiveTensor::from_tensor(t))?;
    }
    Ok(())
}

/// Overwrites every parameter of `store` from `archive`; names and shapes
/// must match exactly.
pub fn store_from_archive(store: &mut ParamStore, prefix: &str, archive: &TensorArchive) -> Result<(), ArchiveError> {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let name = format!("{prefix}{}", store.name(id));
        let entry = archive.get(&name)?;
        let value = store.get_mut(id);
        let expected = vec![value.rows() as u32, value.cols() as u32];
        if entry.dims != expected {
            return Err(ArchiveError::Shape {
                name,
                expected,
                actual: entry.dims.clone(),
            });
        }
        value.data_mut().copy_from_slice(&entry.values());
    }
    Ok(())
}
