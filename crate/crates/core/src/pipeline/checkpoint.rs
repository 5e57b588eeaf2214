//! Versioned binary checkpoint.
//!
//! Layout, all integers little-endian:
//! `"CAMF"`, `u16` version, `u32` config length + UTF-8 config text,
//! `u32` tensor count, then per tensor `u32` name length + name, `u8` dtype,
//! `u32` rank, `u64` extents, raw values; finally a `u32` CRC-32 of every
//! preceding byte.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{DType, ParamStore, Real, Tensor};

const MAGIC: &[u8; 4] = b"CAMF";
pub const FORMAT_VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum StoredTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl StoredTensor {
    fn dtype(&self) -> DType {
        match self {
            StoredTensor::F32(_) => DType::F32,
            StoredTensor::F64(_) => DType::F64,
        }
    }

    fn shape(&self) -> &[usize] {
        match self {
            StoredTensor::F32(t) => t.shape(),
            StoredTensor::F64(t) => t.shape(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub config: String,
    pub tensors: BTreeMap<String, StoredTensor>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Integrity(format!("truncated at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Integrity("string is not UTF-8".into()))
    }
}

impl Checkpoint {
    pub fn new(config: impl Into<String>) -> Self {
        Checkpoint {
            config: config.into(),
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert<T: Real>(&mut self, name: impl Into<String>, tensor: Tensor<T>) {
        let stored = match T::DTYPE {
            DType::F32 => StoredTensor::F32(tensor.cast()),
            DType::F64 => StoredTensor::F64(tensor.cast()),
        };
        self.tensors.insert(name.into(), stored);
    }

    /// Adds every tensor of `store` under `prefix`.
    pub fn insert_store<T: Real>(&mut self, prefix: &str, store: &ParamStore<T>) {
        for (name, t) in store.iter() {
            self.insert(format!("{prefix}{name}"), t.clone());
        }
    }

    pub fn get<T: Real>(&self, name: &str) -> Result<Tensor<T>> {
        match self.tensors.get(name) {
            Some(StoredTensor::F32(t)) if T::DTYPE == DType::F32 => Ok(t.cast()),
            Some(StoredTensor::F64(t)) if T::DTYPE == DType::F64 => Ok(t.cast()),
            Some(other) => Err(Error::Integrity(format!(
                "{name} is stored as {:?}, requested {:?}",
                other.dtype(),
                T::DTYPE
            ))),
            None => Err(Error::Integrity(format!("checkpoint has no tensor {name}"))),
        }
    }

    /// Every tensor under `prefix`, with the prefix stripped.
    pub fn store<T: Real>(&self, prefix: &str) -> Result<ParamStore<T>> {
        let mut store = ParamStore::new();
        for name in self.tensors.keys() {
            if let Some(rest) = name.strip_prefix(prefix) {
                store.insert(rest, self.get::<T>(name)?);
            }
        }
        Ok(store)
    }

    pub fn scalar(&self, name: &str) -> Result<f64> {
        let t = self.get::<f64>(name)?;
        if t.numel() != 1 {
            return Err(Error::Integrity(format!("{name} is not a scalar")));
        }
        Ok(t.data()[0])
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.config.len() as u32).to_le_bytes());
        out.extend_from_slice(self.config.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.dtype().tag());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &e in t.shape() {
                out.extend_from_slice(&(e as u64).to_le_bytes());
            }
            match t {
                StoredTensor::F32(t) => f32::to_le_bytes_vec(t.data(), &mut out),
                StoredTensor::F64(t) => f64::to_le_bytes_vec(t.data(), &mut out),
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 2 + 4 || &bytes[..4] != MAGIC {
            return Err(Error::Integrity("not a checkpoint (bad magic)".into()));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != FORMAT_VERSION {
            return Err(Error::UnsupportedVersion {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        let actual = crc32fast::hash(body);
        if stored != actual {
            return Err(Error::Integrity(format!(
                "checksum mismatch: stored {stored:08x}, computed {actual:08x}"
            )));
        }
        let mut r = Reader {
            bytes: body,
            pos: 6,
        };
        let config = r.string()?;
        let count = r.u32()?;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let name = r.string()?;
            let tag = r.u8()?;
            let dtype = DType::from_tag(tag)
                .ok_or_else(|| Error::Integrity(format!("{name}: unknown dtype tag {tag}")))?;
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u64().map(|e| e as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &e| a.checked_mul(e))
                .ok_or_else(|| Error::Integrity(format!("{name}: shape overflows")))?;
            let stored =
                match dtype {
                    DType::F32 => {
                        let raw = r.take(numel.checked_mul(4).ok_or_else(|| {
                            Error::Integrity(format!("{name}: size overflows"))
                        })?)?;
                        StoredTensor::F32(Tensor::new(shape, f32::from_le_bytes_slice(raw))?)
                    }
                    DType::F64 => {
                        let raw = r.take(numel.checked_mul(8).ok_or_else(|| {
                            Error::Integrity(format!("{name}: size overflows"))
                        })?)?;
                        StoredTensor::F64(Tensor::new(shape, f64::from_le_bytes_slice(raw))?)
                    }
                };
            if tensors.insert(name.clone(), stored).is_some() {
                return Err(Error::Integrity(format!("duplicate tensor {name}")));
            }
        }
        if r.pos != body.len() {
            return Err(Error::Integrity(format!(
                "{} trailing bytes before the checksum",
                body.len() - r.pos
            )));
        }
        Ok(Checkpoint { config, tensors })
    }

    /// Writes to a sibling temporary file, then renames over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("camf.tmp");
        std::fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Integrity(msg) => Error::Integrity(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}
