//! Binary tensor archive.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "LSAN" | version: u32
//! repeated until EOF:
//!   name_len: u32 | name: utf-8 | dtype: u8 (0 = f32, 1 = f64) | rank: u32
//!   | extents: rank x u64 | payload: little-endian floats
//! ```

use std::any::Any;
use std::fs;
use std::path::Path;

use indexmap::IndexMap;

use super::{DType, Scalar, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"LSAN";
pub const FORMAT_VERSION: u32 = 1;

/// A decoded tensor of either precision.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn dtype(&self) -> DType {
        match self {
            AnyTensor::F32(_) => DType::F32,
            AnyTensor::F64(_) => DType::F64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.shape(),
            AnyTensor::F64(t) => t.shape(),
        }
    }

    /// Returns the tensor as `T`, failing if the stored precision differs.
    pub fn into_typed<T: Scalar>(self) -> Result<Tensor<T>> {
        let stored = self.dtype();
        let boxed: Box<dyn Any> = match self {
            AnyTensor::F32(t) => Box::new(t),
            AnyTensor::F64(t) => Box::new(t),
        };
        boxed.downcast::<Tensor<T>>().map(|t| *t).map_err(|_| {
            Error::Checkpoint(format!(
                "stored dtype {stored:?} does not match requested {:?}",
                T::DTYPE
            ))
        })
    }
}

pub fn encode<'a, T: Scalar>(entries: impl IntoIterator<Item = (&'a str, &'a Tensor<T>)>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    for (name, tensor) in entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(T::DTYPE as u8);
        out.extend_from_slice(&(tensor.rank() as u32).to_le_bytes());
        for &extent in tensor.shape() {
            out.extend_from_slice(&(extent as u64).to_le_bytes());
        }
        for &v in tensor.data() {
            v.write_le(&mut out);
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Checkpoint(format!("truncated while reading {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

fn read_payload<T: Scalar>(r: &mut Reader<'_>, shape: Vec<usize>) -> Result<Tensor<T>> {
    let n: usize = shape.iter().product();
    let size = T::DTYPE.size();
    let bytes = r.take(n * size, "payload")?;
    let data = bytes.chunks_exact(size).map(T::read_le).collect();
    Tensor::new(shape, data)
}

pub fn decode(bytes: &[u8]) -> Result<IndexMap<String, AnyTensor>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let mut out = IndexMap::new();
    while !r.done() {
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::Checkpoint("name is not utf-8".into()))?
            .to_string();
        let tag = r.take(1, "dtype")?[0];
        let dtype = DType::from_tag(tag)
            .ok_or_else(|| Error::Checkpoint(format!("unknown dtype tag {tag}")))?;
        let rank = r.u32("rank")? as usize;
        let shape = (0..rank)
            .map(|_| r.u64("extent").map(|e| e as usize))
            .collect::<Result<Vec<_>>>()?;
        let tensor = match dtype {
            DType::F32 => AnyTensor::F32(read_payload(&mut r, shape)?),
            DType::F64 => AnyTensor::F64(read_payload(&mut r, shape)?),
        };
        if out.insert(name.clone(), tensor).is_some() {
            return Err(Error::Checkpoint(format!("duplicate entry `{name}`")));
        }
    }
    Ok(out)
}

pub fn save<'a, T: Scalar>(
    path: impl AsRef<Path>,
    entries: impl IntoIterator<Item = (&'a str, &'a Tensor<T>)>,
) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(entries);
    // write-then-rename so a crash never leaves a torn checkpoint behind
    let tmp = path.with_extension("lsan.tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<IndexMap<String, AnyTensor>> {
    decode(&fs::read(path)?)
}

/// Loads every entry as `T`.
pub fn load_typed<T: Scalar>(path: impl AsRef<Path>) -> Result<IndexMap<String, Tensor<T>>> {
    load(path)?
        .into_iter()
        .map(|(k, v)| v.into_typed().map(|t| (k, t)))
        .collect()
}
