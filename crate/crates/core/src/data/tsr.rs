//! `TSR1` tensor container.
//!
//! ```text
//! "TSR1"                      4 bytes magic
//! entry count                 u32
//! per entry:
//!   name length               u16
//!   name                      UTF-8 bytes
//!   dtype                     u8   (0 = f32, 1 = f64)
//!   ndim                      u8
//!   dims                      u32 x ndim
//!   elements                  row-major, little-endian
//! ```
//!
//! All integers are little-endian.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"TSR1";

/// A tensor of either element kind.
#[derive(Clone, Debug, PartialEq)]
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

    pub fn dims(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.dims(),
            AnyTensor::F64(t) => t.dims(),
        }
    }

    /// Converts to element type `T` (exact when the kinds match).
    pub fn to<T: Scalar>(&self) -> Tensor<T> {
        match self {
            AnyTensor::F32(t) => t.cast(),
            AnyTensor::F64(t) => t.cast(),
        }
    }

    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Self {
        match T::DTYPE {
            DType::F32 => AnyTensor::F32(t.cast()),
            DType::F64 => AnyTensor::F64(t.cast()),
        }
    }
}

/// An ordered list of named tensors.
pub type Entries = Vec<(String, AnyTensor)>;

pub fn encode(entries: &[(String, AnyTensor)]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    let count = u32::try_from(entries.len()).map_err(|_| Error::Format("too many entries".into()))?;
    out.extend_from_slice(&count.to_le_bytes());
    for (name, t) in entries {
        let len = u16::try_from(name.len())
            .map_err(|_| Error::Format(format!("entry name of {} bytes is too long", name.len())))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.dtype().code());
        let dims = t.dims();
        let ndim = u8::try_from(dims.len()).map_err(|_| Error::Format("too many dimensions".into()))?;
        out.push(ndim);
        for &d in dims {
            let d = u32::try_from(d).map_err(|_| Error::Format(format!("extent {d} exceeds u32")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        match t {
            AnyTensor::F32(t) => t.data().iter().for_each(|v| v.write_le(&mut out)),
            AnyTensor::F64(t) => t.data().iter().for_each(|v| v.write_le(&mut out)),
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Format(format!("truncated TSR1 data at byte {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

fn read_elements<T: Scalar>(cur: &mut Cursor<'_>, dims: &[usize]) -> Result<Tensor<T>> {
    let count = dims
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(|| Error::Format("element count overflows".into()))?;
    let width = T::DTYPE.size();
    let raw = cur.take(count.checked_mul(width).ok_or_else(|| Error::Format("entry too large".into()))?)?;
    let data = raw.chunks_exact(width).map(T::read_le).collect();
    Tensor::from_vec(dims, data).map_err(|e| Error::Format(e.to_string()))
}

pub fn decode(bytes: &[u8]) -> Result<Entries> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4)? != MAGIC {
        return Err(Error::Format("missing TSR1 magic".into()));
    }
    let count = cur.u32()? as usize;
    let mut entries = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let len = cur.u16()? as usize;
        let name = std::str::from_utf8(cur.take(len)?)
            .map_err(|_| Error::Format("entry name is not UTF-8".into()))?
            .to_owned();
        let code = cur.u8()?;
        let dtype = DType::from_code(code).ok_or_else(|| Error::Format(format!("unknown dtype code {code}")))?;
        let ndim = cur.u8()? as usize;
        if ndim == 0 {
            return Err(Error::Format(format!("entry {name:?} has zero dimensions")));
        }
        let dims = (0..ndim).map(|_| cur.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let t = match dtype {
            DType::F32 => AnyTensor::F32(read_elements(&mut cur, &dims)?),
            DType::F64 => AnyTensor::F64(read_elements(&mut cur, &dims)?),
        };
        entries.push((name, t));
    }
    if cur.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes after last entry", bytes.len() - cur.pos)));
    }
    Ok(entries)
}

pub fn write_file(path: impl AsRef<Path>, entries: &[(String, AnyTensor)]) -> Result<()> {
    let bytes = encode(entries)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn read_file(path: impl AsRef<Path>) -> Result<Entries> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode(&bytes)
}

/// Finds an entry by name.
pub fn entry<'a>(entries: &'a [(String, AnyTensor)], name: &str) -> Result<&'a AnyTensor> {
    entries
        .iter()
        .find(|(n, _)| n == name)
        .map(|(_, t)| t)
        .ok_or_else(|| Error::Format(format!("no entry named {name:?}")))
}
