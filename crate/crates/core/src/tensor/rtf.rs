//! `.rtf-tensor` raw tensor files.
//!
//! Layout (all integers little-endian `u32`):
//!
//! ```text
//! "LFBT" | version = 1 | dtype (0 = f32, 1 = f64) | rank | dims[rank] | payload
//! ```
//!
//! The payload is the row-major element buffer, little-endian.

use std::fs;
use std::path::Path;

use super::{DType, Scalar, Tensor};
use crate::error::{Error, Result};

pub const RTF_MAGIC: [u8; 4] = *b"LFBT";
pub const RTF_VERSION: u32 = 1;
pub const RTF_EXTENSION: &str = "rtf-tensor";

/// A tensor read from disk whose element type is only known at runtime.
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

    /// Converts to the requested element type (lossy for f64 → f32).
    pub fn into_tensor<T: Scalar>(self) -> Tensor<T> {
        match self {
            AnyTensor::F32(t) => t.cast(),
            AnyTensor::F64(t) => t.cast(),
        }
    }
}

pub fn encode<T: Scalar>(tensor: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * tensor.rank() + tensor.len() * T::DTYPE.size());
    out.extend_from_slice(&RTF_MAGIC);
    out.extend_from_slice(&RTF_VERSION.to_le_bytes());
    out.extend_from_slice(&T::DTYPE.code().to_le_bytes());
    out.extend_from_slice(&(tensor.rank() as u32).to_le_bytes());
    for &d in tensor.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in tensor.data() {
        v.write_le(&mut out);
    }
    out
}

pub fn write_rtf<T: Scalar>(path: impl AsRef<Path>, tensor: &Tensor<T>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(tensor)).map_err(|e| Error::io(path, e))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, field: &'static str) -> Result<&'a [u8]> {
        let available = self.bytes.len() - self.pos;
        if available < n {
            return Err(Error::TruncatedPayload {
                path: self.path.to_path_buf(),
                field,
                expected: n,
                available,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, field: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().unwrap()))
    }
}

fn decode_payload<T: Scalar>(shape: Vec<usize>, bytes: &[u8]) -> Result<Tensor<T>> {
    let size = T::DTYPE.size();
    let data = bytes.chunks_exact(size).map(T::read_le).collect();
    Tensor::new(shape, data)
}

pub fn decode(path: &Path, bytes: &[u8]) -> Result<AnyTensor> {
    let mut cur = Cursor { bytes, pos: 0, path };
    let magic = cur.take(4, "magic")?;
    if magic != RTF_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            found: magic.try_into().unwrap(),
        });
    }
    let version = cur.u32("version")?;
    if version != RTF_VERSION {
        return Err(Error::UnsupportedVersion {
            path: path.to_path_buf(),
            field: "version",
            value: version,
        });
    }
    let code = cur.u32("dtype")?;
    let dtype = DType::from_code(code).ok_or_else(|| Error::UnsupportedVersion {
        path: path.to_path_buf(),
        field: "dtype",
        value: code,
    })?;
    let rank = cur.u32("rank")? as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(cur.u32("dims")? as usize);
    }
    if shape.contains(&0) || rank == 0 {
        return Err(Error::shape("read_rtf", format!("invalid dims {shape:?}")));
    }
    let count: usize = shape.iter().product();
    let payload = cur.take(count * dtype.size(), "payload")?;
    if cur.pos != bytes.len() {
        return Err(Error::shape(
            "read_rtf",
            format!("{} trailing bytes after payload", bytes.len() - cur.pos),
        ));
    }
    Ok(match dtype {
        DType::F32 => AnyTensor::F32(decode_payload(shape, payload)?),
        DType::F64 => AnyTensor::F64(decode_payload(shape, payload)?),
    })
}

pub fn read_rtf(path: impl AsRef<Path>) -> Result<AnyTensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(path, &bytes)
}

/// Reads a file and converts it to `T`.
pub fn read_rtf_as<T: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    Ok(read_rtf(path)?.into_tensor())
}
