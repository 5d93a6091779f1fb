//! The shared on-disk tensor container.
//!
//! Layout: magic `FUNT`, version byte 0x01, dtype byte (0 = f32, 1 = f64),
//! u32 little-endian rank, rank x u32 little-endian extents, then the
//! row-major little-endian payload. Round-trips are bit-exact.

use crate::error::{Error, Result};
use crate::scalar::{Dtype, Scalar};
use crate::tensor::{DynTensor, Tensor};
use std::fs;
use std::path::Path;

const MAGIC: &[u8; 4] = b"FUNT";
const VERSION: u8 = 0x01;

pub fn encode<S: Scalar>(t: &Tensor<S>) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + 2 + 4 + 4 * t.dims().len() + t.len() * S::DTYPE.byte_width());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(S::DTYPE.code());
    out.extend_from_slice(&(t.dims().len() as u32).to_le_bytes());
    for &d in t.dims() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(&mut out);
    }
    out
}

pub fn decode(bytes: &[u8], origin: &str) -> Result<DynTensor> {
    let fail = |message: &str| Error::Format {
        path: origin.to_string(),
        message: message.to_string(),
    };
    if bytes.len() < 10 {
        return Err(fail("truncated header"));
    }
    if &bytes[0..4] != MAGIC {
        return Err(fail("bad magic (expected FUNT)"));
    }
    if bytes[4] != VERSION {
        return Err(fail(&format!("unsupported version {}", bytes[4])));
    }
    let dtype = Dtype::from_code(bytes[5]).ok_or_else(|| fail("unknown dtype code"))?;
    let ndim = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    let header = 10 + 4 * ndim;
    if bytes.len() < header {
        return Err(fail("truncated dims"));
    }
    let mut dims = Vec::with_capacity(ndim);
    for i in 0..ndim {
        let off = 10 + 4 * i;
        let d = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
        if d == 0 {
            return Err(fail("zero extent"));
        }
        dims.push(d);
    }
    let count: usize = dims.iter().product();
    let width = dtype.byte_width();
    if bytes.len() != header + count * width {
        return Err(fail(&format!(
            "payload length {} does not match dims {:?} ({} elements of {} bytes)",
            bytes.len() - header,
            dims,
            count,
            width
        )));
    }
    let payload = &bytes[header..];
    match dtype {
        Dtype::F32 => {
            let data = payload
                .chunks_exact(4)
                .map(f32::read_le)
                .collect::<Vec<_>>();
            Ok(DynTensor::F32(Tensor::from_vec(&dims, data)?))
        }
        Dtype::F64 => {
            let data = payload
                .chunks_exact(8)
                .map(f64::read_le)
                .collect::<Vec<_>>();
            Ok(DynTensor::F64(Tensor::from_vec(&dims, data)?))
        }
    }
}

pub fn write_file<S: Scalar>(path: &Path, t: &Tensor<S>) -> Result<()> {
    fs::write(path, encode(t))?;
    Ok(())
}

pub fn read_file(path: &Path) -> Result<DynTensor> {
    let bytes = fs::read(path)?;
    decode(&bytes, &path.display().to_string())
}

/// Reads a file that must hold exactly dtype `S`.
pub fn read_file_as<S: Scalar>(path: &Path) -> Result<Tensor<S>> {
    match (read_file(path)?, S::DTYPE) {
        (DynTensor::F32(t), Dtype::F32) => Ok(t.cast()),
        (DynTensor::F64(t), Dtype::F64) => Ok(t.cast()),
        (other, want) => Err(Error::Format {
            path: path.display().to_string(),
            message: format!(
                "dtype mismatch: file holds {}, expected {}",
                match other {
                    DynTensor::F32(_) => Dtype::F32,
                    DynTensor::F64(_) => Dtype::F64,
                },
                want
            ),
        }),
    }
}
