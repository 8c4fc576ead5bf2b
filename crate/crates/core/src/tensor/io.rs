//! NDT1 binary tensor files.
//!
//! Layout (little-endian): magic `NDT1`, one dtype byte (0 = f32, 1 = f64,
//! 2 = u8), one byte with the number of dimensions, each extent as `u32`,
//! then the row-major payload. Nothing may follow the payload.

use std::fs;
use std::path::Path;

use super::{numel, DType, NdTensor, Scalar};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"NDT1";

fn encode_header(dtype: DType, shape: &[usize], out: &mut Vec<u8>) -> Result<()> {
    if shape.len() > u8::MAX as usize {
        return Err(Error::shape("ndt1", format!("{} dimensions exceed the format limit", shape.len())));
    }
    out.extend_from_slice(MAGIC);
    out.push(dtype as u8);
    out.push(shape.len() as u8);
    for &d in shape {
        let d = u32::try_from(d).map_err(|_| Error::shape("ndt1", format!("extent {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    Ok(())
}

/// Parses the header and checks the payload length. Returns dtype, shape and payload.
fn decode_header<'a>(bytes: &'a [u8], path: &Path) -> Result<(DType, Vec<usize>, &'a [u8])> {
    if bytes.len() < 6 || &bytes[..4] != MAGIC {
        return Err(Error::corrupt(path, "missing NDT1 magic"));
    }
    let dtype = DType::from_code(bytes[4]).ok_or_else(|| Error::corrupt(path, format!("unknown dtype code {}", bytes[4])))?;
    let ndim = bytes[5] as usize;
    let header_len = 6 + 4 * ndim;
    if bytes.len() < header_len {
        return Err(Error::corrupt(path, "truncated header"));
    }
    let shape: Vec<usize> = bytes[6..header_len]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4-byte chunk")) as usize)
        .collect();
    let expected = numel(&shape)
        .checked_mul(dtype.size())
        .ok_or_else(|| Error::corrupt(path, "payload size overflows"))?;
    let payload = &bytes[header_len..];
    if payload.len() != expected {
        return Err(Error::corrupt(
            path,
            format!("payload has {} bytes, header declares {expected}", payload.len()),
        ));
    }
    Ok((dtype, shape, payload))
}

pub fn encode<T: Scalar>(t: &NdTensor<T>) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(6 + 4 * t.shape().len() + t.numel() * T::DTYPE.size());
    encode_header(T::DTYPE, t.shape(), &mut out)?;
    for &v in t.data() {
        v.write_le(&mut out);
    }
    Ok(out)
}

/// Decodes a floating point tensor, converting between f32 and f64 when needed.
pub fn decode<T: Scalar>(bytes: &[u8], path: &Path) -> Result<NdTensor<T>> {
    let (dtype, shape, payload) = decode_header(bytes, path)?;
    let data: Vec<T> = match dtype {
        DType::F32 => payload.chunks_exact(4).map(|c| T::of(f32::read_le(c) as f64)).collect(),
        DType::F64 => payload.chunks_exact(8).map(|c| T::of(f64::read_le(c))).collect(),
        DType::U8 => return Err(Error::corrupt(path, "expected a floating point tensor, found u8")),
    };
    NdTensor::new(shape, data)
}

pub fn encode_u8(shape: &[usize], data: &[u8]) -> Result<Vec<u8>> {
    if numel(shape) != data.len() {
        return Err(Error::shape("ndt1", format!("shape {shape:?} does not match {} bytes", data.len())));
    }
    let mut out = Vec::with_capacity(6 + 4 * shape.len() + data.len());
    encode_header(DType::U8, shape, &mut out)?;
    out.extend_from_slice(data);
    Ok(out)
}

pub fn decode_u8(bytes: &[u8], path: &Path) -> Result<(Vec<usize>, Vec<u8>)> {
    let (dtype, shape, payload) = decode_header(bytes, path)?;
    if dtype != DType::U8 {
        return Err(Error::corrupt(path, format!("expected a u8 map, found {dtype:?}")));
    }
    Ok((shape, payload.to_vec()))
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn write_tensor<T: Scalar>(path: &Path, t: &NdTensor<T>) -> Result<()> {
    write_bytes(path, &encode(t)?)
}

pub fn read_tensor<T: Scalar>(path: &Path) -> Result<NdTensor<T>> {
    decode(&read_bytes(path)?, path)
}
