//! The `TCIT` binary container.
//!
//! ```text
//! magic   "TCIT"        4 bytes
//! version u8 = 1
//! kind    u8            0 = tensor, 1 = checkpoint bundle
//! dtype   u8            0 = f32, 1 = f64
//! -- kind 0 --
//! ndim    u8
//! dims    ndim x u32 LE
//! payload row-major values, LE
//! -- kind 1 --
//! body    see `train::checkpoint`
//! --
//! crc     u64 LE, CRC-64/XZ over every preceding byte
//! ```

use std::fs;
use std::path::Path;

use crc::{Crc, CRC_64_XZ};

use crate::error::{Error, Result};
use crate::tensor::{DType, Real, Tensor};

pub const MAGIC: [u8; 4] = *b"TCIT";
pub const VERSION: u8 = 1;
pub const KIND_TENSOR: u8 = 0;
pub const KIND_CHECKPOINT: u8 = 1;

const CRC64: Crc<u64> = Crc::<u64>::new(&CRC_64_XZ);
const HEADER: usize = 7;
const TRAILER: usize = 8;

pub fn crc64(bytes: &[u8]) -> u64 {
    CRC64.checksum(bytes)
}

/// A tensor read from disk in whichever precision it was stored.
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

    pub fn shape(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.shape(),
            AnyTensor::F64(t) => t.shape(),
        }
    }

    /// Converts to `T`, exact when the stored precision already matches.
    pub fn into_real<T: Real>(self) -> Tensor<T> {
        match self {
            AnyTensor::F32(t) => t.cast(),
            AnyTensor::F64(t) => t.cast(),
        }
    }
}

impl From<Tensor<f32>> for AnyTensor {
    fn from(t: Tensor<f32>) -> Self {
        AnyTensor::F32(t)
    }
}

impl From<Tensor<f64>> for AnyTensor {
    fn from(t: Tensor<f64>) -> Self {
        AnyTensor::F64(t)
    }
}

/// Little-endian byte sink shared by the tensor and checkpoint records.
#[derive(Default)]
pub(crate) struct ByteWriter {
    pub buf: Vec<u8>,
}

impl ByteWriter {
    pub fn header(kind: u8, dtype: DType) -> Self {
        let mut w = Self::default();
        w.buf.extend_from_slice(&MAGIC);
        w.buf.extend_from_slice(&[VERSION, kind, dtype.code()]);
        w
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn bytes(&mut self, v: &[u8]) {
        self.buf.extend_from_slice(v);
    }

    /// u32 length prefix then raw bytes.
    pub fn blob(&mut self, v: &[u8]) -> Result<()> {
        self.u32(u32::try_from(v.len()).map_err(|_| Error::invalid("record field too large"))?);
        self.bytes(v);
        Ok(())
    }

    pub fn dims(&mut self, shape: &[usize]) -> Result<()> {
        let ndim = u8::try_from(shape.len()).map_err(|_| Error::invalid("too many dimensions"))?;
        self.u8(ndim);
        for &d in shape {
            self.u32(u32::try_from(d).map_err(|_| Error::invalid(format!("extent {d} exceeds u32")))?);
        }
        Ok(())
    }

    pub fn values<T: Real>(&mut self, data: &[T]) {
        self.buf.reserve(data.len() * T::DTYPE.size());
        for &v in data {
            v.write_le(&mut self.buf);
        }
    }

    pub fn finish(mut self) -> Vec<u8> {
        let crc = crc64(&self.buf);
        self.u64(crc);
        self.buf
    }
}

/// Cursor over a verified record body.
pub(crate) struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Payload(format!("record ends early at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub fn blob(&mut self) -> Result<&'a [u8]> {
        let n = self.u32()? as usize;
        self.take(n)
    }

    pub fn dims(&mut self) -> Result<Vec<usize>> {
        let ndim = self.u8()? as usize;
        (0..ndim).map(|_| self.u32().map(|d| d as usize)).collect()
    }

    pub fn values<T: Real>(&mut self, n: usize) -> Result<Vec<T>> {
        let size = T::DTYPE.size();
        let raw = self.take(n.checked_mul(size).ok_or_else(|| Error::Payload("size overflow".into()))?)?;
        Ok(raw.chunks_exact(size).map(T::read_le).collect())
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

/// Checks length, magic, version and checksum; returns `(kind, dtype, body)`.
pub(crate) fn open_record(bytes: &[u8]) -> Result<(u8, DType, &[u8])> {
    if bytes.len() < HEADER + TRAILER {
        return Err(Error::Truncated(format!("{} bytes is shorter than any record", bytes.len())));
    }
    let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(Error::BadMagic { found: magic });
    }
    if bytes[4] != VERSION {
        return Err(Error::UnsupportedVersion(bytes[4] as u32));
    }
    let split = bytes.len() - TRAILER;
    let stored = u64::from_le_bytes(bytes[split..].try_into().expect("8 bytes"));
    let computed = crc64(&bytes[..split]);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    let dtype = DType::from_code(bytes[6]).ok_or_else(|| Error::Payload(format!("unknown dtype code {}", bytes[6])))?;
    Ok((bytes[5], dtype, &bytes[HEADER..split]))
}

pub fn encode_tensor<T: Real>(t: &Tensor<T>) -> Result<Vec<u8>> {
    let mut w = ByteWriter::header(KIND_TENSOR, T::DTYPE);
    w.dims(t.shape())?;
    w.values(t.data());
    Ok(w.finish())
}

fn decode_body<T: Real>(r: &mut ByteReader<'_>) -> Result<Tensor<T>> {
    let dims = r.dims()?;
    if dims.is_empty() || dims.contains(&0) {
        return Err(Error::Payload(format!("invalid dims {dims:?}")));
    }
    let n = dims
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(|| Error::Payload("element count overflow".into()))?;
    let expected = n * T::DTYPE.size();
    if r.remaining() != expected {
        return Err(Error::Payload(format!(
            "dims {dims:?} need {expected} payload bytes, found {}",
            r.remaining()
        )));
    }
    Tensor::new(dims, r.values(n)?)
}

pub fn decode_tensor(bytes: &[u8]) -> Result<AnyTensor> {
    let (kind, dtype, body) = open_record(bytes)?;
    if kind != KIND_TENSOR {
        return Err(Error::Payload(format!("record kind {kind} is not a tensor")));
    }
    let mut r = ByteReader::new(body);
    Ok(match dtype {
        DType::F32 => AnyTensor::F32(decode_body(&mut r)?),
        DType::F64 => AnyTensor::F64(decode_body(&mut r)?),
    })
}

pub fn write_tensor_file<T: Real>(t: &Tensor<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_tensor(t)?).map_err(|e| Error::io(path, e))
}

pub fn read_tensor_file(path: impl AsRef<Path>) -> Result<AnyTensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensor(&bytes)
}
