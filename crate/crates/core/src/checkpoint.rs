//! `ECKP` named-tensor container used for checkpoints and feature files.
//!
//! ```text
//! magic    "ECKP"
//! version  u32
//! header   u64 length + UTF-8 JSON object
//! count    u64
//! count × { name: u32 length + UTF-8, dtype u8 (0 = f32, 1 = f64),
//!           rank u32, dims rank × u64, data little-endian }
//! rng      u64 length + opaque bytes
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{DType, Scalar, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"ECKP";
pub const CHECKPOINT_VERSION: u32 = 1;

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

    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Self {
        match T::DTYPE {
            DType::F32 => AnyTensor::F32(t.cast()),
            DType::F64 => AnyTensor::F64(t.cast()),
        }
    }

    /// Converts to `T`; exact when the stored dtype is `T`.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        match self {
            AnyTensor::F32(t) => t.cast(),
            AnyTensor::F64(t) => t.cast(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub header: serde_json::Value,
    pub tensors: Vec<(String, AnyTensor)>,
    pub rng: Vec<u8>,
}

impl Container {
    pub fn new(header: serde_json::Value) -> Self {
        Self {
            header,
            tensors: Vec::new(),
            rng: Vec::new(),
        }
    }

    pub fn push<T: Scalar>(&mut self, name: impl Into<String>, t: &Tensor<T>) {
        self.tensors.push((name.into(), AnyTensor::from_tensor(t)));
    }

    pub fn get(&self, name: &str) -> Option<&AnyTensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn require<T: Scalar>(&self, name: &str) -> Result<Tensor<T>> {
        self.get(name)
            .map(AnyTensor::to_tensor)
            .ok_or_else(|| Error::invalid(format!("container has no tensor {name:?}")))
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let header = serde_json::to_string(&self.header)?;
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u64).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.dtype() as u8);
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match t {
                AnyTensor::F32(t) => t.data().iter().for_each(|v| v.write_le(&mut out)),
                AnyTensor::F64(t) => t.data().iter().for_each(|v| v.write_le(&mut out)),
            }
        }
        out.extend_from_slice(&(self.rng.len() as u64).to_le_bytes());
        out.extend_from_slice(&self.rng);
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if let Some(pos) = CHECKPOINT_MAGIC
            .iter()
            .enumerate()
            .position(|(i, m)| bytes.get(i) != Some(m))
        {
            return Err(r.err_at(pos, "bad magic, expected \"ECKP\""));
        }
        r.pos = 4;
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(r.err_at(4, format!("unsupported version {version}")));
        }
        let header_len = r.len_u64()?;
        let header_at = r.pos;
        let header_bytes = r.take(header_len)?;
        let header: serde_json::Value = serde_json::from_slice(header_bytes)
            .map_err(|e| r.err_at(header_at, format!("header is not JSON: {e}")))?;
        let count = r.len_u64()?;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name_at = r.pos;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| r.err_at(name_at, "tensor name is not UTF-8"))?
                .to_string();
            let tag_at = r.pos;
            let tag = r.take(1)?[0];
            let dtype = DType::from_tag(tag).ok_or_else(|| r.err_at(tag_at, format!("unknown dtype tag {tag}")))?;
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank.min(16));
            for _ in 0..rank {
                shape.push(r.len_u64()?);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| r.err_at(r.pos, "tensor size overflows"))?;
            let byte_len = numel
                .checked_mul(dtype.size())
                .ok_or_else(|| r.err_at(r.pos, "tensor size overflows"))?;
            let raw = r.take(byte_len)?;
            let t = match dtype {
                DType::F32 => AnyTensor::F32(Tensor::new(shape, raw.chunks(4).map(f32::read_le).collect())?),
                DType::F64 => AnyTensor::F64(Tensor::new(shape, raw.chunks(8).map(f64::read_le).collect())?),
            };
            tensors.push((name, t));
        }
        let rng_len = r.len_u64()?;
        let rng = r.take(rng_len)?.to_vec();
        if r.pos != bytes.len() {
            return Err(r.err_at(r.pos, "trailing bytes"));
        }
        Ok(Self { header, tensors, rng })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.encode()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::decode(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err_at(&self, offset: usize, detail: impl Into<String>) -> Error {
        Error::Format {
            what: "checkpoint",
            offset: offset as u64,
            detail: detail.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err_at(self.bytes.len(), format!("truncated: needed {n} bytes at {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn len_u64(&mut self) -> Result<usize> {
        let at = self.pos;
        let v = u64::from_le_bytes(self.take(8)?.try_into().unwrap());
        usize::try_from(v).map_err(|_| self.err_at(at, "length does not fit in memory"))
    }
}
