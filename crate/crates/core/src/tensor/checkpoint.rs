//! Flat binary container of named arrays.
//!
//! Layout (little endian): magic `TOFADCKP`, `u32` version, `u32` metadata
//! count, then `(u32 len, utf8 key, u32 len, utf8 value)` pairs, `u32` array
//! count, then per array `u32 len, utf8 name, u8 dtype, u32 ndim, u64 dims[ndim]`
//! followed by the row-major values.

use std::collections::BTreeMap;

use super::{DType, ParamStore, Scalar, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"TOFADCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub metadata: BTreeMap<String, String>,
    pub arrays: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn from_params(params: &ParamStore<T>, metadata: BTreeMap<String, String>) -> Self {
        Checkpoint {
            metadata,
            arrays: params.iter().map(|p| (p.name.clone(), p.value.clone())).collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.metadata.len() as u32).to_le_bytes());
        for (k, v) in &self.metadata {
            write_str(&mut out, k);
            write_str(&mut out, v);
        }
        out.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for (name, t) in &self.arrays {
            write_str(&mut out, name);
            out.push(T::DTYPE.code());
            out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                v.write_le(&mut out);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let mut metadata = BTreeMap::new();
        for _ in 0..r.u32()? {
            let k = r.string()?;
            let v = r.string()?;
            metadata.insert(k, v);
        }
        let count = r.u32()?;
        let mut arrays = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let name = r.string()?;
            let dtype = DType::from_code(r.take(1)?[0])
                .ok_or_else(|| Error::Checkpoint(format!("unknown dtype for {name}")))?;
            if dtype != T::DTYPE {
                return Err(Error::Checkpoint(format!(
                    "array {name} stored as {dtype:?}, requested {:?}",
                    T::DTYPE
                )));
            }
            let ndim = r.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u64()? as usize);
            }
            let numel: usize = shape.iter().product();
            let raw = r.take(numel * dtype.size())?;
            let data = raw.chunks_exact(dtype.size()).map(T::read_le).collect();
            arrays.push((name, Tensor::new(&shape, data)?));
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        Ok(Checkpoint { metadata, arrays })
    }

    /// Copies stored arrays into `params`, matching by name and shape.
    pub fn load_into(&self, params: &mut ParamStore<T>) -> Result<()> {
        if self.arrays.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} arrays, model has {}",
                self.arrays.len(),
                params.len()
            )));
        }
        for (name, t) in &self.arrays {
            let id = params
                .find(name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown array {name}")))?;
            let p = params.get_mut(id);
            if p.value.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "array {name}: shape {:?} vs model {:?}",
                    t.shape(),
                    p.value.shape()
                )));
            }
            p.value = t.clone();
        }
        Ok(())
    }
}

fn write_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
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
            .ok_or_else(|| Error::Checkpoint("truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("invalid utf8".into()))
    }
}
