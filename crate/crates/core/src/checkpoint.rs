//! Versioned binary container of named tensors.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "ADAFCKPT"
//! version  u32      1
//! count    u32      number of entries
//! entry*   path_len u32, path UTF-8 bytes, ndim u32, dims u64 * ndim,
//!          values f64 * prod(dims)
//! checksum u64      FNV-1a of every preceding byte
//! ```

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Fnv, Tensor};

pub const MAGIC: &[u8; 8] = b"ADAFCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointEntry {
    pub path: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub entries: Vec<CheckpointEntry>,
}

impl Checkpoint {
    /// Snapshot of every weight and buffer in `store`, in store order.
    pub fn from_store(store: &ParamStore) -> Self {
        let entries = store
            .iter()
            .map(|(_, e)| CheckpointEntry {
                path: e.path.clone(),
                shape: e.tensor.shape().to_vec(),
                data: e.tensor.data().to_vec(),
            })
            .collect();
        Self { entries }
    }

    pub fn get(&self, path: &str) -> Option<&CheckpointEntry> {
        self.entries.iter().find(|e| e.path == path)
    }

    pub fn tensor(&self, path: &str) -> Result<Tensor> {
        let e = self
            .get(path)
            .ok_or_else(|| Error::Checkpoint(format!("missing entry `{path}`")))?;
        Tensor::new(&e.shape, e.data.clone())
    }

    /// Overwrites every store entry with the same-path checkpoint entry.
    pub fn restore_into(&self, store: &mut ParamStore) -> Result<()> {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let path = store.entry(id).path.clone();
            let e = self
                .get(&path)
                .ok_or_else(|| Error::Checkpoint(format!("missing entry `{path}`")))?;
            let t = store.tensor_mut(id);
            if e.shape != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "layer `{path}`: checkpoint shape {:?} does not match model shape {:?}",
                    e.shape,
                    t.shape()
                )));
            }
            t.data_mut().copy_from_slice(&e.data);
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.path.len() as u32).to_le_bytes());
            out.extend_from_slice(e.path.as_bytes());
            out.extend_from_slice(&(e.shape.len() as u32).to_le_bytes());
            for &d in &e.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in &e.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut h = Fnv::default();
        h.write(&out);
        out.extend_from_slice(&h.finish().to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |what: &str| Error::Checkpoint(format!("corrupt checkpoint: {what}"));
        if bytes.len() < MAGIC.len() + 16 || &bytes[..8] != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        let mut h = Fnv::default();
        h.write(body);
        if h.finish().to_le_bytes() != tail {
            return Err(corrupt("checksum mismatch"));
        }
        let mut r = Reader { buf: body, pos: 8 };
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = r.u32()? as usize;
            let path = core::str::from_utf8(r.take(len)?)
                .map_err(|_| corrupt("path is not UTF-8"))?
                .into();
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| corrupt("shape overflow"))?;
            let raw = r.take(n.checked_mul(8).ok_or_else(|| corrupt("shape overflow"))?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            entries.push(CheckpointEntry { path, shape, data });
        }
        if r.pos != body.len() {
            return Err(corrupt("trailing bytes"));
        }
        Ok(Self { entries })
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint("corrupt checkpoint: truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
