//! Named-tensor checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    8 bytes  "MBANETCK"
//! version  u32
//! meta     u32 length + UTF-8 bytes (network config as JSON, may be empty)
//! count    u32
//! entries  count x { u32 name length, name, u8 dtype, u32 ndim, ndim x u64 dims, u64 offset }
//! payload  raw little-endian tensor data; offsets are relative to its start
//! ```

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{numel, DType, ParamStore, Real, Tensor};

pub const MAGIC: &[u8; 8] = b"MBANETCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Entry {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    bytes: Vec<u8>,
}

impl Entry {
    pub fn to_tensor<T: Real>(&self) -> Result<Tensor<T>> {
        let data: Vec<T> = match self.dtype {
            DType::F32 => self.bytes.chunks_exact(4).map(|b| T::lit(f32::read_le(b) as f64)).collect(),
            DType::F64 => self.bytes.chunks_exact(8).map(|b| T::lit(f64::read_le(b))).collect(),
        };
        Tensor::new(self.shape.clone(), data)
    }
}

#[derive(Debug, Clone)]
pub struct CheckpointFile {
    pub meta: String,
    pub entries: Vec<Entry>,
}

pub fn save<T: Real>(path: &Path, meta: &str, store: &ParamStore<T>) -> Result<()> {
    let mut header = Vec::new();
    header.extend_from_slice(MAGIC);
    header.extend_from_slice(&VERSION.to_le_bytes());
    header.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    header.extend_from_slice(meta.as_bytes());
    header.extend_from_slice(&(store.len() as u32).to_le_bytes());
    let mut payload = Vec::new();
    for (_, p) in store.iter() {
        header.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        header.extend_from_slice(p.name.as_bytes());
        header.push(T::DTYPE.code());
        header.extend_from_slice(&(p.value.rank() as u32).to_le_bytes());
        for &d in p.value.shape() {
            header.extend_from_slice(&(d as u64).to_le_bytes());
        }
        header.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        for &v in p.value.data() {
            v.write_le(&mut payload);
        }
    }
    header.extend_from_slice(&payload);
    fs::write(path, header).map_err(|e| Error::io(path, e))
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
            .ok_or_else(|| Error::Checkpoint(format!("header truncated at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("name is not UTF-8".into()))
    }
}

pub fn parse(bytes: &[u8]) -> Result<CheckpointFile> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(MAGIC.len()).ok() != Some(MAGIC.as_slice()) {
        return Err(Error::Checkpoint("bad magic bytes".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let meta = r.string()?;
    let count = r.u32()? as usize;
    let mut headers = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name = r.string()?;
        let code = r.take(1)?[0];
        let dtype = DType::from_code(code).ok_or_else(|| Error::Checkpoint(format!("{name}: unknown dtype {code}")))?;
        let ndim = r.u32()? as usize;
        if ndim > 8 {
            return Err(Error::Checkpoint(format!("{name}: rank {ndim} too large")));
        }
        let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let offset = r.u64()? as usize;
        headers.push((name, dtype, shape, offset));
    }
    let payload = &bytes[r.pos..];
    let mut entries = Vec::with_capacity(headers.len());
    for (name, dtype, shape, offset) in headers {
        let len = numel(&shape)
            .checked_mul(dtype.size())
            .ok_or_else(|| Error::Checkpoint(format!("{name}: size overflow")))?;
        let data = offset
            .checked_add(len)
            .filter(|&end| end <= payload.len())
            .map(|end| &payload[offset..end])
            .ok_or_else(|| Error::Checkpoint(format!("{name}: payload truncated")))?;
        entries.push(Entry {
            name,
            dtype,
            shape,
            bytes: data.to_vec(),
        });
    }
    Ok(CheckpointFile { meta, entries })
}

pub fn read(path: &Path) -> Result<CheckpointFile> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse(&bytes).map_err(|e| match e {
        Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
        other => other,
    })
}

impl CheckpointFile {
    /// Replace every tensor in `store`. The file must name exactly the store's tensors.
    pub fn load_into<T: Real>(&self, store: &mut ParamStore<T>) -> Result<()> {
        self.load_subset(store, |_| true)
    }

    /// Replace the store tensors selected by `wanted`. Every file entry must be
    /// wanted and present; every wanted tensor must be in the file. Nothing is
    /// modified unless all checks pass.
    pub fn load_subset<T: Real>(&self, store: &mut ParamStore<T>, wanted: impl Fn(&str) -> bool) -> Result<()> {
        let mut problems = Vec::new();
        let mut staged = Vec::with_capacity(self.entries.len());
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.name.as_str()) {
                problems.push(format!("duplicate tensor {}", e.name));
                continue;
            }
            let Some(id) = store.id(&e.name).filter(|_| wanted(&e.name)) else {
                problems.push(format!("unknown tensor {}", e.name));
                continue;
            };
            let expected = store.value(id).shape();
            if expected != e.shape.as_slice() {
                problems.push(format!("{}: shape {:?}, expected {:?}", e.name, e.shape, expected));
                continue;
            }
            staged.push((id, e.to_tensor::<T>()?));
        }
        let missing: Vec<&str> = store
            .iter()
            .map(|(_, p)| p.name.as_str())
            .filter(|n| wanted(n) && !seen.contains(n))
            .collect();
        if !missing.is_empty() {
            problems.push(format!("missing tensors: {}", missing.join(", ")));
        }
        if !problems.is_empty() {
            return Err(Error::Checkpoint(problems.join("; ")));
        }
        for (id, t) in staged {
            *store.value_mut(id) = t;
        }
        Ok(())
    }
}
