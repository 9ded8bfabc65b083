//! Bit-exact named-tensor serialization.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    b"VTAE"
//! version  u32            (this reader supports 1)
//! flags    u32            (bit 0: PCM kernels are 1x1 pretraining weights)
//! count    u64
//! entry*   name_len u32, name utf8, dtype u8, rank u32, dims u64*rank,
//!          payload (elements * dtype size bytes, little-endian)
//! ```
//!
//! Entries appear in model traversal order; names are unique. The loader
//! validates magic, version and every length against the remaining input
//! before allocating payloads, and rejects trailing bytes.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::{self, Module};
use crate::tensor::{DType, Scalar, Tensor};

pub const MAGIC: [u8; 4] = *b"VTAE";
pub const VERSION: u32 = 1;
const FLAG_PCM_KERNEL_1: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dtype: DType,
    pub dims: Vec<usize>,
    pub payload: Vec<u8>,
}

impl Entry {
    pub fn element_count(&self) -> usize {
        self.dims.iter().product()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// PCM convolution kernel size the weights were trained with (1 or 3).
    pub pcm_kernel: u8,
    pub entries: Vec<Entry>,
}

fn tensor_to_entry<S: Scalar>(name: String, t: &Tensor<S>) -> Entry {
    let mut payload = Vec::with_capacity(t.len() * S::DTYPE.size());
    for &v in t.data() {
        match S::DTYPE {
            DType::F32 => payload.extend_from_slice(&(v.to_f64() as f32).to_le_bytes()),
            DType::F64 => payload.extend_from_slice(&v.to_f64().to_le_bytes()),
        }
    }
    Entry {
        name,
        dtype: S::DTYPE,
        dims: t.shape().to_vec(),
        payload,
    }
}

fn entry_to_tensor<S: Scalar>(entry: &Entry) -> Result<Tensor<S>> {
    if entry.dtype != S::DTYPE {
        return Err(Error::Format(format!(
            "tensor `{}` has dtype {:?}, expected {:?}",
            entry.name,
            entry.dtype,
            S::DTYPE
        )));
    }
    let data = match entry.dtype {
        DType::F32 => entry
            .payload
            .chunks_exact(4)
            .map(|b| S::from_f64(f32::from_le_bytes(b.try_into().unwrap()) as f64))
            .collect(),
        DType::F64 => entry
            .payload
            .chunks_exact(8)
            .map(|b| S::from_f64(f64::from_le_bytes(b.try_into().unwrap())))
            .collect(),
    };
    Ok(Tensor::new(entry.dims.clone(), data))
}

impl Checkpoint {
    /// Snapshot all state of a module in traversal order.
    pub fn from_module<S: Scalar, M: Module<S>>(module: &M, pcm_kernel: u8) -> Self {
        let entries = nn::state_tensors(module)
            .into_iter()
            .map(|(name, t)| tensor_to_entry(name, &t))
            .collect();
        Self {
            pcm_kernel,
            entries,
        }
    }

    /// Restore a module's state; every model slot and every entry must match.
    pub fn load_into<S: Scalar, M: Module<S>>(&self, module: &mut M) -> Result<()> {
        let mut map = HashMap::new();
        for e in &self.entries {
            if map.insert(e.name.clone(), entry_to_tensor::<S>(e)?).is_some() {
                return Err(Error::DuplicateName(e.name.clone()));
            }
        }
        nn::load_state(module, map)
    }

    /// Entries under `prefix.`, with the prefix stripped.
    pub fn subset(&self, prefix: &str) -> Checkpoint {
        let lead = format!("{prefix}.");
        Checkpoint {
            pcm_kernel: self.pcm_kernel,
            entries: self
                .entries
                .iter()
                .filter(|e| e.name.starts_with(&lead))
                .map(|e| Entry {
                    name: e.name[lead.len()..].to_string(),
                    ..e.clone()
                })
                .collect(),
        }
    }

    pub fn names(&self) -> Vec<&str> {
        self.entries.iter().map(|e| e.name.as_str()).collect()
    }

    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.name == name)
    }

    /// Total payload element count.
    pub fn element_count(&self) -> usize {
        self.entries.iter().map(Entry::element_count).sum()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let flags = if self.pcm_kernel == 1 { FLAG_PCM_KERNEL_1 } else { 0 };
        out.extend_from_slice(&flags.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u64).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.push(e.dtype as u8);
            out.extend_from_slice(&(e.dims.len() as u32).to_le_bytes());
            for &d in &e.dims {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&e.payload);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        let magic = cur.take(4)?;
        if magic != MAGIC {
            return Err(Error::BadMagic {
                expected: u32::from_le_bytes(MAGIC),
                found: u32::from_le_bytes(magic.try_into().unwrap()),
            });
        }
        let version = cur.u32()?;
        if version != VERSION {
            return Err(Error::Version {
                found: version,
                supported: VERSION,
            });
        }
        let flags = cur.u32()?;
        let count = cur.u64()? as usize;
        let mut entries = Vec::with_capacity(count.min(4096));
        let mut seen = std::collections::HashSet::new();
        for _ in 0..count {
            let name_len = cur.u32()? as usize;
            let name = String::from_utf8(cur.take(name_len)?.to_vec())
                .map_err(|_| Error::Format("tensor name is not valid UTF-8".into()))?;
            if !seen.insert(name.clone()) {
                return Err(Error::DuplicateName(name));
            }
            let dtype = DType::from_code(cur.u8()?)
                .ok_or_else(|| Error::Format(format!("unknown dtype code in `{name}`")))?;
            let rank = cur.u32()? as usize;
            let mut dims = Vec::with_capacity(rank.min(16));
            for _ in 0..rank {
                dims.push(cur.u64()? as usize);
            }
            let elems: usize = dims.iter().product();
            let payload_len = elems
                .checked_mul(dtype.size())
                .ok_or_else(|| Error::Format(format!("tensor `{name}` dims overflow")))?;
            // length check against the remaining input happens inside take()
            let payload = cur.take(payload_len)?.to_vec();
            entries.push(Entry {
                name,
                dtype,
                dims,
                payload,
            });
        }
        if cur.pos != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after the last entry",
                bytes.len() - cur.pos
            )));
        }
        Ok(Self {
            pcm_kernel: if flags & FLAG_PCM_KERNEL_1 != 0 { 1 } else { 3 },
            entries,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Truncated {
                expected: (self.pos + n) as u64,
                actual: self.bytes.len() as u64,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Names whose shape, dtype or payload differ, plus names present on only one
/// side. Empty means the checkpoints are identical.
pub fn diff(a: &Checkpoint, b: &Checkpoint) -> Vec<String> {
    let mut out = Vec::new();
    let bmap: HashMap<&str, &Entry> = b.entries.iter().map(|e| (e.name.as_str(), e)).collect();
    for ea in &a.entries {
        match bmap.get(ea.name.as_str()) {
            None => out.push(format!("{} (only in first)", ea.name)),
            Some(eb) => {
                if ea.dims != eb.dims || ea.dtype != eb.dtype || ea.payload != eb.payload {
                    out.push(ea.name.clone());
                }
            }
        }
    }
    let amap: std::collections::HashSet<&str> =
        a.entries.iter().map(|e| e.name.as_str()).collect();
    for eb in &b.entries {
        if !amap.contains(eb.name.as_str()) {
            out.push(format!("{} (only in second)", eb.name));
        }
    }
    out
}
