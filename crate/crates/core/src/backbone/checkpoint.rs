//! Versioned binary container of named f64 tensors plus a JSON metadata blob.
//!
//! Layout (little-endian): magic `MTKWSCKP`, u32 version, u64 metadata length,
//! metadata bytes, u64 tensor count, then per tensor: u32 name length, name,
//! u32 rank, u64 dims, raw f64 values.

use std::io::{Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"MTKWSCKP";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TensorArchive {
    pub metadata: String,
    pub tensors: Vec<NamedTensor>,
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

impl TensorArchive {
    pub fn push(&mut self, name: impl Into<String>, shape: &[usize], data: &[f64]) {
        self.tensors.push(NamedTensor {
            name: name.into(),
            shape: shape.to_vec(),
            data: data.to_vec(),
        });
    }

    pub fn get(&self, name: &str) -> Result<&NamedTensor> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::Checkpoint(format!("tensor `{name}` missing")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.metadata.len() as u64).to_le_bytes());
        out.extend_from_slice(self.metadata.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u64).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for d in &t.shape {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<TensorArchive> {
        let r = &mut bytes;
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)
            .map_err(|_| Error::Checkpoint("truncated header".into()))?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let meta_len = read_u64(r)? as usize;
        if meta_len > r.len() {
            return Err(Error::Checkpoint("metadata length exceeds file".into()));
        }
        let (meta, rest) = r.split_at(meta_len);
        let metadata = String::from_utf8(meta.to_vec())
            .map_err(|_| Error::Checkpoint("metadata is not UTF-8".into()))?;
        *r = rest;
        let count = read_u64(r)?;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let name_len = read_u32(r)? as usize;
            if name_len > r.len() {
                return Err(Error::Checkpoint("truncated tensor name".into()));
            }
            let (name, rest) = r.split_at(name_len);
            let name = String::from_utf8(name.to_vec())
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            *r = rest;
            let rank = read_u32(r)? as usize;
            let shape = (0..rank)
                .map(|_| read_u64(r).map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            if n.checked_mul(8).map_or(true, |b| b > r.len()) {
                return Err(Error::Checkpoint(format!("tensor `{name}` truncated")));
            }
            let data = (0..n).map(|_| read_u64(r).map(f64::from_bits)).collect::<Result<Vec<_>>>()?;
            tensors.push(NamedTensor { name, shape, data });
        }
        if !r.is_empty() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        Ok(TensorArchive { metadata, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<TensorArchive> {
        let bytes = std::fs::read(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingArtifact {
                path: path.to_path_buf(),
                what: "checkpoint".into(),
            },
            _ => Error::Io(e),
        })?;
        TensorArchive::from_bytes(&bytes)
    }

    /// SHA-256 of the serialized archive.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }
}
