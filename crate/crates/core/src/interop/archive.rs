//! `STTA` tensor archive.
//!
//! Layout, all integers little-endian:
//!
//! | bytes            | content                                  |
//! |------------------|------------------------------------------|
//! | 4                | magic `STTA`                             |
//! | 4                | `u32` version = 1                        |
//! | 8                | `u64` header length `n`                  |
//! | n                | UTF-8 JSON header                        |
//! | rest             | payload, entries back to back            |
//!
//! The header is
//! `{"entries":[{"name","dtype":"f32","shape":[..],"offset","length"}..],"metadata":{..}}`
//! with offsets relative to the payload start. Writing is canonical (entries
//! in archive order, metadata sorted by key), so `write(read(bytes)) == bytes`
//! for archives produced here.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"STTA";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct ArchiveEntry {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl ArchiveEntry {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let e = Self { shape, data };
        e.validate("<new>")?;
        Ok(e)
    }

    fn validate(&self, name: &str) -> Result<()> {
        if self.shape.is_empty()
            || self.shape.contains(&0)
            || self.shape.iter().product::<usize>() != self.data.len()
        {
            return Err(Error::LengthMismatch {
                name: name.to_string(),
                shape: self.shape.clone(),
                length: self.data.len() * 4,
            });
        }
        Ok(())
    }

    pub fn to_tensor<S: Scalar>(&self) -> Tensor<S> {
        Tensor::new(
            self.shape.clone(),
            self.data.iter().map(|&v| S::of(v as f64)).collect(),
        )
        .expect("validated entry")
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TensorArchive {
    /// Entries in write order. Names must be unique.
    pub entries: Vec<(String, ArchiveEntry)>,
    pub metadata: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
struct HeaderEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
    length: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    entries: Vec<HeaderEntry>,
    metadata: BTreeMap<String, String>,
}

impl TensorArchive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, shape: Vec<usize>, data: Vec<f32>) -> Result<()> {
        if self.get(name).is_some() {
            return Err(Error::DuplicateEntry(name.to_string()));
        }
        let e = ArchiveEntry { shape, data };
        e.validate(name)?;
        self.entries.push((name.to_string(), e));
        Ok(())
    }

    pub fn insert_tensor<S: Scalar>(&mut self, name: &str, t: &Tensor<S>) -> Result<()> {
        self.insert(
            name,
            t.shape().to_vec(),
            t.data().iter().map(|v| v.f64() as f32).collect(),
        )
    }

    pub fn get(&self, name: &str) -> Option<&ArchiveEntry> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, e)| e)
    }

    pub fn require(&self, name: &str) -> Result<&ArchiveEntry> {
        self.get(name)
            .ok_or_else(|| Error::MissingEntry(name.to_string()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut seen = HashSet::new();
        let mut header = Header {
            entries: Vec::with_capacity(self.entries.len()),
            metadata: self.metadata.clone(),
        };
        let mut offset = 0u64;
        for (name, e) in &self.entries {
            if !seen.insert(name.as_str()) {
                return Err(Error::DuplicateEntry(name.clone()));
            }
            e.validate(name)?;
            let length = (e.data.len() * 4) as u64;
            header.entries.push(HeaderEntry {
                name: name.clone(),
                dtype: "f32".into(),
                shape: e.shape.clone(),
                offset,
                length,
            });
            offset += length;
        }
        let text =
            serde_json::to_vec(&header).map_err(|e| Error::MalformedHeader(e.to_string()))?;
        let mut out = Vec::with_capacity(16 + text.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(text.len() as u64).to_le_bytes());
        out.extend_from_slice(&text);
        for (_, e) in &self.entries {
            for v in &e.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(Error::BadMagic);
        }
        if bytes.len() < 16 {
            return Err(Error::TruncatedHeader);
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
        let header_end = 16u64
            .checked_add(header_len)
            .filter(|&end| end <= bytes.len() as u64)
            .ok_or(Error::TruncatedHeader)? as usize;
        let header: Header = serde_json::from_slice(&bytes[16..header_end])
            .map_err(|e| Error::MalformedHeader(e.to_string()))?;
        let payload = &bytes[header_end..];

        let mut archive = TensorArchive {
            entries: Vec::with_capacity(header.entries.len()),
            metadata: header.metadata,
        };
        let mut seen = HashSet::new();
        for h in header.entries {
            if !seen.insert(h.name.clone()) {
                return Err(Error::DuplicateEntry(h.name));
            }
            if h.dtype != "f32" {
                return Err(Error::MalformedHeader(format!(
                    "entry {:?} has unsupported dtype {:?}",
                    h.name, h.dtype
                )));
            }
            let n: usize = h.shape.iter().product();
            if h.shape.is_empty() || h.shape.contains(&0) || (n as u64) * 4 != h.length {
                return Err(Error::LengthMismatch {
                    name: h.name,
                    shape: h.shape,
                    length: h.length as usize,
                });
            }
            let end = h
                .offset
                .checked_add(h.length)
                .filter(|&end| end <= payload.len() as u64)
                .ok_or_else(|| Error::TruncatedPayload(h.name.clone()))?;
            let data = payload[h.offset as usize..end as usize]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            archive.entries.push((
                h.name,
                ArchiveEntry {
                    shape: h.shape,
                    data,
                },
            ));
        }
        Ok(archive)
    }
}

pub fn write_archive(a: &TensorArchive, path: &Path) -> Result<()> {
    fs::write(path, a.to_bytes()?)?;
    Ok(())
}

pub fn read_archive(path: &Path) -> Result<TensorArchive> {
    TensorArchive::from_bytes(&fs::read(path)?)
}
