//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes   b"SVCKPT\0\0"
//! version  u32       FORMAT_VERSION
//! hlen     u64       length of the JSON header
//! header   hlen      UTF-8 JSON: {"kind", "meta", "groups": [{"name", "tensors": [{"name", "shape"}]}]}
//! payload  f64 * N   every tensor's data, in header order
//! ```
//!
//! Readers reject unknown major versions. Writers go through a temporary file
//! and rename, so a crash never leaves a truncated checkpoint behind.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{NnError, ParamSet, Result, Tensor};

pub const MAGIC: &[u8; 8] = b"SVCKPT\0\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub meta: serde_json::Value,
    pub groups: Vec<(String, ParamSet)>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    kind: String,
    meta: serde_json::Value,
    groups: Vec<GroupHeader>,
}

#[derive(Serialize, Deserialize)]
struct GroupHeader {
    name: String,
    tensors: Vec<TensorHeader>,
}

#[derive(Serialize, Deserialize)]
struct TensorHeader {
    name: String,
    shape: Vec<usize>,
}

impl Checkpoint {
    pub fn new(kind: impl Into<String>, meta: serde_json::Value) -> Self {
        Self {
            kind: kind.into(),
            meta,
            groups: Vec::new(),
        }
    }

    pub fn with_group(mut self, name: impl Into<String>, params: ParamSet) -> Self {
        self.groups.push((name.into(), params));
        self
    }

    pub fn group(&self, name: &str) -> Result<&ParamSet> {
        self.groups
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, p)| p)
            .ok_or_else(|| NnError::Checkpoint(format!("missing group `{name}`")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            groups: self
                .groups
                .iter()
                .map(|(name, p)| GroupHeader {
                    name: name.clone(),
                    tensors: p
                        .iter()
                        .map(|(n, t)| TensorHeader {
                            name: n.to_string(),
                            shape: t.shape().to_vec(),
                        })
                        .collect(),
                })
                .collect(),
        };
        let header = serde_json::to_vec(&header)?;
        let scalars: usize = self.groups.iter().map(|(_, p)| p.num_scalars()).sum();
        let mut out = Vec::with_capacity(20 + header.len() + 8 * scalars);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, p) in &self.groups {
            for (_, t) in p.iter() {
                for v in t.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| NnError::Checkpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(NnError::Checkpoint(format!(
                "unsupported format version {version}"
            )));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = bytes
            .get(20..20 + hlen)
            .ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(body)?;
        let mut off = 20 + hlen;
        let mut groups = Vec::with_capacity(header.groups.len());
        for g in header.groups {
            let mut params = ParamSet::new();
            for th in g.tensors {
                let n: usize = th.shape.iter().product();
                let raw = bytes
                    .get(off..off + 8 * n)
                    .ok_or_else(|| bad("truncated payload"))?;
                let data = raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                off += 8 * n;
                params.insert(th.name, Tensor::new(&th.shape, data)?);
            }
            groups.push((g.name, params));
        }
        if off != bytes.len() {
            return Err(bad("trailing bytes after payload"));
        }
        Ok(Self {
            kind: header.kind,
            meta: header.meta,
            groups,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        write_atomic(path, &bytes)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Write `bytes` to a sibling temp file, fsync, then rename over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    if let Some(dir) = dir {
        fs::create_dir_all(dir)?;
    }
    let file_name = path
        .file_name()
        .ok_or_else(|| NnError::Checkpoint(format!("bad path {}", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", file_name.to_string_lossy()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}
