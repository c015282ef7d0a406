//! Manifest-plus-blob container.
//!
//! The first line is a JSON manifest listing `{name, shape, offset}` per
//! tensor (offset in bytes from the start of the blob), terminated by a
//! newline. The blob that follows is every tensor's data as little-endian
//! `f32`, in manifest order.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct BlobEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct BlobFile {
    pub entries: Vec<BlobEntry>,
    /// Free-form string metadata stored in the manifest.
    pub meta: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    tensors: Vec<ManifestEntry>,
    #[serde(default)]
    meta: BTreeMap<String, String>,
}

impl BlobFile {
    pub fn get(&self, name: &str) -> Option<&BlobEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.entries.push(BlobEntry {
            name: name.into(),
            shape,
            data,
        });
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0;
        let mut tensors = Vec::with_capacity(self.entries.len());
        for e in &self.entries {
            tensors.push(ManifestEntry {
                name: e.name.clone(),
                shape: e.shape.clone(),
                offset,
            });
            offset += e.data.len() * 4;
        }
        let manifest = Manifest {
            tensors,
            meta: self.meta.clone(),
        };
        let mut out = serde_json::to_vec(&manifest)?;
        out.push(b'\n');
        out.reserve(offset);
        for e in &self.entries {
            for x in &e.data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Load("missing manifest terminator".into()))?;
        let manifest: Manifest = serde_json::from_slice(&bytes[..nl])?;
        let blob = &bytes[nl + 1..];
        let mut entries = Vec::with_capacity(manifest.tensors.len());
        for m in manifest.tensors {
            let n: usize = m.shape.iter().product();
            let end = m.offset + n * 4;
            if end > blob.len() {
                return Err(Error::Load(format!(
                    "tensor `{}` runs past the end of the blob ({} > {})",
                    m.name,
                    end,
                    blob.len()
                )));
            }
            let data = blob[m.offset..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            entries.push(BlobEntry {
                name: m.name,
                shape: m.shape,
                data,
            });
        }
        Ok(Self {
            entries,
            meta: manifest.meta,
        })
    }
}

pub fn write_blob_file(path: &Path, file: &BlobFile) -> Result<()> {
    let bytes = file.to_bytes()?;
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_blob_file(path: &Path) -> Result<BlobFile> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    BlobFile::from_bytes(&bytes)
}
