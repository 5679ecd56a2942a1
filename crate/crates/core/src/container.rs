//! Manifest-plus-blob framing shared by datasets and checkpoints.
//!
//! `<name>.json` holds a pretty-printed manifest describing named arrays;
//! `<name>.bin` next to it holds their raw little-endian bytes back to back.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F64,
    U8,
}

impl Dtype {
    fn width(self) -> usize {
        match self {
            Dtype::F64 => 8,
            Dtype::U8 => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Entry {
    pub name: String,
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: usize,
}

impl Entry {
    pub fn elements(&self) -> usize {
        self.shape.iter().product()
    }

    fn bytes(&self) -> usize {
        self.elements() * self.dtype.width()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest<M> {
    pub format: String,
    pub version: u32,
    pub blob: String,
    pub blob_bytes: usize,
    pub meta: M,
    pub entries: Vec<Entry>,
}

pub const VERSION: u32 = 1;

/// Accumulates arrays in insertion order.
#[derive(Debug, Default)]
pub struct BlobWriter {
    entries: Vec<Entry>,
    bytes: Vec<u8>,
}

impl BlobWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push_f64(&mut self, name: impl Into<String>, shape: &[usize], values: &[f64]) -> Result<()> {
        let name = name.into();
        if shape.iter().product::<usize>() != values.len() {
            return Err(Error::shape("container", format!("{name}: shape {shape:?} for {} values", values.len())));
        }
        self.entries.push(Entry {
            name,
            dtype: Dtype::F64,
            shape: shape.to_vec(),
            offset: self.bytes.len(),
        });
        self.bytes.reserve(values.len() * 8);
        for v in values {
            self.bytes.extend_from_slice(&v.to_le_bytes());
        }
        Ok(())
    }

    pub fn push_u8(&mut self, name: impl Into<String>, shape: &[usize], values: &[u8]) -> Result<()> {
        let name = name.into();
        if shape.iter().product::<usize>() != values.len() {
            return Err(Error::shape("container", format!("{name}: shape {shape:?} for {} values", values.len())));
        }
        self.entries.push(Entry {
            name,
            dtype: Dtype::U8,
            shape: shape.to_vec(),
            offset: self.bytes.len(),
        });
        self.bytes.extend_from_slice(values);
        Ok(())
    }

    /// Writes `path` (manifest) and its sibling `.bin` blob.
    pub fn write<M: Serialize>(self, path: &Path, format: &str, meta: M) -> Result<()> {
        let blob_path = blob_path(path);
        let blob_name = blob_path
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| Error::Invalid(format!("cannot derive blob name from {}", path.display())))?
            .to_string();
        let manifest = Manifest {
            format: format.to_string(),
            version: VERSION,
            blob: blob_name,
            blob_bytes: self.bytes.len(),
            meta,
            entries: self.entries,
        };
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let mut text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json(path, e))?;
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))?;
        fs::write(&blob_path, &self.bytes).map_err(|e| Error::io(&blob_path, e))?;
        Ok(())
    }
}

fn blob_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

/// A loaded manifest with its blob.
#[derive(Debug)]
pub struct Container<M> {
    pub manifest: Manifest<M>,
    path: PathBuf,
    bytes: Vec<u8>,
}

impl<M: DeserializeOwned> Container<M> {
    pub fn read(path: &Path, format: &str) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let manifest: Manifest<M> = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        if manifest.format != format {
            return Err(Error::Format {
                path: path.to_path_buf(),
                detail: format!("expected a {format} manifest, found {}", manifest.format),
            });
        }
        if manifest.version != VERSION {
            return Err(Error::Format {
                path: path.to_path_buf(),
                detail: format!("unsupported version {}", manifest.version),
            });
        }
        let blob = path.with_file_name(&manifest.blob);
        let bytes = fs::read(&blob).map_err(|e| Error::io(&blob, e))?;
        if bytes.len() != manifest.blob_bytes {
            return Err(Error::Truncated {
                path: blob,
                expected: manifest.blob_bytes,
                found: bytes.len(),
            });
        }
        for e in &manifest.entries {
            if e.offset + e.bytes() > bytes.len() {
                return Err(Error::Format {
                    path: path.to_path_buf(),
                    detail: format!("entry {} runs past the end of the blob", e.name),
                });
            }
        }
        Ok(Self {
            manifest,
            path: path.to_path_buf(),
            bytes,
        })
    }
}

impl<M> Container<M> {
    pub fn entry(&self, name: &str) -> Result<&Entry> {
        self.manifest
            .entries
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::Format {
                path: self.path.clone(),
                detail: format!("missing entry {name}"),
            })
    }

    fn typed(&self, name: &str, dtype: Dtype) -> Result<(&Entry, &[u8])> {
        let e = self.entry(name)?;
        if e.dtype != dtype {
            return Err(Error::Format {
                path: self.path.clone(),
                detail: format!("entry {name} is {:?}, expected {dtype:?}", e.dtype),
            });
        }
        Ok((e, &self.bytes[e.offset..e.offset + e.bytes()]))
    }

    pub fn f64(&self, name: &str) -> Result<(Vec<usize>, Vec<f64>)> {
        let (e, raw) = self.typed(name, Dtype::F64)?;
        let values = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        Ok((e.shape.clone(), values))
    }

    pub fn u8(&self, name: &str) -> Result<(Vec<usize>, Vec<u8>)> {
        let (e, raw) = self.typed(name, Dtype::U8)?;
        Ok((e.shape.clone(), raw.to_vec()))
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_bits() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub").join("thing.json");
        let values = [0.1, -0.0, f64::MIN_POSITIVE, 1e300, -3.5];
        let mut w = BlobWriter::new();
        w.push_f64("a", &[5], &values).unwrap();
        w.push_u8("b", &[2, 2], &[1, 2, 3, 255]).unwrap();
        w.write(&path, "test", serde_json::json!({"k": 1})).unwrap();
        let c: Container<serde_json::Value> = Container::read(&path, "test").unwrap();
        let (shape, back) = c.f64("a").unwrap();
        assert_eq!(shape, vec![5]);
        for (x, y) in values.iter().zip(&back) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        assert_eq!(c.u8("b").unwrap().1, vec![1, 2, 3, 255]);
        assert!(c.f64("b").is_err());
        assert!(c.f64("missing").is_err());
        assert!(Container::<serde_json::Value>::read(&path, "other").is_err());
    }

    #[test]
    fn truncated_blob_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.json");
        let mut w = BlobWriter::new();
        w.push_f64("a", &[3], &[1.0, 2.0, 3.0]).unwrap();
        w.write(&path, "test", ()).unwrap();
        let blob = path.with_extension("bin");
        let bytes = fs::read(&blob).unwrap();
        fs::write(&blob, &bytes[..10]).unwrap();
        let err = Container::<()>::read(&path, "test").unwrap_err();
        assert!(matches!(err, Error::Truncated { expected: 24, found: 10, .. }));
    }

    #[test]
    fn shape_checked_on_push() {
        let mut w = BlobWriter::new();
        assert!(w.push_f64("a", &[2, 2], &[1.0]).is_err());
        assert!(w.push_u8("a", &[3], &[1]).is_err());
    }
}
