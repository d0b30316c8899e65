//! Named parameter storage and the on-disk checkpoint format.
//!
//! A checkpoint is two files sharing a stem:
//!
//! * `<stem>.json`: manifest `{"format": "fbsde-params-v1", "dtype": "f64-le",
//!   "total": <element count>, "params": [{"name", "shape", "offset"}, ...]}`.
//!   Offsets and `total` count elements, not bytes.
//! * `<stem>.bin`: `total` IEEE-754 binary64 values, little-endian, no header,
//!   in the order given by the offsets.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, NnError, Result};

pub const CHECKPOINT_FORMAT: &str = "fbsde-params-v1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(u32);

impl ParamId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl ParamEntry {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// All trainable values of a model in one flat buffer.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    dtype: String,
    total: usize,
    params: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], values: Vec<f64>) -> ParamId {
        let numel: usize = shape.iter().product();
        assert_eq!(numel, values.len(), "parameter values do not match shape");
        let id = ParamId(self.entries.len() as u32);
        self.entries.push(ParamEntry { name: name.into(), shape: shape.to_vec(), offset: self.data.len() });
        self.data.extend(values);
        id
    }

    pub fn count(&self) -> usize {
        self.entries.len()
    }

    /// Total number of scalar parameters.
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = (ParamId, &ParamEntry)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i as u32), e))
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.index()]
    }

    pub fn offset(&self, id: ParamId) -> usize {
        self.entries[id.index()].offset
    }

    pub fn find(&self, name: &str) -> Result<ParamId, NnError> {
        self.entries
            .iter()
            .position(|e| e.name == name)
            .map(|i| ParamId(i as u32))
            .ok_or_else(|| NnError::UnknownParam(name.to_string()))
    }

    pub fn get(&self, id: ParamId) -> &[f64] {
        let e = &self.entries[id.index()];
        &self.data[e.offset..e.offset + e.numel()]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [f64] {
        let e = &self.entries[id.index()];
        let n = e.numel();
        &mut self.data[e.offset..e.offset + n]
    }

    pub fn flat(&self) -> &[f64] {
        &self.data
    }

    pub fn flat_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    fn paths(stem: &Path) -> (PathBuf, PathBuf) {
        (stem.with_extension("json"), stem.with_extension("bin"))
    }

    pub fn save(&self, stem: &Path) -> Result<()> {
        let (manifest_path, blob_path) = Self::paths(stem);
        if let Some(dir) = stem.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir)?;
            }
        }
        let manifest = Manifest {
            format: CHECKPOINT_FORMAT.to_string(),
            dtype: "f64-le".to_string(),
            total: self.data.len(),
            params: self.entries.clone(),
        };
        fs::write(&manifest_path, serde_json::to_string_pretty(&manifest)?)?;
        let mut blob = Vec::with_capacity(self.data.len() * 8);
        for v in &self.data {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(&blob_path, blob)?;
        Ok(())
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let (manifest_path, blob_path) = Self::paths(stem);
        let bad = |path: &Path, reason: String| Error::Checkpoint { path: path.to_path_buf(), reason };
        let text = fs::read_to_string(&manifest_path).map_err(|e| bad(&manifest_path, e.to_string()))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| bad(&manifest_path, e.to_string()))?;
        if manifest.format != CHECKPOINT_FORMAT || manifest.dtype != "f64-le" {
            return Err(bad(&manifest_path, format!("unsupported format {} / {}", manifest.format, manifest.dtype)));
        }
        let blob = fs::read(&blob_path).map_err(|e| bad(&blob_path, e.to_string()))?;
        if blob.len() != manifest.total * 8 {
            return Err(bad(&blob_path, format!("expected {} bytes, found {}", manifest.total * 8, blob.len())));
        }
        let data: Vec<f64> =
            blob.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))).collect();
        let mut expected_offset = 0;
        for e in &manifest.params {
            if e.offset != expected_offset {
                return Err(bad(&manifest_path, format!("parameter `{}` has non-contiguous offset", e.name)));
            }
            expected_offset += e.numel();
        }
        if expected_offset != manifest.total {
            return Err(bad(&manifest_path, "parameter shapes do not cover the blob".into()));
        }
        Ok(Self { entries: manifest.params, data })
    }

    /// Copies values from `other`, which must have the same layout.
    pub fn assign_from(&mut self, other: &ParamStore) -> Result<()> {
        if self.entries != other.entries {
            return Err(Error::Config("checkpoint layout does not match the configured network".into()));
        }
        self.data.copy_from_slice(&other.data);
        Ok(())
    }
}
