use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Index of a parameter inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Vec<f64>,
    /// First-moment estimate.
    pub m: Vec<f64>,
    /// Second-moment estimate.
    pub v: Vec<f64>,
}

/// Named parameters with gradient accumulators and optimizer state.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: BTreeMap<String, ParamId>,
    /// Number of optimizer updates applied so far.
    pub step: u64,
}

const CHECKPOINT_FORMAT: &str = "pavsgg-params-v1";
const MANIFEST_FILE: &str = "manifest.json";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    step: u64,
    params: Vec<ManifestEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestEntry {
    name: String,
    shape: [usize; 2],
    file: String,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::InvalidConfig(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.params.len());
        let n = value.len();
        self.params.push(Param {
            name: name.clone(),
            value,
            grad: vec![0.0; n],
            m: vec![0.0; n],
            v: vec![0.0; n],
        });
        self.by_name.insert(name, id);
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &[f64] {
        &self.params[id.0].grad
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, g: &[f64]) {
        for (acc, v) in self.params[id.0].grad.iter_mut().zip(g) {
            *acc += v;
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Copies values (not optimizer state) from a store with identical layout.
    pub fn copy_values_from(&mut self, other: &ParamStore) -> Result<()> {
        if self.params.len() != other.params.len() {
            return Err(Error::Checkpoint(format!(
                "parameter count {} vs {}",
                self.params.len(),
                other.params.len()
            )));
        }
        for (dst, src) in self.params.iter_mut().zip(&other.params) {
            if dst.name != src.name || dst.value.shape() != src.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {} {:?} does not match {} {:?}",
                    dst.name,
                    dst.value.shape(),
                    src.name,
                    src.value.shape()
                )));
            }
            dst.value = src.value.clone();
        }
        Ok(())
    }

    /// Writes `manifest.json` plus one little-endian f64 blob per parameter.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut entries = Vec::with_capacity(self.params.len());
        for (i, p) in self.params.iter().enumerate() {
            let file = format!("{i:03}.f64");
            let bytes: Vec<u8> = p.value.data().iter().flat_map(|v| v.to_le_bytes()).collect();
            let path = dir.join(&file);
            fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
            entries.push(ManifestEntry {
                name: p.name.clone(),
                shape: p.value.shape(),
                file,
            });
        }
        let manifest = Manifest {
            format: CHECKPOINT_FORMAT.to_string(),
            step: self.step,
            params: entries,
        };
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json(&path, e))?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    /// Reads a checkpoint written by [`ParamStore::save`].
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
        if manifest.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("unknown format {}", manifest.format)));
        }
        let mut store = ParamStore::new();
        for entry in manifest.params {
            let blob_path = dir.join(&entry.file);
            let bytes = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
            let [rows, cols] = entry.shape;
            if bytes.len() != rows * cols * 8 {
                return Err(Error::Checkpoint(format!(
                    "{}: expected {} bytes, found {}",
                    entry.file,
                    rows * cols * 8,
                    bytes.len()
                )));
            }
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            store.add(entry.name, Tensor::new(rows, cols, data)?)?;
        }
        store.step = manifest.step;
        Ok(store)
    }
}
