//! Single-file checkpoint archives.
//!
//! Layout: the 8-byte magic `EARCKPT1`, a little-endian `u64` header length,
//! a JSON header, then every tensor as little-endian `f64` in header order.
//! The header carries the model, crop and shift specs alongside the epoch and
//! validation accuracy that produced the weights.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{BackboneSpec, HeadSpec, Model};
use crate::sampler::CropSpec;
use crate::shift::ShiftConfig;

const MAGIC: &[u8; 8] = b"EARCKPT1";

pub type TensorMap = BTreeMap<String, (Vec<usize>, Vec<f64>)>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResumeState {
    pub next_epoch: usize,
    pub best_val_accuracy: f64,
    pub best_epoch: Option<usize>,
    pub best_checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub backbone: BackboneSpec,
    pub head: HeadSpec,
    pub shift: ShiftConfig,
    pub crop: CropSpec,
    /// Epoch (0-based) whose weights are stored.
    pub epoch: Option<usize>,
    pub val_accuracy: Option<f64>,
    pub resume: Option<ResumeState>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: TensorMap,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorIndex {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    meta: Option<CheckpointMeta>,
    tensors: Vec<TensorIndex>,
}

impl Checkpoint {
    pub fn from_model(model: &Model, crop: &CropSpec) -> Self {
        Self {
            meta: CheckpointMeta {
                backbone: model.backbone().clone(),
                head: model.head().clone(),
                shift: model.shift().clone(),
                crop: crop.clone(),
                epoch: None,
                val_accuracy: None,
                resume: None,
            },
            tensors: model.state(),
        }
    }

    /// Model parameters only, without optimizer entries.
    pub fn model_state(&self) -> TensorMap {
        self.tensors
            .iter()
            .filter(|(k, _)| !k.starts_with(OPTIMIZER_PREFIX))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_archive(path, Some(&self.meta), &self.tensors)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (meta, tensors) = read_archive(path)?;
        let meta = meta.ok_or_else(|| {
            Error::Checkpoint(format!("{} has no model metadata", path.display()))
        })?;
        Ok(Self { meta, tensors })
    }
}

pub const OPTIMIZER_PREFIX: &str = "optimizer.";

pub fn write_archive(path: &Path, meta: Option<&CheckpointMeta>, tensors: &TensorMap) -> Result<()> {
    let header = Header {
        meta: meta.cloned(),
        tensors: tensors
            .iter()
            .map(|(name, (shape, _))| TensorIndex {
                name: name.clone(),
                shape: shape.clone(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)
        .map_err(|e| Error::Checkpoint(format!("cannot encode header: {e}")))?;
    let tmp = path.with_extension("tmp");
    {
        let file = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        let mut w = BufWriter::new(file);
        let io = |e| Error::io(&tmp, e);
        w.write_all(MAGIC).map_err(io)?;
        w.write_all(&(json.len() as u64).to_le_bytes()).map_err(io)?;
        w.write_all(&json).map_err(io)?;
        for (shape, data) in tensors.values() {
            debug_assert_eq!(shape.iter().product::<usize>(), data.len());
            for v in data {
                w.write_all(&v.to_le_bytes()).map_err(io)?;
            }
        }
        w.flush().map_err(io)?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_archive(path: &Path) -> Result<(Option<CheckpointMeta>, TensorMap)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let bad = |m: &str| Error::Checkpoint(format!("{}: {m}", path.display()));
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| bad("truncated file"))?;
    if &magic != MAGIC {
        return Err(bad("not a checkpoint archive"));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len).map_err(|_| bad("truncated header length"))?;
    let len = u64::from_le_bytes(len) as usize;
    let mut json = vec![0u8; len];
    r.read_exact(&mut json).map_err(|_| bad("truncated header"))?;
    let header: Header =
        serde_json::from_slice(&json).map_err(|e| bad(&format!("bad header: {e}")))?;
    let mut tensors = TensorMap::new();
    let mut buf = [0u8; 8];
    for t in header.tensors {
        let n: usize = t.shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            r.read_exact(&mut buf)
                .map_err(|_| bad(&format!("truncated tensor {}", t.name)))?;
            data.push(f64::from_le_bytes(buf));
        }
        tensors.insert(t.name, (t.shape, data));
    }
    if r.read(&mut buf).map_err(|e| Error::io(path, e))? != 0 {
        return Err(bad("trailing bytes after the last tensor"));
    }
    Ok((header.meta, tensors))
}

pub fn read_tensors(path: &Path) -> Result<TensorMap> {
    Ok(read_archive(path)?.1)
}
