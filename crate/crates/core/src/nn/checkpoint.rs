//! Checkpoints: a flat little-endian `f64` blob plus a JSON index of
//! `{name, shape, offset}` entries in name order.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::IxDyn;
use serde::{Deserialize, Serialize};

use super::optim::{AdamW, AdamWConfig};
use super::params::ParamSet;
use super::{NnError, Tensor};

const MOMENT1: &str = "optimizer.m/";
const MOMENT2: &str = "optimizer.v/";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointIndex {
    pub entries: Vec<IndexEntry>,
    pub optimizer: Option<OptimizerIndex>,
    pub meta: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerIndex {
    pub step_count: u64,
    pub config: AdamWConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ParamSet,
    pub optimizer: Option<AdamW>,
    pub meta: serde_json::Value,
}

pub fn blob_path(index: &Path) -> PathBuf {
    index.with_extension("bin")
}

fn err(path: &Path, detail: impl Into<String>) -> NnError {
    NnError::Checkpoint { path: path.display().to_string(), detail: detail.into() }
}

/// Writes `<index>` (JSON) and its sibling `.bin` blob.
pub fn save(index_path: &Path, params: &ParamSet, optimizer: Option<&AdamW>, meta: serde_json::Value) -> Result<(), NnError> {
    let mut named: Vec<(String, &Tensor)> = params.iter().map(|(k, v)| (k.clone(), v)).collect();
    if let Some(opt) = optimizer {
        for ((k, _), (m, v)) in params.iter().zip(opt.m.iter().zip(&opt.v)) {
            named.push((format!("{MOMENT1}{k}"), m));
            named.push((format!("{MOMENT2}{k}"), v));
        }
    }
    named.sort_by(|a, b| a.0.cmp(&b.0));
    let mut blob = Vec::with_capacity(named.iter().map(|(_, t)| t.len() * 8).sum());
    let mut entries = Vec::with_capacity(named.len());
    for (name, t) in named {
        entries.push(IndexEntry { name, shape: t.shape().to_vec(), offset: blob.len() });
        for v in t.iter() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let index = CheckpointIndex {
        entries,
        optimizer: optimizer.map(|o| OptimizerIndex { step_count: o.step_count, config: o.config }),
        meta,
    };
    if let Some(dir) = index_path.parent() {
        fs::create_dir_all(dir).map_err(|e| err(index_path, e.to_string()))?;
    }
    let json = serde_json::to_vec_pretty(&index).map_err(|e| err(index_path, e.to_string()))?;
    fs::write(index_path, json).map_err(|e| err(index_path, e.to_string()))?;
    let bp = blob_path(index_path);
    fs::write(&bp, blob).map_err(|e| err(&bp, e.to_string()))
}

pub fn load(index_path: &Path) -> Result<Checkpoint, NnError> {
    let text = fs::read(index_path).map_err(|e| err(index_path, e.to_string()))?;
    let index: CheckpointIndex = serde_json::from_slice(&text).map_err(|e| err(index_path, e.to_string()))?;
    let bp = blob_path(index_path);
    let blob = fs::read(&bp).map_err(|e| err(&bp, e.to_string()))?;
    let mut params = ParamSet::new();
    let mut m = ParamSet::new();
    let mut v = ParamSet::new();
    for e in &index.entries {
        let n: usize = e.shape.iter().product();
        let end = e.offset + n * 8;
        if end > blob.len() {
            return Err(err(&bp, format!("entry {} runs past the blob end", e.name)));
        }
        let data = blob[e.offset..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::from_shape_vec(IxDyn(&e.shape), data).unwrap();
        if let Some(k) = e.name.strip_prefix(MOMENT1) {
            m.insert(k, t);
        } else if let Some(k) = e.name.strip_prefix(MOMENT2) {
            v.insert(k, t);
        } else {
            params.insert(e.name.clone(), t);
        }
    }
    let optimizer = match index.optimizer {
        Some(o) => {
            if m.len() != params.len() || v.len() != params.len() || m.names().ne(params.names()) {
                return Err(err(index_path, "optimizer moments do not match parameters"));
            }
            Some(AdamW {
                config: o.config,
                m: m.iter().map(|(_, t)| t.clone()).collect(),
                v: v.iter().map(|(_, t)| t.clone()).collect(),
                step_count: o.step_count,
            })
        }
        None => None,
    };
    Ok(Checkpoint { params, optimizer, meta: index.meta })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::random_tensor;

    #[test]
    fn round_trip_with_optimizer() {
        let dir = tempfile::tempdir().unwrap();
        let mut ps = ParamSet::new();
        ps.insert("z.w", random_tensor(&[3, 4], 1));
        ps.insert("a.b", random_tensor(&[4], 2));
        let mut opt = AdamW::new(&ps, AdamWConfig::default());
        opt.step(&mut ps, &[random_tensor(&[4], 3), random_tensor(&[3, 4], 4)], 1e-2).unwrap();
        let path = dir.path().join("ckpt.json");
        save(&path, &ps, Some(&opt), serde_json::json!({"step": 1})).unwrap();
        let back = load(&path).unwrap();
        assert_eq!(back.params, ps);
        assert_eq!(back.optimizer.unwrap(), opt);
        assert_eq!(back.meta["step"], 1);
        let bytes = std::fs::read(blob_path(&path)).unwrap();
        assert_eq!(bytes.len(), 3 * 16 * 8);
        let first = f64::from_le_bytes(bytes[..8].try_into().unwrap());
        assert_eq!(first, ps.get("a.b").unwrap()[0]);
    }

    #[test]
    fn saving_twice_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let mut ps = ParamSet::new();
        ps.insert("w", random_tensor(&[5], 9));
        let (a, b) = (dir.path().join("a.json"), dir.path().join("b.json"));
        save(&a, &ps, None, serde_json::Value::Null).unwrap();
        save(&b, &ps, None, serde_json::Value::Null).unwrap();
        assert_eq!(std::fs::read(blob_path(&a)).unwrap(), std::fs::read(blob_path(&b)).unwrap());
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }

    #[test]
    fn truncated_blob_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let mut ps = ParamSet::new();
        ps.insert("w", random_tensor(&[5], 9));
        let p = dir.path().join("c.json");
        save(&p, &ps, None, serde_json::Value::Null).unwrap();
        std::fs::write(blob_path(&p), [0u8; 12]).unwrap();
        assert!(matches!(load(&p), Err(NnError::Checkpoint { .. })));
    }
}
