//! Dense checkpoint files.
//!
//! Layout (little-endian):
//!
//! ```text
//! b"LTPCKPT\0"   magic
//! u32            format version (1)
//! u64            header length in bytes
//! [u8]           JSON header
//! [f64]          tensor values, in header order
//! [u8]           mask bytes (0 or 1), in header order
//! ```
//!
//! The model structure is rebuilt from the model name, input shape, class
//! count and exemptions; registry order is therefore stable across save/load.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::nn::{self, Model, ModelError};
use crate::pruning::{LambdaState, PruneMode};
use crate::tensor::{Precision, Tensor};

const MAGIC: &[u8; 8] = b"LTPCKPT\0";
const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: not a checkpoint file")]
    BadMagic { path: PathBuf },
    #[error("{path}: unsupported checkpoint version {version}")]
    Version { path: PathBuf, version: u32 },
    #[error("{path}: corrupt checkpoint: {reason}")]
    Corrupt { path: PathBuf, reason: String },
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T, E = CheckpointError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Init,
    Pretrain,
    Prune,
    Finalized,
    Finetune,
}

/// Bookkeeping stored alongside the weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub phase: Phase,
    pub epoch: usize,
    pub keep_ratio: f64,
    pub val_loss: Option<f64>,
    pub val_top1: Option<f64>,
    pub lambda: Option<LambdaState>,
    pub source_precision: Precision,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model<f64>,
    pub meta: CheckpointMeta,
    /// Config snapshot of the run that produced the model.
    pub config: Option<RunConfig>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct PrunableEntry {
    name: String,
    tau: f64,
    temp: f64,
    mode: PruneMode,
    masked: bool,
}

#[derive(Serialize, Deserialize)]
struct BatchNormEntry {
    name: String,
    momentum: f64,
    eps: f64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    model: String,
    input_shape: Vec<usize>,
    classes: usize,
    exempt: Vec<String>,
    prunable: Vec<PrunableEntry>,
    batchnorm: Vec<BatchNormEntry>,
    /// Prunable weights, then dense tensors, then running mean/var pairs.
    tensors: Vec<TensorEntry>,
    meta: CheckpointMeta,
    config: Option<String>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let m = &self.model;
        let mut tensors = Vec::new();
        let mut values: Vec<f64> = Vec::new();
        let mut push = |name: String, shape: Vec<usize>, data: &[f64]| {
            tensors.push(TensorEntry { name, shape });
            values.extend_from_slice(data);
        };
        for p in &m.prunable {
            push(p.name.clone(), p.w.shape().to_vec(), p.w.data());
        }
        for d in &m.dense {
            push(d.name.clone(), d.value.shape().to_vec(), d.value.data());
        }
        let bn = m.batchnorm_stats();
        for (name, s) in &bn {
            push(format!("{name}.running_mean"), vec![s.running_mean.len()], &s.running_mean);
            push(format!("{name}.running_var"), vec![s.running_var.len()], &s.running_var);
        }
        let header = Header {
            model: m.name.clone(),
            input_shape: m.input_shape.clone(),
            classes: m.classes,
            exempt: m.exempt.clone(),
            prunable: m
                .prunable
                .iter()
                .map(|p| PrunableEntry {
                    name: p.name.clone(),
                    tau: p.tau,
                    temp: p.temp(),
                    mode: p.mode,
                    masked: p.mask().is_some(),
                })
                .collect(),
            batchnorm: bn
                .iter()
                .map(|(name, s)| BatchNormEntry {
                    name: name.to_string(),
                    momentum: s.momentum,
                    eps: s.eps,
                })
                .collect(),
            tensors,
            meta: self.meta.clone(),
            config: self.config.as_ref().map(RunConfig::serialize),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(20 + json.len() + values.len() * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for v in values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for p in &m.prunable {
            if let Some(mask) = p.mask() {
                out.extend(mask.iter().map(|&b| b as u8));
            }
        }
        out
    }

    pub fn from_bytes(path: &Path, bytes: &[u8]) -> Result<Self> {
        let corrupt = |reason: String| CheckpointError::Corrupt {
            path: path.to_path_buf(),
            reason,
        };
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(CheckpointError::BadMagic {
                path: path.to_path_buf(),
            });
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(CheckpointError::Version {
                path: path.to_path_buf(),
                version,
            });
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = bytes
            .get(20..20 + hlen)
            .ok_or_else(|| corrupt("header truncated".into()))?;
        let header: Header =
            serde_json::from_slice(body).map_err(|e| corrupt(format!("header: {e}")))?;
        let mut cursor = 20 + hlen;

        let mut model: Model<f64> = nn::build(
            &header.model,
            &header.input_shape,
            header.classes,
            0,
            &header.exempt,
        )?;
        let mut values = std::collections::HashMap::new();
        for t in &header.tensors {
            let n: usize = t.shape.iter().product();
            let raw = bytes
                .get(cursor..cursor + 8 * n)
                .ok_or_else(|| corrupt(format!("payload truncated at {}", t.name)))?;
            cursor += 8 * n;
            let data: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            values.insert(t.name.clone(), (t.shape.clone(), data));
        }
        let mut take = |name: &str, shape: &[usize]| -> Result<Vec<f64>> {
            let (s, d) = values
                .remove(name)
                .ok_or_else(|| corrupt(format!("missing tensor {name}")))?;
            if s != shape {
                return Err(corrupt(format!("{name}: shape {s:?}, model expects {shape:?}")));
            }
            Ok(d)
        };
        if header.prunable.len() != model.prunable.len() {
            return Err(corrupt("prunable registry does not match model".into()));
        }
        for (p, e) in model.prunable.iter_mut().zip(&header.prunable) {
            if p.name != e.name {
                return Err(corrupt(format!("registry order: {} vs {}", p.name, e.name)));
            }
            let shape = p.w.shape().to_vec();
            p.w = Tensor::new(shape.clone(), take(&p.name, &shape)?).expect("shape checked");
            p.tau = e.tau;
            p.set_temp(e.temp)
                .map_err(|err| corrupt(format!("{}: {err}", p.name)))?;
            p.mode = e.mode;
        }
        for d in &mut model.dense {
            let shape = d.value.shape().to_vec();
            d.value = Tensor::new(shape.clone(), take(&d.name, &shape)?).expect("shape checked");
        }
        for ((name, stats), e) in model.batchnorm_stats_mut().into_iter().zip(&header.batchnorm) {
            let c = stats.running_mean.len();
            stats.running_mean = take(&format!("{name}.running_mean"), &[c])?;
            stats.running_var = take(&format!("{name}.running_var"), &[c])?;
            stats.momentum = e.momentum;
            stats.eps = e.eps;
        }
        for (p, e) in model.prunable.iter_mut().zip(&header.prunable) {
            if e.masked {
                let n = p.numel();
                let raw = bytes
                    .get(cursor..cursor + n)
                    .ok_or_else(|| corrupt(format!("mask truncated at {}", p.name)))?;
                cursor += n;
                p.set_mask(raw.iter().map(|&b| b != 0).collect())
                    .map_err(|err| corrupt(err.to_string()))?;
            }
        }
        if cursor != bytes.len() {
            return Err(corrupt(format!("{} trailing bytes", bytes.len() - cursor)));
        }
        let config = header
            .config
            .map(|text| RunConfig::parse(&text))
            .transpose()
            .map_err(|e| corrupt(format!("config snapshot: {e}")))?;
        Ok(Self {
            model,
            meta: header.meta,
            config,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|source| CheckpointError::Io {
                path: dir.to_path_buf(),
                source,
            })?;
        }
        crate::atomic_write(path, &self.to_bytes()).map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_bytes(path, &bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meta() -> CheckpointMeta {
        CheckpointMeta {
            phase: Phase::Prune,
            epoch: 3,
            keep_ratio: 0.5,
            val_loss: Some(0.25),
            val_top1: Some(0.875),
            lambda: None,
            source_precision: Precision::F64,
        }
    }

    #[test]
    fn round_trip_preserves_everything() {
        let mut model: Model = nn::build("resnet-lite", &[1, 8, 8], 3, 4, &["fc".into()]).unwrap();
        model.prunable[1].tau = 0.0123;
        model.prunable[1].set_temp(3.5e-5).unwrap();
        model.prunable[2].mode = PruneMode::Hard;
        let n = model.prunable[2].numel();
        model.prunable[2]
            .set_mask((0..n).map(|i| i % 3 == 0).collect())
            .unwrap();
        model.batchnorm_stats_mut()[2].1.running_mean[1] = 0.75;
        let ck = Checkpoint {
            model,
            meta: meta(),
            config: Some(RunConfig::default()),
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub/a.ckpt");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        let names: Vec<_> = back.model.prunable.iter().map(|p| p.name.clone()).collect();
        let orig: Vec<_> = ck.model.prunable.iter().map(|p| p.name.clone()).collect();
        assert_eq!(names, orig);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let model: Model = nn::build("mlp3", &[4], 2, 0, &[]).unwrap();
        let ck = Checkpoint {
            model,
            meta: meta(),
            config: None,
        };
        let bytes = ck.to_bytes();
        let p = Path::new("x");
        assert!(matches!(
            Checkpoint::from_bytes(p, &bytes[..bytes.len() - 3]),
            Err(CheckpointError::Corrupt { .. })
        ));
        assert!(matches!(
            Checkpoint::from_bytes(p, b"not a checkpoint at all"),
            Err(CheckpointError::BadMagic { .. })
        ));
    }
}
