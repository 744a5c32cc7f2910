//! Portable sparse-model artifact.
//!
//! A single file: a UTF-8 manifest of `key = value` lines terminated by an
//! empty line, followed by the binary payload. Every prunable layer is stored
//! as a CSR matrix with rows = output channels (conv kernels flattened to
//! `out × (in·kh·kw)`): `rows + 1` row pointers (u64), then column indices
//! (u32), then values (f32), all little-endian. Dense tensors (biases,
//! batch-norm parameters and running statistics, exempted weights) follow as
//! raw f32 blocks in manifest order.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use num_rational::Ratio;

use crate::checkpoint::Checkpoint;
use crate::tensor::Precision;
use crate::trainer::finalize_model;

pub const MAGIC_LINE: &str = "ltp-sparse-artifact";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum ArtifactError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("not a sparse artifact (missing manifest header)")]
    BadMagic,
    #[error("unsupported artifact format_version {0}")]
    Version(u32),
    #[error("manifest line {line}: {reason}")]
    Manifest { line: usize, reason: String },
    #[error("manifest is missing key {0:?}")]
    MissingKey(String),
    #[error("payload: {0}")]
    Payload(String),
    #[error("compression rate is undefined when no weights are kept")]
    NothingKept,
}

pub type Result<T, E = ArtifactError> = std::result::Result<T, E>;

/// Compressed-sparse-row matrix of f32 values.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    pub rows: usize,
    pub cols: usize,
    pub row_ptr: Vec<u64>,
    pub col_idx: Vec<u32>,
    pub values: Vec<f32>,
}

impl CsrMatrix {
    /// Stores every entry whose bit pattern is not `+0.0`.
    pub fn from_dense(rows: usize, cols: usize, dense: &[f32]) -> Self {
        assert_eq!(rows * cols, dense.len(), "dense length must be rows * cols");
        let mut row_ptr = Vec::with_capacity(rows + 1);
        let (mut col_idx, mut values) = (Vec::new(), Vec::new());
        row_ptr.push(0);
        for r in 0..rows {
            for (c, &v) in dense[r * cols..(r + 1) * cols].iter().enumerate() {
                if v.to_bits() != 0 {
                    col_idx.push(c as u32);
                    values.push(v);
                }
            }
            row_ptr.push(values.len() as u64);
        }
        Self {
            rows,
            cols,
            row_ptr,
            col_idx,
            values,
        }
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn to_dense(&self) -> Vec<f32> {
        let mut out = vec![0.0f32; self.rows * self.cols];
        for r in 0..self.rows {
            let (a, b) = (self.row_ptr[r] as usize, self.row_ptr[r + 1] as usize);
            for k in a..b {
                out[r * self.cols + self.col_idx[k] as usize] = self.values[k];
            }
        }
        out
    }

    fn byte_len(&self) -> usize {
        8 * (self.rows + 1) + 4 * self.nnz() + 4 * self.nnz()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SparseLayer {
    pub name: String,
    pub shape: Vec<usize>,
    pub tau: f64,
    pub csr: CsrMatrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseBlock {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SparseModelArtifact {
    pub model: String,
    pub input_shape: Vec<usize>,
    pub classes: usize,
    pub source_precision: Precision,
    pub layers: Vec<SparseLayer>,
    pub dense: Vec<DenseBlock>,
}

/// `total / kept` as an exact ratio.
pub fn compression_rate(total: u64, kept: u64) -> Result<Ratio<u64>> {
    if kept == 0 {
        return Err(ArtifactError::NothingKept);
    }
    Ok(Ratio::new(total, kept))
}

pub fn ratio_to_f64(r: Ratio<u64>) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

fn shape_str(shape: &[usize]) -> String {
    shape.iter().map(usize::to_string).collect::<Vec<_>>().join("x")
}

fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

impl SparseModelArtifact {
    /// Hard-prunes the checkpoint's model at its thresholds (a no-op for an
    /// already finalized model) and packs it.
    pub fn from_checkpoint(ck: &Checkpoint) -> Self {
        let mut model = ck.model.clone();
        finalize_model(&mut model);
        let layers = model
            .prunable
            .iter()
            .map(|p| {
                let shape = p.w.shape().to_vec();
                let rows = shape[0];
                let cols = p.numel() / rows.max(1);
                SparseLayer {
                    name: p.name.clone(),
                    shape,
                    tau: p.tau,
                    csr: CsrMatrix::from_dense(rows, cols, &to_f32(p.w.data())),
                }
            })
            .collect();
        let mut dense: Vec<DenseBlock> = model
            .dense
            .iter()
            .map(|d| DenseBlock {
                name: d.name.clone(),
                shape: d.value.shape().to_vec(),
                values: to_f32(d.value.data()),
            })
            .collect();
        for (name, stats) in model.batchnorm_stats() {
            for (suffix, v) in [("running_mean", &stats.running_mean), ("running_var", &stats.running_var)] {
                dense.push(DenseBlock {
                    name: format!("{name}.{suffix}"),
                    shape: vec![v.len()],
                    values: to_f32(v),
                });
            }
        }
        Self {
            model: model.name.clone(),
            input_shape: model.input_shape.clone(),
            classes: model.classes,
            source_precision: ck.meta.source_precision,
            layers,
            dense,
        }
    }

    pub fn total_weights(&self) -> u64 {
        self.layers.iter().map(|l| (l.csr.rows * l.csr.cols) as u64).sum()
    }

    pub fn kept_weights(&self) -> u64 {
        self.layers.iter().map(|l| l.csr.nnz() as u64).sum()
    }

    pub fn compression_rate(&self) -> Result<Ratio<u64>> {
        compression_rate(self.total_weights(), self.kept_weights())
    }

    /// Dense f32 values of every prunable layer, in registry order.
    pub fn reconstruct(&self) -> Vec<(String, Vec<usize>, Vec<f32>)> {
        self.layers
            .iter()
            .map(|l| (l.name.clone(), l.shape.clone(), l.csr.to_dense()))
            .collect()
    }

    fn payload_len(&self) -> usize {
        self.layers.iter().map(|l| l.csr.byte_len()).sum::<usize>()
            + self.dense.iter().map(|d| 4 * d.values.len()).sum::<usize>()
    }

    pub fn manifest(&self) -> String {
        let mut m = String::new();
        let mut kv = |k: &str, v: &dyn std::fmt::Display| {
            writeln!(m, "{k} = {v}").expect("write to string");
        };
        kv("format_version", &FORMAT_VERSION);
        kv("model", &self.model);
        kv("input_shape", &shape_str(&self.input_shape));
        kv("classes", &self.classes);
        kv("source_precision", &self.source_precision.as_str());
        kv("total_weights", &self.total_weights());
        kv("kept_weights", &self.kept_weights());
        match self.compression_rate() {
            Ok(r) => {
                kv("compression_rate", &ratio_to_f64(r));
                kv("compression_rate_exact", &format!("{}/{}", r.numer(), r.denom()));
            }
            Err(_) => {
                kv("compression_rate", &"undefined");
                kv("compression_rate_exact", &"undefined");
            }
        }
        kv("layers", &self.layers.len());
        for (i, l) in self.layers.iter().enumerate() {
            kv(&format!("layer.{i}.name"), &l.name);
            kv(&format!("layer.{i}.shape"), &shape_str(&l.shape));
            kv(&format!("layer.{i}.rows"), &l.csr.rows);
            kv(&format!("layer.{i}.cols"), &l.csr.cols);
            kv(&format!("layer.{i}.tau"), &format!("{:e}", l.tau));
            kv(&format!("layer.{i}.kept"), &l.csr.nnz());
        }
        kv("dense", &self.dense.len());
        for (i, d) in self.dense.iter().enumerate() {
            kv(&format!("dense.{i}.name"), &d.name);
            kv(&format!("dense.{i}.shape"), &shape_str(&d.shape));
        }
        kv("payload_bytes", &self.payload_len());
        m
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = format!("{MAGIC_LINE}\n{}\n", self.manifest()).into_bytes();
        out.reserve(self.payload_len());
        for l in &self.layers {
            for p in &l.csr.row_ptr {
                out.extend_from_slice(&p.to_le_bytes());
            }
            for c in &l.csr.col_idx {
                out.extend_from_slice(&c.to_le_bytes());
            }
            for v in &l.csr.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        for d in &self.dense {
            for v in &d.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let text_end = bytes
            .windows(2)
            .position(|w| w == b"\n\n")
            .ok_or(ArtifactError::BadMagic)?;
        let text = std::str::from_utf8(&bytes[..text_end]).map_err(|_| ArtifactError::BadMagic)?;
        let mut lines = text.lines();
        if lines.next() != Some(MAGIC_LINE) {
            return Err(ArtifactError::BadMagic);
        }
        let mut keys = std::collections::HashMap::new();
        for (i, line) in lines.enumerate() {
            let (k, v) = line.split_once(" = ").ok_or_else(|| ArtifactError::Manifest {
                line: i + 2,
                reason: format!("expected `key = value`, got {line:?}"),
            })?;
            keys.insert(k.to_string(), v.to_string());
        }
        let get = |k: &str| keys.get(k).map(String::as_str).ok_or_else(|| ArtifactError::MissingKey(k.into()));
        let num = |k: &str| -> Result<usize> {
            get(k)?.parse().map_err(|_| ArtifactError::Manifest {
                line: 0,
                reason: format!("{k} is not an integer"),
            })
        };
        let shape = |k: &str| -> Result<Vec<usize>> {
            get(k)?
                .split('x')
                .map(|s| {
                    s.parse().map_err(|_| ArtifactError::Manifest {
                        line: 0,
                        reason: format!("{k} is not a shape"),
                    })
                })
                .collect()
        };
        let version = num("format_version")? as u32;
        if version != FORMAT_VERSION {
            return Err(ArtifactError::Version(version));
        }
        let source_precision = match get("source_precision")? {
            "f32" => Precision::F32,
            "f64" => Precision::F64,
            other => {
                return Err(ArtifactError::Manifest {
                    line: 0,
                    reason: format!("unknown source_precision {other:?}"),
                })
            }
        };

        let payload = &bytes[text_end + 2..];
        if payload.len() != num("payload_bytes")? {
            return Err(ArtifactError::Payload(format!(
                "expected {} bytes, found {}",
                num("payload_bytes")?,
                payload.len()
            )));
        }
        let mut cursor = 0usize;
        let mut take = |n: usize| -> Result<&[u8]> {
            let s = payload
                .get(cursor..cursor + n)
                .ok_or_else(|| ArtifactError::Payload("truncated".into()))?;
            cursor += n;
            Ok(s)
        };

        let mut layers = Vec::new();
        for i in 0..num("layers")? {
            let (rows, cols, kept) = (
                num(&format!("layer.{i}.rows"))?,
                num(&format!("layer.{i}.cols"))?,
                num(&format!("layer.{i}.kept"))?,
            );
            let row_ptr: Vec<u64> = take(8 * (rows + 1))?
                .chunks_exact(8)
                .map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let col_idx: Vec<u32> = take(4 * kept)?
                .chunks_exact(4)
                .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let values: Vec<f32> = take(4 * kept)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let monotone = row_ptr.windows(2).all(|w| w[0] <= w[1]);
            if row_ptr.first() != Some(&0) || row_ptr.last() != Some(&(kept as u64)) || !monotone {
                return Err(ArtifactError::Payload(format!(
                    "layer {i}: row pointers disagree with kept count {kept}"
                )));
            }
            if col_idx.iter().any(|&c| c as usize >= cols) {
                return Err(ArtifactError::Payload(format!("layer {i}: column index out of range")));
            }
            let tau = get(&format!("layer.{i}.tau"))?.parse().map_err(|_| ArtifactError::Manifest {
                line: 0,
                reason: format!("layer.{i}.tau is not a number"),
            })?;
            layers.push(SparseLayer {
                name: get(&format!("layer.{i}.name"))?.to_string(),
                shape: shape(&format!("layer.{i}.shape"))?,
                tau,
                csr: CsrMatrix {
                    rows,
                    cols,
                    row_ptr,
                    col_idx,
                    values,
                },
            });
        }
        let mut dense = Vec::new();
        for i in 0..num("dense")? {
            let shape = shape(&format!("dense.{i}.shape"))?;
            let n: usize = shape.iter().product();
            let values = take(4 * n)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            dense.push(DenseBlock {
                name: get(&format!("dense.{i}.name"))?.to_string(),
                shape,
                values,
            });
        }
        let art = Self {
            model: get("model")?.to_string(),
            input_shape: shape("input_shape")?,
            classes: num("classes")?,
            source_precision,
            layers,
            dense,
        };
        if art.total_weights() != num("total_weights")? as u64 || art.kept_weights() != num("kept_weights")? as u64 {
            return Err(ArtifactError::Payload(
                "manifest weight counts disagree with payload".into(),
            ));
        }
        Ok(art)
    }

    /// Writes atomically: a temp file in the target directory is renamed into
    /// place, so an interrupted export never leaves a partial artifact.
    pub fn save(&self, path: &Path) -> Result<()> {
        crate::atomic_write(path, &self.to_bytes()).map_err(|source| ArtifactError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|source| ArtifactError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rate_examples() {
        let r = compression_rate(266_610, 26_661).unwrap();
        assert_eq!(r, Ratio::from_integer(10));
        assert_eq!(compression_rate(7, 7).unwrap(), Ratio::from_integer(1));
        assert!(matches!(compression_rate(7, 0), Err(ArtifactError::NothingKept)));
    }

    #[test]
    fn csr_round_trip_keeps_negative_zero() {
        let dense = [0.0, 1.5, -0.0, 0.0, 0.0, -2.0];
        let csr = CsrMatrix::from_dense(2, 3, &dense);
        assert_eq!(csr.row_ptr, vec![0, 2, 3]);
        assert_eq!(csr.col_idx, vec![1, 2, 2]);
        let back = csr.to_dense();
        assert!(back.iter().zip(&dense).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}
