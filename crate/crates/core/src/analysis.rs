//! Per-layer comparison of squared weights before and after pruning: an
//! empirical CDF table and a scatter table, each with a threshold marker row.

use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::checkpoint::Checkpoint;

#[derive(Debug, thiserror::Error)]
pub enum AnalysisError {
    #[error("layer {0:?} not found")]
    UnknownLayer(String),
    #[error("layer {layer}: shape {pruned:?} in pruned checkpoint vs {original:?} in original")]
    ShapeMismatch {
        layer: String,
        pruned: Vec<usize>,
        original: Vec<usize>,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = AnalysisError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CdfRow {
    /// `original`, `pruned`, or `threshold` for the marker row.
    pub series: &'static str,
    pub w_sq: f64,
    pub cdf: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScatterRow {
    /// Flat weight index, or `threshold` for the marker row.
    pub index: String,
    pub w_sq_original: f64,
    pub w_sq_pruned: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerAnalysis {
    pub layer_id: usize,
    pub name: String,
    pub tau: f64,
    pub cdf: Vec<CdfRow>,
    pub scatter: Vec<ScatterRow>,
    /// Weights below the threshold originally but kept after pruning.
    pub kept_though_small: usize,
    /// Weights above the threshold originally but pruned.
    pub pruned_though_large: usize,
}

impl LayerAnalysis {
    /// Weights whose side of the threshold differs between the two models.
    pub fn off_quadrant(&self) -> usize {
        self.kept_though_small + self.pruned_though_large
    }
}

/// Resolves a layer given by registry index or by name.
pub fn resolve_layer(ck: &Checkpoint, layer: &str) -> Result<usize> {
    if let Ok(i) = layer.parse::<usize>() {
        if i < ck.model.prunable.len() {
            return Ok(i);
        }
    }
    ck.model
        .prunable_index(layer)
        .ok_or_else(|| AnalysisError::UnknownLayer(layer.to_string()))
}

fn cdf_rows(series: &'static str, mut sq: Vec<f64>) -> impl Iterator<Item = CdfRow> {
    sq.sort_by(f64::total_cmp);
    let n = sq.len() as f64;
    sq.into_iter().enumerate().map(move |(i, w_sq)| CdfRow {
        series,
        w_sq,
        cdf: Some((i + 1) as f64 / n),
    })
}

/// Compares layer `layer` of `pruned` against the same layer of `original`,
/// using the pruned checkpoint's threshold.
pub fn analyze_layer(pruned: &Checkpoint, original: &Checkpoint, layer: &str) -> Result<LayerAnalysis> {
    let l = resolve_layer(pruned, layer)?;
    let p = &pruned.model.prunable[l];
    let o = original
        .model
        .prunable
        .get(l)
        .filter(|o| o.name == p.name)
        .ok_or_else(|| AnalysisError::UnknownLayer(p.name.clone()))?;
    if o.w.shape() != p.w.shape() {
        return Err(AnalysisError::ShapeMismatch {
            layer: p.name.clone(),
            pruned: p.w.shape().to_vec(),
            original: o.w.shape().to_vec(),
        });
    }
    let tau = p.tau;
    let sq_o: Vec<f64> = o.w.data().iter().map(|w| w * w).collect();
    let sq_p: Vec<f64> = p.w.data().iter().map(|w| w * w).collect();

    let mut cdf: Vec<CdfRow> = cdf_rows("original", sq_o.clone())
        .chain(cdf_rows("pruned", sq_p.clone()))
        .collect();
    cdf.push(CdfRow {
        series: "threshold",
        w_sq: tau,
        cdf: None,
    });

    let (mut kept_though_small, mut pruned_though_large) = (0, 0);
    let mut scatter: Vec<ScatterRow> = Vec::with_capacity(sq_o.len() + 1);
    for (i, (&a, &b)) in sq_o.iter().zip(&sq_p).enumerate() {
        match (a > tau, b > tau) {
            (false, true) => kept_though_small += 1,
            (true, false) => pruned_though_large += 1,
            _ => {}
        }
        scatter.push(ScatterRow {
            index: i.to_string(),
            w_sq_original: a,
            w_sq_pruned: b,
        });
    }
    scatter.push(ScatterRow {
        index: "threshold".into(),
        w_sq_original: tau,
        w_sq_pruned: tau,
    });
    Ok(LayerAnalysis {
        layer_id: l,
        name: p.name.clone(),
        tau,
        cdf,
        scatter,
        kept_though_small,
        pruned_though_large,
    })
}

fn csv_bytes<T: Serialize>(rows: &[T]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner()
        .map_err(|e| AnalysisError::Csv(csv::Error::from(e.into_error())))
}

/// Writes `cdf.csv` and `scatter.csv` into `dir`.
pub fn write_analysis(a: &LayerAnalysis, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|source| AnalysisError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    for (name, bytes) in [("cdf.csv", csv_bytes(&a.cdf)?), ("scatter.csv", csv_bytes(&a.scatter)?)] {
        let path = dir.join(name);
        crate::atomic_write(&path, &bytes).map_err(|source| AnalysisError::Io { path, source })?;
    }
    Ok(())
}
