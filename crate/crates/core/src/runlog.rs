//! Per-epoch CSV logs: `trail.csv` and the per-layer `layers.csv`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::trainer::TrailCheckpoint;

#[derive(Debug, thiserror::Error)]
pub enum RunLogError {
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// One row of `trail.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrailRow {
    pub epoch: usize,
    pub lambda: f64,
    pub keep_ratio: f64,
    pub soft_l0_total: f64,
    pub train_loss: f64,
    pub train_top1: f64,
    pub val_loss: f64,
    pub val_top1: f64,
    pub val_top5: f64,
}

/// One row of `layers.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRow {
    pub epoch: usize,
    pub layer_id: usize,
    pub tau: f64,
    pub temp: f64,
    pub layer_keep_ratio: f64,
    pub mean_w_sq: f64,
}

impl From<&TrailCheckpoint> for TrailRow {
    fn from(c: &TrailCheckpoint) -> Self {
        Self {
            epoch: c.epoch,
            lambda: c.lambda,
            keep_ratio: c.keep_ratio,
            soft_l0_total: c.soft_l0_total,
            train_loss: c.train_loss,
            train_top1: c.train_top1,
            val_loss: c.val.loss,
            val_top1: c.val.top1,
            val_top5: c.val.top5,
        }
    }
}

pub fn layer_rows(trail: &[TrailCheckpoint]) -> Vec<LayerRow> {
    trail
        .iter()
        .flat_map(|c| {
            c.per_layer.iter().map(move |l| LayerRow {
                epoch: c.epoch,
                layer_id: l.layer_id,
                tau: l.tau,
                temp: l.temp,
                layer_keep_ratio: l.keep_ratio,
                mean_w_sq: l.mean_w_sq,
            })
        })
        .collect()
}

pub fn to_csv<T: Serialize>(rows: &[T], header: &[&str]) -> Result<Vec<u8>, RunLogError> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner()
        .map_err(|e| RunLogError::Csv(csv::Error::from(e.into_error())))
}

pub const TRAIL_HEADER: [&str; 9] = [
    "epoch",
    "lambda",
    "keep_ratio",
    "soft_l0_total",
    "train_loss",
    "train_top1",
    "val_loss",
    "val_top1",
    "val_top5",
];

pub const LAYER_HEADER: [&str; 6] = [
    "epoch",
    "layer_id",
    "tau",
    "temp",
    "layer_keep_ratio",
    "mean_w_sq",
];

/// Rewrites both logs atomically with every row so far.
pub fn write_logs(dir: &Path, trail: &[TrailCheckpoint]) -> Result<(), RunLogError> {
    let rows: Vec<TrailRow> = trail.iter().map(TrailRow::from).collect();
    for (name, bytes) in [
        ("trail.csv", to_csv(&rows, &TRAIL_HEADER)?),
        ("layers.csv", to_csv(&layer_rows(trail), &LAYER_HEADER)?),
    ] {
        let path = dir.join(name);
        crate::atomic_write(&path, &bytes).map_err(|source| RunLogError::Io { path, source })?;
    }
    Ok(())
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, RunLogError> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(RunLogError::from)).collect()
}
