//! JSON request and response bodies of the HTTP service.
//!
//! Paths are sent as the client sees them; relative ones are resolved against
//! `cwd`, so the service and its clients must share a filesystem.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::pruning::GradMode;
use crate::trainer::{EvalResult, SweepResult, TrailCheckpoint};

pub type JobId = u64;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PruneRequest {
    /// Config file contents.
    pub config: String,
    pub cwd: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRequest {
    pub config: String,
    pub cwd: PathBuf,
    pub modes: Vec<GradMode>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FinetuneRequest {
    pub checkpoint: PathBuf,
    pub cwd: PathBuf,
    /// Output directory; defaults to the checkpoint's directory.
    pub out_dir: Option<PathBuf>,
    pub epochs: Option<usize>,
    pub lr: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalRequest {
    pub model: PathBuf,
    pub data: PathBuf,
    pub cwd: PathBuf,
    /// Defaults to the batch size the checkpoint was trained with.
    pub batch_size: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExportRequest {
    pub checkpoint: PathBuf,
    pub out: PathBuf,
    pub cwd: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnalyzeRequest {
    pub checkpoint: PathBuf,
    /// Defaults to `initial.ckpt` next to `checkpoint`.
    pub original: Option<PathBuf>,
    /// Registry index or layer name.
    pub layer: String,
    pub out: PathBuf,
    pub cwd: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JobCreated {
    pub id: JobId,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PruneReport {
    pub out_dir: PathBuf,
    pub trail: Vec<TrailCheckpoint>,
    pub best_epoch: Option<usize>,
    pub best_checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct FinetuneReport {
    pub soft: EvalResult,
    pub hard: EvalResult,
    pub finetuned: EvalResult,
    pub keep_ratio: f64,
    pub finalized_checkpoint: PathBuf,
    pub finetuned_checkpoint: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepReport {
    pub out_dir: PathBuf,
    pub results: Vec<SweepResult>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EvalReport {
    pub result: EvalResult,
    pub samples: usize,
    pub keep_ratio: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ExportReport {
    pub out: PathBuf,
    pub total_weights: u64,
    pub kept_weights: u64,
    pub compression_rate: f64,
    pub compression_rate_exact: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AnalyzeReport {
    pub layer_id: usize,
    pub layer: String,
    pub tau: f64,
    pub kept_though_small: usize,
    pub pruned_though_large: usize,
    pub cdf: PathBuf,
    pub scatter: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum JobOutput {
    Prune(PruneReport),
    Finetune(FinetuneReport),
    Sweep(SweepReport),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum JobState {
    Running,
    Done { output: Box<JobOutput> },
    Failed { error: String },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JobStatus {
    pub id: JobId,
    pub kind: String,
    #[serde(flatten)]
    pub state: JobState,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
}

/// `path` if absolute, otherwise `cwd/path`.
pub fn resolve(cwd: &Path, path: &Path) -> PathBuf {
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        cwd.join(path)
    }
}
