//! HTTP/JSON service around the pruning pipeline.
//!
//! Long-running work (`prune`, `finetune`, `sweep`) is submitted as a job and
//! polled through `GET /v1/jobs/{id}`; `eval`, `export` and `analyze` answer
//! synchronously.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path as UrlPath, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use tokio::net::TcpListener;
use tracing::{info, warn};

use ltp_core::analysis::{self, AnalysisError};
use ltp_core::api::*;
use ltp_core::artifact::{ratio_to_f64, ArtifactError, SparseModelArtifact};
use ltp_core::checkpoint::{Checkpoint, CheckpointError};
use ltp_core::config::{ConfigError, DatasetSource, RunConfig};
use ltp_core::trainer::{self, mask_keep_ratio, TrainError};

#[derive(Debug, thiserror::Error)]
pub enum ApiError {
    #[error("{0}")]
    BadRequest(String),
    #[error("{0}")]
    NotFound(String),
    #[error("{0}")]
    Internal(String),
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = match self {
            ApiError::BadRequest(_) => StatusCode::BAD_REQUEST,
            ApiError::NotFound(_) => StatusCode::NOT_FOUND,
            ApiError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        (status, Json(ErrorBody { error: self.to_string() })).into_response()
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        ApiError::BadRequest(e.body_text())
    }
}

impl From<ConfigError> for ApiError {
    fn from(e: ConfigError) -> Self {
        ApiError::BadRequest(e.to_string())
    }
}

impl From<CheckpointError> for ApiError {
    fn from(e: CheckpointError) -> Self {
        ApiError::BadRequest(e.to_string())
    }
}

impl From<ArtifactError> for ApiError {
    fn from(e: ArtifactError) -> Self {
        ApiError::Internal(e.to_string())
    }
}

impl From<AnalysisError> for ApiError {
    fn from(e: AnalysisError) -> Self {
        match e {
            AnalysisError::Io { .. } | AnalysisError::Csv(_) => ApiError::Internal(e.to_string()),
            _ => ApiError::BadRequest(e.to_string()),
        }
    }
}

impl From<TrainError> for ApiError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Data(_) | TrainError::Invalid(_) | TrainError::MissingConfig | TrainError::Model(_) => {
                ApiError::BadRequest(e.to_string())
            }
            _ => ApiError::Internal(e.to_string()),
        }
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

#[derive(Default)]
pub struct AppState {
    jobs: Mutex<HashMap<JobId, JobStatus>>,
    next_id: AtomicU64,
}

impl AppState {
    fn set(&self, status: JobStatus) {
        self.jobs.lock().expect("job table poisoned").insert(status.id, status);
    }

    /// Registers a job and runs `work` on the blocking pool.
    fn submit<W>(self: &Arc<Self>, kind: &'static str, work: W) -> JobId
    where
        W: FnOnce() -> Result<JobOutput, ApiError> + Send + 'static,
    {
        let id = self.next_id.fetch_add(1, Ordering::Relaxed) + 1;
        self.set(JobStatus {
            id,
            kind: kind.into(),
            state: JobState::Running,
        });
        info!(id, kind, "job submitted");
        let state = Arc::clone(self);
        tokio::spawn(async move {
            let result = tokio::task::spawn_blocking(work).await;
            let state_now = match result {
                Ok(Ok(output)) => JobState::Done {
                    output: Box::new(output),
                },
                Ok(Err(e)) => JobState::Failed { error: e.to_string() },
                Err(e) => JobState::Failed {
                    error: format!("job panicked: {e}"),
                },
            };
            if let JobState::Failed { error } = &state_now {
                warn!(id, kind, error, "job failed");
            } else {
                info!(id, kind, "job finished");
            }
            state.set(JobStatus {
                id,
                kind: kind.into(),
                state: state_now,
            });
        });
        id
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/v1/prune", post(prune))
        .route("/v1/finetune", post(finetune))
        .route("/v1/sweep", post(sweep))
        .route("/v1/eval", post(eval))
        .route("/v1/export", post(export))
        .route("/v1/analyze", post(analyze))
        .route("/v1/jobs/{id}", get(job))
        .with_state(state)
}

/// Serves on `listener` until the process ends.
pub async fn serve(listener: TcpListener) -> std::io::Result<()> {
    axum::serve(listener, router(Arc::new(AppState::default()))).await
}

/// Binds `addr` (port 0 picks a free port) and serves in a background task.
pub async fn spawn(addr: SocketAddr) -> std::io::Result<SocketAddr> {
    let listener = TcpListener::bind(addr).await?;
    let local = listener.local_addr()?;
    tokio::spawn(async move {
        if let Err(e) = serve(listener).await {
            warn!(error = %e, "server stopped");
        }
    });
    Ok(local)
}

async fn health() -> Json<serde_json::Value> {
    Json(serde_json::json!({ "status": "ok" }))
}

async fn job(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<JobId>) -> ApiResult<JobStatus> {
    state
        .jobs
        .lock()
        .expect("job table poisoned")
        .get(&id)
        .cloned()
        .map(Json)
        .ok_or_else(|| ApiError::NotFound(format!("no job {id}")))
}

/// Parses config text and makes its paths absolute.
fn load_config(text: &str, cwd: &Path) -> Result<RunConfig, ApiError> {
    let mut cfg = RunConfig::parse(text)?;
    if let DatasetSource::Idx(dir) = &cfg.dataset {
        cfg.dataset = DatasetSource::Idx(resolve(cwd, dir));
    }
    cfg.out_dir = resolve(cwd, &cfg.out_dir);
    Ok(cfg)
}

async fn prune(
    State(state): State<Arc<AppState>>,
    req: Result<Json<PruneRequest>, JsonRejection>,
) -> ApiResult<JobCreated> {
    let Json(req) = req?;
    let cfg = load_config(&req.config, &req.cwd)?;
    let id = state.submit("prune", move || {
        let out_dir = cfg.out_dir.clone();
        let out = trainer::prune_run(&cfg, Some(&out_dir))?;
        let best = out_dir.join("best.ckpt");
        Ok(JobOutput::Prune(PruneReport {
            trail: out.trail,
            best_epoch: out.best_epoch,
            best_checkpoint: best.exists().then_some(best),
            out_dir,
        }))
    });
    Ok(Json(JobCreated { id }))
}

async fn sweep(
    State(state): State<Arc<AppState>>,
    req: Result<Json<SweepRequest>, JsonRejection>,
) -> ApiResult<JobCreated> {
    let Json(req) = req?;
    if req.modes.is_empty() {
        return Err(ApiError::BadRequest("sweep needs at least one mode".into()));
    }
    let cfg = load_config(&req.config, &req.cwd)?;
    let id = state.submit("sweep", move || {
        let out_dir = cfg.out_dir.clone();
        let results = trainer::sweep(&cfg, &req.modes, Some(&out_dir))?;
        Ok(JobOutput::Sweep(SweepReport { out_dir, results }))
    });
    Ok(Json(JobCreated { id }))
}

async fn finetune(
    State(state): State<Arc<AppState>>,
    req: Result<Json<FinetuneRequest>, JsonRejection>,
) -> ApiResult<JobCreated> {
    let Json(req) = req?;
    let path = resolve(&req.cwd, &req.checkpoint);
    let ck = Checkpoint::load(&path)?;
    if ck.config.is_none() {
        return Err(TrainError::MissingConfig.into());
    }
    let out_dir = match &req.out_dir {
        Some(d) => resolve(&req.cwd, d),
        None => path.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from(".")),
    };
    let id = state.submit("finetune", move || {
        let out = trainer::finetune_checkpoint(&ck, req.epochs, req.lr)?;
        let finalized = out_dir.join("finalized.ckpt");
        let finetuned = out_dir.join("finetuned.ckpt");
        out.finalized.save(&finalized)?;
        out.checkpoint.save(&finetuned)?;
        Ok(JobOutput::Finetune(FinetuneReport {
            soft: out.soft,
            hard: out.hard,
            finetuned: out.finetuned,
            keep_ratio: out.keep_ratio,
            finalized_checkpoint: finalized,
            finetuned_checkpoint: finetuned,
        }))
    });
    Ok(Json(JobCreated { id }))
}

async fn blocking<T, F>(f: F) -> Result<T, ApiError>
where
    F: FnOnce() -> Result<T, ApiError> + Send + 'static,
    T: Send + 'static,
{
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::Internal(format!("worker panicked: {e}")))?
}

async fn eval(req: Result<Json<EvalRequest>, JsonRejection>) -> ApiResult<EvalReport> {
    let Json(req) = req?;
    blocking(move || {
        let ck = Checkpoint::load(&resolve(&req.cwd, &req.model))?;
        let data = resolve(&req.cwd, &req.data);
        let batch = req
            .batch_size
            .or(ck.config.as_ref().map(|c| c.batch_size))
            .unwrap_or(256)
            .max(1);
        let norm = ck.config.as_ref().and_then(|c| c.normalization);
        let (splits, _) = ltp_core::data::load_dir(&data, norm).map_err(TrainError::from)?;
        let result = trainer::evaluate_on_dir(&ck, &data, batch)?;
        info!(top1 = result.top1, top5 = result.top5, loss = result.loss, "eval");
        Ok(Json(EvalReport {
            result,
            samples: splits.val.len(),
            keep_ratio: mask_keep_ratio(&ck.model),
        }))
    })
    .await
}

async fn export(req: Result<Json<ExportRequest>, JsonRejection>) -> ApiResult<ExportReport> {
    let Json(req) = req?;
    blocking(move || {
        let ck = Checkpoint::load(&resolve(&req.cwd, &req.checkpoint))?;
        let out = resolve(&req.cwd, &req.out);
        let art = SparseModelArtifact::from_checkpoint(&ck);
        let rate = art.compression_rate()?;
        art.save(&out)?;
        Ok(Json(ExportReport {
            out,
            total_weights: art.total_weights(),
            kept_weights: art.kept_weights(),
            compression_rate: ratio_to_f64(rate),
            compression_rate_exact: format!("{}/{}", rate.numer(), rate.denom()),
        }))
    })
    .await
}

async fn analyze(req: Result<Json<AnalyzeRequest>, JsonRejection>) -> ApiResult<AnalyzeReport> {
    let Json(req) = req?;
    blocking(move || {
        let path = resolve(&req.cwd, &req.checkpoint);
        let original = match &req.original {
            Some(p) => resolve(&req.cwd, p),
            None => path.with_file_name("initial.ckpt"),
        };
        let pruned = Checkpoint::load(&path)?;
        let original = Checkpoint::load(&original)?;
        let a = analysis::analyze_layer(&pruned, &original, &req.layer)?;
        let out = resolve(&req.cwd, &req.out);
        analysis::write_analysis(&a, &out)?;
        Ok(Json(AnalyzeReport {
            layer_id: a.layer_id,
            layer: a.name.clone(),
            tau: a.tau,
            kept_though_small: a.kept_though_small,
            pruned_though_large: a.pruned_though_large,
            cdf: out.join("cdf.csv"),
            scatter: out.join("scatter.csv"),
        }))
    })
    .await
}
