//! Typed HTTP client for the pruning service.

use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::Serialize;

pub use ltp_core::api;
use ltp_core::api::*;

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("cannot reach service at {url}: {source}")]
    Unreachable {
        url: String,
        #[source]
        source: reqwest::Error,
    },
    #[error(transparent)]
    Http(#[from] reqwest::Error),
    #[error("{message}")]
    Api { status: u16, message: String },
    #[error("job {id} failed: {error}")]
    JobFailed { id: JobId, error: String },
    #[error("job {id} returned a {got} result")]
    UnexpectedOutput { id: JobId, got: &'static str },
}

pub type Result<T, E = ClientError> = std::result::Result<T, E>;

#[derive(Debug, Clone)]
pub struct Client {
    base: String,
    http: reqwest::Client,
    poll: Duration,
}

impl Client {
    pub fn new(base: impl Into<String>) -> Self {
        Self {
            base: base.into().trim_end_matches('/').to_string(),
            http: reqwest::Client::new(),
            poll: Duration::from_millis(200),
        }
    }

    pub fn with_poll_interval(mut self, poll: Duration) -> Self {
        self.poll = poll;
        self
    }

    pub fn base_url(&self) -> &str {
        &self.base
    }

    async fn decode<T: DeserializeOwned>(&self, resp: reqwest::Response) -> Result<T> {
        let status = resp.status();
        if status.is_success() {
            return Ok(resp.json().await?);
        }
        let text = resp.text().await.unwrap_or_default();
        let message = serde_json::from_str::<ErrorBody>(&text)
            .map(|b| b.error)
            .unwrap_or(text);
        Err(ClientError::Api {
            status: status.as_u16(),
            message,
        })
    }

    fn unreachable(&self, e: reqwest::Error) -> ClientError {
        if e.is_connect() {
            ClientError::Unreachable {
                url: self.base.clone(),
                source: e,
            }
        } else {
            ClientError::Http(e)
        }
    }

    async fn post<B: Serialize, T: DeserializeOwned>(&self, path: &str, body: &B) -> Result<T> {
        let resp = self
            .http
            .post(format!("{}{path}", self.base))
            .json(body)
            .send()
            .await
            .map_err(|e| self.unreachable(e))?;
        self.decode(resp).await
    }

    async fn get<T: DeserializeOwned>(&self, path: &str) -> Result<T> {
        let resp = self
            .http
            .get(format!("{}{path}", self.base))
            .send()
            .await
            .map_err(|e| self.unreachable(e))?;
        self.decode(resp).await
    }

    pub async fn health(&self) -> Result<()> {
        self.get::<serde_json::Value>("/health").await.map(|_| ())
    }

    pub async fn submit_prune(&self, req: &PruneRequest) -> Result<JobId> {
        Ok(self.post::<_, JobCreated>("/v1/prune", req).await?.id)
    }

    pub async fn submit_finetune(&self, req: &FinetuneRequest) -> Result<JobId> {
        Ok(self.post::<_, JobCreated>("/v1/finetune", req).await?.id)
    }

    pub async fn submit_sweep(&self, req: &SweepRequest) -> Result<JobId> {
        Ok(self.post::<_, JobCreated>("/v1/sweep", req).await?.id)
    }

    pub async fn job(&self, id: JobId) -> Result<JobStatus> {
        self.get(&format!("/v1/jobs/{id}")).await
    }

    /// Polls until the job leaves the running state.
    pub async fn wait(&self, id: JobId) -> Result<JobOutput> {
        loop {
            match self.job(id).await?.state {
                JobState::Running => tokio::time::sleep(self.poll).await,
                JobState::Done { output } => return Ok(*output),
                JobState::Failed { error } => return Err(ClientError::JobFailed { id, error }),
            }
        }
    }

    pub async fn prune(&self, req: &PruneRequest) -> Result<PruneReport> {
        let id = self.submit_prune(req).await?;
        match self.wait(id).await? {
            JobOutput::Prune(r) => Ok(r),
            other => Err(unexpected(id, &other)),
        }
    }

    pub async fn finetune(&self, req: &FinetuneRequest) -> Result<FinetuneReport> {
        let id = self.submit_finetune(req).await?;
        match self.wait(id).await? {
            JobOutput::Finetune(r) => Ok(r),
            other => Err(unexpected(id, &other)),
        }
    }

    pub async fn sweep(&self, req: &SweepRequest) -> Result<SweepReport> {
        let id = self.submit_sweep(req).await?;
        match self.wait(id).await? {
            JobOutput::Sweep(r) => Ok(r),
            other => Err(unexpected(id, &other)),
        }
    }

    pub async fn eval(&self, req: &EvalRequest) -> Result<EvalReport> {
        self.post("/v1/eval", req).await
    }

    pub async fn export(&self, req: &ExportRequest) -> Result<ExportReport> {
        self.post("/v1/export", req).await
    }

    pub async fn analyze(&self, req: &AnalyzeRequest) -> Result<AnalyzeReport> {
        self.post("/v1/analyze", req).await
    }
}

fn unexpected(id: JobId, out: &JobOutput) -> ClientError {
    let got = match out {
        JobOutput::Prune(_) => "prune",
        JobOutput::Finetune(_) => "finetune",
        JobOutput::Sweep(_) => "sweep",
    };
    ClientError::UnexpectedOutput { id, got }
}
