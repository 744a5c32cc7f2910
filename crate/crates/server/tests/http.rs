use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use ltp_core::api::*;
use serde_json::{json, Value};

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").canonicalize().unwrap()
}

fn meta(key: &str) -> String {
    let text = std::fs::read_to_string(root().join("fixtures/mlp3-pruned.meta")).unwrap();
    text.lines()
        .find_map(|l| l.strip_prefix(&format!("{key} = ")).map(str::to_string))
        .unwrap()
}

async fn start() -> String {
    let addr: SocketAddr = "127.0.0.1:0".parse().unwrap();
    format!("http://{}", ltp_server::spawn(addr).await.unwrap())
}

async fn post(base: &str, path: &str, body: Value) -> (u16, Value) {
    let resp = reqwest::Client::new()
        .post(format!("{base}{path}"))
        .json(&body)
        .send()
        .await
        .unwrap();
    let status = resp.status().as_u16();
    (status, resp.json().await.unwrap())
}

#[tokio::test]
async fn health_answers() {
    let base = start().await;
    let v: Value = reqwest::get(format!("{base}/health")).await.unwrap().json().await.unwrap();
    assert_eq!(v["status"], "ok");
}

#[tokio::test]
async fn eval_reproduces_recorded_metrics() {
    let base = start().await;
    let (status, v) = post(
        &base,
        "/v1/eval",
        json!({ "model": "fixtures/mlp3-pruned.ckpt", "data": "fixtures/digits", "cwd": root() }),
    )
    .await;
    assert_eq!(status, 200, "{v}");
    let r: EvalReport = serde_json::from_value(v).unwrap();
    assert_eq!(r.result.top1, meta("val_top1").parse::<f64>().unwrap());
    assert_eq!(r.result.loss, meta("val_loss").parse::<f64>().unwrap());
    assert_eq!(r.keep_ratio, meta("keep_ratio").parse::<f64>().unwrap());
}

#[tokio::test]
async fn export_writes_the_golden_artifact() {
    let base = start().await;
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("m.ltpa");
    let (status, v) = post(
        &base,
        "/v1/export",
        json!({ "checkpoint": root().join("fixtures/mlp3-pruned.ckpt"), "out": out, "cwd": "/" }),
    )
    .await;
    assert_eq!(status, 200, "{v}");
    let r: ExportReport = serde_json::from_value(v).unwrap();
    assert_eq!(r.kept_weights.to_string(), meta("kept_weights"));
    assert_eq!(
        std::fs::read(&out).unwrap(),
        std::fs::read(root().join("fixtures/mlp3-pruned.ltpa")).unwrap()
    );
}

#[tokio::test]
async fn bad_config_is_rejected_with_its_line() {
    let base = start().await;
    let (status, v) = post(
        &base,
        "/v1/prune",
        json!({ "config": "model = mlp3\nlamda0 = 1e-6\n", "cwd": "/" }),
    )
    .await;
    assert_eq!(status, 400);
    let msg = v["error"].as_str().unwrap();
    assert!(msg.contains("line 2") && msg.contains("lamda0"), "{msg}");
}

#[tokio::test]
async fn malformed_bodies_and_unknown_jobs() {
    let base = start().await;
    let (status, v) = post(&base, "/v1/eval", json!({ "model": 3 })).await;
    assert_eq!(status, 400);
    assert!(v["error"].is_string());

    let resp = reqwest::get(format!("{base}/v1/jobs/999")).await.unwrap();
    assert_eq!(resp.status().as_u16(), 404);

    let (status, v) = post(
        &base,
        "/v1/eval",
        json!({ "model": "no/such.ckpt", "data": "fixtures/digits", "cwd": root() }),
    )
    .await;
    assert_eq!(status, 400);
    assert!(v["error"].as_str().unwrap().contains("such.ckpt"), "{v}");

    let (status, _) = post(
        &base,
        "/v1/sweep",
        json!({ "config": "", "cwd": "/", "modes": [] }),
    )
    .await;
    assert_eq!(status, 400);
}

#[tokio::test]
async fn prune_job_runs_to_completion() {
    let base = start().await;
    let dir = tempfile::tempdir().unwrap();
    let config = "blobs.classes = 3\nblobs.dim = 8\nblobs.n_per_class = 20\n\
                  pretrain_epochs = 1\nprune_epochs = 2\nbatch_size = 16\nout_dir = run\n";
    let (status, v) = post(&base, "/v1/prune", json!({ "config": config, "cwd": dir.path() })).await;
    assert_eq!(status, 200, "{v}");
    let created: JobCreated = serde_json::from_value(v).unwrap();
    let status = loop {
        let s: JobStatus = reqwest::get(format!("{base}/v1/jobs/{}", created.id))
            .await
            .unwrap()
            .json()
            .await
            .unwrap();
        if !matches!(s.state, JobState::Running) {
            break s;
        }
        tokio::time::sleep(std::time::Duration::from_millis(50)).await;
    };
    assert_eq!(status.kind, "prune");
    let JobState::Done { output } = status.state else {
        panic!("{status:?}")
    };
    let JobOutput::Prune(report) = *output else { panic!() };
    assert_eq!(report.trail.len(), 2);
    assert_eq!(report.out_dir, dir.path().join("run"));
    assert!(dir.path().join("run/trail.csv").exists());
    assert!(report.best_checkpoint.unwrap().exists());
}
