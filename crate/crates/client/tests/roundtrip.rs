use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::time::Duration;

use ltp_client::api::*;
use ltp_client::{Client, ClientError};
use ltp_core::pruning::GradMode;

const CONFIG: &str = "\
blobs.classes = 3
blobs.dim = 8
blobs.n_per_class = 20
batch_size = 16
pretrain_epochs = 1
prune_epochs = 3
lambda0 = 1e-3
lr_ratio = 1e-4
finetune_epochs = 1
out_dir = run
";

async fn client() -> Client {
    let addr: SocketAddr = "127.0.0.1:0".parse().unwrap();
    let addr = ltp_server::spawn(addr).await.unwrap();
    Client::new(format!("http://{addr}/")).with_poll_interval(Duration::from_millis(20))
}

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").canonicalize().unwrap()
}

#[tokio::test]
async fn prune_finetune_analyze() {
    let c = client().await;
    c.health().await.unwrap();
    let dir = tempfile::tempdir().unwrap();
    let cwd = dir.path().to_path_buf();
    let pruned = c
        .prune(&PruneRequest {
            config: CONFIG.into(),
            cwd: cwd.clone(),
        })
        .await
        .unwrap();
    assert_eq!(pruned.trail.len(), 3);
    let best = pruned.best_checkpoint.unwrap();

    let ft = c
        .finetune(&FinetuneRequest {
            checkpoint: best.clone(),
            cwd: cwd.clone(),
            out_dir: None,
            epochs: Some(1),
            lr: None,
        })
        .await
        .unwrap();
    assert_eq!(ft.finalized_checkpoint, cwd.join("run/finalized.ckpt"));
    assert!(ft.finetuned_checkpoint.exists());
    assert!(ft.keep_ratio < 1.0);

    let a = c
        .analyze(&AnalyzeRequest {
            checkpoint: "run/finalized.ckpt".into(),
            original: None,
            layer: "0".into(),
            out: "figs".into(),
            cwd: cwd.clone(),
        })
        .await
        .unwrap();
    assert_eq!(a.layer_id, 0);
    assert!(cwd.join("figs/cdf.csv").exists() && cwd.join("figs/scatter.csv").exists());

    let e = c
        .export(&ExportRequest {
            checkpoint: "run/finetuned.ckpt".into(),
            out: "m.ltpa".into(),
            cwd,
        })
        .await
        .unwrap();
    assert!(e.kept_weights < e.total_weights);
}

#[tokio::test]
async fn sweep_reports_each_mode() {
    let c = client().await;
    let dir = tempfile::tempdir().unwrap();
    let modes = vec![GradMode::Approx, GradMode::FullUnclamped];
    let r = c
        .sweep(&SweepRequest {
            config: CONFIG.into(),
            cwd: dir.path().into(),
            modes: modes.clone(),
        })
        .await
        .unwrap();
    assert_eq!(r.results.iter().map(|m| m.mode).collect::<Vec<_>>(), modes);
    for m in modes {
        assert!(dir.path().join("run").join(m.as_str()).join("trail.csv").exists());
    }
}

#[tokio::test]
async fn failures_surface_as_typed_errors() {
    let c = client().await;
    let dir = tempfile::tempdir().unwrap();
    let err = c
        .prune(&PruneRequest {
            config: format!("{CONFIG}lr = 1e30\npretrain_epochs = 0\n"),
            cwd: dir.path().into(),
        })
        .await
        .unwrap_err();
    assert!(matches!(err, ClientError::JobFailed { .. }), "{err}");

    let err = c
        .eval(&EvalRequest {
            model: "fixtures/mlp3-pruned.ckpt".into(),
            data: "fixtures/missing".into(),
            cwd: root(),
            batch_size: None,
        })
        .await
        .unwrap_err();
    assert!(matches!(err, ClientError::Api { status: 400, .. }), "{err}");

    let err = Client::new("http://127.0.0.1:9").health().await.unwrap_err();
    assert!(matches!(err, ClientError::Unreachable { .. }), "{err}");
}
