//! Regenerates the shipped fixtures under `fixtures/` at the workspace root:
//! a small IDX image dataset, a pruned-and-finetuned mlp3 checkpoint, its
//! recorded validation metrics and the golden sparse artifact.
//!
//! Run with `cargo run --release -p ltp-core --example make_fixtures`.

use std::path::{Path, PathBuf};

use ltp_core::artifact::SparseModelArtifact;
use ltp_core::config::{DatasetSource, RunConfig};
use ltp_core::data::{synthetic_blobs, write_idx, BlobSpec};
use ltp_core::trainer::{mask_keep_ratio, Run};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").canonicalize()?;
    std::env::set_current_dir(&root)?;
    let digits = PathBuf::from("fixtures/digits");
    std::fs::create_dir_all(&digits)?;

    let spec = BlobSpec {
        classes: 4,
        dim: 64,
        n_per_class: 60,
        noise: 3.0,
        spread: 1.0,
    };
    let mut splits = synthetic_blobs(7, spec)?;
    let (lo, hi) = splits.train.value_range();
    splits.train.rescale(lo, hi);
    splits.val.rescale(lo, hi);
    write_idx(&splits.train, 8, &digits.join("train-images.idx"), &digits.join("train-labels.idx"))?;
    write_idx(&splits.val, 8, &digits.join("val-images.idx"), &digits.join("val-labels.idx"))?;

    let mut cfg = RunConfig {
        model: "mlp3".into(),
        dataset: DatasetSource::Idx(digits),
        seed: 7,
        batch_size: 16,
        pretrain_epochs: 3,
        prune_epochs: 6,
        finetune_epochs: 2,
        out_dir: PathBuf::from("fixtures/run"),
        ..RunConfig::default()
    };
    cfg.hp.lambda0 = 2e-4;
    cfg.hp.lr_ratio = 1e-4;
    let mut run = Run::<f64>::new(cfg)?;
    run.pretrain(run.config.pretrain_epochs)?;
    run.prune(None)?;
    let ft = run.config.finetune_epochs;
    let lr = run.config.finetune_lr;
    run.finetune(ft, lr)?;
    let val = run.evaluate_val()?;

    let ck = ltp_core::checkpoint::Checkpoint {
        model: run.model.clone(),
        meta: ltp_core::checkpoint::CheckpointMeta {
            phase: ltp_core::checkpoint::Phase::Finetune,
            epoch: ft,
            keep_ratio: mask_keep_ratio(&run.model),
            val_loss: Some(val.loss),
            val_top1: Some(val.top1),
            lambda: None,
            source_precision: ltp_core::tensor::Precision::F64,
        },
        config: Some(run.config.clone()),
    };
    ck.save(Path::new("fixtures/mlp3-pruned.ckpt"))?;
    let art = SparseModelArtifact::from_checkpoint(&ck);
    art.save(Path::new("fixtures/mlp3-pruned.ltpa"))?;
    let meta = format!(
        "val_top1 = {}\nval_loss = {}\nkeep_ratio = {}\nkept_weights = {}\ntotal_weights = {}\n",
        val.top1,
        val.loss,
        ck.meta.keep_ratio,
        art.kept_weights(),
        art.total_weights()
    );
    std::fs::write("fixtures/mlp3-pruned.meta", &meta)?;
    print!("{meta}");
    Ok(())
}
