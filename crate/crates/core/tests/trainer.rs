use ltp_core::checkpoint::Checkpoint;
use ltp_core::config::{DatasetSource, Regularizer, RunConfig};
use ltp_core::data::{min_centroid_distance, BlobSpec};
use ltp_core::runlog::{read_csv, TrailRow};
use ltp_core::tensor::Tensor;
use ltp_core::trainer::{
    evaluate, finalize_model, mask_keep_ratio, prune_run, top_k_correct, Run, TrainError,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn blobs(classes: usize, noise: f64) -> DatasetSource {
    DatasetSource::Blobs(BlobSpec {
        classes,
        dim: 16,
        n_per_class: 40,
        noise,
        spread: 1.0,
    })
}

fn quick() -> RunConfig {
    let mut c = RunConfig {
        dataset: blobs(4, 0.8),
        batch_size: 16,
        pretrain_epochs: 2,
        prune_epochs: 4,
        ..RunConfig::default()
    };
    c.hp.lambda0 = 1e-4;
    c.hp.lr_ratio = 1e-4;
    c
}

#[test]
fn random_logits_give_chance_accuracy() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 6000;
    let logits: Vec<f64> = (0..n * 10).map(|_| rng.random::<f64>()).collect();
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..10)).collect();
    let t = Tensor::new(vec![n, 10], logits).unwrap();
    let acc = top_k_correct(&t, &labels, 1) as f64 / n as f64;
    assert!((acc - 0.1).abs() <= 0.02, "{acc}");
}

proptest! {
    #[test]
    fn top5_never_below_top1(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 50;
        let logits: Vec<f64> = (0..n * 7).map(|_| rng.random_range(-1.0..1.0f64).round()).collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..7)).collect();
        let t = Tensor::new(vec![n, 7], logits).unwrap();
        prop_assert!(top_k_correct(&t, &labels, 5) >= top_k_correct(&t, &labels, 1));
    }
}

#[test]
fn well_separated_blobs_are_learned() {
    let mut spec = BlobSpec {
        classes: 10,
        dim: 64,
        n_per_class: 500,
        noise: 1.0,
        spread: 1.0,
    };
    spec.noise = min_centroid_distance(0, &spec) / 6.0;
    let cfg = RunConfig {
        dataset: DatasetSource::Blobs(spec),
        batch_size: 32,
        lr: 0.01,
        ..RunConfig::default()
    };
    let mut run = Run::<f64>::new(cfg).unwrap();
    run.pretrain(3).unwrap();
    let val = run.evaluate_val().unwrap();
    assert!(val.top1 >= 0.99, "{val:?}");
}

#[test]
fn trail_is_deterministic_and_audited() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = quick();
    let a = prune_run(&cfg, Some(dir.path())).unwrap();
    let b = prune_run(&cfg, None).unwrap();
    assert_eq!(a.trail, b.trail);
    assert_eq!(a.trail.len(), cfg.prune_epochs);

    let rows: Vec<TrailRow> = read_csv(&dir.path().join("trail.csv")).unwrap();
    assert_eq!(rows.len(), a.trail.len());
    for (row, entry) in rows.iter().zip(&a.trail) {
        assert_eq!(row.epoch, entry.epoch);
        assert_eq!(row.keep_ratio, entry.keep_ratio);

        let ck = Checkpoint::load(&dir.path().join(format!("epoch-{:04}.ckpt", entry.epoch))).unwrap();
        let (mut kept, mut total) = (0usize, 0usize);
        for p in &ck.model.prunable {
            kept += p.w.data().iter().filter(|w| *w * *w > p.tau).count();
            total += p.numel();
        }
        assert_eq!(entry.keep_ratio, kept as f64 / total as f64);
    }
    assert!(dir.path().join("best.ckpt").exists());
    assert!(dir.path().join("initial.ckpt").exists());
    let layers = std::fs::read_to_string(dir.path().join("layers.csv")).unwrap();
    assert_eq!(layers.lines().count(), 1 + 3 * cfg.prune_epochs);
}

#[test]
fn target_keep_ratio_stops_early() {
    let mut cfg = quick();
    cfg.prune_epochs = 50;
    cfg.hp.lambda0 = 1e-3;
    cfg.target_keep_ratio = Some(0.5);
    let out = prune_run(&cfg, None).unwrap();
    let last = out.trail.last().unwrap();
    assert!(last.keep_ratio <= 0.5);
    assert!(out.trail.len() < 50);
    assert!(out.trail[..out.trail.len() - 1].iter().all(|c| c.keep_ratio > 0.5));
    assert_eq!(out.best_epoch, Some(last.epoch));
}

#[test]
fn finetune_never_touches_the_mask() {
    let cfg = quick();
    let mut run = Run::<f64>::new(cfg).unwrap();
    run.pretrain(2).unwrap();
    run.prune(None).unwrap();
    run.finalize();
    let masks: Vec<Vec<bool>> = run.model.prunable.iter().map(|p| p.mask().unwrap().to_vec()).collect();
    let ratio = mask_keep_ratio(&run.model);
    assert!(ratio < 1.0);
    let hard = run.evaluate_val().unwrap();
    let hist = run.finetune(3, 0.01).unwrap();
    for (p, mask) in run.model.prunable.iter().zip(&masks) {
        assert_eq!(p.mask().unwrap(), mask.as_slice());
        let masked: f64 = p
            .w
            .data()
            .iter()
            .zip(mask)
            .filter(|(_, &k)| !k)
            .map(|(w, _)| w.abs())
            .sum();
        assert_eq!(masked, 0.0);
    }
    assert_eq!(mask_keep_ratio(&run.model), ratio);
    assert!(hist.last().unwrap().2.top1 >= hard.top1 - 0.001);
}

#[test]
fn finalize_zeroes_exactly_the_pruned_weights() {
    let mut run = Run::<f64>::new(quick()).unwrap();
    for p in &mut run.model.prunable {
        p.tau = 0.01;
    }
    let before = run.model.clone();
    finalize_model(&mut run.model);
    for (a, b) in before.prunable.iter().zip(&run.model.prunable) {
        for (x, y) in a.w.data().iter().zip(b.w.data()) {
            if x * x > a.tau {
                assert_eq!(x, y);
            } else {
                assert_eq!(*y, 0.0);
            }
        }
    }
    let mut again = run.model.clone();
    finalize_model(&mut again);
    assert_eq!(again, run.model);
}

#[test]
fn no_regularization_barely_prunes() {
    let mut cfg = RunConfig {
        model: "resnet-lite".into(),
        dataset: DatasetSource::Blobs(BlobSpec {
            classes: 4,
            dim: 64,
            n_per_class: 30,
            noise: 2.0,
            spread: 1.0,
        }),
        input_shape: Some(vec![1, 8, 8]),
        batch_size: 16,
        pretrain_epochs: 1,
        prune_epochs: 3,
        regularizer: Regularizer::None,
        ..RunConfig::default()
    };
    cfg.hp.lambda0 = 0.0;
    let out = prune_run(&cfg, None).unwrap();
    assert!(out.trail.last().unwrap().keep_ratio >= 0.9);
}

#[test]
fn divergence_is_reported_with_last_good_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = quick();
    cfg.pretrain_epochs = 0;
    cfg.lr = 1e30;
    let err = prune_run(&cfg, Some(dir.path())).unwrap_err();
    match err {
        TrainError::Diverged { last_good, .. } => {
            if let Some(p) = last_good {
                Checkpoint::load(&p).unwrap();
            }
        }
        other => panic!("unexpected error {other}"),
    }
    assert!(dir.path().join("initial.ckpt").exists());
}

#[test]
fn eval_is_deterministic() {
    let mut run = Run::<f64>::new(quick()).unwrap();
    run.pretrain(1).unwrap();
    let mut m = run.model.clone();
    let a = evaluate(&mut m, &run.data.val, 7).unwrap();
    let b = evaluate(&mut m, &run.data.val, 7).unwrap();
    assert_eq!(a, b);
    assert!(a.top5 >= a.top1);
}
