use std::path::{Path, PathBuf};

use ltp_core::analysis::{analyze_layer, write_analysis, AnalysisError};
use ltp_core::artifact::{ratio_to_f64, ArtifactError, SparseModelArtifact};
use ltp_core::checkpoint::Checkpoint;
use ltp_core::trainer::finalize_model;
use num_rational::Ratio;

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn fixture_ckpt() -> Checkpoint {
    Checkpoint::load(&fixtures().join("mlp3-pruned.ckpt")).unwrap()
}

fn meta(key: &str) -> String {
    let text = std::fs::read_to_string(fixtures().join("mlp3-pruned.meta")).unwrap();
    text.lines()
        .find_map(|l| l.strip_prefix(&format!("{key} = ")).map(str::to_string))
        .unwrap()
}

#[test]
fn export_matches_golden_bytes() {
    let art = SparseModelArtifact::from_checkpoint(&fixture_ckpt());
    let golden = std::fs::read(fixtures().join("mlp3-pruned.ltpa")).unwrap();
    assert!(art.to_bytes() == golden, "export differs from golden artifact");
}

#[test]
fn reconstruction_is_bit_exact_at_f32() {
    let ck = fixture_ckpt();
    let mut hard = ck.model.clone();
    finalize_model(&mut hard);
    let bytes = SparseModelArtifact::from_checkpoint(&ck).to_bytes();
    let art = SparseModelArtifact::from_bytes(&bytes).unwrap();
    let layers = art.reconstruct();
    assert_eq!(layers.len(), hard.prunable.len());
    for ((name, shape, dense), p) in layers.iter().zip(&hard.prunable) {
        assert_eq!(name, &p.name);
        assert_eq!(shape.as_slice(), p.w.shape());
        for (a, b) in dense.iter().zip(p.w.data()) {
            assert_eq!(a.to_bits(), (*b as f32).to_bits());
        }
    }
    for (block, d) in art.dense.iter().zip(&hard.dense) {
        assert_eq!(block.name, d.name);
        assert!(block.values.iter().zip(d.value.data()).all(|(a, b)| a.to_bits() == (*b as f32).to_bits()));
    }
}

#[test]
fn manifest_rate_equals_recount() {
    let art = SparseModelArtifact::load(&fixtures().join("mlp3-pruned.ltpa")).unwrap();
    let ck = fixture_ckpt();
    let total: u64 = ck.model.prunable.iter().map(|p| p.numel() as u64).sum();
    let kept: u64 = ck
        .model
        .prunable
        .iter()
        .flat_map(|p| p.w.data())
        .filter(|w| **w != 0.0)
        .count() as u64;
    assert_eq!(art.total_weights(), total);
    assert_eq!(art.kept_weights(), kept);
    assert_eq!(art.compression_rate().unwrap(), Ratio::new(total, kept));
    assert_eq!(meta("kept_weights").parse::<u64>().unwrap(), kept);

    let manifest = art.manifest();
    let rate: f64 = manifest
        .lines()
        .find_map(|l| l.strip_prefix("compression_rate = "))
        .unwrap()
        .parse()
        .unwrap();
    assert_eq!(rate, ratio_to_f64(Ratio::new(total, kept)));
    for (i, l) in art.layers.iter().enumerate() {
        assert!(manifest.contains(&format!("layer.{i}.kept = {}\n", l.csr.nnz())));
    }
}

#[test]
fn corrupted_artifacts_are_rejected() {
    let bytes = std::fs::read(fixtures().join("mlp3-pruned.ltpa")).unwrap();
    assert!(matches!(
        SparseModelArtifact::from_bytes(&bytes[..bytes.len() - 3]),
        Err(ArtifactError::Payload(_))
    ));
    assert!(matches!(
        SparseModelArtifact::from_bytes(b"hello\n\nworld"),
        Err(ArtifactError::BadMagic)
    ));
    let key = b"format_version = 1";
    let at = bytes.windows(key.len()).position(|w| w == key).unwrap();
    let mut v2 = bytes.clone();
    v2[at + key.len() - 1] = b'9';
    assert!(matches!(SparseModelArtifact::from_bytes(&v2), Err(ArtifactError::Version(9))));
}

#[test]
fn failed_save_leaves_no_partial_file() {
    let dir = tempfile::tempdir().unwrap();
    let art = SparseModelArtifact::from_checkpoint(&fixture_ckpt());
    let target = dir.path().join("missing-subdir").join("model.ltpa");
    assert!(art.save(&target).is_err());
    assert!(!target.exists());

    let ok = dir.path().join("model.ltpa");
    std::fs::write(&ok, b"old").unwrap();
    art.save(&ok).unwrap();
    assert_eq!(std::fs::read(&ok).unwrap(), art.to_bytes());
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
}

#[test]
fn analysis_of_identical_checkpoints_lies_on_diagonal() {
    let ck = fixture_ckpt();
    let a = analyze_layer(&ck, &ck, "fc2.weight").unwrap();
    assert_eq!(a.off_quadrant(), 0);
    let rows = &a.scatter[..a.scatter.len() - 1];
    assert!(rows.iter().all(|r| r.w_sq_original == r.w_sq_pruned));
    assert_eq!(a.scatter.last().unwrap().index, "threshold");

    for series in ["original", "pruned"] {
        let cdf: Vec<f64> = a.cdf.iter().filter(|r| r.series == series).map(|r| r.cdf.unwrap()).collect();
        assert!(cdf.windows(2).all(|w| w[0] <= w[1]));
        assert_eq!(*cdf.last().unwrap(), 1.0);
    }
    let dir = tempfile::tempdir().unwrap();
    write_analysis(&a, dir.path()).unwrap();
    let cdf = std::fs::read_to_string(dir.path().join("cdf.csv")).unwrap();
    assert!(cdf.starts_with("series,w_sq,cdf\n"));
    assert!(cdf.trim_end().lines().last().unwrap().starts_with("threshold,"));
}

#[test]
fn analysis_rejects_mismatched_layers() {
    let ck = fixture_ckpt();
    let mut other = ck.clone();
    other.model.prunable[1].w = ltp_core::tensor::Tensor::zeros(&[3, 3]);
    assert!(matches!(
        analyze_layer(&ck, &other, "1"),
        Err(AnalysisError::ShapeMismatch { .. })
    ));
    assert!(matches!(analyze_layer(&ck, &ck, "nope"), Err(AnalysisError::UnknownLayer(_))));
}
