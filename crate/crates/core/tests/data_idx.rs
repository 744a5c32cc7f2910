use std::fs;

use ltp_core::data::{
    load_dir, load_idx, read_idx, synthetic_blobs, write_idx, BlobSpec, DataError, Split,
};

fn images_bytes() -> Vec<u8> {
    let mut b = vec![0x00, 0x00, 0x08, 0x03];
    b.extend([0, 0, 0, 2]); // count
    b.extend([0, 0, 0, 2]); // rows
    b.extend([0, 0, 0, 3]); // cols
    b.extend([0, 51, 102, 153, 204, 255]);
    b.extend([255, 0, 255, 0, 255, 0]);
    b
}

fn labels_bytes(n: u8) -> Vec<u8> {
    let mut b = vec![0x00, 0x00, 0x08, 0x01, 0, 0, 0, n];
    b.extend((0..n).map(|i| i % 2 + 3));
    b
}

#[test]
fn handcrafted_fixture_loads_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let (img, lab) = (dir.path().join("i.idx"), dir.path().join("l.idx"));
    fs::write(&img, images_bytes()).unwrap();
    fs::write(&lab, labels_bytes(2)).unwrap();
    let d = load_idx(&img, &lab, Split::Train, None).unwrap();
    assert_eq!(d.sample_shape(), &[1, 2, 3]);
    assert_eq!(d.labels(), &[3, 4]);
    assert_eq!(d.classes, 5);
    assert_eq!(d.sample(0).0, &[0.0, 0.2, 0.4, 0.6, 0.8, 1.0]);
    assert_eq!(d.sample(1).0, &[1.0, 0.0, 1.0, 0.0, 1.0, 0.0]);
}

#[test]
fn label_file_as_images_is_bad_magic() {
    let dir = tempfile::tempdir().unwrap();
    let lab = dir.path().join("l.idx");
    fs::write(&lab, labels_bytes(2)).unwrap();
    let err = load_idx(&lab, &lab, Split::Train, None).unwrap_err();
    assert!(matches!(err, DataError::BadMagic { found: 0x801, .. }), "{err}");
}

#[test]
fn count_mismatch_and_truncation_are_distinct_errors() {
    let dir = tempfile::tempdir().unwrap();
    let (img, lab) = (dir.path().join("i.idx"), dir.path().join("l.idx"));
    let mut ten = vec![0x00, 0x00, 0x08, 0x03, 0, 0, 0, 10, 0, 0, 0, 1, 0, 0, 0, 1];
    ten.extend([7u8; 10]);
    fs::write(&img, &ten).unwrap();
    fs::write(&lab, labels_bytes(9)).unwrap();
    assert!(matches!(
        read_idx(&img, &lab),
        Err(DataError::CountMismatch { images: 10, labels: 9 })
    ));
    fs::write(&img, &ten[..20]).unwrap();
    assert!(matches!(read_idx(&img, &lab), Err(DataError::Truncated { .. })));
    assert!(matches!(
        read_idx(&dir.path().join("missing"), &lab),
        Err(DataError::Io { .. })
    ));
}

#[test]
fn idx_round_trip_is_exact_after_quantization() {
    let spec = BlobSpec {
        classes: 4,
        dim: 36,
        n_per_class: 10,
        noise: 0.5,
        spread: 1.0,
    };
    let mut splits = synthetic_blobs(3, spec).unwrap();
    let (lo, hi) = splits.train.value_range();
    splits.train.rescale(lo, hi);
    let dir = tempfile::tempdir().unwrap();
    let (img, lab) = (dir.path().join("i.idx"), dir.path().join("l.idx"));
    write_idx(&splits.train, 6, &img, &lab).unwrap();
    let back = load_idx(&img, &lab, Split::Train, Some(4)).unwrap();
    assert_eq!(back.labels(), splits.train.labels());
    assert_eq!(back.to_u8(), splits.train.to_u8());
    let (img2, lab2) = (dir.path().join("i2.idx"), dir.path().join("l2.idx"));
    write_idx(&back, 6, &img2, &lab2).unwrap();
    assert_eq!(fs::read(&img).unwrap(), fs::read(&img2).unwrap());
    assert_eq!(fs::read(&lab).unwrap(), fs::read(&lab2).unwrap());
}

#[test]
fn directory_loader_normalizes_with_train_constants() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("train-images.idx"), images_bytes()).unwrap();
    fs::write(dir.path().join("train-labels.idx"), labels_bytes(2)).unwrap();
    fs::write(dir.path().join("val-images.idx"), images_bytes()).unwrap();
    fs::write(dir.path().join("val-labels.idx"), labels_bytes(2)).unwrap();
    let (splits, norm) = load_dir(dir.path(), None).unwrap();
    let mean = splits.train.inputs().iter().sum::<f64>() / 12.0;
    assert!(mean.abs() < 1e-12);
    assert!((norm.mean - 0.5).abs() < 1e-15);
    assert_eq!(splits.val.inputs(), splits.train.inputs());
    assert!(matches!(
        load_dir(&dir.path().join("nope"), None),
        Err(DataError::MissingFiles(_))
    ));
}

#[test]
fn noiseless_blobs_are_linearly_separable() {
    let spec = BlobSpec {
        classes: 5,
        dim: 8,
        n_per_class: 20,
        noise: 0.0,
        spread: 1.0,
    };
    let s = synthetic_blobs(11, spec).unwrap();
    // nearest-centroid is a linear classifier; with zero noise every sample
    // sits on its centroid
    let centroid = |c: usize| {
        let i = s.train.labels().iter().position(|&l| l == c).unwrap();
        s.train.sample(i).0.to_vec()
    };
    let cents: Vec<Vec<f64>> = (0..5).map(centroid).collect();
    for i in 0..s.train.len() {
        let (x, y) = s.train.sample(i);
        let score = |c: &Vec<f64>| -> f64 {
            c.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() - 0.5 * c.iter().map(|a| a * a).sum::<f64>()
        };
        let best = (0..5)
            .max_by(|&a, &b| score(&cents[a]).partial_cmp(&score(&cents[b])).unwrap())
            .unwrap();
        assert_eq!(best, y);
    }
}
