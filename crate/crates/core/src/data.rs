//! Desk-scale datasets: seeded Gaussian blobs and an IDX loader.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::tensor::{Real, Tensor};

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("{path}: bad magic 0x{found:08x}, expected 0x{expected:08x}")]
    BadMagic {
        path: PathBuf,
        expected: u32,
        found: u32,
    },
    #[error("{path}: truncated, expected {expected} bytes but found {actual}")]
    Truncated {
        path: PathBuf,
        expected: usize,
        actual: usize,
    },
    #[error("{images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("label {label} at index {index} is outside [0, {classes})")]
    LabelRange {
        index: usize,
        label: usize,
        classes: usize,
    },
    #[error("invalid dataset parameter {name}: {reason}")]
    InvalidParam { name: &'static str, reason: String },
    #[error("no IDX files found in {0}")]
    MissingFiles(PathBuf),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = DataError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
        })
    }
}

/// In-memory labelled samples. Immutable once built apart from
/// normalization and reshaping.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub split: Split,
    pub classes: usize,
    sample_shape: Vec<usize>,
    inputs: Vec<f64>,
    labels: Vec<usize>,
}

/// Per-dataset input normalization `(x - mean) / std`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: f64,
    pub std: f64,
}

impl Dataset {
    pub fn new(
        split: Split,
        classes: usize,
        sample_shape: Vec<usize>,
        inputs: Vec<f64>,
        labels: Vec<usize>,
    ) -> Result<Self> {
        let dim: usize = sample_shape.iter().product();
        if dim == 0 || inputs.len() != dim * labels.len() {
            return Err(DataError::InvalidParam {
                name: "inputs",
                reason: format!(
                    "{} values do not form {} samples of shape {:?}",
                    inputs.len(),
                    labels.len(),
                    sample_shape
                ),
            });
        }
        if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= classes) {
            return Err(DataError::LabelRange {
                index,
                label,
                classes,
            });
        }
        Ok(Self {
            split,
            classes,
            sample_shape,
            inputs,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.sample_shape
    }

    pub fn dim(&self) -> usize {
        self.sample_shape.iter().product()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn inputs(&self) -> &[f64] {
        &self.inputs
    }

    pub fn sample(&self, i: usize) -> (&[f64], usize) {
        let d = self.dim();
        (&self.inputs[i * d..(i + 1) * d], self.labels[i])
    }

    /// Reinterprets every sample with a new shape of equal size.
    pub fn reshape(&mut self, shape: Vec<usize>) -> Result<()> {
        if shape.iter().product::<usize>() != self.dim() {
            return Err(DataError::InvalidParam {
                name: "input_shape",
                reason: format!("{shape:?} does not hold {} values", self.dim()),
            });
        }
        self.sample_shape = shape;
        Ok(())
    }

    /// Mean and population standard deviation over every input value.
    pub fn normalization(&self) -> Normalization {
        let n = self.inputs.len() as f64;
        let mean = self.inputs.iter().sum::<f64>() / n;
        let var = self.inputs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        Normalization {
            mean,
            std: if var > 0.0 { var.sqrt() } else { 1.0 },
        }
    }

    pub fn normalize(&mut self, norm: Normalization) {
        for x in &mut self.inputs {
            *x = (*x - norm.mean) / norm.std;
        }
    }

    /// Stacks the given samples into a `[B, ...sample_shape]` tensor.
    pub fn batch<F: Real>(&self, indices: &[usize]) -> (Tensor<F>, Vec<usize>) {
        let d = self.dim();
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(&self.sample_shape);
        let mut data = Vec::with_capacity(indices.len() * d);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            let (x, y) = self.sample(i);
            data.extend(x.iter().map(|&v| F::of(v)));
            labels.push(y);
        }
        (
            Tensor::new(shape, data).expect("batch shape follows sample shape"),
            labels,
        )
    }

    /// Index batches in order, or in a permutation fixed by `shuffle`.
    pub fn batches(&self, batch_size: usize, shuffle: Option<u64>) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        if let Some(seed) = shuffle {
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        }
        order
            .chunks(batch_size.max(1))
            .map(|c| c.to_vec())
            .collect()
    }

    /// Quantizes inputs to bytes with `round(255 * clamp(x, 0, 1))`.
    pub fn to_u8(&self) -> Vec<u8> {
        self.inputs
            .iter()
            .map(|&x| (x.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    /// Affinely maps inputs into `[0, 1]` using the given range.
    pub fn rescale(&mut self, lo: f64, hi: f64) {
        let span = if hi > lo { hi - lo } else { 1.0 };
        for x in &mut self.inputs {
            *x = ((*x - lo) / span).clamp(0.0, 1.0);
        }
    }

    pub fn value_range(&self) -> (f64, f64) {
        self.inputs
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| {
                (lo.min(x), hi.max(x))
            })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
}

/// Parameters of the Gaussian-blob generator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlobSpec {
    pub classes: usize,
    pub dim: usize,
    pub n_per_class: usize,
    /// Standard deviation of the per-sample noise.
    pub noise: f64,
    /// Standard deviation of the centroid coordinates.
    pub spread: f64,
}

impl Default for BlobSpec {
    fn default() -> Self {
        Self {
            classes: 10,
            dim: 64,
            n_per_class: 100,
            noise: 1.0,
            spread: 1.0,
        }
    }
}

fn draw_centroids(rng: &mut ChaCha8Rng, spec: &BlobSpec) -> Vec<f64> {
    (0..spec.classes * spec.dim)
        .map(|_| spec.spread * Distribution::<f64>::sample(&StandardNormal, rng))
        .collect()
}

/// The class centroids [`synthetic_blobs`] uses for `seed`, row-major
/// `[classes, dim]`.
pub fn blob_centroids(seed: u64, spec: &BlobSpec) -> Vec<f64> {
    draw_centroids(&mut ChaCha8Rng::seed_from_u64(seed), spec)
}

/// Smallest Euclidean distance between two class centroids.
pub fn min_centroid_distance(seed: u64, spec: &BlobSpec) -> f64 {
    let c = blob_centroids(seed, spec);
    let row = |i: usize| &c[i * spec.dim..(i + 1) * spec.dim];
    let mut best = f64::INFINITY;
    for i in 0..spec.classes {
        for j in 0..i {
            let d2: f64 = row(i).iter().zip(row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
            best = best.min(d2.sqrt());
        }
    }
    best
}

/// Gaussian clusters around seeded centroids, split 80/20 per class.
///
/// Samples are generated class by class; within each class a seeded
/// permutation sends the first fifth of sample indices to validation, so split
/// membership depends only on the seed and the sample index.
pub fn synthetic_blobs(seed: u64, spec: BlobSpec) -> Result<Splits> {
    let bad = |name, reason: &str| {
        Err(DataError::InvalidParam {
            name,
            reason: reason.to_string(),
        })
    };
    if spec.classes < 2 {
        return bad("classes", "need at least 2 classes");
    }
    if spec.dim == 0 {
        return bad("dim", "must be positive");
    }
    if spec.n_per_class < 5 {
        return bad("n_per_class", "need at least 5 samples per class for an 80/20 split");
    }
    if !(spec.noise >= 0.0 && spec.noise.is_finite()) {
        return bad("noise", "must be finite and non-negative");
    }
    if !(spec.spread > 0.0 && spec.spread.is_finite()) {
        return bad("spread", "must be positive");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centroids = draw_centroids(&mut rng, &spec);
    let n_val = spec.n_per_class / 5;
    let (mut train_x, mut train_y, mut val_x, mut val_y) = (vec![], vec![], vec![], vec![]);
    for c in 0..spec.classes {
        let mut order: Vec<usize> = (0..spec.n_per_class).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ (0x9e37_79b9 + c as u64)));
        let mut is_val = vec![false; spec.n_per_class];
        for &i in &order[..n_val] {
            is_val[i] = true;
        }
        let centre = &centroids[c * spec.dim..(c + 1) * spec.dim];
        for &val in &is_val {
            let (xs, ys) = if val {
                (&mut val_x, &mut val_y)
            } else {
                (&mut train_x, &mut train_y)
            };
            for &m in centre {
                let z: f64 = StandardNormal.sample(&mut rng);
                xs.push(m + spec.noise * z);
            }
            ys.push(c);
        }
    }
    Ok(Splits {
        train: Dataset::new(Split::Train, spec.classes, vec![spec.dim], train_x, train_y)?,
        val: Dataset::new(Split::Val, spec.classes, vec![spec.dim], val_x, val_y)?,
    })
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

fn header(path: &Path, bytes: &[u8], magic: u32) -> Result<Vec<usize>> {
    if bytes.len() < 4 {
        return Err(DataError::Truncated {
            path: path.to_path_buf(),
            expected: 4,
            actual: bytes.len(),
        });
    }
    let found = be_u32(bytes, 0);
    if found != magic {
        return Err(DataError::BadMagic {
            path: path.to_path_buf(),
            expected: magic,
            found,
        });
    }
    let ndims = (magic & 0xff) as usize;
    let need = 4 + 4 * ndims;
    if bytes.len() < need {
        return Err(DataError::Truncated {
            path: path.to_path_buf(),
            expected: need,
            actual: bytes.len(),
        });
    }
    let dims: Vec<usize> = (0..ndims).map(|i| be_u32(bytes, 4 + 4 * i) as usize).collect();
    let expected = need + dims.iter().product::<usize>();
    if bytes.len() < expected {
        return Err(DataError::Truncated {
            path: path.to_path_buf(),
            expected,
            actual: bytes.len(),
        });
    }
    Ok(dims)
}

/// Raw IDX contents: `[n, rows, cols]` bytes and labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxData {
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
    pub labels: Vec<u8>,
}

pub fn read_idx(images: &Path, labels: &Path) -> Result<IdxData> {
    let ib = read(images)?;
    let dims = header(images, &ib, IMAGES_MAGIC)?;
    let lb = read(labels)?;
    let ldims = header(labels, &lb, LABELS_MAGIC)?;
    if dims[0] != ldims[0] {
        return Err(DataError::CountMismatch {
            images: dims[0],
            labels: ldims[0],
        });
    }
    let n = dims[0] * dims[1] * dims[2];
    Ok(IdxData {
        rows: dims[1],
        cols: dims[2],
        pixels: ib[16..16 + n].to_vec(),
        labels: lb[8..8 + ldims[0]].to_vec(),
    })
}

/// Loads an IDX image/label pair with pixels scaled to `[0, 1]`.
///
/// The class count is taken as `max(label) + 1` unless `classes` is given.
pub fn load_idx(images: &Path, labels: &Path, split: Split, classes: Option<usize>) -> Result<Dataset> {
    let raw = read_idx(images, labels)?;
    let classes = classes.unwrap_or_else(|| raw.labels.iter().map(|&l| l as usize + 1).max().unwrap_or(0));
    Dataset::new(
        split,
        classes,
        vec![1, raw.rows, raw.cols],
        raw.pixels.iter().map(|&p| p as f64 / 255.0).collect(),
        raw.labels.iter().map(|&l| l as usize).collect(),
    )
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    crate::atomic_write(path, bytes).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_idx_images(path: &Path, rows: usize, cols: usize, pixels: &[u8]) -> Result<()> {
    let n = pixels.len() / (rows * cols).max(1);
    let mut out = Vec::with_capacity(16 + pixels.len());
    out.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
    for d in [n, rows, cols] {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(pixels);
    write_bytes(path, &out)
}

pub fn write_idx_labels(path: &Path, labels: &[u8]) -> Result<()> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    write_bytes(path, &out)
}

/// Writes a dataset with inputs in `[0, 1]` as an IDX pair. Samples must have
/// shape `[rows, cols]`, `[1, rows, cols]` or `[rows * cols]` with `rows` given.
pub fn write_idx(dataset: &Dataset, rows: usize, images: &Path, labels: &Path) -> Result<()> {
    let cols = dataset.dim() / rows.max(1);
    if rows * cols != dataset.dim() || dataset.classes > 256 {
        return Err(DataError::InvalidParam {
            name: "rows",
            reason: format!("{rows} rows do not tile {} values", dataset.dim()),
        });
    }
    write_idx_images(images, rows, cols, &dataset.to_u8())?;
    let l: Vec<u8> = dataset.labels.iter().map(|&l| l as u8).collect();
    write_idx_labels(labels, &l)
}

const DIR_LAYOUTS: [[&str; 4]; 2] = [
    [
        "train-images.idx",
        "train-labels.idx",
        "val-images.idx",
        "val-labels.idx",
    ],
    [
        "train-images-idx3-ubyte",
        "train-labels-idx1-ubyte",
        "t10k-images-idx3-ubyte",
        "t10k-labels-idx1-ubyte",
    ],
];

/// Loads train and validation splits from a directory of IDX files.
///
/// With `norm = None` the constants are computed from the train split; either
/// way both splits are normalized and the constants are returned.
pub fn load_dir(dir: &Path, norm: Option<Normalization>) -> Result<(Splits, Normalization)> {
    let layout = DIR_LAYOUTS
        .iter()
        .find(|l| l.iter().all(|f| dir.join(f).is_file()))
        .ok_or_else(|| DataError::MissingFiles(dir.to_path_buf()))?;
    let mut train = load_idx(&dir.join(layout[0]), &dir.join(layout[1]), Split::Train, None)?;
    let mut val = load_idx(&dir.join(layout[2]), &dir.join(layout[3]), Split::Val, None)?;
    let classes = train.classes.max(val.classes);
    train.classes = classes;
    val.classes = classes;
    let norm = norm.unwrap_or_else(|| train.normalization());
    train.normalize(norm);
    val.normalize(norm);
    Ok((Splits { train, val }, norm))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(noise: f64) -> BlobSpec {
        BlobSpec {
            classes: 3,
            dim: 4,
            n_per_class: 20,
            noise,
            spread: 1.0,
        }
    }

    #[test]
    fn blobs_are_seeded_and_split_80_20() {
        let a = synthetic_blobs(5, spec(0.3)).unwrap();
        let b = synthetic_blobs(5, spec(0.3)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.train.len(), 48);
        assert_eq!(a.val.len(), 12);
        for c in 0..3 {
            assert_eq!(a.val.labels().iter().filter(|&&l| l == c).count(), 4);
        }
        assert_ne!(a, synthetic_blobs(6, spec(0.3)).unwrap());
    }

    #[test]
    fn degenerate_blob_params_are_rejected() {
        let mut s = spec(0.1);
        s.classes = 1;
        assert!(synthetic_blobs(0, s).is_err());
        assert!(synthetic_blobs(0, spec(-1.0)).is_err());
    }

    #[test]
    fn batches_cover_every_index_once() {
        let d = synthetic_blobs(1, spec(0.1)).unwrap().train;
        for shuffle in [None, Some(3)] {
            let mut seen: Vec<usize> = d.batches(7, shuffle).concat();
            seen.sort_unstable();
            assert_eq!(seen, (0..d.len()).collect::<Vec<_>>());
        }
        let (x, y) = d.batch::<f64>(&[2, 0]);
        assert_eq!(x.shape(), &[2, 4]);
        assert_eq!(&x.data()[..4], d.sample(2).0);
        assert_eq!(y, vec![d.labels()[2], d.labels()[0]]);
    }
}
