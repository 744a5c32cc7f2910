//! Line-based `key = value` run configuration.
//!
//! Blank lines and `#` comments are ignored. Every key must be known; a bad
//! line is reported with its 1-based number and text.

use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{BlobSpec, Normalization};
use crate::pruning::LtpHyperParams;
use crate::tensor::Precision;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("line {line}: {reason}: `{text}`")]
    Line {
        line: usize,
        text: String,
        reason: String,
    },
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = ConfigError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regularizer {
    #[default]
    SoftL0,
    L2,
    L1,
    None,
}

impl Regularizer {
    pub fn as_str(self) -> &'static str {
        match self {
            Regularizer::SoftL0 => "soft_l0",
            Regularizer::L2 => "l2",
            Regularizer::L1 => "l1",
            Regularizer::None => "none",
        }
    }
}

impl fmt::Display for Regularizer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Regularizer {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "soft_l0" => Ok(Self::SoftL0),
            "l2" => Ok(Self::L2),
            "l1" => Ok(Self::L1),
            "none" => Ok(Self::None),
            other => Err(format!("unknown regularizer {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetSource {
    Blobs(BlobSpec),
    /// Directory of IDX files.
    Idx(PathBuf),
}

/// Everything needed to reproduce one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: String,
    pub dataset: DatasetSource,
    /// Per-sample model input shape; the data is reshaped to it.
    pub input_shape: Option<Vec<usize>>,
    pub seed: u64,
    pub precision: Precision,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub pretrain_epochs: usize,
    pub prune_epochs: usize,
    pub finetune_epochs: usize,
    pub finetune_lr: f64,
    pub hp: LtpHyperParams,
    pub regularizer: Regularizer,
    pub target_keep_ratio: Option<f64>,
    pub exempt_layers: Vec<String>,
    /// Layer whose statistics are also tracked in the trail (default: all).
    pub tracked_layer: Option<String>,
    pub normalization: Option<Normalization>,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: "mlp3".into(),
            dataset: DatasetSource::Blobs(BlobSpec::default()),
            input_shape: None,
            seed: 0,
            precision: Precision::F64,
            batch_size: 64,
            lr: 0.05,
            momentum: 0.9,
            pretrain_epochs: 5,
            prune_epochs: 20,
            finetune_epochs: 5,
            finetune_lr: 0.01,
            hp: LtpHyperParams::default(),
            regularizer: Regularizer::SoftL0,
            target_keep_ratio: None,
            exempt_layers: Vec::new(),
            tracked_layer: None,
            normalization: None,
            out_dir: PathBuf::from("run"),
        }
    }
}

fn parse_num<T: FromStr>(v: &str) -> Result<T, String> {
    v.parse().map_err(|_| format!("cannot parse {v:?} as a number"))
}

fn parse_bool(v: &str) -> Result<bool, String> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("expected true or false, got {v:?}")),
    }
}

fn parse_shape(v: &str) -> Result<Vec<usize>, String> {
    v.split('x')
        .map(|d| parse_num::<usize>(d.trim()))
        .collect::<Result<Vec<_>, _>>()
        .and_then(|s| {
            if s.is_empty() || s.contains(&0) {
                Err(format!("bad shape {v:?}"))
            } else {
                Ok(s)
            }
        })
}

fn shape_str(s: &[usize]) -> String {
    s.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut c = RunConfig::default();
        let mut blobs = BlobSpec::default();
        let mut data_dir: Option<PathBuf> = None;
        let mut dataset = "blobs".to_string();
        let mut norm_mean = None;
        let mut norm_std = None;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let fail = |reason: String| ConfigError::Line {
                line: i + 1,
                text: raw.to_string(),
                reason,
            };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| fail("expected `key = value`".into()))?;
            let (key, v) = (key.trim(), value.trim());
            let r: Result<(), String> = (|| {
                match key {
                    "preset" => {
                        let p = LtpHyperParams::preset(v)
                            .ok_or_else(|| format!("unknown preset {v:?}"))?;
                        c.hp = LtpHyperParams {
                            grad_mode: c.hp.grad_mode,
                            clamp_kappa: c.hp.clamp_kappa,
                            tau_init: c.hp.tau_init,
                            recompute_temperature: c.hp.recompute_temperature,
                            ..p
                        };
                    }
                    "model" => c.model = v.to_string(),
                    "dataset" => dataset = v.to_string(),
                    "data_dir" => data_dir = Some(PathBuf::from(v)),
                    "input_shape" => c.input_shape = Some(parse_shape(v)?),
                    "seed" => c.seed = parse_num(v)?,
                    "precision" => {
                        c.precision = match v {
                            "f32" => Precision::F32,
                            "f64" => Precision::F64,
                            _ => return Err(format!("unknown precision {v:?}")),
                        }
                    }
                    "batch_size" => c.batch_size = parse_num(v)?,
                    "lr" => c.lr = parse_num(v)?,
                    "momentum" => c.momentum = parse_num(v)?,
                    "pretrain_epochs" => c.pretrain_epochs = parse_num(v)?,
                    "prune_epochs" => c.prune_epochs = parse_num(v)?,
                    "finetune_epochs" => c.finetune_epochs = parse_num(v)?,
                    "finetune_lr" => c.finetune_lr = parse_num(v)?,
                    "t0" => c.hp.t0 = parse_num(v)?,
                    "lr_ratio" => c.hp.lr_ratio = parse_num(v)?,
                    "lambda0" => c.hp.lambda0 = parse_num(v)?,
                    "c_lambda" => c.hp.c_lambda = parse_num(v)?,
                    "n_lambda" => c.hp.n_lambda = parse_num(v)?,
                    "grad_mode" => c.hp.grad_mode = v.parse().map_err(|e| format!("{e}"))?,
                    "clamp_kappa" => c.hp.clamp_kappa = parse_num(v)?,
                    "tau_init" => c.hp.tau_init = parse_num(v)?,
                    "recompute_temperature" => c.hp.recompute_temperature = parse_bool(v)?,
                    "regularizer" => c.regularizer = v.parse()?,
                    "target_keep_ratio" => {
                        c.target_keep_ratio = if v == "none" { None } else { Some(parse_num(v)?) }
                    }
                    "exempt_layers" => {
                        c.exempt_layers = v
                            .split(',')
                            .map(str::trim)
                            .filter(|s| !s.is_empty())
                            .map(String::from)
                            .collect()
                    }
                    "tracked_layer" => c.tracked_layer = Some(v.to_string()),
                    "out_dir" => c.out_dir = PathBuf::from(v),
                    "blobs.classes" => blobs.classes = parse_num(v)?,
                    "blobs.dim" => blobs.dim = parse_num(v)?,
                    "blobs.n_per_class" => blobs.n_per_class = parse_num(v)?,
                    "blobs.noise" => blobs.noise = parse_num(v)?,
                    "blobs.spread" => blobs.spread = parse_num(v)?,
                    "norm.mean" => norm_mean = Some(parse_num(v)?),
                    "norm.std" => norm_std = Some(parse_num(v)?),
                    _ => return Err(format!("unknown key {key:?}")),
                }
                Ok(())
            })();
            r.map_err(fail)?;
        }
        c.dataset = match dataset.as_str() {
            "blobs" => DatasetSource::Blobs(blobs),
            "idx" => DatasetSource::Idx(
                data_dir.ok_or_else(|| ConfigError::Invalid("dataset = idx needs data_dir".into()))?,
            ),
            other => return Err(ConfigError::Invalid(format!("unknown dataset {other:?}"))),
        };
        c.normalization = match (norm_mean, norm_std) {
            (Some(mean), Some(std)) => Some(Normalization { mean, std }),
            (None, None) => None,
            _ => {
                return Err(ConfigError::Invalid(
                    "norm.mean and norm.std must be given together".into(),
                ))
            }
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        for (name, v) in [("lr", self.lr), ("finetune_lr", self.finetune_lr)] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive"));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must be in [0, 1)".into());
        }
        if let Some(t) = self.target_keep_ratio {
            if !(t > 0.0 && t <= 1.0) {
                return bad("target_keep_ratio must be in (0, 1]".into());
            }
        }
        if let Some(n) = self.normalization {
            if !(n.std > 0.0 && n.std.is_finite() && n.mean.is_finite()) {
                return bad("norm.std must be positive".into());
            }
        }
        self.hp.validate().map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    /// Canonical text form; `parse(serialize(c)) == c`.
    pub fn serialize(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: &dyn fmt::Display| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("model", &self.model);
        match &self.dataset {
            DatasetSource::Blobs(b) => {
                kv("dataset", &"blobs");
                kv("blobs.classes", &b.classes);
                kv("blobs.dim", &b.dim);
                kv("blobs.n_per_class", &b.n_per_class);
                kv("blobs.noise", &b.noise);
                kv("blobs.spread", &b.spread);
            }
            DatasetSource::Idx(dir) => {
                kv("dataset", &"idx");
                kv("data_dir", &dir.display());
            }
        }
        if let Some(shape) = &self.input_shape {
            kv("input_shape", &shape_str(shape));
        }
        kv("seed", &self.seed);
        kv("precision", &self.precision.as_str());
        kv("batch_size", &self.batch_size);
        kv("lr", &self.lr);
        kv("momentum", &self.momentum);
        kv("pretrain_epochs", &self.pretrain_epochs);
        kv("prune_epochs", &self.prune_epochs);
        kv("finetune_epochs", &self.finetune_epochs);
        kv("finetune_lr", &self.finetune_lr);
        kv("t0", &self.hp.t0);
        kv("lr_ratio", &self.hp.lr_ratio);
        kv("lambda0", &self.hp.lambda0);
        kv("c_lambda", &self.hp.c_lambda);
        kv("n_lambda", &self.hp.n_lambda);
        kv("grad_mode", &self.hp.grad_mode);
        kv("clamp_kappa", &self.hp.clamp_kappa);
        kv("tau_init", &self.hp.tau_init);
        kv("recompute_temperature", &self.hp.recompute_temperature);
        kv("regularizer", &self.regularizer);
        match self.target_keep_ratio {
            Some(t) => kv("target_keep_ratio", &t),
            None => kv("target_keep_ratio", &"none"),
        }
        if !self.exempt_layers.is_empty() {
            kv("exempt_layers", &self.exempt_layers.join(","));
        }
        if let Some(l) = &self.tracked_layer {
            kv("tracked_layer", l);
        }
        if let Some(n) = self.normalization {
            kv("norm.mean", &n.mean);
            kv("norm.std", &n.std);
        }
        kv("out_dir", &self.out_dir.display());
        s
    }
}
