//! The three-phase pipeline: pretrain, soft-prune with learned thresholds,
//! hard-prune finalization and masked finetuning.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tracing::info;

use crate::checkpoint::{Checkpoint, CheckpointError, CheckpointMeta, Phase};
use crate::config::{DatasetSource, Regularizer, RunConfig};
use crate::data::{self, DataError, Dataset, Splits};
use crate::nn::{self, Model, ModelError};
use crate::pruning::{
    lambda_step, per_layer_temperature, threshold_step, weight_grad, Clamp, DerivativeVariant,
    GradMode, LambdaState, PruneError, PruneMode,
};
use crate::runlog::{self, RunLogError};
use crate::tensor::{Graph, Precision, Real, Tensor, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Prune(#[from] PruneError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Log(#[from] RunLogError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("training diverged (non-finite loss) in {phase:?} epoch {epoch}{}", last_good.as_ref().map(|p| format!("; last good checkpoint {}", p.display())).unwrap_or_default())]
    Diverged {
        phase: Phase,
        epoch: usize,
        last_good: Option<PathBuf>,
    },
    #[error("checkpoint has no config snapshot; cannot locate its dataset")]
    MissingConfig,
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

/// Loss and accuracies over one dataset split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub loss: f64,
    pub top1: f64,
    /// Top-`min(5, classes)` accuracy.
    pub top5: f64,
}

/// Per-layer statistics at one checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerStats {
    pub layer_id: usize,
    pub name: String,
    pub tau: f64,
    pub temp: f64,
    pub kept: usize,
    pub total: usize,
    pub keep_ratio: f64,
    pub mean_w_sq: f64,
}

/// One entry of the trail of progressively sparser models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrailCheckpoint {
    pub epoch: usize,
    pub lambda: f64,
    /// Hard-pruned keep ratio at the current thresholds.
    pub keep_ratio: f64,
    pub soft_l0_total: f64,
    /// Fraction of prunable weights with `|w^2 - tau| <= temp`.
    pub transitional_occupancy: f64,
    pub train_loss: f64,
    pub train_top1: f64,
    pub val: EvalResult,
    pub per_layer: Vec<LayerStats>,
}

/// Number of rows whose label is within the top `k` logits. Ties go to the
/// lower class index, so constant logits never count as correct for every class.
pub fn top_k_correct<F: Real>(logits: &Tensor<F>, labels: &[usize], k: usize) -> usize {
    let classes = logits.shape()[1];
    logits
        .data()
        .chunks(classes)
        .zip(labels)
        .filter(|(row, &y)| {
            let zy = row[y];
            let rank = row
                .iter()
                .enumerate()
                .filter(|&(j, &z)| z > zy || (z == zy && j < y))
                .count();
            rank < k
        })
        .count()
}

/// Deterministic eval-mode pass over a split in index order.
pub fn evaluate<F: Real>(model: &mut Model<F>, data: &Dataset, batch_size: usize) -> Result<EvalResult> {
    let k = model.classes.min(5);
    let (mut loss, mut top1, mut topk) = (0.0, 0usize, 0usize);
    for idx in data.batches(batch_size, None) {
        let (x, y) = data.batch::<F>(&idx);
        let mut g = Graph::new();
        let input = g.constant(x);
        let pass = model.forward(&mut g, input, false, DerivativeVariant::Approx)?;
        let ce = g.softmax_cross_entropy(pass.logits, &y)?;
        loss += g.value(ce).item().as_f64() * idx.len() as f64;
        let logits = g.value(pass.logits);
        top1 += top_k_correct(logits, &y, 1);
        topk += top_k_correct(logits, &y, k);
    }
    let n = data.len().max(1) as f64;
    Ok(EvalResult {
        loss: loss / n,
        top1: top1 as f64 / n,
        top5: topk as f64 / n,
    })
}

pub fn layer_stats<F: Real>(model: &Model<F>) -> Vec<LayerStats> {
    model
        .prunable
        .iter()
        .enumerate()
        .map(|(l, p)| LayerStats {
            layer_id: l,
            name: p.name.clone(),
            tau: p.tau,
            temp: p.temp(),
            kept: p.kept_count(),
            total: p.numel(),
            keep_ratio: p.keep_ratio(),
            mean_w_sq: p.mean_w_sq(),
        })
        .collect()
}

/// Keep ratio given by fixed masks where present, thresholds elsewhere.
pub fn mask_keep_ratio<F: Real>(model: &Model<F>) -> f64 {
    let total = model.prunable_count();
    if total == 0 {
        return 1.0;
    }
    let kept: usize = model
        .prunable
        .iter()
        .map(|p| match p.mask() {
            Some(m) => m.iter().filter(|&&b| b).count(),
            None => p.kept_count(),
        })
        .sum();
    kept as f64 / total as f64
}

/// Loads the configured dataset, reshaped to `input_shape` when given.
/// IDX data is normalized with the snapshot constants, or with constants
/// computed from its train split (which are then written into `config`).
pub fn load_data(config: &mut RunConfig) -> Result<Splits> {
    let mut splits = match &config.dataset {
        DatasetSource::Blobs(spec) => data::synthetic_blobs(config.seed, *spec)?,
        DatasetSource::Idx(dir) => {
            let (splits, norm) = data::load_dir(dir, config.normalization)?;
            config.normalization = Some(norm);
            splits
        }
    };
    if let Some(shape) = &config.input_shape {
        splits.train.reshape(shape.clone())?;
        splits.val.reshape(shape.clone())?;
    }
    Ok(splits)
}

fn shuffle_seed(seed: u64, phase: Phase, epoch: usize) -> u64 {
    let tag = match phase {
        Phase::Init => 0u64,
        Phase::Pretrain => 1,
        Phase::Prune => 2,
        Phase::Finalized => 3,
        Phase::Finetune => 4,
    };
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (tag << 40) ^ epoch as u64
}

/// SGD with momentum; velocities are kept in f64.
struct Sgd {
    lr: f64,
    momentum: f64,
    prunable: Vec<Vec<f64>>,
    dense: Vec<Vec<f64>>,
}

impl Sgd {
    fn new<F: Real>(model: &Model<F>, lr: f64, momentum: f64) -> Self {
        Self {
            lr,
            momentum,
            prunable: model.prunable.iter().map(|p| vec![0.0; p.numel()]).collect(),
            dense: model.dense.iter().map(|d| vec![0.0; d.value.numel()]).collect(),
        }
    }

    /// Applies one step; `bound` caps `|dw|` per element.
    fn step<F: Real>(lr: f64, mu: f64, vel: &mut [f64], w: &mut [F], grad: &[f64], bound: Option<f64>) {
        for ((v, x), &g) in vel.iter_mut().zip(w.iter_mut()).zip(grad) {
            *v = mu * *v + g;
            let mut dw = lr * *v;
            if let Some(b) = bound {
                dw = dw.clamp(-b, b);
            }
            *x = F::of(x.as_f64() - dw);
        }
    }
}

/// Pruning-phase settings for one epoch.
#[derive(Clone, Copy)]
struct PruneStep {
    lambda: f64,
    mode: GradMode,
    regularizer: Regularizer,
    eta_tau: f64,
    kappa: f64,
}

/// A model, its data and its config, ready to train.
pub struct Run<F: Real> {
    pub config: RunConfig,
    pub model: Model<F>,
    pub data: Splits,
}

impl<F: Real> Clone for Run<F> {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            model: self.model.clone(),
            data: self.data.clone(),
        }
    }
}

impl<F: Real> Run<F> {
    /// Loads data and builds a freshly initialized model.
    pub fn new(mut config: RunConfig) -> Result<Self> {
        config.validate().map_err(|e| TrainError::Invalid(e.to_string()))?;
        let data = load_data(&mut config)?;
        let shape = data.train.sample_shape().to_vec();
        let model = nn::build(&config.model, &shape, data.train.classes, config.seed, &config.exempt_layers)?;
        Ok(Self { config, model, data })
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let mut config = ck.config.clone().ok_or(TrainError::MissingConfig)?;
        let data = load_data(&mut config)?;
        Ok(Self {
            config,
            model: ck.model.cast(),
            data,
        })
    }

    pub fn evaluate_val(&mut self) -> Result<EvalResult> {
        evaluate(&mut self.model, &self.data.val, self.config.batch_size)
    }

    pub fn evaluate_train(&mut self) -> Result<EvalResult> {
        evaluate(&mut self.model, &self.data.train, self.config.batch_size)
    }

    fn checkpoint(&self, phase: Phase, epoch: usize, val: Option<EvalResult>, lambda: Option<LambdaState>) -> Checkpoint {
        Checkpoint {
            model: self.model.cast(),
            meta: CheckpointMeta {
                phase,
                epoch,
                keep_ratio: mask_keep_ratio(&self.model),
                val_loss: val.map(|v| v.loss),
                val_top1: val.map(|v| v.top1),
                lambda,
                source_precision: F::PRECISION,
            },
            config: Some(self.config.clone()),
        }
    }

    /// One pass over the shuffled train split; returns mean loss and top-1.
    fn train_epoch(&mut self, phase: Phase, epoch: usize, sgd: &mut Sgd, prune: Option<PruneStep>) -> Result<(f64, f64)> {
        let batches = self
            .data
            .train
            .batches(self.config.batch_size, Some(shuffle_seed(self.config.seed, phase, epoch)));
        let (mut loss_sum, mut correct, mut seen) = (0.0, 0usize, 0usize);
        for idx in batches {
            let (x, y) = self.data.train.batch::<F>(&idx);
            let mut g = Graph::new();
            let input = g.constant(x);
            let pass = self.model.forward(&mut g, input, true, DerivativeVariant::Approx)?;
            let loss = g.softmax_cross_entropy(pass.logits, &y)?;
            let lv = g.value(loss).item().as_f64();
            if !lv.is_finite() {
                return Err(TrainError::Diverged {
                    phase,
                    epoch,
                    last_good: None,
                });
            }
            loss_sum += lv * idx.len() as f64;
            correct += top_k_correct(g.value(pass.logits), &y, 1);
            seen += idx.len();
            g.backward(loss)?;

            let (lr, mu) = (sgd.lr, sgd.momentum);
            for (l, nodes) in pass.prunable.iter().enumerate() {
                let param = &mut self.model.prunable[l];
                let (grad, bound): (Vec<f64>, Option<f64>) = match (param.mode, prune) {
                    (PruneMode::Soft, Some(ps)) => {
                        let dl_dv = g.grad_or_zeros(nodes.v);
                        let l0 = if ps.regularizer == Regularizer::SoftL0 { ps.lambda } else { 0.0 };
                        let clamp = Clamp { lr, kappa: ps.kappa };
                        let mut grad: Vec<f64> = weight_grad(param, &dl_dv, l0, ps.mode, clamp)?
                            .into_iter()
                            .map(|d| d.as_f64())
                            .collect();
                        match ps.regularizer {
                            Regularizer::L2 => {
                                for (d, w) in grad.iter_mut().zip(param.w.data()) {
                                    *d += ps.lambda * 2.0 * w.as_f64();
                                }
                            }
                            Regularizer::L1 => {
                                for (d, w) in grad.iter_mut().zip(param.w.data()) {
                                    let w = w.as_f64();
                                    if w != 0.0 {
                                        *d += ps.lambda * w.signum();
                                    }
                                }
                            }
                            Regularizer::SoftL0 | Regularizer::None => {}
                        }
                        threshold_step(param, &dl_dv, l0, ps.eta_tau)?;
                        let bound = (ps.mode == GradMode::FullClamped).then(|| ps.kappa * param.temp());
                        (grad, bound)
                    }
                    _ => {
                        let mut grad: Vec<f64> = g.grad_or_zeros(nodes.w).iter().map(|d| d.as_f64()).collect();
                        if let Some(mask) = param.mask() {
                            for (d, &keep) in grad.iter_mut().zip(mask) {
                                if !keep {
                                    *d = 0.0;
                                }
                            }
                        }
                        (grad, None)
                    }
                };
                Sgd::step(lr, mu, &mut sgd.prunable[l], param.w.data_mut(), &grad, bound);
                if param.mode == PruneMode::Hard {
                    if let Some(mask) = param.mask().map(<[bool]>::to_vec) {
                        for (w, keep) in param.w.data_mut().iter_mut().zip(mask) {
                            if !keep {
                                *w = F::zero();
                            }
                        }
                    }
                }
            }
            for (i, &node) in pass.dense.iter().enumerate() {
                let grad: Vec<f64> = g.grad_or_zeros(node).iter().map(|d| d.as_f64()).collect();
                Sgd::step(lr, mu, &mut sgd.dense[i], self.model.dense[i].value.data_mut(), &grad, None);
            }
        }
        let n = seen.max(1) as f64;
        Ok((loss_sum / n, correct as f64 / n))
    }

    /// Plain training with pruning off.
    pub fn pretrain(&mut self, epochs: usize) -> Result<Vec<(f64, f64)>> {
        self.model.set_prune_mode(PruneMode::Off);
        let mut sgd = Sgd::new(&self.model, self.config.lr, self.config.momentum);
        let mut out = Vec::with_capacity(epochs);
        for e in 1..=epochs {
            let r = self.train_epoch(Phase::Pretrain, e, &mut sgd, None)?;
            info!(epoch = e, loss = r.0, top1 = r.1, "pretrain");
            out.push(r);
        }
        Ok(out)
    }

    fn set_temperatures(&mut self) -> Result<()> {
        let t0 = self.config.hp.t0;
        for p in &mut self.model.prunable {
            let t = per_layer_temperature(&p.name, &p.w, t0)?;
            p.set_temp(t)?;
        }
        Ok(())
    }

    fn trail_entry(&mut self, epoch: usize, lambda: f64, train: (f64, f64)) -> Result<TrailCheckpoint> {
        let val = self.evaluate_val()?;
        Ok(TrailCheckpoint {
            epoch,
            lambda,
            keep_ratio: self.model.keep_ratio(),
            soft_l0_total: self.model.soft_l0_total(),
            transitional_occupancy: self.model.transitional_occupancy(),
            train_loss: train.0,
            train_top1: train.1,
            val,
            per_layer: layer_stats(&self.model),
        })
    }

    /// Soft-pruning phase. Writes per-epoch checkpoints and logs under
    /// `out_dir` when given.
    pub fn prune(&mut self, out_dir: Option<&Path>) -> Result<PruneOutcome> {
        let cfg = self.config.clone();
        let hp = cfg.hp;
        if let Some(dir) = out_dir {
            std::fs::create_dir_all(dir).map_err(|source| TrainError::Io {
                path: dir.to_path_buf(),
                source,
            })?;
            crate::atomic_write(&dir.join("config.txt"), cfg.serialize().as_bytes()).map_err(|source| {
                TrainError::Io {
                    path: dir.join("config.txt"),
                    source,
                }
            })?;
            let val = self.evaluate_val()?;
            self.checkpoint(Phase::Pretrain, 0, Some(val), None)
                .save(&dir.join("initial.ckpt"))?;
        }
        let initial = self.model.cast();

        self.set_temperatures()?;
        for p in &mut self.model.prunable {
            p.tau = hp.tau_init;
            p.clear_mask();
        }
        self.model.set_prune_mode(PruneMode::Soft);
        let mut state = LambdaState::new(&hp, self.model.keep_ratio());
        let mut sgd = Sgd::new(&self.model, cfg.lr, cfg.momentum);
        let mut trail: Vec<TrailCheckpoint> = Vec::new();
        let mut last_good: Option<PathBuf> = None;
        let mut best: Option<(usize, f64)> = None;

        for epoch in 1..=cfg.prune_epochs {
            if hp.recompute_temperature && epoch > 1 {
                self.set_temperatures()?;
            }
            let step = PruneStep {
                lambda: if cfg.regularizer == Regularizer::None { 0.0 } else { state.lambda },
                mode: hp.grad_mode,
                regularizer: cfg.regularizer,
                eta_tau: hp.lr_ratio * cfg.lr,
                kappa: hp.clamp_kappa,
            };
            let train = match self.train_epoch(Phase::Prune, epoch, &mut sgd, Some(step)) {
                Ok(t) => t,
                Err(TrainError::Diverged { phase, epoch, .. }) => {
                    return Err(TrainError::Diverged {
                        phase,
                        epoch,
                        last_good,
                    })
                }
                Err(e) => return Err(e),
            };
            let entry = self.trail_entry(epoch, step.lambda, train)?;
            info!(
                epoch,
                keep_ratio = entry.keep_ratio,
                val_top1 = entry.val.top1,
                lambda = entry.lambda,
                "prune"
            );
            let meets = cfg.target_keep_ratio.is_none_or(|t| entry.keep_ratio <= t);
            if meets && best.is_none_or(|(_, top1)| entry.val.top1 > top1) {
                best = Some((epoch, entry.val.top1));
            }
            if let Some(dir) = out_dir {
                let path = dir.join(format!("epoch-{epoch:04}.ckpt"));
                let ck = self.checkpoint(Phase::Prune, epoch, Some(entry.val), Some(state));
                ck.save(&path)?;
                if best.is_some_and(|(e, _)| e == epoch) {
                    ck.save(&dir.join("best.ckpt"))?;
                }
                last_good = Some(path);
            }
            trail.push(entry);
            if let Some(dir) = out_dir {
                runlog::write_logs(dir, &trail)?;
            }
            state = lambda_step(state, &hp, self.model.keep_ratio());
            if !meets {
                continue;
            }
            if cfg.target_keep_ratio.is_some() {
                break;
            }
        }
        Ok(PruneOutcome {
            trail,
            best_epoch: best.map(|(e, _)| e),
            initial,
            model: self.model.cast(),
            lambda: state,
        })
    }

    /// Hard-prunes at the learned thresholds and fixes the masks.
    pub fn finalize(&mut self) {
        finalize_model(&mut self.model);
    }

    /// Masked training without regularization; thresholds stay frozen.
    pub fn finetune(&mut self, epochs: usize, lr: f64) -> Result<Vec<(f64, f64, EvalResult)>> {
        if self.model.prunable.iter().any(|p| p.mask().is_none()) {
            self.finalize();
        }
        let mut sgd = Sgd::new(&self.model, lr, self.config.momentum);
        let mut out = Vec::with_capacity(epochs);
        for e in 1..=epochs {
            let (loss, top1) = self.train_epoch(Phase::Finetune, e, &mut sgd, None)?;
            let val = self.evaluate_val()?;
            info!(epoch = e, loss, top1, val_top1 = val.top1, "finetune");
            out.push((loss, top1, val));
        }
        Ok(out)
    }
}

/// Sets every weight with `w^2 <= tau` to exactly zero, stores the binary
/// mask and switches to hard mode. Idempotent.
pub fn finalize_model<F: Real>(model: &mut Model<F>) {
    for p in &mut model.prunable {
        let mask = p.threshold_mask();
        for (w, &keep) in p.w.data_mut().iter_mut().zip(&mask) {
            if !keep {
                *w = F::zero();
            }
        }
        p.set_mask(mask).expect("mask matches weights");
        p.mode = PruneMode::Hard;
    }
}

/// One-shot global magnitude pruning: keeps the `keep` largest `|w|` over all
/// prunable weights (ties broken by registry position), zeroes the rest and
/// fixes the masks.
pub fn magnitude_prune<F: Real>(model: &Model<F>, keep: usize) -> Model<F> {
    let mut out = model.clone();
    let mut all: Vec<(f64, usize, usize)> = Vec::with_capacity(model.prunable_count());
    for (l, p) in model.prunable.iter().enumerate() {
        for (i, w) in p.w.data().iter().enumerate() {
            all.push((w.as_f64().abs(), l, i));
        }
    }
    all.sort_by(|a, b| b.0.total_cmp(&a.0).then((a.1, a.2).cmp(&(b.1, b.2))));
    let mut masks: Vec<Vec<bool>> = model.prunable.iter().map(|p| vec![false; p.numel()]).collect();
    for &(_, l, i) in all.iter().take(keep) {
        masks[l][i] = true;
    }
    for (p, mask) in out.prunable.iter_mut().zip(masks) {
        for (w, &k) in p.w.data_mut().iter_mut().zip(&mask) {
            if !k {
                *w = F::zero();
            }
        }
        p.set_mask(mask).expect("mask matches weights");
        p.mode = PruneMode::Hard;
    }
    out
}

/// Result of the pruning phase.
#[derive(Debug, Clone)]
pub struct PruneOutcome {
    pub trail: Vec<TrailCheckpoint>,
    /// Epoch with the highest validation top-1 among those meeting the target.
    pub best_epoch: Option<usize>,
    /// Model at the start of pruning.
    pub initial: Model<f64>,
    /// Soft-pruned model after the last epoch.
    pub model: Model<f64>,
    pub lambda: LambdaState,
}

fn prune_typed<F: Real>(config: RunConfig, out_dir: Option<&Path>) -> Result<PruneOutcome> {
    let mut run = Run::<F>::new(config)?;
    run.pretrain(run.config.pretrain_epochs)?;
    run.prune(out_dir)
}

/// Pretrains then prunes as configured.
pub fn prune_run(config: &RunConfig, out_dir: Option<&Path>) -> Result<PruneOutcome> {
    match config.precision {
        Precision::F64 => prune_typed::<f64>(config.clone(), out_dir),
        Precision::F32 => prune_typed::<f32>(config.clone(), out_dir),
    }
}

/// Result of finalizing and finetuning a checkpoint.
#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub soft: EvalResult,
    pub hard: EvalResult,
    pub finetuned: EvalResult,
    pub keep_ratio: f64,
    pub finalized: Checkpoint,
    pub checkpoint: Checkpoint,
}

fn finetune_typed<F: Real>(ck: &Checkpoint, epochs: Option<usize>, lr: Option<f64>) -> Result<FinetuneOutcome> {
    let mut run = Run::<F>::from_checkpoint(ck)?;
    let soft = run.evaluate_val()?;
    run.finalize();
    let hard = run.evaluate_val()?;
    let finalized = run.checkpoint(Phase::Finalized, ck.meta.epoch, Some(hard), ck.meta.lambda);
    let epochs = epochs.unwrap_or(run.config.finetune_epochs);
    let lr = lr.unwrap_or(run.config.finetune_lr);
    let history = run.finetune(epochs, lr)?;
    let finetuned = history.last().map(|h| h.2).unwrap_or(hard);
    Ok(FinetuneOutcome {
        soft,
        hard,
        finetuned,
        keep_ratio: mask_keep_ratio(&run.model),
        finalized,
        checkpoint: run.checkpoint(Phase::Finetune, epochs, Some(finetuned), None),
    })
}

/// Finalizes a pruning checkpoint and finetunes it with its fixed mask.
pub fn finetune_checkpoint(ck: &Checkpoint, epochs: Option<usize>, lr: Option<f64>) -> Result<FinetuneOutcome> {
    match ck.config.as_ref().map(|c| c.precision) {
        Some(Precision::F32) => finetune_typed::<f32>(ck, epochs, lr),
        _ => finetune_typed::<f64>(ck, epochs, lr),
    }
}

/// Summary of one mode of a sweep.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepResult {
    pub mode: GradMode,
    pub final_keep_ratio: f64,
    pub transitional_occupancy: f64,
    pub final_val_top1: f64,
    pub trail: Vec<TrailCheckpoint>,
}

fn sweep_typed<F: Real>(config: RunConfig, modes: &[GradMode], out_dir: Option<&Path>) -> Result<Vec<SweepResult>> {
    let mut base = Run::<F>::new(config)?;
    base.pretrain(base.config.pretrain_epochs)?;
    let results: Vec<Result<SweepResult>> = std::thread::scope(|s| {
        let handles: Vec<_> = modes
            .iter()
            .map(|&mode| {
                let mut run = base.clone();
                run.config.hp.grad_mode = mode;
                let dir = out_dir.map(|d| d.join(mode.as_str()));
                s.spawn(move || -> Result<SweepResult> {
                    let out = run.prune(dir.as_deref())?;
                    let last = out.trail.last();
                    Ok(SweepResult {
                        mode,
                        final_keep_ratio: last.map_or(1.0, |c| c.keep_ratio),
                        transitional_occupancy: last.map_or(0.0, |c| c.transitional_occupancy),
                        final_val_top1: last.map_or(0.0, |c| c.val.top1),
                        trail: out.trail,
                    })
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("sweep worker panicked"))
            .collect()
    });
    results.into_iter().collect()
}

/// Runs the pruning phase once per gradient mode from a shared pretrained
/// model, in parallel. Each mode writes to `out_dir/<mode>/`.
pub fn sweep(config: &RunConfig, modes: &[GradMode], out_dir: Option<&Path>) -> Result<Vec<SweepResult>> {
    match config.precision {
        Precision::F64 => sweep_typed::<f64>(config.clone(), modes, out_dir),
        Precision::F32 => sweep_typed::<f32>(config.clone(), modes, out_dir),
    }
}

/// Evaluates a checkpoint's model on a split.
pub fn evaluate_checkpoint(ck: &Checkpoint, data: &Dataset, batch_size: usize) -> Result<EvalResult> {
    let mut model = ck.model.clone();
    evaluate(&mut model, data, batch_size)
}

/// Evaluates a checkpoint on the validation split of an IDX directory,
/// normalized with the constants from the checkpoint's config snapshot when
/// it has them.
pub fn evaluate_on_dir(ck: &Checkpoint, dir: &Path, batch_size: usize) -> Result<EvalResult> {
    let norm = ck.config.as_ref().and_then(|c| c.normalization);
    let (mut splits, _) = data::load_dir(dir, norm)?;
    if splits.val.sample_shape() != ck.model.input_shape.as_slice() {
        splits.val.reshape(ck.model.input_shape.clone())?;
    }
    evaluate_checkpoint(ck, &splits.val, batch_size)
}
