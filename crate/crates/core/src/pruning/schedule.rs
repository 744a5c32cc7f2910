use serde::{Deserialize, Serialize};

use super::{GradMode, PruneError, Result};
use crate::tensor::{Real, Tensor};

/// Pruning hyper-parameters for one run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LtpHyperParams {
    /// Dimensionless temperature scale; `temp_l = t0 * var(|w_l|)`.
    pub t0: f64,
    /// Threshold learning rate as a fraction of the weight learning rate.
    pub lr_ratio: f64,
    pub lambda0: f64,
    pub c_lambda: f64,
    /// Epochs without a 1% keep-ratio drop before lambda grows.
    pub n_lambda: u32,
    pub grad_mode: GradMode,
    pub clamp_kappa: f64,
    pub tau_init: f64,
    /// Recompute temperatures every epoch instead of freezing them.
    pub recompute_temperature: bool,
}

impl Default for LtpHyperParams {
    fn default() -> Self {
        Self::preset("resnet20").expect("built-in preset")
    }
}

/// Published settings: (network, T0, lr ratio, lambda0, c_lambda, N_lambda).
const PRESETS: [(&str, f64, f64, f64, f64, u32); 6] = [
    ("resnet20", 1e-3, 1e-5, 2e-6, 1.0, 5),
    ("alexnet", 1e-3, 1e-7, 1e-7, 1.05, 5),
    ("resnet50", 1e-3, 1e-7, 3e-7, 1.05, 5),
    ("mobilenetv2", 1e-3, 1e-7, 1e-7, 1.25, 3),
    ("efficientnet-b0", 1e-3, 5e-7, 1e-6, 1.05, 5),
    ("mixnet-s", 1e-3, 1e-5, 5e-8, 1.25, 2),
];

impl LtpHyperParams {
    pub fn preset_names() -> impl Iterator<Item = &'static str> {
        PRESETS.iter().map(|p| p.0)
    }

    pub fn preset(name: &str) -> Option<Self> {
        PRESETS
            .iter()
            .find(|p| p.0 == name)
            .map(|&(_, t0, lr_ratio, lambda0, c_lambda, n_lambda)| Self {
                t0,
                lr_ratio,
                lambda0,
                c_lambda,
                n_lambda,
                grad_mode: GradMode::Approx,
                clamp_kappa: 0.1,
                tau_init: 0.0,
                recompute_temperature: false,
            })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |name: &'static str, reason: &str| {
            Err(PruneError::InvalidHyperParam {
                name,
                reason: reason.to_string(),
            })
        };
        if !(self.t0 > 0.0 && self.t0.is_finite()) {
            return bad("t0", "must be positive");
        }
        if !(self.lr_ratio > 0.0 && self.lr_ratio.is_finite()) {
            return bad("lr_ratio", "must be positive");
        }
        if !(self.lambda0 >= 0.0 && self.lambda0.is_finite()) {
            return bad("lambda0", "must be non-negative");
        }
        if !(self.c_lambda >= 1.0 && self.c_lambda.is_finite()) {
            return bad("c_lambda", "must be at least 1");
        }
        if self.n_lambda == 0 {
            return bad("n_lambda", "must be a positive number of epochs");
        }
        if !(self.clamp_kappa > 0.0 && self.clamp_kappa.is_finite()) {
            return bad("clamp_kappa", "must be positive");
        }
        if !self.tau_init.is_finite() {
            return bad("tau_init", "must be finite");
        }
        Ok(())
    }
}

/// Mutable state of the lambda ramp.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LambdaState {
    pub n: u32,
    pub lambda: f64,
    pub epochs_since_update: u32,
    pub keep_ratio_at_update: f64,
}

impl LambdaState {
    pub fn new(hp: &LtpHyperParams, initial_keep_ratio: f64) -> Self {
        Self {
            n: 0,
            lambda: Self::lambda_at(hp, 0),
            epochs_since_update: 0,
            keep_ratio_at_update: initial_keep_ratio,
        }
    }

    /// `c_lambda^n * lambda0`.
    pub fn lambda_at(hp: &LtpHyperParams, n: u32) -> f64 {
        hp.c_lambda.powi(n as i32) * hp.lambda0
    }
}

/// End-of-epoch update of the lambda ramp.
///
/// `n` grows when the keep ratio has dropped by less than 0.01 since the last
/// increment and at least `n_lambda` epochs have passed since then.
pub fn lambda_step(state: LambdaState, hp: &LtpHyperParams, current_keep_ratio: f64) -> LambdaState {
    let mut next = state;
    next.epochs_since_update += 1;
    if next.epochs_since_update >= hp.n_lambda
        && state.keep_ratio_at_update - current_keep_ratio < 0.01
    {
        next.n += 1;
        next.epochs_since_update = 0;
        next.keep_ratio_at_update = current_keep_ratio;
    }
    next.lambda = LambdaState::lambda_at(hp, next.n);
    next
}

/// `t0 * var(|w|)` with population variance, computed in two passes.
pub fn per_layer_temperature<F: Real>(name: &str, w: &Tensor<F>, t0: f64) -> Result<f64> {
    let n = w.numel();
    if n == 0 {
        return Err(PruneError::EmptyLayer(name.to_string()));
    }
    let mean = w.data().iter().fold(0.0, |acc, x| acc + x.as_f64().abs()) / n as f64;
    let var = w.data().iter().fold(0.0, |acc, x| {
        let d = x.as_f64().abs() - mean;
        acc + d * d
    }) / n as f64;
    // roundoff-level variance means every |w| is the same value
    if var <= (f64::EPSILON * mean).powi(2) {
        return Err(PruneError::DegenerateLayer(name.to_string()));
    }
    Ok(t0 * var)
}
