//! Learned-threshold pruning mathematics.
//!
//! Each prunable layer `l` owns weights `w`, a learnable scalar threshold `tau`
//! and a fixed temperature `temp`. The forward pass never sees `w` directly,
//! only the surrogate
//!
//! ```text
//! v = w * sigm((w^2 - tau) / temp)       (soft pruning)
//! v = w * step(w^2 - tau)                (hard pruning, keep iff w^2 > tau)
//! ```
//!
//! The gradient helpers here follow the closed forms of these expressions.
//! Scalar math is done in `f64` regardless of the tensor element type, since
//! `1 / temp` is routinely of order `1e7`.

mod schedule;
mod tape;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::tensor::{Real, Tensor};

pub use schedule::{lambda_step, per_layer_temperature, LambdaState, LtpHyperParams};
pub use tape::{soft_prune_node, SoftPruneNodeError};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PruneError {
    #[error("temperature must be positive, got {0}")]
    NonPositiveTemperature(f64),
    #[error("temperature undefined: |w| has zero variance in layer {0}")]
    DegenerateLayer(String),
    #[error("temperature undefined: layer {0} has no weights")]
    EmptyLayer(String),
    #[error("gradient length {actual} does not match {expected} weights")]
    GradientLength { expected: usize, actual: usize },
    #[error("unknown gradient mode {0:?}")]
    UnknownGradMode(String),
    #[error("unknown prune mode {0:?}")]
    UnknownPruneMode(String),
    #[error("invalid hyper-parameter {name}: {reason}")]
    InvalidHyperParam { name: &'static str, reason: String },
    #[error("mask length {actual} does not match {expected} weights")]
    MaskLength { expected: usize, actual: usize },
}

pub type Result<T, E = PruneError> = std::result::Result<T, E>;

/// Logistic sigmoid, evaluated without overflow for either sign.
#[inline]
pub fn sigm(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `sigm(x) * (1 - sigm(x))`, accurate in both tails.
#[inline]
fn sigm_slope(x: f64) -> f64 {
    sigm(x) * sigm(-x)
}

#[inline]
fn arg(w: f64, tau: f64, temp: f64) -> f64 {
    (w * w - tau) / temp
}

/// `d/dw sigm((w^2 - tau)/temp) = (2w/temp) * s * (1 - s)`.
#[inline]
pub fn sigma_t(w: f64, tau: f64, temp: f64) -> f64 {
    2.0 * w / temp * sigm_slope(arg(w, tau, temp))
}

/// Which derivative of `v` with respect to `w` to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DerivativeVariant {
    /// `sigm + w * sigma_t`, the exact derivative.
    Full,
    /// `sigm` only: the mask is treated as a constant.
    Approx,
}

/// Per-layer prune state of a parameter during a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PruneMode {
    Soft,
    Hard,
    #[default]
    Off,
}

impl PruneMode {
    pub fn as_str(self) -> &'static str {
        match self {
            PruneMode::Soft => "soft",
            PruneMode::Hard => "hard",
            PruneMode::Off => "off",
        }
    }
}

impl FromStr for PruneMode {
    type Err = PruneError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "soft" => Ok(Self::Soft),
            "hard" => Ok(Self::Hard),
            "off" => Ok(Self::Off),
            other => Err(PruneError::UnknownPruneMode(other.to_string())),
        }
    }
}

/// How the weight gradient is formed from `dL/dv`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradMode {
    /// `sigm * dL/dv`; the L0 term does not touch weights.
    #[default]
    Approx,
    /// Full derivative plus the L0 term, clamped so `lr * |g| <= kappa * temp`.
    FullClamped,
    /// Full derivative plus the L0 term, unclamped.
    FullUnclamped,
    /// `sigm * dL/dv + lambda * sigma_t`.
    L0InWeightUpdate,
}

impl GradMode {
    pub const ALL: [GradMode; 4] = [
        GradMode::Approx,
        GradMode::FullClamped,
        GradMode::FullUnclamped,
        GradMode::L0InWeightUpdate,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            GradMode::Approx => "approx",
            GradMode::FullClamped => "full_clamped",
            GradMode::FullUnclamped => "full_unclamped",
            GradMode::L0InWeightUpdate => "l0_in_weight_update",
        }
    }

    /// Parses a comma-separated list such as `approx,full_unclamped`.
    pub fn parse_list(s: &str) -> Result<Vec<GradMode>> {
        s.split(',')
            .map(str::trim)
            .filter(|m| !m.is_empty())
            .map(str::parse)
            .collect()
    }

    /// Derivative used for the classification part of the weight gradient.
    pub fn variant(self) -> DerivativeVariant {
        match self {
            GradMode::Approx | GradMode::L0InWeightUpdate => DerivativeVariant::Approx,
            GradMode::FullClamped | GradMode::FullUnclamped => DerivativeVariant::Full,
        }
    }
}

impl fmt::Display for GradMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for GradMode {
    type Err = PruneError;

    fn from_str(s: &str) -> Result<Self> {
        GradMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| PruneError::UnknownGradMode(s.to_string()))
    }
}

/// Step-size bound applied by [`GradMode::FullClamped`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Clamp {
    /// Weight learning rate.
    pub lr: f64,
    /// Fraction of the temperature a single step may move a weight.
    pub kappa: f64,
}

impl Default for Clamp {
    fn default() -> Self {
        Self { lr: 0.1, kappa: 0.1 }
    }
}

fn check_temp(temp: f64) -> Result<()> {
    if temp > 0.0 && temp.is_finite() {
        Ok(())
    } else {
        Err(PruneError::NonPositiveTemperature(temp))
    }
}

fn map<F: Real>(w: &Tensor<F>, f: impl Fn(f64) -> f64) -> Tensor<F> {
    Tensor::from_fn(w.shape(), |i| F::of(f(w.data()[i].as_f64())))
}

/// `v = w * sigm((w^2 - tau)/temp)` elementwise.
pub fn soft_prune<F: Real>(w: &Tensor<F>, tau: f64, temp: f64) -> Result<Tensor<F>> {
    check_temp(temp)?;
    Ok(map(w, |x| x * sigm(arg(x, tau, temp))))
}

/// `v = w` where `w^2 > tau`, else exactly `0`.
pub fn hard_prune<F: Real>(w: &Tensor<F>, tau: f64) -> Tensor<F> {
    Tensor::from_fn(w.shape(), |i| {
        let x = w.data()[i];
        if keeps(x.as_f64(), tau) {
            x
        } else {
            F::zero()
        }
    })
}

/// Hard-prune decision for a single weight.
#[inline]
pub fn keeps(w: f64, tau: f64) -> bool {
    w * w > tau
}

/// `dv/dtau = -sigma_t / 2` elementwise.
pub fn grad_v_wrt_tau<F: Real>(w: &Tensor<F>, tau: f64, temp: f64) -> Result<Tensor<F>> {
    check_temp(temp)?;
    Ok(map(w, |x| -0.5 * sigma_t(x, tau, temp)))
}

/// `dv/dw` elementwise, exact or with the mask held constant.
pub fn grad_v_wrt_w<F: Real>(
    w: &Tensor<F>,
    tau: f64,
    temp: f64,
    variant: DerivativeVariant,
) -> Result<Tensor<F>> {
    check_temp(temp)?;
    Ok(map(w, |x| dv_dw(x, tau, temp, variant)))
}

#[inline]
fn dv_dw(w: f64, tau: f64, temp: f64, variant: DerivativeVariant) -> f64 {
    let s = sigm(arg(w, tau, temp));
    match variant {
        DerivativeVariant::Approx => s,
        DerivativeVariant::Full => s + w * sigma_t(w, tau, temp),
    }
}

/// Soft L0 norm `sum_k sigm((w_k^2 - tau)/temp)`, summed in index order.
pub fn soft_l0<F: Real>(w: &Tensor<F>, tau: f64, temp: f64) -> Result<f64> {
    check_temp(temp)?;
    Ok(w
        .data()
        .iter()
        .map(|x| sigm(arg(x.as_f64(), tau, temp)))
        .fold(0.0, |acc, s| acc + s))
}

/// `dL0/dtau = -(1/temp) * sum_k s_k (1 - s_k)`.
pub fn grad_l0_wrt_tau<F: Real>(w: &Tensor<F>, tau: f64, temp: f64) -> Result<f64> {
    check_temp(temp)?;
    let total = w
        .data()
        .iter()
        .map(|x| sigm_slope(arg(x.as_f64(), tau, temp)))
        .fold(0.0, |acc, s| acc + s);
    Ok(-total / temp)
}

/// `dL0/dw_k = sigma_t(w_k)`.
pub fn grad_l0_wrt_w<F: Real>(w: &Tensor<F>, tau: f64, temp: f64) -> Result<Tensor<F>> {
    check_temp(temp)?;
    Ok(map(w, |x| sigma_t(x, tau, temp)))
}

/// A weight tensor paired with its layer's threshold and temperature.
#[derive(Debug, Clone, PartialEq)]
pub struct PrunableParam<F = f64> {
    pub name: String,
    pub w: Tensor<F>,
    pub tau: f64,
    temp: f64,
    pub mode: PruneMode,
    mask: Option<Vec<bool>>,
}

impl<F: Real> PrunableParam<F> {
    pub fn new(name: impl Into<String>, w: Tensor<F>, tau: f64, temp: f64) -> Result<Self> {
        check_temp(temp)?;
        Ok(Self {
            name: name.into(),
            w,
            tau,
            temp,
            mode: PruneMode::Off,
            mask: None,
        })
    }

    pub fn temp(&self) -> f64 {
        self.temp
    }

    pub fn cast<G: Real>(&self) -> PrunableParam<G> {
        PrunableParam {
            name: self.name.clone(),
            w: self.w.cast(),
            tau: self.tau,
            temp: self.temp,
            mode: self.mode,
            mask: self.mask.clone(),
        }
    }

    pub fn set_temp(&mut self, temp: f64) -> Result<()> {
        check_temp(temp)?;
        self.temp = temp;
        Ok(())
    }

    pub fn numel(&self) -> usize {
        self.w.numel()
    }

    pub fn mask(&self) -> Option<&[bool]> {
        self.mask.as_deref()
    }

    /// Fixes a binary mask; hard mode then uses it instead of the threshold.
    pub fn set_mask(&mut self, mask: Vec<bool>) -> Result<()> {
        if mask.len() != self.numel() {
            return Err(PruneError::MaskLength {
                expected: self.numel(),
                actual: mask.len(),
            });
        }
        self.mask = Some(mask);
        Ok(())
    }

    pub fn clear_mask(&mut self) {
        self.mask = None;
    }

    /// Hard-prune keep decisions at the current threshold.
    pub fn threshold_mask(&self) -> Vec<bool> {
        self.w
            .data()
            .iter()
            .map(|x| keeps(x.as_f64(), self.tau))
            .collect()
    }

    /// The value the forward pass sees for this parameter.
    pub fn surrogate(&self) -> Tensor<F> {
        match self.mode {
            PruneMode::Off => self.w.clone(),
            PruneMode::Soft => map(&self.w, |x| x * sigm(arg(x, self.tau, self.temp))),
            PruneMode::Hard => match &self.mask {
                Some(mask) => Tensor::from_fn(self.w.shape(), |i| {
                    if mask[i] {
                        self.w.data()[i]
                    } else {
                        F::zero()
                    }
                }),
                None => hard_prune(&self.w, self.tau),
            },
        }
    }

    /// Number of weights with `w^2 > tau`.
    pub fn kept_count(&self) -> usize {
        self.w
            .data()
            .iter()
            .filter(|x| keeps(x.as_f64(), self.tau))
            .count()
    }

    /// Number of weights inside the transitional band `|w^2 - tau| <= temp`.
    pub fn transitional_count(&self) -> usize {
        self.w
            .data()
            .iter()
            .filter(|x| {
                let x = x.as_f64();
                (x * x - self.tau).abs() <= self.temp
            })
            .count()
    }

    pub fn keep_ratio(&self) -> f64 {
        if self.numel() == 0 {
            return 1.0;
        }
        self.kept_count() as f64 / self.numel() as f64
    }

    pub fn mean_w_sq(&self) -> f64 {
        if self.numel() == 0 {
            return 0.0;
        }
        let sum = self.w.data().iter().fold(0.0, |acc, x| {
            let x = x.as_f64();
            acc + x * x
        });
        sum / self.numel() as f64
    }

    pub fn soft_l0(&self) -> f64 {
        soft_l0(&self.w, self.tau, self.temp).expect("temperature validated at construction")
    }

    /// `dL/dtau` for a classification gradient `dl_dv` plus `lambda * L0`.
    pub fn tau_gradient(&self, dl_dv: &[F], lambda: f64) -> Result<f64> {
        self.check_len(dl_dv.len())?;
        let mut data_term = 0.0;
        for (x, g) in self.w.data().iter().zip(dl_dv) {
            data_term += g.as_f64() * (-0.5 * sigma_t(x.as_f64(), self.tau, self.temp));
        }
        let reg = if lambda != 0.0 {
            lambda * grad_l0_wrt_tau(&self.w, self.tau, self.temp)?
        } else {
            0.0
        };
        Ok(data_term + reg)
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len != self.numel() {
            return Err(PruneError::GradientLength {
                expected: self.numel(),
                actual: len,
            });
        }
        Ok(())
    }
}

/// Gradient-descent step on the layer threshold; returns the new value.
///
/// `tau <- tau - eta_tau * (sum_k dL/dv_k * (-sigma_t(w_k)/2) + lambda * dL0/dtau)`.
/// The threshold is not constrained in sign.
pub fn threshold_step<F: Real>(
    param: &mut PrunableParam<F>,
    dl_dv: &[F],
    lambda: f64,
    eta_tau: f64,
) -> Result<f64> {
    let g = param.tau_gradient(dl_dv, lambda)?;
    param.tau -= eta_tau * g;
    Ok(param.tau)
}

/// Weight gradient for one layer given the classification gradient `dl_dv`.
///
/// `lambda` is the soft-L0 coefficient; it only enters in the modes that feed
/// the regularizer into weight updates.
pub fn weight_grad<F: Real>(
    param: &PrunableParam<F>,
    dl_dv: &[F],
    lambda: f64,
    mode: GradMode,
    clamp: Clamp,
) -> Result<Vec<F>> {
    param.check_len(dl_dv.len())?;
    let (tau, temp) = (param.tau, param.temp);
    let bound = clamp.kappa * temp / clamp.lr;
    let out = param
        .w
        .data()
        .iter()
        .zip(dl_dv)
        .map(|(x, g)| {
            let (w, g) = (x.as_f64(), g.as_f64());
            let s = sigm(arg(w, tau, temp));
            let value = match mode {
                GradMode::Approx => s * g,
                GradMode::L0InWeightUpdate => s * g + lambda * sigma_t(w, tau, temp),
                GradMode::FullUnclamped => s * g + (w * g + lambda) * sigma_t(w, tau, temp),
                GradMode::FullClamped => {
                    let raw = s * g + (w * g + lambda) * sigma_t(w, tau, temp);
                    raw.clamp(-bound, bound)
                }
            };
            F::of(value)
        })
        .collect();
    Ok(out)
}
