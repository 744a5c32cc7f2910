//! Independent finite-difference oracles for the pruning formulas.
//!
//! Steps are scaled to the width of the sigmoid transition so that central
//! differences resolve it at every temperature. On the saturated-above side
//! the forward expressions are differentiated in complement form
//! (`sigm(x) = 1 - sigm(-x)`), which keeps the tiny derivatives there
//! representable.

#![allow(dead_code)]

use ltp_core::pruning::{
    grad_l0_wrt_tau, grad_l0_wrt_w, grad_v_wrt_tau, grad_v_wrt_w, sigma_t, threshold_step,
    weight_grad, Clamp, DerivativeVariant, GradMode, PrunableParam,
};
use ltp_core::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Reference sigmoid, written independently of the library's.
fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        x.exp() / (1.0 + x.exp())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Point {
    pub w: f64,
    pub tau: f64,
    pub temp: f64,
}

impl Point {
    fn x(&self, w: f64, tau: f64) -> f64 {
        (w * w - tau) / self.temp
    }

    /// True when the sigmoid argument is positive at the centre point, so the
    /// complement form is used.
    fn above(&self) -> bool {
        self.x(self.w, self.tau) > 0.0
    }

    fn hw(&self) -> f64 {
        1e-4 * self.temp / (2.0 * self.w.abs())
    }

    fn ht(&self) -> f64 {
        1e-4 * self.temp
    }
}

/// `T` log-uniform in `[1e-4, 1e-2]`, `|w|` in `[0.01, 1]` with random sign,
/// `tau = w^2 + u*T` with `u` uniform in `[-60, 60]`.
pub fn sample_points(seed: u64, n: usize) -> Vec<Point> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let temp = 10f64.powf(rng.random_range(-4.0..-2.0));
            let mag = rng.random_range(0.01..1.0);
            let w = if rng.random_bool(0.5) { mag } else { -mag };
            let u = rng.random_range(-60.0..60.0);
            Point {
                w,
                tau: w * w + u * temp,
                temp,
            }
        })
        .collect()
}

fn central(f: impl Fn(f64) -> f64, at: f64, h: f64) -> f64 {
    (f(at + h) - f(at - h)) / (2.0 * h)
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale == 0.0 {
        0.0
    } else {
        (analytic - numeric).abs() / scale
    }
}

/// `d/dw sigm(x)` by differences.
pub fn fd_sigma_t(p: Point) -> f64 {
    if p.above() {
        -central(|w| logistic(-p.x(w, p.tau)), p.w, p.hw())
    } else {
        central(|w| logistic(p.x(w, p.tau)), p.w, p.hw())
    }
}

/// `d/dtau (w sigm(x))` by differences.
pub fn fd_dv_dtau(p: Point) -> f64 {
    if p.above() {
        -central(|t| p.w * logistic(-p.x(p.w, t)), p.tau, p.ht())
    } else {
        central(|t| p.w * logistic(p.x(p.w, t)), p.tau, p.ht())
    }
}

/// `d/dw (w sigm(x))` by differences.
pub fn fd_dv_dw(p: Point) -> f64 {
    if p.above() {
        1.0 - central(|w| w * logistic(-p.x(w, p.tau)), p.w, p.hw())
    } else {
        central(|w| w * logistic(p.x(w, p.tau)), p.w, p.hw())
    }
}

/// `d/dtau sigm(x)` for one weight (one term of the soft-L0 gradient).
pub fn fd_l0_dtau(p: Point) -> f64 {
    if p.above() {
        -central(|t| logistic(-p.x(p.w, t)), p.tau, p.ht())
    } else {
        central(|t| logistic(p.x(p.w, t)), p.tau, p.ht())
    }
}

/// `d/dw (g v + lambda sigm(x))`: the unclamped full weight gradient.
pub fn fd_total_dw(p: Point, g: f64, lambda: f64) -> f64 {
    if p.above() {
        g - central(
            |w| (g * w + lambda) * logistic(-p.x(w, p.tau)),
            p.w,
            p.hw(),
        )
    } else {
        central(
            |w| (g * w + lambda) * logistic(p.x(w, p.tau)),
            p.w,
            p.hw(),
        )
    }
}

fn one(w: f64) -> Tensor {
    Tensor::new(vec![1], vec![w]).unwrap()
}

/// Worst relative error per formula over the sampled points.
#[derive(Debug, Default, Clone, Copy)]
pub struct OracleReport {
    pub points: usize,
    pub sigma_t: f64,
    pub dv_dtau: f64,
    pub dv_dw: f64,
    pub dl0_dtau: f64,
    pub dl0_dw: f64,
    pub weight_grad_full: f64,
}

impl OracleReport {
    pub fn worst(&self) -> f64 {
        [
            self.sigma_t,
            self.dv_dtau,
            self.dv_dw,
            self.dl0_dtau,
            self.dl0_dw,
            self.weight_grad_full,
        ]
        .into_iter()
        .fold(0.0, f64::max)
    }
}

pub fn run_gradient_oracle(seed: u64, n: usize) -> OracleReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut r = OracleReport {
        points: n,
        ..Default::default()
    };
    for p in sample_points(seed, n) {
        let w = one(p.w);
        r.sigma_t = r.sigma_t.max(rel_err(sigma_t(p.w, p.tau, p.temp), fd_sigma_t(p)));
        let a = grad_v_wrt_tau(&w, p.tau, p.temp).unwrap().data()[0];
        r.dv_dtau = r.dv_dtau.max(rel_err(a, fd_dv_dtau(p)));
        let a = grad_v_wrt_w(&w, p.tau, p.temp, DerivativeVariant::Full)
            .unwrap()
            .data()[0];
        r.dv_dw = r.dv_dw.max(rel_err(a, fd_dv_dw(p)));
        let a = grad_l0_wrt_tau(&w, p.tau, p.temp).unwrap();
        r.dl0_dtau = r.dl0_dtau.max(rel_err(a, fd_l0_dtau(p)));
        let a = grad_l0_wrt_w(&w, p.tau, p.temp).unwrap().data()[0];
        r.dl0_dw = r.dl0_dw.max(rel_err(a, fd_sigma_t(p)));

        let g = rng.random_range(-1.0..1.0);
        let lambda = 10f64.powf(rng.random_range(-8.0..-2.0));
        let param = PrunableParam::new("l", w, p.tau, p.temp).unwrap();
        let a = weight_grad(&param, &[g], lambda, GradMode::FullUnclamped, Clamp::default())
            .unwrap()[0];
        r.weight_grad_full = r.weight_grad_full.max(rel_err(a, fd_total_dw(p, g, lambda)));
    }
    r
}

/// Threshold step against differences of `0.5 * sum (v - c)^2 + lambda * L0`
/// in `tau` with weights frozen. Returns the worst relative error of the
/// realised step.
pub fn run_threshold_step_oracle(seed: u64, configs: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..configs {
        let temp = 10f64.powf(rng.random_range(-4.0..-2.0));
        let tau = rng.random_range(0.01..0.25);
        // keep several weights inside the transition
        let w: Vec<f64> = (0..16)
            .map(|_| {
                let sq = (tau + rng.random_range(-8.0..8.0) * temp).max(1e-6);
                if rng.random_bool(0.5) {
                    sq.sqrt()
                } else {
                    -sq.sqrt()
                }
            })
            .collect();
        let targets: Vec<f64> = (0..16).map(|_| rng.random_range(-0.5..0.5)).collect();
        let lambda = 10f64.powf(rng.random_range(-6.0..-3.0));
        let eta = 10f64.powf(rng.random_range(-6.0..-3.0));

        let loss = |t: f64| {
            w.iter()
                .zip(&targets)
                .map(|(&wk, &c)| {
                    let s = logistic((wk * wk - t) / temp);
                    0.5 * (wk * s - c).powi(2) + lambda * s
                })
                .sum::<f64>()
        };
        let h = 1e-4 * temp;
        let numeric = (loss(tau + h) - loss(tau - h)) / (2.0 * h);

        let dl_dv: Vec<f64> = w
            .iter()
            .zip(&targets)
            .map(|(&wk, &c)| wk * logistic((wk * wk - tau) / temp) - c)
            .collect();
        let mut param = PrunableParam::new("l", Tensor::new(vec![16], w.clone()).unwrap(), tau, temp)
            .unwrap();
        let new_tau = threshold_step(&mut param, &dl_dv, lambda, eta).unwrap();
        let step = new_tau - tau;
        worst = worst.max(rel_err(step, -eta * numeric));
    }
    worst
}
