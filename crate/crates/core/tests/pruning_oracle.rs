mod common;

use common::{run_gradient_oracle, run_threshold_step_oracle};
use ltp_core::pruning::{
    hard_prune, lambda_step, per_layer_temperature, sigma_t, soft_l0, soft_prune, weight_grad,
    Clamp, GradMode, LambdaState, LtpHyperParams, PrunableParam,
};
use ltp_core::tensor::Tensor;
use proptest::prelude::*;

#[test]
fn analytic_gradients_match_finite_differences() {
    let r = run_gradient_oracle(2024, 2000);
    assert!(r.worst() <= 1e-6, "{r:?}");
}

#[test]
fn threshold_step_matches_finite_difference_of_total_loss() {
    let worst = run_threshold_step_oracle(77, 300);
    assert!(worst <= 1e-5, "worst {worst}");
}

#[test]
fn soft_prune_approaches_hard_prune_outside_band() {
    let mut state = 1u64;
    let mut next = || {
        state = state.wrapping_mul(6364136223846793005).wrapping_add(1);
        (state >> 11) as f64 / (1u64 << 53) as f64
    };
    for _ in 0..5000 {
        let temp = 10f64.powf(-7.0 + 5.0 * next());
        let w = (next() - 0.5) * 2.0;
        let u = 40.0 + 200.0 * next();
        let tau = if next() < 0.5 { w * w - u * temp } else { w * w + u * temp };
        let wt = Tensor::new(vec![1], vec![w]).unwrap();
        let soft = soft_prune(&wt, tau, temp).unwrap().data()[0];
        let hard = hard_prune(&wt, tau).data()[0];
        assert!((soft - hard).abs() <= w.abs() * 1e-12, "w {w} tau {tau} temp {temp}");
    }
}

#[test]
fn soft_l0_matches_extended_precision_sum() {
    use num_rational::BigRational;
    let w: Vec<f64> = (0..200).map(|i| ((i * 37 % 101) as f64 - 50.0) / 97.0).collect();
    let (tau, temp) = (0.05, 0.01);
    let lib = soft_l0(&Tensor::new(vec![200], w.clone()).unwrap(), tau, temp).unwrap();
    // each term rounded once, then summed exactly
    let exact = w
        .iter()
        .map(|&x| {
            let s = 1.0 / (1.0 + (-(x * x - tau) / temp).exp());
            BigRational::from_float(s).unwrap()
        })
        .fold(BigRational::from_integer(0.into()), |a, b| a + b);
    let exact: f64 = num_traits::ToPrimitive::to_f64(&exact).unwrap();
    assert!((lib - exact).abs() <= 1e-12 * exact);
}

#[test]
fn temperature_matches_two_pass_variance() {
    let w: Vec<f64> = (0..999).map(|i| ((i as f64) * 0.7).sin() * 0.3).collect();
    let n = w.len() as f64;
    let mean = w.iter().map(|x| x.abs()).sum::<f64>() / n;
    let var = w.iter().map(|x| (x.abs() - mean).powi(2)).sum::<f64>() / n;
    let t = per_layer_temperature("l", &Tensor::new(vec![999], w).unwrap(), 1e-3).unwrap();
    assert!((t - 1e-3 * var).abs() <= 1e-12 * t);
}

fn weights() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0f64..1.0, 1..40)
}

proptest! {
    #[test]
    fn soft_l0_strictly_decreases_in_tau(w in weights(), tau in -0.2f64..0.8, dt in 1e-4f64..0.1) {
        let temp = 0.05;
        let t = Tensor::new(vec![w.len()], w).unwrap();
        prop_assert!(soft_l0(&t, tau + dt, temp).unwrap() < soft_l0(&t, tau, temp).unwrap());
    }

    #[test]
    fn hard_keep_count_is_non_increasing_in_tau(w in weights(), tau in -0.2f64..0.8, dt in 0f64..0.5) {
        let mut p = PrunableParam::new("l", Tensor::new(vec![w.len()], w).unwrap(), tau, 1.0).unwrap();
        let before = p.kept_count();
        p.tau += dt;
        prop_assert!(p.kept_count() <= before);
    }

    #[test]
    fn sigma_t_is_odd(w in -2.0f64..2.0, tau in -1.0f64..1.0, temp in 1e-8f64..1.0) {
        prop_assert_eq!(sigma_t(-w, tau, temp), -sigma_t(w, tau, temp));
    }

    #[test]
    fn sigma_t_halves_when_temperature_doubles(w in 1e-3f64..2.0, e in -8i32..0) {
        let temp = 10f64.powi(e) * 1.7;
        let tau = w * w;
        prop_assert_eq!(sigma_t(w, tau, 2.0 * temp), sigma_t(w, tau, temp) / 2.0);
    }

    #[test]
    fn clamped_update_respects_bound(
        w in weights(),
        g in -10.0f64..10.0,
        lambda in 0f64..1e-2,
        lr in 1e-4f64..1.0,
        kappa in 0.01f64..1.0,
    ) {
        let t = Tensor::new(vec![w.len()], w.clone()).unwrap();
        let temp = 1e-3;
        let tau = w[0] * w[0];
        let p = PrunableParam::new("l", t, tau, temp).unwrap();
        let dl = vec![g; w.len()];
        let grads = weight_grad(&p, &dl, lambda, GradMode::FullClamped, Clamp { lr, kappa }).unwrap();
        for d in grads {
            prop_assert!(lr * d.abs() <= kappa * temp * (1.0 + 1e-12));
        }
    }

    #[test]
    fn saturated_weights_pass_gradient_through_in_every_mode(
        w in 0.1f64..1.0,
        g in -1.0f64..1.0,
        lambda in 0f64..1e-3,
    ) {
        let temp = 1e-4;
        let tau = w * w - 1000.0 * temp;
        let p = PrunableParam::new("l", Tensor::new(vec![1], vec![w]).unwrap(), tau, temp).unwrap();
        for mode in GradMode::ALL {
            let d = weight_grad(&p, &[g], lambda, mode, Clamp { lr: 1e-6, kappa: 0.1 }).unwrap()[0];
            prop_assert!((d - g).abs() <= 1e-9 * g.abs().max(1e-300), "{:?}: {} vs {}", mode, d, g);
        }
    }

    #[test]
    fn lambda_is_always_recomputed_from_n(
        trace in prop::collection::vec(0f64..1.0, 1..80),
        c in 1.0f64..1.5,
        lambda0 in 1e-9f64..1e-3,
        n_lambda in 1u32..6,
    ) {
        let hp = LtpHyperParams { c_lambda: c, lambda0, n_lambda, ..LtpHyperParams::default() };
        let mut s = LambdaState::new(&hp, 1.0);
        let mut last_n = 0;
        for keep in trace {
            s = lambda_step(s, &hp, keep);
            prop_assert!(s.n >= last_n);
            prop_assert_eq!(s.lambda, c.powi(s.n as i32) * lambda0);
            last_n = s.n;
        }
    }
}
