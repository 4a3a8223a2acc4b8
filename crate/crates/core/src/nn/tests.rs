use ndarray::{array, Array2};
use rand::Rng;
use rand_distr::StandardNormal;

use super::*;
use crate::error::Error;
use crate::rng;

fn random_matrix<R: Rng>(rng: &mut R, n: usize, d: usize) -> Array2<f64> {
    Array2::from_shape_fn((n, d), |_| rng.sample(StandardNormal))
}

fn central_diff(f: &dyn Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

fn assert_grad_close(analytic: &[f64], numeric: &[f64]) {
    for (i, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        if a.abs() < 1e-8 {
            assert!((a - n).abs() <= 1e-7, "entry {i}: {a} vs {n}");
        } else {
            let rel = (a - n).abs() / a.abs().max(n.abs());
            assert!(rel <= 1e-4, "entry {i}: {a} vs {n} (rel {rel})");
        }
    }
}

#[test]
fn zero_params_give_zero_logits() {
    let spec = NetSpec::new(vec![LayerSpec::dense(3, 4)], 3, 4).unwrap();
    let params = ParamVector::zeros(spec.param_count());
    let x = array![[1.0, -2.0, 3.0], [0.5, 0.5, 0.5]];
    let (logits, _) = forward(&spec, &params, x.view(), &BnStatSet::fresh(&spec), Mode::Eval).unwrap();
    assert!(logits.iter().all(|v| *v == 0.0));
}

#[test]
fn identity_dense_layer_passes_input_through() {
    let spec = NetSpec::new(vec![LayerSpec::dense(3, 3)], 3, 3).unwrap();
    let mut params = ParamVector::zeros(spec.param_count());
    for i in 0..3 {
        params[i * 3 + i] = 1.0;
    }
    let x = array![[1.0, -2.0, 3.0], [0.25, 7.0, -0.5]];
    let (logits, _) = forward(&spec, &params, x.view(), &BnStatSet::fresh(&spec), Mode::Train).unwrap();
    assert_eq!(logits, x);
}

#[test]
fn eval_forward_is_deterministic_and_pure() {
    let spec = NetSpec::mlp(5, 6, 3).unwrap();
    let mut r = rng::stream(3, "nn-test", &[]);
    let params = spec.init_params(&mut r);
    let x = random_matrix(&mut r, 4, 5);
    let stats = BnStatSet::fresh(&spec);
    let before = stats.clone();
    let (a, _) = forward(&spec, &params, x.view(), &stats, Mode::Eval).unwrap();
    let (b, _) = forward(&spec, &params, x.view(), &stats, Mode::Eval).unwrap();
    assert_eq!(a, b);
    assert_eq!(stats, before);
}

#[test]
fn shape_and_numeric_errors() {
    let spec = NetSpec::mlp(5, 6, 3).unwrap();
    let params = ParamVector::zeros(spec.param_count());
    let stats = BnStatSet::fresh(&spec);
    let narrow = Array2::<f64>::zeros((2, 4));
    assert!(matches!(
        forward(&spec, &params, narrow.view(), &stats, Mode::Eval),
        Err(Error::Shape { .. })
    ));
    let short = ParamVector::zeros(3);
    let x = Array2::<f64>::zeros((2, 5));
    assert!(matches!(
        forward(&spec, &short, x.view(), &stats, Mode::Eval),
        Err(Error::Shape { .. })
    ));
    let mut bad = x.clone();
    bad[[0, 0]] = f64::NAN;
    assert!(matches!(
        forward(&spec, &params, bad.view(), &stats, Mode::Eval),
        Err(Error::Numeric { .. })
    ));
    assert!(matches!(
        loss_and_grads(&spec, &params, x.view(), &[0, 3], &stats, Mode::Eval),
        Err(Error::Input(_))
    ));
}

#[test]
fn uniform_logits_cost_log_classes() {
    let logits = Array2::<f64>::zeros((3, 10));
    let (loss, _) = softmax_cross_entropy(&logits, &[0, 4, 9]).unwrap();
    assert!((loss - 10f64.ln()).abs() < 1e-12);
}

#[test]
fn large_margin_loss_vanishes() {
    // loss = ln(1 + (C-1) e^{-margin}) <= (C-1) e^{-20} ~ 8.2e-9 for C = 4
    let mut logits = Array2::<f64>::zeros((2, 4));
    logits[[0, 1]] = 20.0;
    logits[[1, 3]] = 20.0;
    let (loss, _) = softmax_cross_entropy(&logits, &[1, 3]).unwrap();
    let bound = (1.0 + 3.0 * (-20f64).exp()).ln();
    assert!((loss - bound).abs() < 1e-15);
    assert!(loss < 1e-8);
}

#[test]
fn train_mode_batchnorm_normalizes() {
    let spec = NetSpec::new(vec![LayerSpec::dense(4, 6), LayerSpec::batchnorm(6)], 4, 6).unwrap();
    let mut r = rng::stream(5, "nn-test", &[]);
    let params = spec.init_params(&mut r);
    let x = random_matrix(&mut r, 8, 4) * 3.0 + 1.0;
    let (out, _) = forward(&spec, &params, x.view(), &BnStatSet::fresh(&spec), Mode::Train).unwrap();
    // gamma = 1, beta = 0: output is the normalized activation
    let (mean, var) = moments(&out.view());
    for (m, v) in mean.iter().zip(var.iter()) {
        assert!(m.abs() < 1e-6);
        // eps in the denominator shrinks the variance by v / (v + eps)
        assert!((v - 1.0).abs() < 1e-5 + spec.bn_eps);
    }
}

#[test]
fn running_stats_change_only_on_commit() {
    let spec = NetSpec::mlp(3, 4, 2).unwrap();
    let mut r = rng::stream(9, "nn-test", &[]);
    let params = spec.init_params(&mut r);
    let x = random_matrix(&mut r, 6, 3) + 2.0;
    let mut stats = BnStatSet::fresh(&spec);
    let (_, trace) = forward(&spec, &params, x.view(), &stats, Mode::Train).unwrap();
    assert_eq!(stats, BnStatSet::fresh(&spec));
    commit_running_stats(&spec, &trace, &mut stats);
    let (batch_mean, _) = trace.bn_batch_stats(1).unwrap();
    for (r, b) in stats.layers[0].mean.iter().zip(batch_mean.iter()) {
        assert!((r - 0.1 * b).abs() < 1e-12);
    }
    assert_eq!(stats.layers[0].count, 6);
}

#[test]
fn gradients_match_finite_differences() {
    for case in 0..12u64 {
        let mut r = rng::stream(11, "nn-fd", &[case]);
        let d = r.random_range(2..6);
        let h = r.random_range(2..9);
        let c = r.random_range(2..5);
        let n = r.random_range(2..9);
        let spec = match case % 3 {
            0 => NetSpec::new(vec![LayerSpec::dense(d, c)], d, c).unwrap(),
            1 => NetSpec::new(
                vec![LayerSpec::dense(d, h), LayerSpec::relu(h), LayerSpec::dense(h, c)],
                d,
                c,
            )
            .unwrap(),
            _ => NetSpec::new(
                vec![LayerSpec::dense(d, h), LayerSpec::batchnorm(h), LayerSpec::dense(h, c)],
                d,
                c,
            )
            .unwrap(),
        };
        let mut params = spec.init_params(&mut r);
        for p in params.iter_mut() {
            *p += 0.1 * r.sample::<f64, _>(StandardNormal);
        }
        let x = random_matrix(&mut r, n, d);
        let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..c)).collect();
        let mut stats = BnStatSet::fresh(&spec);
        for l in &mut stats.layers {
            l.mean.iter_mut().for_each(|m| *m = 0.3);
            l.var.iter_mut().for_each(|v| *v = 1.7);
        }
        for mode in [Mode::Train, Mode::Eval] {
            let lg = loss_and_grads(&spec, &params, x.view(), &labels, &stats, mode).unwrap();
            let f_params = |p: &[f64]| {
                let (logits, _) = forward(&spec, p, x.view(), &stats, mode).unwrap();
                softmax_cross_entropy(&logits, &labels).unwrap().0
            };
            assert_grad_close(&lg.param_grads, &central_diff(&f_params, &params, 1e-5));
            let f_inputs = |flat: &[f64]| {
                let xi = Array2::from_shape_vec((n, d), flat.to_vec()).unwrap();
                let (logits, _) = forward(&spec, &params, xi.view(), &stats, mode).unwrap();
                softmax_cross_entropy(&logits, &labels).unwrap().0
            };
            let flat: Vec<f64> = x.iter().copied().collect();
            let numeric = central_diff(&f_inputs, &flat, 1e-5);
            let analytic: Vec<f64> = lg.input_grads.iter().copied().collect();
            assert_grad_close(&analytic, &numeric);
        }
    }
}

#[test]
fn calibration_matches_batch_moments() {
    let spec = NetSpec::mlp(3, 4, 2).unwrap();
    let mut r = rng::stream(21, "nn-test", &[]);
    let params = spec.init_params(&mut r);
    let x = random_matrix(&mut r, 10, 3);
    let stats = calibrate_stats(&spec, &params, x.view()).unwrap();
    let (mean, _) = moments(
        &x.view()
            .dot(&ndarray::ArrayView2::from_shape((3, 4), &params[..12]).unwrap())
            .view(),
    );
    for (a, b) in stats.layers[0].mean.iter().zip(mean.iter()) {
        assert!((a - b).abs() < 1e-12);
    }
    assert_eq!(stats.total_count(), 10);
}
