use std::process::ExitCode;

use anyhow::Result;
use ndarray::Array2;
use pfeddsh::hypernet::{init_embedding, ClientEmbedding, HypernetState};
use pfeddsh::masking::{mask_grads, MaskMode, MaskState};
use pfeddsh::nn::{forward, loss_and_grads, softmax_cross_entropy, BnStatSet, LayerSpec, Mode, NetSpec};
use pfeddsh::rng;
use rand::Rng;

use super::EXIT_NUMERIC;

const STEP: f64 = 1e-5;

fn central_diff(f: &dyn Fn(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + STEP;
            let up = f(&probe);
            probe[i] = x[i] - STEP;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * STEP)
        })
        .collect()
}

/// Largest relative error; entries where both sides are below 1e-8 are
/// compared absolutely and count as `abs / 1e-3`.
fn worst(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| {
            let scale = a.abs().max(n.abs());
            if scale < 1e-8 {
                (a - n).abs() / 1e-3
            } else {
                (a - n).abs() / scale
            }
        })
        .fold(0.0, f64::max)
}

fn small_net<R: Rng>(r: &mut R) -> NetSpec {
    let d = r.random_range(2..5);
    let h = r.random_range(2..9);
    let c = r.random_range(2..4);
    NetSpec::new(
        vec![
            LayerSpec::dense(d, h),
            LayerSpec::batchnorm(h),
            LayerSpec::relu(h),
            LayerSpec::dense(h, c),
        ],
        d,
        c,
    )
    .expect("valid net")
}

fn net_case(seed: u64, i: usize) -> f64 {
    let mut r = rng::stream(seed, "gradcheck-net", &[i as u64]);
    let spec = small_net(&mut r);
    let params = spec.init_params(&mut r);
    let n = r.random_range(3..8);
    let x = Array2::from_shape_fn((n, spec.input_dim()), |_| r.random_range(-2.0..2.0));
    let y: Vec<usize> = (0..n).map(|_| r.random_range(0..spec.classes())).collect();
    let stats = BnStatSet::fresh(&spec);
    let lg = loss_and_grads(&spec, &params, x.view(), &y, &stats, Mode::Train).expect("finite");
    let loss = |p: &[f64], xs: &Array2<f64>| {
        let (logits, _) = forward(&spec, p, xs.view(), &stats, Mode::Train).expect("finite");
        softmax_cross_entropy(&logits, &y).expect("labels").0
    };
    let by_params = |p: &[f64]| loss(p, &x);
    let by_inputs = |v: &[f64]| {
        loss(
            &params,
            &Array2::from_shape_vec(x.raw_dim(), v.to_vec()).expect("shape"),
        )
    };
    let flat = x.iter().copied().collect::<Vec<_>>();
    let ig = lg.input_grads.iter().copied().collect::<Vec<_>>();
    worst(&lg.param_grads, &central_diff(&by_params, &params)).max(worst(&ig, &central_diff(&by_inputs, &flat)))
}

fn hypernet_case(seed: u64, i: usize) -> f64 {
    let mut r = rng::stream(seed, "gradcheck-hypernet", &[i as u64]);
    let spec = small_net(&mut r);
    let d = r.random_range(2..5);
    let h = HypernetState::new(d, r.random_range(2..7), &spec, &mut r).expect("hypernet");
    let e = init_embedding(i as u64, d, seed).expect("embedding");
    let n = r.random_range(3..8);
    let x = Array2::from_shape_fn((n, spec.input_dim()), |_| r.random_range(-2.0..2.0));
    let y: Vec<usize> = (0..n).map(|_| r.random_range(0..spec.classes())).collect();
    let stats = BnStatSet::fresh(&spec);
    let loss = |h: &HypernetState, e: &ClientEmbedding| {
        let theta = h.generate(e).expect("generate");
        let (logits, _) = forward(&spec, &theta, x.view(), &stats, Mode::Train).expect("finite");
        softmax_cross_entropy(&logits, &y).expect("labels").0
    };
    let theta = h.generate(&e).expect("generate");
    let lg = loss_and_grads(&spec, &theta, x.view(), &y, &stats, Mode::Train).expect("finite");
    let (gp, ge) = h.backprop(&e, &lg.param_grads).expect("backprop");
    let by_phi = |p: &[f64]| {
        let mut probe = h.clone();
        probe.phi_mut().copy_from_slice(p);
        loss(&probe, &e)
    };
    let by_e = |v: &[f64]| {
        loss(
            &h,
            &ClientEmbedding {
                client_id: e.client_id,
                values: v.to_vec(),
            },
        )
    };
    worst(&gp, &central_diff(&by_phi, h.phi())).max(worst(&ge, &central_diff(&by_e, &e.values)))
}

fn mask_case(seed: u64, i: usize) -> f64 {
    let mut r = rng::stream(seed, "gradcheck-mask", &[i as u64]);
    let spec = small_net(&mut r);
    let d = r.random_range(2..5);
    let h = HypernetState::new(d, 4, &spec, &mut r).expect("hypernet");
    let e = init_embedding(i as u64, d, seed).expect("embedding");
    let n = r.random_range(3..8);
    let x = Array2::from_shape_fn((n, spec.input_dim()), |_| r.random_range(-2.0..2.0));
    let y: Vec<usize> = (0..n).map(|_| r.random_range(0..spec.classes())).collect();
    let stats = BnStatSet::fresh(&spec);
    let gamma = r.random_range(0.5..3.0);
    let lambda = r.random_range(0.0..1e-2);
    let logits: Vec<f64> = (0..spec.param_count()).map(|_| r.random_range(-1.0..1.0)).collect();
    let mask = MaskState::new(1, logits.clone(), gamma).expect("mask");
    let g = mask_grads(&spec, &h, &e, &mask, x.view(), &y, &stats, lambda).expect("mask gradient");
    let theta = h.generate(&e).expect("generate");
    let objective = |s: &[f64]| {
        let probe = MaskState::new(1, s.to_vec(), gamma).expect("mask");
        let soft = probe.materialize(MaskMode::Soft);
        let masked: Vec<f64> = soft.iter().zip(theta.iter()).map(|(m, t)| m * t).collect();
        let (out, _) = forward(&spec, &masked, x.view(), &stats, Mode::Train).expect("finite");
        softmax_cross_entropy(&out, &y).expect("labels").0 + lambda * soft.iter().sum::<f64>()
    };
    worst(&g.grad_logits, &central_diff(&objective, &logits))
}

/// Worst error of one random instance of a gradient family.
type Case = fn(u64, usize) -> f64;

pub fn gradcheck(seed: u64, instances: usize, tolerance: f64) -> Result<ExitCode> {
    let families: [(&str, Case); 3] = [("nn", net_case), ("hypernet", hypernet_case), ("mask", mask_case)];
    let mut ok = true;
    for (name, case) in families {
        let errors: Vec<f64> = (0..instances).map(|i| case(seed, i)).collect();
        let max = errors.iter().copied().fold(0.0, f64::max);
        let pass = max <= tolerance;
        ok &= pass;
        println!(
            "{name:<9} instances {instances:>3}  max relative error {max:.3e}  {}",
            if pass { "ok" } else { "FAIL" }
        );
    }
    Ok(if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(EXIT_NUMERIC)
    })
}
