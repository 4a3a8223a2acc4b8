use std::collections::BTreeSet;

use ndarray::Array2;
use pfeddsh::data::{build_plan, gen_blobs};
use pfeddsh::hypernet::{init_embedding, ClientEmbedding, HypernetState};
use pfeddsh::masking::{self, mask_grads, MaskMode, MaskState};
use pfeddsh::metrics::{compute_pa, compute_ri, mutual, Checkpoint, MetricsLedger};
use pfeddsh::nn::{
    calibrate_stats, forward, loss_and_grads, softmax_cross_entropy, BnStatSet, LayerSpec, Mode, NetSpec, ParamVector,
};
use pfeddsh::replay::{finetune_prior, synthesize, FinetuneSettings, ReplayHyperparams, SyntheticPool};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

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

fn grads_agree(analytic: &[f64], numeric: &[f64]) -> Result<(), TestCaseError> {
    for (i, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        if a.abs() < 1e-8 {
            prop_assert!((a - n).abs() <= 1e-7, "entry {}: {} vs {}", i, a, n);
        } else {
            let rel = (a - n).abs() / a.abs().max(n.abs());
            prop_assert!(rel <= 1e-4, "entry {}: {} vs {} (rel {})", i, a, n, rel);
        }
    }
    Ok(())
}

fn random_net(seed: u64) -> (NetSpec, ParamVector, Array2<f64>, Vec<usize>, BnStatSet, ChaCha8Rng) {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let d = r.random_range(2..6);
    let h = r.random_range(2..17);
    let c = r.random_range(2..5);
    let n = r.random_range(2..9);
    let spec = match r.random_range(0..3) {
        0 => NetSpec::new(vec![LayerSpec::dense(d, c)], d, c),
        1 => NetSpec::new(
            vec![LayerSpec::dense(d, h), LayerSpec::relu(h), LayerSpec::dense(h, c)],
            d,
            c,
        ),
        _ => NetSpec::new(
            vec![LayerSpec::dense(d, h), LayerSpec::batchnorm(h), LayerSpec::dense(h, c)],
            d,
            c,
        ),
    }
    .unwrap();
    let mut params = spec.init_params(&mut r);
    params.iter_mut().for_each(|p| *p += r.random_range(-0.2..0.2));
    let x = Array2::from_shape_fn((n, d), |_| r.random_range(-2.0..2.0));
    let y: Vec<usize> = (0..n).map(|_| r.random_range(0..c)).collect();
    let mut stats = BnStatSet::fresh(&spec);
    for l in &mut stats.layers {
        l.mean.iter_mut().for_each(|m| *m = r.random_range(-0.5..0.5));
        l.var.iter_mut().for_each(|v| *v = r.random_range(0.5..2.0));
    }
    (spec, params, x, y, stats, r)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn net_gradients_match_differences(seed in any::<u64>(), train in any::<bool>()) {
        let (spec, params, x, y, stats, _) = random_net(seed);
        let mode = if train { Mode::Train } else { Mode::Eval };
        let lg = loss_and_grads(&spec, &params, x.view(), &y, &stats, mode).unwrap();
        let by_params = |p: &[f64]| {
            let (logits, _) = forward(&spec, p, x.view(), &stats, mode).unwrap();
            softmax_cross_entropy(&logits, &y).unwrap().0
        };
        grads_agree(&lg.param_grads, &central_diff(&by_params, &params, 1e-5))?;
        let flat = x.as_slice().unwrap().to_vec();
        let by_inputs = |v: &[f64]| {
            let probe = Array2::from_shape_vec(x.raw_dim(), v.to_vec()).unwrap();
            let (logits, _) = forward(&spec, &params, probe.view(), &stats, mode).unwrap();
            softmax_cross_entropy(&logits, &y).unwrap().0
        };
        let ig = lg.input_grads.as_slice().unwrap().to_vec();
        grads_agree(&ig, &central_diff(&by_inputs, &flat, 1e-5))?;
    }

    #[test]
    fn forward_is_deterministic_and_eval_is_pure(seed in any::<u64>()) {
        let (spec, params, x, _, stats, _) = random_net(seed);
        let before = stats.clone();
        let (a, _) = forward(&spec, &params, x.view(), &stats, Mode::Eval).unwrap();
        let (b, _) = forward(&spec, &params, x.view(), &stats, Mode::Eval).unwrap();
        prop_assert_eq!(&stats, &before);
        prop_assert!(a.iter().zip(b.iter()).all(|(u, v)| u.to_bits() == v.to_bits()));
        let (c, _) = forward(&spec, &params, x.view(), &stats, Mode::Train).unwrap();
        let (d, _) = forward(&spec, &params, x.view(), &stats, Mode::Train).unwrap();
        prop_assert_eq!(&stats, &before);
        prop_assert_eq!(c, d);
    }

    #[test]
    fn hypernet_adjoint(seed in any::<u64>(), d in 1usize..6, hidden in 1usize..9) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let spec = NetSpec::mlp(3, 4, 3).unwrap();
        let h = HypernetState::new(d, hidden, &spec, &mut r).unwrap();
        let e = init_embedding(seed % 97, d, seed).unwrap();
        let delta: Vec<f64> = (0..h.target_len()).map(|_| r.random_range(-1.0..1.0)).collect();
        let (gp, ge) = h.backprop(&e, &delta).unwrap();
        let vp: Vec<f64> = (0..h.phi().len()).map(|_| r.random_range(-1.0..1.0)).collect();
        let ve: Vec<f64> = (0..d).map(|_| r.random_range(-1.0..1.0)).collect();
        // forward-mode directional derivative by central differences
        let step = 1e-6;
        let shifted = |s: f64| {
            let mut probe = h.clone();
            probe.phi_mut().iter_mut().zip(&vp).for_each(|(p, v)| *p += s * v);
            let values = e.values.iter().zip(&ve).map(|(a, v)| a + s * v).collect();
            probe.generate(&ClientEmbedding { client_id: e.client_id, values }).unwrap()
        };
        let (up, down) = (shifted(step), shifted(-step));
        let jv: f64 = up.iter().zip(down.iter()).zip(&delta).map(|((u, w), d)| (u - w) / (2.0 * step) * d).sum();
        let vjp: f64 = gp.iter().zip(&vp).map(|(g, v)| g * v).sum::<f64>()
            + ge.iter().zip(&ve).map(|(g, v)| g * v).sum::<f64>();
        prop_assert!((jv - vjp).abs() <= 1e-6 * jv.abs().max(vjp.abs()).max(1.0), "{} vs {}", jv, vjp);
    }

    #[test]
    fn generated_length_matches_spec(d_in in 1usize..8, width in 1usize..12, classes in 2usize..6, bn in any::<bool>()) {
        let mut spec = NetSpec::mlp(d_in, width, classes).unwrap();
        if bn {
            spec = spec.with_bn(1e-5, 0.1);
        }
        let h = HypernetState::new(4, 5, &spec, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let theta = h.generate(&init_embedding(0, 4, 2).unwrap()).unwrap();
        prop_assert_eq!(theta.len(), spec.param_count());
    }

    #[test]
    fn mask_l1_term_is_lambda_times_soft_sum(seed in any::<u64>(), gamma in 0.5f64..100.0, lambda in 0.0f64..1e-2) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let spec = NetSpec::mlp(3, 4, 2).unwrap();
        let h = HypernetState::new(3, 4, &spec, &mut r).unwrap();
        let e = init_embedding(1, 3, seed).unwrap();
        let logits: Vec<f64> = (0..spec.param_count()).map(|_| r.random_range(-1.0..1.0)).collect();
        let mask = MaskState::new(1, logits.clone(), gamma).unwrap();
        let x = Array2::from_shape_fn((4, 3), |_| r.random_range(-1.0..1.0));
        let g = mask_grads(&spec, &h, &e, &mask, x.view(), &[0, 1, 0, 1], &BnStatSet::fresh(&spec), lambda).unwrap();
        let expected: f64 = lambda * logits.iter().map(|s| 1.0 / (1.0 + (-gamma * s).exp())).sum::<f64>();
        prop_assert!((g.l1 - expected).abs() <= 1e-9);
    }

    #[test]
    fn mask_blob_round_trip(bits in proptest::collection::vec(any::<bool>(), 1..200), gamma in 1.0f64..100.0, batch in 1usize..9) {
        let logits = bits.iter().map(|&b| if b { 0.7 } else { -0.7 }).collect();
        let mask = MaskState::new(batch, logits, gamma).unwrap().frozen();
        let back = MaskState::from_bytes(&mask.to_bytes().unwrap()).unwrap();
        prop_assert_eq!(back.materialize(MaskMode::Hard), mask.materialize(MaskMode::Hard));
        prop_assert_eq!(back.batch, batch);
        prop_assert!(back.is_frozen());
    }

    #[test]
    fn hard_mask_application_is_exact(values in proptest::collection::vec(-10.0f64..10.0, 1..64), seed in any::<u64>()) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let hard: Vec<f64> = values.iter().map(|_| if r.random_bool(0.5) { 1.0 } else { 0.0 }).collect();
        let out = masking::apply(&hard, &values).unwrap();
        for j in 0..values.len() {
            let expected = if hard[j] == 1.0 { values[j] } else { 0.0 };
            prop_assert_eq!(out[j], expected);
        }
    }

    #[test]
    fn replay_finetune_never_moves_masked_out_positions(seed in any::<u64>(), keep in 0.05f64..0.95) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let spec = NetSpec::mlp(4, 6, 3).unwrap();
        let params = spec.init_params(&mut r);
        let logits: Vec<f64> = (0..params.len()).map(|_| if r.random_bool(keep) { 1.0 } else { -1.0 }).collect();
        let mask = MaskState::new(1, logits, 10.0).unwrap().frozen();
        let hard = mask.materialize(MaskMode::Hard);
        let snapshot = masking::apply(&hard, &params).unwrap();
        let x = Array2::from_shape_fn((20, 4), |_| r.random_range(-2.0..2.0));
        let stats = calibrate_stats(&spec, &snapshot, x.view()).unwrap();
        let pool = SyntheticPool {
            source_batch: 2,
            inputs: x,
            labels: (0..20).map(|i| i % 3).collect(),
            model_id: String::new(),
            stats_id: String::new(),
        };
        let settings = FinetuneSettings { epochs: 3, lr: 0.1, momentum: 0.9, minibatch: 8 };
        let out = finetune_prior(&spec, &snapshot, &mask, &pool, &stats, &settings).unwrap();
        for j in 0..out.len() {
            if hard[j] == 0.0 {
                prop_assert_eq!(out[j].to_bits(), snapshot[j].to_bits());
            }
        }
    }

    #[test]
    fn synthesis_never_worsens_its_objective(seed in any::<u64>()) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let spec = NetSpec::mlp(4, 6, 3).unwrap().with_bn(1e-5, 0.1);
        let params = spec.init_params(&mut r);
        let x = Array2::from_shape_fn((16, 4), |_| r.random_range(-2.0..2.0));
        let stats = calibrate_stats(&spec, &params, x.view()).unwrap();
        let hp = ReplayHyperparams { iterations: 15, ..Default::default() };
        let s = synthesize(&spec, &params, &stats, &[0, 1, 2, 0, 1, 2], &hp, seed).unwrap();
        prop_assert!(s.best.total <= s.initial.total);
        prop_assert!(s.best.bn <= s.initial.bn || s.best.total < s.initial.total);
        prop_assert!(s.inputs.iter().all(|v| v.abs() <= hp.clamp));
    }

    #[test]
    fn partition_is_an_exact_cover(seed in any::<u64>(), clients in 1usize..12, alpha in prop_oneof![Just(0.1), Just(1.0), Just(100.0)]) {
        let data = gen_blobs(4, 3, 60, 1.0, seed).unwrap();
        let plan = build_plan(&data, clients, alpha, 0.2, &[clients], seed).unwrap();
        let mut seen = vec![0usize; data.len()];
        for split in &plan.clients {
            let train: BTreeSet<usize> = split.train.iter().copied().collect();
            prop_assert!(split.test.iter().all(|i| !train.contains(i)));
            let n = (split.train.len() + split.test.len()) as f64;
            prop_assert!((split.test.len() as f64 - 0.2 * n).abs() <= 1.0);
            split.train.iter().chain(&split.test).for_each(|&i| seen[i] += 1);
        }
        prop_assert!(seen.iter().all(|&c| c == 1));
    }

    #[test]
    fn ledger_csv_round_trip(accs in proptest::collection::vec(0.0f64..=1.0, 1..12)) {
        let mut ledger = MetricsLedger::new();
        for (i, &a) in accs.iter().enumerate() {
            ledger.register(i as u64, 1 + i % 2).unwrap();
            ledger.record(i as u64, Checkpoint::LocalPretrain, a).unwrap();
            ledger.record(i as u64, Checkpoint::PostBatch(1 + i % 2), 1.0 - a).unwrap();
        }
        let text = ledger.to_csv();
        let back = MetricsLedger::from_csv(&text).unwrap();
        prop_assert_eq!(back.to_csv(), text);
        for (i, &a) in accs.iter().enumerate() {
            prop_assert_eq!(back.get(i as u64, Checkpoint::LocalPretrain), Some(a));
        }
    }

    #[test]
    fn pa_ri_are_paired_means(pairs in proptest::collection::vec((0.0f64..=1.0, 0.0f64..=1.0, 0.0f64..=1.0), 1..10), fresh in proptest::collection::vec((0.0f64..=1.0, 0.0f64..=1.0), 1..5)) {
        let mut ledger = MetricsLedger::new();
        for (i, &(local, settled, later)) in pairs.iter().enumerate() {
            let c = i as u64;
            ledger.register(c, 1).unwrap();
            ledger.record(c, Checkpoint::LocalPretrain, local).unwrap();
            ledger.record(c, Checkpoint::PostBatch(1), settled).unwrap();
            ledger.record(c, Checkpoint::PostReplay(2), later).unwrap();
        }
        for (j, &(local, trained)) in fresh.iter().enumerate() {
            let c = 100 + j as u64;
            ledger.register(c, 2).unwrap();
            ledger.record(c, Checkpoint::LocalPretrain, local).unwrap();
            ledger.record(c, Checkpoint::PostBatch(2), trained).unwrap();
        }
        let pa = fresh.iter().map(|(l, t)| 100.0 * (t - l)).sum::<f64>() / fresh.len() as f64;
        let ri = pairs.iter().map(|(_, s, l)| 100.0 * (l - s)).sum::<f64>() / pairs.len() as f64;
        prop_assert!((compute_pa(&ledger, 2).unwrap() - pa).abs() <= 1e-9);
        prop_assert!((compute_ri(&ledger, 2).unwrap() - ri).abs() <= 1e-9);
        prop_assert!((mutual(pa, ri) - (pa + ri) / 2.0).abs() <= 1e-12);
    }
}
