use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;

use crate::error::Result;
use crate::nn::{accuracy, commit_running_stats, loss_and_grads, sgd_step, BnStatSet, LayerStats, Mode, NetSpec};
use crate::rng::StreamRng;

/// One client's local data, held client-side.
#[derive(Debug, Clone)]
pub struct LocalData {
    pub train_x: Array2<f64>,
    pub train_y: Vec<usize>,
    pub test_x: Array2<f64>,
    pub test_y: Vec<usize>,
}

pub struct LocalSgd<'a> {
    pub epochs: usize,
    pub lr: &'a dyn Fn(usize) -> f64,
    pub momentum: f64,
    pub minibatch: usize,
    /// Multiplies every gradient; zero entries never move.
    pub grad_mask: Option<&'a [f64]>,
}

/// Shuffled minibatch SGD in train mode with a fresh momentum buffer.
/// Running statistics are folded into `stats` after every step. Returns the
/// mean minibatch loss (0 when no step ran).
pub fn local_train(
    spec: &NetSpec,
    params: &mut [f64],
    stats: &mut BnStatSet,
    x: &Array2<f64>,
    y: &[usize],
    opts: &LocalSgd<'_>,
    rng: &mut StreamRng,
) -> Result<f64> {
    let n = y.len();
    let mut velocity = vec![0.0; params.len()];
    let mut order: Vec<usize> = (0..n).collect();
    let (mut total, mut steps) = (0.0, 0usize);
    for epoch in 0..opts.epochs {
        let lr = (opts.lr)(epoch);
        order.shuffle(rng);
        let mut chunks: Vec<&[usize]> = order.chunks(opts.minibatch.max(1)).collect();
        // a single-sample batch has no batch variance; fold it into its neighbor
        if chunks.len() > 1 && chunks[chunks.len() - 1].len() == 1 {
            chunks.pop();
            let last = chunks.pop().expect("two chunks");
            let start = n - last.len() - 1;
            chunks.push(&order[start..]);
        }
        for chunk in chunks {
            let bx = x.select(Axis(0), chunk);
            let by: Vec<usize> = chunk.iter().map(|&i| y[i]).collect();
            let mut lg = loss_and_grads(spec, params, bx.view(), &by, stats, Mode::Train)?;
            if let Some(mask) = opts.grad_mask {
                lg.param_grads.iter_mut().zip(mask).for_each(|(g, m)| *g *= m);
            }
            sgd_step(params, &lg.param_grads, lr, opts.momentum, &mut velocity)?;
            commit_running_stats(spec, &lg.trace, stats);
            total += lg.loss;
            steps += 1;
        }
    }
    Ok(if steps == 0 { 0.0 } else { total / steps as f64 })
}

pub fn test_accuracy(spec: &NetSpec, params: &[f64], stats: &BnStatSet, data: &LocalData) -> Result<f64> {
    accuracy(spec, params, data.test_x.view(), &data.test_y, stats)
}

/// Weighted average of running statistics, moment by moment. The sample
/// count is averaged too, since the parts usually share a common ancestor.
pub fn average_stats(parts: &[(&BnStatSet, f64)]) -> BnStatSet {
    let total: f64 = parts.iter().map(|(_, w)| w).sum();
    let avg = |pick: &dyn Fn(&BnStatSet) -> &Vec<LayerStats>| -> Vec<LayerStats> {
        let template = pick(parts[0].0);
        (0..template.len())
            .map(|l| {
                let width = template[l].width();
                let mut mean = vec![0.0; width];
                let mut var = vec![0.0; width];
                let mut count = 0.0;
                for (s, w) in parts {
                    let o = &pick(s)[l];
                    for k in 0..width {
                        mean[k] += w / total * o.mean[k];
                        var[k] += w / total * o.var[k];
                    }
                    count += w / total * o.count as f64;
                }
                LayerStats {
                    mean,
                    var,
                    count: count.round() as u64,
                }
            })
            .collect()
    };
    BnStatSet {
        layers: avg(&|s| &s.layers),
        features: avg(&|s| &s.features),
    }
}
