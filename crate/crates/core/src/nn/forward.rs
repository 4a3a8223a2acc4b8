use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use super::spec::{LayerKind, NetSpec, ParamVector};
use super::stats::BnStatSet;
use crate::error::{check_len, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone)]
struct BnCache {
    mean: Array1<f64>,
    var: Array1<f64>,
    inv_std: Array1<f64>,
    xhat: Array2<f64>,
}

/// Activations retained for the reverse sweep.
///
/// `acts[0]` is the network input and `acts[i + 1]` the output of layer `i`.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub mode: Mode,
    acts: Vec<Array2<f64>>,
    bn: Vec<Option<BnCache>>,
}

impl ForwardTrace {
    pub fn activation(&self, index: usize) -> &Array2<f64> {
        &self.acts[index]
    }

    pub fn logits(&self) -> &Array2<f64> {
        self.acts.last().expect("trace always holds the input")
    }

    /// Batch mean and biased variance of the input to layer `layer`.
    pub fn input_moments(&self, layer: usize) -> (Array1<f64>, Array1<f64>) {
        moments(&self.acts[layer].view())
    }

    /// Batch statistics used for normalization at a batchnorm layer.
    pub fn bn_batch_stats(&self, layer: usize) -> Option<(&Array1<f64>, &Array1<f64>)> {
        self.bn[layer].as_ref().map(|c| (&c.mean, &c.var))
    }

    pub fn batch_size(&self) -> usize {
        self.acts[0].nrows()
    }
}

pub(crate) fn moments(x: &ArrayView2<f64>) -> (Array1<f64>, Array1<f64>) {
    let n = x.nrows() as f64;
    let mean = x.sum_axis(Axis(0)) / n;
    let centered = x - &mean;
    let var = (&centered * &centered).sum_axis(Axis(0)) / n;
    (mean, var)
}

fn dense_view<'a>(params: &'a [f64], fan_in: usize, fan_out: usize) -> (ArrayView2<'a, f64>, ArrayView1<'a, f64>) {
    let (w, b) = params.split_at(fan_in * fan_out);
    (
        ArrayView2::from_shape((fan_in, fan_out), w).expect("dense weight block"),
        ArrayView1::from(b),
    )
}

pub fn forward(
    spec: &NetSpec,
    params: &[f64],
    inputs: ArrayView2<f64>,
    stats: &BnStatSet,
    mode: Mode,
) -> Result<(Array2<f64>, ForwardTrace)> {
    spec.check_params(params)?;
    check_len("input width", spec.input_dim(), inputs.ncols())?;
    if inputs.nrows() == 0 {
        return Err(Error::Input("empty batch".into()));
    }
    if inputs.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric {
            phase: "forward".into(),
            detail: "non-finite input".into(),
        });
    }
    stats.check(spec)?;

    let mut acts = Vec::with_capacity(spec.layers().len() + 1);
    let mut bn = Vec::with_capacity(spec.layers().len());
    acts.push(inputs.to_owned());
    let mut bn_index = 0;
    for (i, layer) in spec.layers().iter().enumerate() {
        let x = acts.last().expect("non-empty");
        let p = &params[spec.param_range(i)];
        let (out, cache) = match layer.kind {
            LayerKind::Dense => {
                let (w, b) = dense_view(p, layer.fan_in, layer.fan_out);
                (x.dot(&w) + b, None)
            }
            LayerKind::Relu => (x.mapv(|v| v.max(0.0)), None),
            LayerKind::Batchnorm => {
                let width = layer.fan_out;
                let (mean, var) = match mode {
                    Mode::Train => moments(&x.view()),
                    Mode::Eval => {
                        let s = &stats.layers[bn_index];
                        (Array1::from(s.mean.clone()), Array1::from(s.var.clone()))
                    }
                };
                bn_index += 1;
                let inv_std = var.mapv(|v| 1.0 / (v + spec.bn_eps).sqrt());
                let xhat = (x - &mean) * &inv_std;
                let gamma = ArrayView1::from(&p[..width]);
                let beta = ArrayView1::from(&p[width..]);
                let out = &xhat * &gamma + beta;
                (
                    out,
                    Some(BnCache {
                        mean,
                        var,
                        inv_std,
                        xhat,
                    }),
                )
            }
        };
        acts.push(out);
        bn.push(cache);
    }
    let logits = acts.last().expect("non-empty").clone();
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric {
            phase: "forward".into(),
            detail: "non-finite logits".into(),
        });
    }
    Ok((logits, ForwardTrace { mode, acts, bn }))
}

/// Reverse sweep over a trace.
///
/// `inject`, when given, has one slot per activation (`layers + 1` slots) and
/// adds an extra cotangent to that activation before it is propagated. This is
/// how statistic-matching losses on hidden layers reach the input.
pub fn backward(
    spec: &NetSpec,
    params: &[f64],
    trace: &ForwardTrace,
    d_logits: Array2<f64>,
    inject: Option<&[Option<Array2<f64>>]>,
) -> Result<(ParamVector, Array2<f64>)> {
    spec.check_params(params)?;
    let layers = spec.layers();
    if let Some(extra) = inject {
        check_len("injected cotangents", layers.len() + 1, extra.len())?;
    }
    let mut grads = ParamVector::zeros(params.len());
    let mut grad = d_logits;
    for i in (0..layers.len()).rev() {
        if let Some(Some(extra)) = inject.map(|e| &e[i + 1]) {
            grad += extra;
        }
        let layer = layers[i];
        let range = spec.param_range(i);
        let p = &params[range.clone()];
        let x = &trace.acts[i];
        grad = match layer.kind {
            LayerKind::Dense => {
                let (w, _) = dense_view(p, layer.fan_in, layer.fan_out);
                let gw = x.t().dot(&grad);
                let gb = grad.sum_axis(Axis(0));
                let slot = &mut grads[range];
                let (sw, sb) = slot.split_at_mut(layer.fan_in * layer.fan_out);
                sw.iter_mut().zip(gw.iter()).for_each(|(s, g)| *s = *g);
                sb.iter_mut().zip(gb.iter()).for_each(|(s, g)| *s = *g);
                grad.dot(&w.t())
            }
            LayerKind::Relu => {
                let mut g = grad;
                g.zip_mut_with(x, |g, &v| {
                    if v <= 0.0 {
                        *g = 0.0;
                    }
                });
                g
            }
            LayerKind::Batchnorm => {
                let cache = trace.bn[i].as_ref().expect("batchnorm cache");
                let width = layer.fan_out;
                let gamma = ArrayView1::from(&p[..width]);
                let g_gamma = (&grad * &cache.xhat).sum_axis(Axis(0));
                let g_beta = grad.sum_axis(Axis(0));
                let slot = &mut grads[range];
                slot[..width].iter_mut().zip(g_gamma.iter()).for_each(|(s, g)| *s = *g);
                slot[width..].iter_mut().zip(g_beta.iter()).for_each(|(s, g)| *s = *g);
                let dxhat = &grad * &gamma;
                match trace.mode {
                    Mode::Eval => dxhat * &cache.inv_std,
                    Mode::Train => {
                        let n = x.nrows() as f64;
                        let sum_d = dxhat.sum_axis(Axis(0));
                        let sum_dx = (&dxhat * &cache.xhat).sum_axis(Axis(0));
                        let inner = dxhat * n - &sum_d - &cache.xhat * &sum_dx;
                        inner * &(&cache.inv_std / n)
                    }
                }
            }
        };
    }
    if let Some(Some(extra)) = inject.map(|e| &e[0]) {
        grad += extra;
    }
    Ok((grads, grad))
}

/// Mean softmax cross-entropy and its gradient with respect to the logits.
pub fn softmax_cross_entropy(logits: &Array2<f64>, labels: &[usize]) -> Result<(f64, Array2<f64>)> {
    check_len("label count", logits.nrows(), labels.len())?;
    let classes = logits.ncols();
    let n = logits.nrows() as f64;
    let mut grad = Array2::zeros(logits.raw_dim());
    let mut loss = 0.0;
    for (r, (row, &y)) in logits.outer_iter().zip(labels).enumerate() {
        if y >= classes {
            return Err(Error::Input(format!("label {y} out of range for {classes} classes")));
        }
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let log_z = max + sum.ln();
        loss += log_z - row[y];
        for (c, v) in row.iter().enumerate() {
            grad[[r, c]] = (v - log_z).exp() / n;
        }
        grad[[r, y]] -= 1.0 / n;
    }
    Ok((loss / n, grad))
}

pub struct LossGrads {
    pub loss: f64,
    pub param_grads: ParamVector,
    pub input_grads: Array2<f64>,
    pub trace: ForwardTrace,
}

pub fn loss_and_grads(
    spec: &NetSpec,
    params: &[f64],
    inputs: ArrayView2<f64>,
    labels: &[usize],
    stats: &BnStatSet,
    mode: Mode,
) -> Result<LossGrads> {
    if labels.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    let (logits, trace) = forward(spec, params, inputs, stats, mode)?;
    let (loss, d_logits) = softmax_cross_entropy(&logits, labels)?;
    let (param_grads, input_grads) = backward(spec, params, &trace, d_logits, None)?;
    Ok(LossGrads {
        loss,
        param_grads,
        input_grads,
        trace,
    })
}

/// Folds a train-mode trace into running statistics (EMA with the spec's
/// momentum). Eval-mode traces are ignored.
pub fn commit_running_stats(spec: &NetSpec, trace: &ForwardTrace, stats: &mut BnStatSet) {
    commit_with_momentum(spec, trace, stats, spec.bn_momentum);
}

pub(crate) fn commit_with_momentum(spec: &NetSpec, trace: &ForwardTrace, stats: &mut BnStatSet, momentum: f64) {
    if trace.mode != Mode::Train {
        return;
    }
    let n = trace.batch_size();
    for (slot, i) in spec.bn_layers().enumerate() {
        let cache = trace.bn[i].as_ref().expect("batchnorm cache");
        stats.layers[slot].blend(
            cache.mean.as_slice().expect("contiguous"),
            cache.var.as_slice().expect("contiguous"),
            n,
            momentum,
            spec.bn_eps,
        );
    }
    for (slot, i) in spec.relu_layers().enumerate() {
        let (mean, var) = moments(&trace.acts[i + 1].view());
        stats.features[slot].blend(
            mean.as_slice().expect("contiguous"),
            var.as_slice().expect("contiguous"),
            n,
            momentum,
            spec.bn_eps,
        );
    }
}

/// Replaces running statistics with the exact moments of `inputs` under
/// `params` (a forward-only pass, no parameter change).
pub fn calibrate_stats(spec: &NetSpec, params: &[f64], inputs: ArrayView2<f64>) -> Result<BnStatSet> {
    let mut stats = BnStatSet::fresh(spec);
    let (_, trace) = forward(spec, params, inputs, &stats, Mode::Train)?;
    commit_with_momentum(spec, &trace, &mut stats, 1.0);
    for l in stats.layers.iter_mut().chain(stats.features.iter_mut()) {
        l.count = inputs.nrows() as u64;
    }
    Ok(stats)
}

/// Eval-mode top-1 accuracy as a fraction.
pub fn accuracy(
    spec: &NetSpec,
    params: &[f64],
    inputs: ArrayView2<f64>,
    labels: &[usize],
    stats: &BnStatSet,
) -> Result<f64> {
    let (logits, _) = forward(spec, params, inputs, stats, Mode::Eval)?;
    let correct = logits
        .outer_iter()
        .zip(labels)
        .filter(|(row, &y)| argmax(row) == y)
        .count();
    Ok(correct as f64 / labels.len() as f64)
}

pub(crate) fn argmax(row: &ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}
