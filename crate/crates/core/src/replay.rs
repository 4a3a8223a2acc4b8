//! Server-side data-free replay.
//!
//! Synthetic inputs are optimized from noise until the statistics they induce
//! inside a model match stored batchnorm statistics; the resulting labeled
//! pool is used to fine-tune the serving parameters of earlier batches inside
//! their frozen subnetworks. Nothing in this module accepts client samples.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, RngCore};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{check_len, Error, Result};
use crate::masking::{MaskMode, MaskState};
use crate::nn::{
    backward, cosine_lr, forward, moments, sgd_step, softmax_cross_entropy, BnStatSet, ForwardTrace, LayerStats, Mode,
    NetSpec, ParamVector,
};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReplayHyperparams {
    pub tv: f64,
    pub l2: f64,
    pub feature: f64,
    pub iterations: usize,
    pub step: f64,
    pub images_per_class: usize,
    /// Synthetic inputs are clamped to `[-clamp, clamp]` after every step.
    pub clamp: f64,
    /// Weight of the cross-entropy term toward the target label.
    pub label_weight: f64,
    /// `[rows, cols]` when inputs are flattened 2-D grids; total variation
    /// then runs over both neighbor directions.
    pub grid: Option<[usize; 2]>,
}

impl Default for ReplayHyperparams {
    fn default() -> Self {
        Self {
            tv: 1e-5,
            l2: 1e-4,
            feature: 1e-2,
            iterations: 250,
            step: 0.1,
            images_per_class: 20,
            clamp: 3.0,
            label_weight: 1.0,
            grid: None,
        }
    }
}

impl ReplayHyperparams {
    pub fn validate(&self) -> Result<()> {
        let field = |f: &str, d: &str| Error::Config {
            field: format!("replay.{f}"),
            detail: d.into(),
        };
        if self.iterations == 0 {
            return Err(field("iterations", "must be >= 1"));
        }
        if !(self.step > 0.0) {
            return Err(field("step", "must be > 0"));
        }
        for (name, v) in [
            ("tv", self.tv),
            ("l2", self.l2),
            ("feature", self.feature),
            ("label_weight", self.label_weight),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(field(name, "must be a finite value >= 0"));
            }
        }
        if !(self.clamp > 0.0) {
            return Err(field("clamp", "must be > 0"));
        }
        Ok(())
    }
}

/// Pools per-client statistics: count-weighted means and the law of total
/// variance (within-client variance plus spread of client means).
pub fn capture_bn_stats(contributions: &[&BnStatSet]) -> Result<BnStatSet> {
    let first = contributions
        .first()
        .ok_or_else(|| Error::Input("no client statistics to aggregate".into()))?;
    let counts: Vec<f64> = contributions.iter().map(|s| s.total_count() as f64).collect();
    let total: f64 = counts.iter().sum();
    let weights: Vec<f64> = if total > 0.0 {
        counts.iter().map(|c| c / total).collect()
    } else {
        vec![1.0 / contributions.len() as f64; contributions.len()]
    };
    let combine = |pick: &dyn Fn(&BnStatSet) -> &Vec<LayerStats>| -> Result<Vec<LayerStats>> {
        let template = pick(first);
        let mut out = Vec::with_capacity(template.len());
        for (l, layer) in template.iter().enumerate() {
            let width = layer.width();
            let mut mean = vec![0.0; width];
            let mut count = 0;
            for (s, w) in contributions.iter().zip(&weights) {
                let other = pick(s);
                check_len("statistics layers", template.len(), other.len())?;
                check_len("statistics width", width, other[l].width())?;
                mean.iter_mut().zip(&other[l].mean).for_each(|(m, x)| *m += w * x);
                count += other[l].count;
            }
            let mut var = vec![0.0; width];
            for (s, w) in contributions.iter().zip(&weights) {
                let o = &pick(s)[l];
                for k in 0..width {
                    var[k] += w * (o.var[k] + (o.mean[k] - mean[k]).powi(2));
                }
            }
            out.push(LayerStats { mean, var, count });
        }
        Ok(out)
    };
    Ok(BnStatSet {
        layers: combine(&|s| &s.layers)?,
        features: combine(&|s| &s.features)?,
    })
}

/// Squared deviation of batch moments from stored moments, summed over
/// features, together with its gradient with respect to the activations.
fn moment_alignment(x: &ArrayView2<f64>, target: &LayerStats) -> (f64, Array2<f64>) {
    let n = x.nrows() as f64;
    let (mean, var) = moments(x);
    let dm = &mean - &Array1::from(target.mean.clone());
    let dv = &var - &Array1::from(target.var.clone());
    let loss = dm.mapv(|v| v * v).sum() + dv.mapv(|v| v * v).sum();
    let centered = x - &mean;
    let grad = centered * &(&dv * (4.0 / n)) + &(&dm * (2.0 / n));
    (loss, grad)
}

/// Statistic-matching terms over a trace: batchnorm inputs against
/// `target.layers`, relu outputs against `target.features`.
fn statistic_terms(
    spec: &NetSpec,
    trace: &ForwardTrace,
    target: &BnStatSet,
    feature_weight: f64,
) -> (f64, f64, Vec<Option<Array2<f64>>>) {
    let mut inject: Vec<Option<Array2<f64>>> = vec![None; spec.layers().len() + 1];
    let mut bn_loss = 0.0;
    for (slot, i) in spec.bn_layers().enumerate() {
        let (l, g) = moment_alignment(&trace.activation(i).view(), &target.layers[slot]);
        bn_loss += l;
        inject[i] = Some(g);
    }
    let mut feature_loss = 0.0;
    if feature_weight > 0.0 {
        for (slot, i) in spec.relu_layers().enumerate() {
            let Some(t) = target.features.get(slot) else { continue };
            let (l, g) = moment_alignment(&trace.activation(i + 1).view(), t);
            feature_loss += l;
            let g = g * feature_weight;
            inject[i + 1] = Some(match inject[i + 1].take() {
                Some(prev) => prev + g,
                None => g,
            });
        }
    }
    (bn_loss, feature_loss, inject)
}

/// 1-D total variation surrogate `sum_j (x_{j+1} - x_j)^2` per row (or over
/// both grid directions), averaged over rows, with its gradient.
pub fn total_variation(x: &ArrayView2<f64>, grid: Option<[usize; 2]>) -> (f64, Array2<f64>) {
    let n = x.nrows().max(1) as f64;
    let mut grad = Array2::zeros(x.raw_dim());
    let mut value = 0.0;
    let pairs: Vec<(usize, usize)> = match grid {
        Some([rows, cols]) if rows * cols == x.ncols() => {
            let mut p = Vec::new();
            for r in 0..rows {
                for c in 0..cols {
                    let at = r * cols + c;
                    if c + 1 < cols {
                        p.push((at, at + 1));
                    }
                    if r + 1 < rows {
                        p.push((at, at + cols));
                    }
                }
            }
            p
        }
        _ => (0..x.ncols().saturating_sub(1)).map(|j| (j, j + 1)).collect(),
    };
    for (row, mut g) in x.outer_iter().zip(grad.outer_iter_mut()) {
        for &(a, b) in &pairs {
            let d = row[b] - row[a];
            value += d * d;
            g[b] += 2.0 * d / n;
            g[a] -= 2.0 * d / n;
        }
    }
    (value / n, grad)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveParts {
    pub bn: f64,
    pub tv: f64,
    pub l2: f64,
    pub feature: f64,
    pub label: f64,
    pub total: f64,
}

fn objective(
    spec: &NetSpec,
    params: &[f64],
    x: &Array2<f64>,
    target: &BnStatSet,
    labels: &[usize],
    hp: &ReplayHyperparams,
) -> Result<(ObjectiveParts, Array2<f64>)> {
    let (logits, trace) = forward(spec, params, x.view(), target, Mode::Eval)?;
    let (bn, feature, inject) = statistic_terms(spec, &trace, target, hp.feature);
    let (label, d_logits) = if hp.label_weight > 0.0 {
        let (l, g) = softmax_cross_entropy(&logits, labels)?;
        (l, g * hp.label_weight)
    } else {
        (0.0, Array2::zeros(logits.raw_dim()))
    };
    let (_, mut grad) = backward(spec, params, &trace, d_logits, Some(&inject))?;
    let (tv, tv_grad) = total_variation(&x.view(), hp.grid);
    grad.scaled_add(hp.tv, &tv_grad);
    let l2 = x.mapv(|v| v * v).sum() / x.nrows() as f64;
    grad.scaled_add(2.0 * hp.l2 / x.nrows() as f64, x);
    let parts = ObjectiveParts {
        bn,
        tv,
        l2,
        feature,
        label,
        total: bn + hp.tv * tv + hp.l2 * l2 + hp.feature * feature + hp.label_weight * label,
    };
    Ok((parts, grad))
}

#[derive(Debug, Clone)]
pub struct Synthesis {
    pub inputs: Array2<f64>,
    pub initial: ObjectiveParts,
    pub best: ObjectiveParts,
    /// Iteration at which the returned iterate was reached (0 = initial noise).
    pub best_iteration: usize,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Inverts `params` for one batch of labels: starts from seeded standard
/// normal noise and runs Adam with a cosine-decayed step on the full
/// objective, clamping after each step. Returns the best iterate seen, so the
/// final objective never exceeds the initial one.
pub fn synthesize(
    spec: &NetSpec,
    params: &[f64],
    target: &BnStatSet,
    labels: &[usize],
    hp: &ReplayHyperparams,
    seed: u64,
) -> Result<Synthesis> {
    hp.validate()?;
    spec.check_params(params)?;
    target.check(spec)?;
    if labels.is_empty() {
        return Err(Error::Input("synthesis needs at least one label".into()));
    }
    if let Some(bad) = labels.iter().find(|&&y| y >= spec.classes()) {
        return Err(Error::Input(format!("label {bad} out of range")));
    }
    let mut r = rng::stream(seed, rng::SYNTHESIS, &[]);
    let mut x = Array2::from_shape_fn((labels.len(), spec.input_dim()), |_| {
        r.sample::<f64, _>(StandardNormal).clamp(-hp.clamp, hp.clamp)
    });
    let mut m = Array2::<f64>::zeros(x.raw_dim());
    let mut v = Array2::<f64>::zeros(x.raw_dim());

    let numeric = |it: usize, what: &str| Error::Numeric {
        phase: "synthesis".into(),
        detail: format!("non-finite {what} at iteration {it}"),
    };
    let (initial, mut grad) = objective(spec, params, &x, target, labels, hp).map_err(|e| match e {
        Error::Numeric { .. } => numeric(0, "objective"),
        other => other,
    })?;
    if !initial.total.is_finite() {
        return Err(numeric(0, "objective"));
    }
    let mut best = (initial, x.clone(), 0);
    for it in 1..=hp.iterations {
        let lr = cosine_lr(it - 1, hp.iterations, hp.step);
        let t = it as i32;
        let c1 = 1.0 - ADAM_BETA1.powi(t);
        let c2 = 1.0 - ADAM_BETA2.powi(t);
        ndarray::Zip::from(&mut x)
            .and(&mut m)
            .and(&mut v)
            .and(&grad)
            .for_each(|x, m, v, &g| {
                *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                *x -= lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
                *x = x.clamp(-hp.clamp, hp.clamp);
            });
        let (parts, g) = objective(spec, params, &x, target, labels, hp).map_err(|e| match e {
            Error::Numeric { .. } => numeric(it, "activations"),
            other => other,
        })?;
        if !parts.total.is_finite() || g.iter().any(|v| !v.is_finite()) {
            return Err(numeric(it, "objective"));
        }
        if parts.total < best.0.total {
            best = (parts, x.clone(), it);
        }
        grad = g;
    }
    Ok(Synthesis {
        inputs: best.1,
        initial,
        best: best.0,
        best_iteration: best.2,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticPool {
    pub source_batch: usize,
    pub inputs: Array2<f64>,
    pub labels: Vec<usize>,
    pub model_id: String,
    pub stats_id: String,
}

pub(crate) fn digest_f64<'a>(values: impl IntoIterator<Item = &'a f64>) -> String {
    let mut h = Sha256::new();
    for v in values {
        h.update(v.to_le_bytes());
    }
    hex::encode(&h.finalize()[..8])
}

pub fn stats_digest(stats: &BnStatSet) -> String {
    digest_f64(
        stats
            .layers
            .iter()
            .chain(&stats.features)
            .flat_map(|l| l.mean.iter().chain(&l.var)),
    )
}

impl SyntheticPool {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn label_counts(&self, classes: usize) -> Vec<usize> {
        let mut counts = vec![0; classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// `b"PFSP"`, batch, n, d (u64 LE), the two provenance ids as
    /// length-prefixed UTF-8, inputs row-major as f64 LE, labels as u32 LE.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(POOL_MAGIC);
        for v in [self.source_batch, self.inputs.nrows(), self.inputs.ncols()] {
            out.extend_from_slice(&(v as u64).to_le_bytes());
        }
        for id in [&self.model_id, &self.stats_id] {
            out.extend_from_slice(&(id.len() as u64).to_le_bytes());
            out.extend_from_slice(id.as_bytes());
        }
        for v in self.inputs.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for &y in &self.labels {
            out.extend_from_slice(&(y as u32).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = || Error::Input("malformed synthetic pool blob".into());
        let mut at = 0usize;
        let mut take = |len: usize| -> Result<&[u8]> {
            let s = bytes.get(at..at + len).ok_or_else(bad)?;
            at += len;
            Ok(s)
        };
        if take(4)? != POOL_MAGIC {
            return Err(bad());
        }
        let mut word = || -> Result<u64> { Ok(u64::from_le_bytes(take(8)?.try_into().expect("8"))) };
        let (batch, n, d) = (word()? as usize, word()? as usize, word()? as usize);
        let mut ids = Vec::new();
        for _ in 0..2 {
            let len = u64::from_le_bytes(take(8)?.try_into().expect("8")) as usize;
            ids.push(String::from_utf8(take(len)?.to_vec()).map_err(|_| bad())?);
        }
        let values: Vec<f64> = take(n * d * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8")))
            .collect();
        let labels = take(n * 4)?
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().expect("4")) as usize)
            .collect();
        let stats_id = ids.pop().expect("two ids");
        let model_id = ids.pop().expect("two ids");
        Ok(Self {
            source_batch: batch,
            inputs: Array2::from_shape_vec((n, d), values).map_err(|_| bad())?,
            labels,
            model_id,
            stats_id,
        })
    }
}

const POOL_MAGIC: &[u8; 4] = b"PFSP";

/// Synthesizes `images_per_class` samples of every class against batch
/// `batch`'s pooled statistics and representative masked model.
pub fn build_pool(
    spec: &NetSpec,
    model: &[f64],
    target: &BnStatSet,
    batch: usize,
    hp: &ReplayHyperparams,
    seed: u64,
) -> Result<SyntheticPool> {
    build_pool_traced(spec, model, target, batch, hp, seed).map(|(pool, _)| pool)
}

/// [`build_pool`] that also returns the objective values of the synthesis.
pub fn build_pool_traced(
    spec: &NetSpec,
    model: &[f64],
    target: &BnStatSet,
    batch: usize,
    hp: &ReplayHyperparams,
    seed: u64,
) -> Result<(SyntheticPool, Synthesis)> {
    if batch < 2 {
        return Err(Error::State(format!(
            "replay pools exist only for batches after the first (got batch {batch})"
        )));
    }
    let labels: Vec<usize> = (0..hp.images_per_class).flat_map(|_| 0..spec.classes()).collect();
    if labels.is_empty() {
        return Err(Error::Input("images_per_class must be >= 1".into()));
    }
    let s = synthesize(spec, model, target, &labels, hp, seed)?;
    let pool = SyntheticPool {
        source_batch: batch,
        inputs: s.inputs.clone(),
        labels,
        model_id: digest_f64(model.iter()),
        stats_id: stats_digest(target),
    };
    Ok((pool, s))
}

/// What a model predicts on inputs synthesized against its own statistics
/// with the label term switched off.
#[derive(Debug, Clone)]
pub struct Evidence {
    /// Mean predicted probability per class. A class the model never
    /// predicts on inputs matching its statistics has no evidence behind it.
    pub share: Vec<f64>,
    pub inputs: Array2<f64>,
    /// Arg-max prediction per row of `inputs`.
    pub predicted: Vec<usize>,
}

pub fn class_evidence(
    spec: &NetSpec,
    params: &[f64],
    stats: &BnStatSet,
    hp: &ReplayHyperparams,
    seed: u64,
) -> Result<Evidence> {
    let n = (hp.images_per_class * spec.classes()).max(2);
    let free = ReplayHyperparams {
        label_weight: 0.0,
        ..hp.clone()
    };
    let s = synthesize(spec, params, stats, &vec![0; n], &free, seed)?;
    let (logits, _) = forward(spec, params, s.inputs.view(), stats, Mode::Eval)?;
    let mut share = vec![0.0; spec.classes()];
    let mut predicted = Vec::with_capacity(n);
    for row in logits.rows() {
        let top = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let z: f64 = row.iter().map(|v| (v - top).exp()).sum();
        share
            .iter_mut()
            .zip(row.iter())
            .for_each(|(s, v)| *s += (v - top).exp() / z / n as f64);
        predicted.push(row.iter().position(|&v| v == top).unwrap_or(0));
    }
    Ok(Evidence {
        share,
        inputs: s.inputs,
        predicted,
    })
}

/// Restricts `pool` to the classes for which `evidence` reaches
/// `min_evidence`, then appends the evidence inputs labeled with the model's
/// own predictions.
pub fn rehearsal_pool(pool: &SyntheticPool, evidence: &Evidence, min_evidence: f64) -> SyntheticPool {
    let keep: Vec<usize> = (0..pool.len())
        .filter(|&i| evidence.share.get(pool.labels[i]).is_some_and(|&s| s >= min_evidence))
        .collect();
    if keep.is_empty() {
        return SyntheticPool {
            inputs: Array2::zeros((0, pool.inputs.ncols())),
            labels: Vec::new(),
            ..pool.clone()
        };
    }
    let fresh = pool.inputs.select(Axis(0), &keep);
    let inputs = ndarray::concatenate(Axis(0), &[fresh.view(), evidence.inputs.view()]).expect("same width");
    let mut labels: Vec<usize> = keep.iter().map(|&i| pool.labels[i]).collect();
    labels.extend(&evidence.predicted);
    SyntheticPool {
        inputs,
        labels,
        ..pool.clone()
    }
}

/// One model together with the statistics recorded under it.
#[derive(Debug, Clone, Copy)]
pub struct PoolSource<'a> {
    pub params: &'a [f64],
    pub stats: &'a BnStatSet,
}

#[derive(Debug, Clone)]
pub struct SourcedPool {
    pub pool: SyntheticPool,
    /// Per class, the largest evidence share over all sources.
    pub evidence: Vec<f64>,
    /// Classes left out of the pool for lack of evidence.
    pub dropped: Vec<usize>,
    /// `(source index, synthesis)` for every source that produced samples.
    pub runs: Vec<(usize, Synthesis)>,
}

/// Builds a pool from several models, each inverted against its own
/// statistics. Every class goes to the source showing the most evidence for
/// it; classes whose best evidence is below `min_evidence` are dropped.
pub fn build_pool_sourced(
    spec: &NetSpec,
    sources: &[PoolSource<'_>],
    batch: usize,
    hp: &ReplayHyperparams,
    min_evidence: f64,
    seed: u64,
) -> Result<SourcedPool> {
    if batch < 2 {
        return Err(Error::State(format!(
            "replay pools exist only for batches after the first (got batch {batch})"
        )));
    }
    if sources.is_empty() {
        return Err(Error::Input("pool needs at least one source".into()));
    }
    if hp.images_per_class == 0 {
        return Err(Error::Input("images_per_class must be >= 1".into()));
    }
    let evidence = sources
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let sd = rng::stream(seed, rng::SYNTHESIS, &[0, i as u64]).next_u64();
            class_evidence(spec, s.params, s.stats, hp, sd).map(|e| e.share)
        })
        .collect::<Result<Vec<_>>>()?;
    let classes = spec.classes();
    let mut owner = vec![0; classes];
    let mut best = evidence[0].clone();
    for (i, e) in evidence.iter().enumerate().skip(1) {
        for y in 0..classes {
            if e[y] > best[y] {
                best[y] = e[y];
                owner[y] = i;
            }
        }
    }
    let dropped: Vec<usize> = (0..classes).filter(|&y| best[y] < min_evidence).collect();
    let mut inputs = Vec::new();
    let mut labels = Vec::new();
    let mut runs = Vec::new();
    for (i, source) in sources.iter().enumerate() {
        let mine: Vec<usize> = (0..classes)
            .filter(|&y| owner[y] == i && !dropped.contains(&y))
            .collect();
        if mine.is_empty() {
            continue;
        }
        let ys: Vec<usize> = (0..hp.images_per_class).flat_map(|_| mine.iter().copied()).collect();
        let sd = rng::stream(seed, rng::SYNTHESIS, &[1, i as u64]).next_u64();
        let s = synthesize(spec, source.params, source.stats, &ys, hp, sd)?;
        inputs.push(s.inputs.clone());
        labels.extend(ys);
        runs.push((i, s));
    }
    let views: Vec<_> = inputs.iter().map(|a| a.view()).collect();
    let inputs = if views.is_empty() {
        Array2::zeros((0, spec.input_dim()))
    } else {
        ndarray::concatenate(Axis(0), &views).expect("same width")
    };
    let mut model = Sha256::new();
    let mut stats = Sha256::new();
    for s in sources {
        model.update(digest_f64(s.params.iter()));
        stats.update(stats_digest(s.stats));
    }
    let pool = SyntheticPool {
        source_batch: batch,
        inputs,
        labels,
        model_id: hex::encode(&model.finalize()[..8]),
        stats_id: hex::encode(&stats.finalize()[..8]),
    };
    Ok(SourcedPool {
        pool,
        evidence: best,
        dropped,
        runs,
    })
}

/// Eval-mode pool loss under `params` and the serving statistics `stats`.
pub fn pool_loss(spec: &NetSpec, params: &[f64], pool: &SyntheticPool, stats: &BnStatSet) -> Result<f64> {
    let (logits, _) = forward(spec, params, pool.inputs.view(), stats, Mode::Eval)?;
    Ok(softmax_cross_entropy(&logits, &pool.labels)?.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FinetuneSettings {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub minibatch: usize,
}

/// Fine-tunes a serving snapshot on a synthetic pool inside its frozen
/// subnetwork. Gradients are multiplied by the hard mask, so positions
/// outside it never move. Runs in eval mode against the serving statistics
/// and returns the epoch-end iterate with the lowest pool loss (the input
/// itself when no epoch improves on it). Optimization stops early if the
/// pool loss stops being finite.
pub fn finetune_prior(
    spec: &NetSpec,
    snapshot: &[f64],
    mask: &MaskState,
    pool: &SyntheticPool,
    stats: &BnStatSet,
    settings: &FinetuneSettings,
) -> Result<ParamVector> {
    if !mask.is_frozen() {
        return Err(Error::State(format!("mask of batch {} is not frozen", mask.batch)));
    }
    if pool.is_empty() {
        return Err(Error::Input("empty synthetic pool".into()));
    }
    spec.check_params(snapshot)?;
    check_len("mask", snapshot.len(), mask.len())?;
    let hard = mask.materialize(MaskMode::Hard);
    let mut params = ParamVector::from_vec(snapshot.to_vec());
    if settings.epochs == 0 || hard.iter().all(|v| *v == 0.0) {
        return Ok(params);
    }
    let mut best = (pool_loss(spec, &params, pool, stats)?, params.clone());
    let mut velocity = vec![0.0; params.len()];
    let n = pool.len();
    let mb = settings.minibatch.clamp(1, n);
    'epochs: for epoch in 0..settings.epochs {
        let offset = (epoch * mb) % n;
        let order: Vec<usize> = (0..n).map(|i| (i + offset) % n).collect();
        for chunk in order.chunks(mb) {
            let x = pool.inputs.select(Axis(0), chunk);
            let y: Vec<usize> = chunk.iter().map(|&i| pool.labels[i]).collect();
            let step = forward(spec, &params, x.view(), stats, Mode::Eval).and_then(|(logits, trace)| {
                let (_, d) = softmax_cross_entropy(&logits, &y)?;
                backward(spec, &params, &trace, d, None)
            });
            let mut g = match step {
                Ok((g, _)) if g.is_finite() => g,
                Ok(_) | Err(Error::Numeric { .. }) => break 'epochs,
                Err(e) => return Err(e),
            };
            g.iter_mut().zip(&hard).for_each(|(g, m)| *g *= m);
            sgd_step(&mut params, &g, settings.lr, settings.momentum, &mut velocity)?;
        }
        match pool_loss(spec, &params, pool, stats) {
            Ok(loss) if loss < best.0 => best = (loss, params.clone()),
            Ok(loss) if loss.is_finite() => {}
            Ok(_) | Err(Error::Numeric { .. }) => break,
            Err(e) => return Err(e),
        }
    }
    Ok(best.1)
}
