//! Batch-specific relaxed-binary parameter masks.
//!
//! A mask holds one logit per client-network parameter. Its soft value is
//! `sigmoid(gamma * s)`; the hard value thresholds the soft value at 0.5.
//! Once a batch completes its mask is frozen and the hardened bits are
//! cached for good.

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::hypernet::{ClientEmbedding, HypernetState};
use crate::nn::{loss_and_grads, BnStatSet, LayerKind, Mode, NetSpec, ParamVector};

pub const HARD_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    Soft,
    Hard,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskState {
    pub batch: usize,
    logits: Vec<f64>,
    gamma: f64,
    frozen: bool,
    hardened: Option<Vec<bool>>,
}

impl MaskState {
    pub fn new(batch: usize, logits: Vec<f64>, gamma: f64) -> Result<Self> {
        if !(gamma > 0.0) {
            return Err(Error::Input(format!("mask scaling factor must be > 0, got {gamma}")));
        }
        Ok(Self {
            batch,
            logits,
            gamma,
            frozen: false,
            hardened: None,
        })
    }

    /// Logits for a new batch: `reuse_logit` where an earlier frozen mask is
    /// active, `fresh_logit` elsewhere.
    pub fn reuse_biased(
        batch: usize,
        len: usize,
        gamma: f64,
        earlier: &[MaskState],
        reuse_logit: f64,
        fresh_logit: f64,
    ) -> Result<Self> {
        let mut logits = vec![fresh_logit; len];
        for m in earlier {
            check_len("earlier mask", len, m.len())?;
            let bits = m
                .hardened
                .as_ref()
                .ok_or_else(|| Error::State(format!("mask of batch {} is not frozen", m.batch)))?;
            for (l, &b) in logits.iter_mut().zip(bits) {
                if b {
                    *l = reuse_logit;
                }
            }
        }
        Self::new(batch, logits, gamma)
    }

    pub fn len(&self) -> usize {
        self.logits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logits.is_empty()
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn set_gamma(&mut self, gamma: f64) -> Result<()> {
        self.ensure_mutable()?;
        if !(gamma > 0.0) {
            return Err(Error::Input(format!("mask scaling factor must be > 0, got {gamma}")));
        }
        self.gamma = gamma;
        Ok(())
    }

    fn ensure_mutable(&self) -> Result<()> {
        if self.frozen {
            Err(Error::State(format!("mask of batch {} is frozen", self.batch)))
        } else {
            Ok(())
        }
    }

    pub fn materialize(&self, mode: MaskMode) -> Vec<f64> {
        match (mode, &self.hardened) {
            (MaskMode::Hard, Some(bits)) => bits.iter().map(|&b| f64::from(u8::from(b))).collect(),
            (MaskMode::Hard, None) => self
                .logits
                .iter()
                .map(|&s| f64::from(u8::from(sigmoid(self.gamma * s) >= HARD_THRESHOLD)))
                .collect(),
            (MaskMode::Soft, _) => self.logits.iter().map(|&s| sigmoid(self.gamma * s)).collect(),
        }
    }

    /// Hardened bits; only available once frozen.
    pub fn bits(&self) -> Option<&[bool]> {
        self.hardened.as_deref()
    }

    pub fn freeze(&mut self) {
        if self.frozen {
            return;
        }
        let bits = self
            .logits
            .iter()
            .map(|&s| sigmoid(self.gamma * s) >= HARD_THRESHOLD)
            .collect();
        self.hardened = Some(bits);
        self.frozen = true;
    }

    pub fn frozen(mut self) -> Self {
        self.freeze();
        self
    }

    /// `s <- s - lr * grad`; rejected once frozen.
    pub fn apply_gradient(&mut self, grad: &[f64], lr: f64) -> Result<()> {
        self.ensure_mutable()?;
        check_len("mask gradient", self.logits.len(), grad.len())?;
        self.logits.iter_mut().zip(grad).for_each(|(s, g)| *s -= lr * g);
        Ok(())
    }

    pub fn active_count(&self) -> usize {
        self.materialize(MaskMode::Hard).iter().filter(|v| **v == 1.0).count()
    }

    /// Bit-packed encoding of a frozen mask:
    /// `b"PFDM"`, batch (u64 LE), gamma (f64 LE), length (u64 LE), then the
    /// bits LSB-first, zero padded to a whole byte.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let bits = self
            .hardened
            .as_ref()
            .ok_or_else(|| Error::State(format!("mask of batch {} is not frozen", self.batch)))?;
        let mut out = Vec::with_capacity(28 + bits.len().div_ceil(8));
        out.extend_from_slice(MASK_MAGIC);
        out.extend_from_slice(&(self.batch as u64).to_le_bytes());
        out.extend_from_slice(&self.gamma.to_le_bytes());
        out.extend_from_slice(&(bits.len() as u64).to_le_bytes());
        for chunk in bits.chunks(8) {
            let byte = chunk
                .iter()
                .enumerate()
                .fold(0u8, |acc, (i, &b)| acc | (u8::from(b) << i));
            out.push(byte);
        }
        Ok(out)
    }

    /// Decodes [`MaskState::to_bytes`]. The result is frozen; its logits are
    /// reconstructed as `+-1` so the soft view agrees with the bits.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |what: &str| Error::Input(format!("malformed mask blob: {what}"));
        if bytes.len() < 28 || &bytes[..4] != MASK_MAGIC {
            return Err(bad("header"));
        }
        let word = |at: usize| -> [u8; 8] { bytes[at..at + 8].try_into().expect("8 bytes") };
        let batch = u64::from_le_bytes(word(4)) as usize;
        let gamma = f64::from_le_bytes(word(12));
        let len = u64::from_le_bytes(word(20)) as usize;
        let body = &bytes[28..];
        if body.len() != len.div_ceil(8) {
            return Err(bad("length"));
        }
        let bits: Vec<bool> = (0..len).map(|j| body[j / 8] >> (j % 8) & 1 == 1).collect();
        let logits = bits.iter().map(|&b| if b { 1.0 } else { -1.0 }).collect();
        Ok(Self {
            batch,
            logits,
            gamma,
            frozen: true,
            hardened: Some(bits),
        })
    }
}

const MASK_MAGIC: &[u8; 4] = b"PFDM";

/// `mask ⊙ theta`.
pub fn apply(mask: &[f64], theta: &[f64]) -> Result<ParamVector> {
    check_len("mask", theta.len(), mask.len())?;
    Ok(mask.iter().zip(theta).map(|(m, t)| m * t).collect::<Vec<_>>().into())
}

#[derive(Debug, Clone)]
pub struct MaskGrads {
    pub grad_logits: Vec<f64>,
    pub task_loss: f64,
    pub l1: f64,
    /// Gradient of the task loss with respect to the masked parameters.
    pub masked_param_grads: ParamVector,
}

/// Gradient of `L(sigmoid(gamma s) ⊙ H(e; phi), D) + lambda * sum_j sigmoid(gamma s_j)`
/// with respect to the logits `s`, through the soft relaxation.
#[allow(clippy::too_many_arguments)]
pub fn mask_grads(
    spec: &NetSpec,
    hypernet: &HypernetState,
    embedding: &ClientEmbedding,
    mask: &MaskState,
    inputs: ArrayView2<f64>,
    labels: &[usize],
    stats: &BnStatSet,
    lambda: f64,
) -> Result<MaskGrads> {
    mask.ensure_mutable()?;
    if !(lambda >= 0.0) {
        return Err(Error::Input(format!("lambda must be >= 0, got {lambda}")));
    }
    let theta = hypernet.generate(embedding)?;
    check_len("mask", theta.len(), mask.len())?;
    let soft = mask.materialize(MaskMode::Soft);
    let masked = apply(&soft, &theta)?;
    let lg = loss_and_grads(spec, &masked, inputs, labels, stats, Mode::Train)?;
    let gamma = mask.gamma;
    let grad_logits = soft
        .iter()
        .zip(theta.iter())
        .zip(lg.param_grads.iter())
        .map(|((&v, &t), &g)| {
            let dv = gamma * v * (1.0 - v);
            (g * t + lambda) * dv
        })
        .collect();
    let l1 = lambda * soft.iter().sum::<f64>();
    Ok(MaskGrads {
        grad_logits,
        task_loss: lg.loss,
        l1,
        masked_param_grads: lg.param_grads,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCapacity {
    pub layer: usize,
    pub params_total: usize,
    pub params_active: usize,
    pub neurons_total: usize,
    pub neurons_active: usize,
    pub neurons_reused: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchCapacity {
    pub batch: usize,
    pub active: usize,
    pub newly_activated: usize,
    pub reused: usize,
    pub reuse_fraction: f64,
    pub active_fraction: f64,
    /// Distinct parameters active in this or any earlier batch.
    pub cumulative_active: usize,
    pub layers: Vec<LayerCapacity>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapacityReport {
    pub total_params: usize,
    pub batches: Vec<BatchCapacity>,
    /// Fraction of dense-layer neurons active in at least one batch.
    pub neurons_used_fraction: f64,
}

impl CapacityReport {
    /// Fraction of parameters switched off, averaged over batches.
    pub fn mean_sparsity(&self) -> f64 {
        if self.batches.is_empty() {
            return 0.0;
        }
        1.0 - self.batches.iter().map(|b| b.active_fraction).sum::<f64>() / self.batches.len() as f64
    }

    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("batch,layer,params_total,params_active,neurons_total,neurons_active,neurons_reused\n");
        for b in &self.batches {
            out.push_str(&format!("{},all,{},{},,,\n", b.batch, self.total_params, b.active));
            for l in &b.layers {
                out.push_str(&format!(
                    "{},{},{},{},{},{},{}\n",
                    b.batch,
                    l.layer,
                    l.params_total,
                    l.params_active,
                    l.neurons_total,
                    l.neurons_active,
                    l.neurons_reused
                ));
            }
        }
        out
    }
}

/// Capacity accounting over frozen masks in batch order. A dense-layer
/// output neuron counts as active when any of its incoming weights is.
pub fn capacity_report(spec: &NetSpec, masks: &[MaskState]) -> Result<CapacityReport> {
    let total = spec.param_count();
    let mut bit_sets = Vec::with_capacity(masks.len());
    for m in masks {
        check_len("mask", total, m.len())?;
        let bits = m
            .bits()
            .ok_or_else(|| Error::State(format!("mask of batch {} is not frozen", m.batch)))?;
        bit_sets.push(bits);
    }

    let neuron_bits = |bits: &[bool], layer: usize| -> Vec<bool> {
        let l = spec.layers()[layer];
        let w = &bits[spec.param_range(layer)];
        (0..l.fan_out)
            .map(|j| (0..l.fan_in).any(|i| w[i * l.fan_out + j]))
            .collect()
    };
    let dense: Vec<usize> = spec
        .layers()
        .iter()
        .enumerate()
        .filter(|(_, l)| l.kind == LayerKind::Dense)
        .map(|(i, _)| i)
        .collect();
    let neurons_total: usize = dense.iter().map(|&i| spec.layers()[i].fan_out).sum();

    let mut seen = vec![false; total];
    let mut seen_neurons: Vec<Vec<bool>> = dense.iter().map(|&i| vec![false; spec.layers()[i].fan_out]).collect();
    let mut batches = Vec::with_capacity(masks.len());
    for (m, bits) in masks.iter().zip(&bit_sets) {
        let active = bits.iter().filter(|b| **b).count();
        let reused = bits.iter().zip(&seen).filter(|(b, s)| **b && **s).count();
        let mut layers = Vec::new();
        for (i, layer) in spec.layers().iter().enumerate() {
            if layer.kind == LayerKind::Relu {
                continue;
            }
            let range = spec.param_range(i);
            let params_active = bits[range.clone()].iter().filter(|b| **b).count();
            let (neurons_total, neurons_active, neurons_reused) = match dense.iter().position(|&d| d == i) {
                Some(k) => {
                    let nb = neuron_bits(bits, i);
                    let reused = nb.iter().zip(&seen_neurons[k]).filter(|(a, s)| **a && **s).count();
                    (nb.len(), nb.iter().filter(|a| **a).count(), reused)
                }
                None => (0, 0, 0),
            };
            layers.push(LayerCapacity {
                layer: i,
                params_total: range.len(),
                params_active,
                neurons_total,
                neurons_active,
                neurons_reused,
            });
        }
        for (s, &b) in seen.iter_mut().zip(bits.iter()) {
            *s |= b;
        }
        for (k, &i) in dense.iter().enumerate() {
            for (s, a) in seen_neurons[k].iter_mut().zip(neuron_bits(bits, i)) {
                *s |= a;
            }
        }
        batches.push(BatchCapacity {
            batch: m.batch,
            active,
            newly_activated: active - reused,
            reused,
            reuse_fraction: if active == 0 {
                0.0
            } else {
                reused as f64 / active as f64
            },
            active_fraction: if total == 0 { 0.0 } else { active as f64 / total as f64 },
            cumulative_active: seen.iter().filter(|s| **s).count(),
            layers,
        });
    }
    let used: usize = seen_neurons.iter().flatten().filter(|s| **s).count();
    Ok(CapacityReport {
        total_params: total,
        batches,
        neurons_used_fraction: if neurons_total == 0 {
            0.0
        } else {
            used as f64 / neurons_total as f64
        },
    })
}
