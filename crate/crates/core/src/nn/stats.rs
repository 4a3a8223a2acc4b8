use serde::{Deserialize, Serialize};

use super::spec::NetSpec;
use crate::error::{check_len, Error, Result};

/// Running first and second moments of one layer's activations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: u64,
}

impl LayerStats {
    pub fn fresh(width: usize) -> Self {
        Self {
            mean: vec![0.0; width],
            var: vec![1.0; width],
            count: 0,
        }
    }

    pub fn width(&self) -> usize {
        self.mean.len()
    }

    /// Exponential moving average toward a batch's moments.
    pub fn blend(&mut self, mean: &[f64], var: &[f64], n: usize, momentum: f64, floor: f64) {
        for (r, m) in self.mean.iter_mut().zip(mean) {
            *r = (1.0 - momentum) * *r + momentum * m;
        }
        for (r, v) in self.var.iter_mut().zip(var) {
            *r = ((1.0 - momentum) * *r + momentum * v).max(floor);
        }
        self.count += n as u64;
    }
}

/// Stored normalization statistics: one entry per batchnorm layer in spec
/// order, plus post-activation moments for each relu layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BnStatSet {
    pub layers: Vec<LayerStats>,
    pub features: Vec<LayerStats>,
}

impl BnStatSet {
    pub fn fresh(spec: &NetSpec) -> Self {
        let width = |i: usize| spec.layers()[i].fan_out;
        Self {
            layers: spec.bn_layers().map(|i| LayerStats::fresh(width(i))).collect(),
            features: spec.relu_layers().map(|i| LayerStats::fresh(width(i))).collect(),
        }
    }

    pub fn check(&self, spec: &NetSpec) -> Result<()> {
        let bn: Vec<usize> = spec.bn_layers().collect();
        check_len("batchnorm statistics", bn.len(), self.layers.len())?;
        for (stats, &i) in self.layers.iter().zip(&bn) {
            check_len("batchnorm width", spec.layers()[i].fan_out, stats.width())?;
            check_len("batchnorm variance", stats.width(), stats.var.len())?;
            if stats.var.iter().any(|v| !(*v > 0.0)) {
                return Err(Error::Numeric {
                    phase: "batchnorm statistics".into(),
                    detail: "non-positive running variance".into(),
                });
            }
        }
        Ok(())
    }

    pub fn total_count(&self) -> u64 {
        self.layers.first().map_or(0, |l| l.count)
    }
}
