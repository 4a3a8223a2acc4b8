use std::ops::{Deref, DerefMut, Range};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Dense,
    Batchnorm,
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl LayerSpec {
    pub fn dense(fan_in: usize, fan_out: usize) -> Self {
        Self {
            kind: LayerKind::Dense,
            fan_in,
            fan_out,
        }
    }

    pub fn batchnorm(width: usize) -> Self {
        Self {
            kind: LayerKind::Batchnorm,
            fan_in: width,
            fan_out: width,
        }
    }

    pub fn relu(width: usize) -> Self {
        Self {
            kind: LayerKind::Relu,
            fan_in: width,
            fan_out: width,
        }
    }

    pub fn param_count(&self) -> usize {
        match self.kind {
            LayerKind::Dense => self.fan_in * self.fan_out + self.fan_out,
            LayerKind::Batchnorm => 2 * self.fan_out,
            LayerKind::Relu => 0,
        }
    }
}

/// Architecture of a client network: a chain of dense, batchnorm and relu
/// layers over flat parameter vectors.
///
/// Dense weights are stored row-major as `[fan_in x fan_out]` followed by the
/// `fan_out` biases; batchnorm layers store `fan_out` scales then `fan_out`
/// shifts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetSpec {
    layers: Vec<LayerSpec>,
    input_dim: usize,
    classes: usize,
    pub bn_eps: f64,
    pub bn_momentum: f64,
    #[serde(skip)]
    offsets: Vec<usize>,
}

pub const DEFAULT_BN_EPS: f64 = 1e-5;
pub const DEFAULT_BN_MOMENTUM: f64 = 0.1;

impl NetSpec {
    pub fn new(layers: Vec<LayerSpec>, input_dim: usize, classes: usize) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Input("network needs at least one layer".into()));
        }
        let mut width = input_dim;
        for (i, layer) in layers.iter().enumerate() {
            if layer.fan_in != width {
                return Err(Error::Input(format!(
                    "layer {i} fan-in {} does not match incoming width {width}",
                    layer.fan_in
                )));
            }
            if layer.kind != LayerKind::Dense && layer.fan_in != layer.fan_out {
                return Err(Error::Input(format!("layer {i} is elementwise but changes width")));
            }
            width = layer.fan_out;
        }
        if width != classes {
            return Err(Error::Input(format!(
                "final width {width} does not match class count {classes}"
            )));
        }
        let mut spec = Self {
            layers,
            input_dim,
            classes,
            bn_eps: DEFAULT_BN_EPS,
            bn_momentum: DEFAULT_BN_MOMENTUM,
            offsets: Vec::new(),
        };
        spec.compute_offsets();
        Ok(spec)
    }

    /// `input -> H -> BN -> ReLU -> H -> BN -> ReLU -> classes`.
    pub fn mlp(input_dim: usize, hidden: usize, classes: usize) -> Result<Self> {
        Self::new(
            vec![
                LayerSpec::dense(input_dim, hidden),
                LayerSpec::batchnorm(hidden),
                LayerSpec::relu(hidden),
                LayerSpec::dense(hidden, hidden),
                LayerSpec::batchnorm(hidden),
                LayerSpec::relu(hidden),
                LayerSpec::dense(hidden, classes),
            ],
            input_dim,
            classes,
        )
    }

    pub fn with_bn(mut self, eps: f64, momentum: f64) -> Self {
        self.bn_eps = eps;
        self.bn_momentum = momentum;
        self
    }

    fn compute_offsets(&mut self) {
        let mut offsets = Vec::with_capacity(self.layers.len() + 1);
        let mut total = 0;
        for layer in &self.layers {
            offsets.push(total);
            total += layer.param_count();
        }
        offsets.push(total);
        self.offsets = offsets;
    }

    /// Rebuilds derived fields after deserialization.
    pub fn validated(self) -> Result<Self> {
        let (eps, momentum) = (self.bn_eps, self.bn_momentum);
        Ok(Self::new(self.layers, self.input_dim, self.classes)?.with_bn(eps, momentum))
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn param_count(&self) -> usize {
        *self.offsets.last().unwrap_or(&0)
    }

    pub fn param_range(&self, layer: usize) -> Range<usize> {
        self.offsets[layer]..self.offsets[layer + 1]
    }

    pub fn bn_layers(&self) -> impl Iterator<Item = usize> + '_ {
        self.kind_indices(LayerKind::Batchnorm)
    }

    pub fn relu_layers(&self) -> impl Iterator<Item = usize> + '_ {
        self.kind_indices(LayerKind::Relu)
    }

    fn kind_indices(&self, kind: LayerKind) -> impl Iterator<Item = usize> + '_ {
        self.layers
            .iter()
            .enumerate()
            .filter(move |(_, l)| l.kind == kind)
            .map(|(i, _)| i)
    }

    /// Glorot-uniform dense weights, zero biases, unit BN scale, zero BN shift.
    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamVector {
        let mut values = vec![0.0; self.param_count()];
        for (i, layer) in self.layers.iter().enumerate() {
            let range = self.param_range(i);
            let slot = &mut values[range];
            match layer.kind {
                LayerKind::Dense => {
                    let limit = (6.0 / (layer.fan_in + layer.fan_out) as f64).sqrt();
                    let weights = layer.fan_in * layer.fan_out;
                    for w in &mut slot[..weights] {
                        *w = rng.random_range(-limit..limit);
                    }
                }
                LayerKind::Batchnorm => {
                    slot[..layer.fan_out].fill(1.0);
                }
                LayerKind::Relu => {}
            }
        }
        ParamVector(values)
    }

    pub fn check_params(&self, params: &[f64]) -> Result<()> {
        check_len("parameter vector", self.param_count(), params.len())
    }
}

/// Flat parameter vector of one client network.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn from_vec(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

impl Deref for ParamVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for ParamVector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

impl From<Vec<f64>> for ParamVector {
    fn from(values: Vec<f64>) -> Self {
        Self(values)
    }
}
