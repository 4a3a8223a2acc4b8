//! Synthetic classification data and non-IID client partitioning.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{weighted::WeightedIndex, Distribution, Gamma, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub inputs: Array2<f64>,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub seed: u64,
}

impl LabeledDataset {
    pub fn new(inputs: Array2<f64>, labels: Vec<usize>, classes: usize, seed: u64) -> Result<Self> {
        if labels.is_empty() || inputs.nrows() != labels.len() {
            return Err(Error::Input(format!(
                "dataset needs n >= 1 rows matching labels ({} rows, {} labels)",
                inputs.nrows(),
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::Input(format!("label {bad} >= class count {classes}")));
        }
        Ok(Self {
            inputs,
            labels,
            classes,
            seed,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn subset(&self, indices: &[usize]) -> (Array2<f64>, Vec<usize>) {
        (
            self.inputs.select(Axis(0), indices),
            indices.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    /// Flat binary layout: `n, d, classes` as little-endian u64, then the
    /// inputs row-major as f32, then the labels as u32.
    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        for v in [self.len(), self.dim(), self.classes] {
            w.write_all(&(v as u64).to_le_bytes())?;
        }
        for v in self.inputs.iter() {
            w.write_all(&(*v as f32).to_le_bytes())?;
        }
        for &y in &self.labels {
            w.write_all(&(y as u32).to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R, seed: u64) -> Result<Self> {
        let mut word = [0u8; 8];
        let mut header = [0usize; 3];
        for h in &mut header {
            r.read_exact(&mut word)?;
            *h = u64::from_le_bytes(word) as usize;
        }
        let [n, d, classes] = header;
        let mut raw = vec![0u8; n * d * 4];
        r.read_exact(&mut raw)?;
        let values: Vec<f64> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        let mut raw = vec![0u8; n * 4];
        r.read_exact(&mut raw)?;
        let labels = raw
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")) as usize)
            .collect();
        let inputs = Array2::from_shape_vec((n, d), values).map_err(|e| Error::Input(format!("dataset shape: {e}")))?;
        Self::new(inputs, labels, classes, seed)
    }

    pub fn load(path: &Path, seed: u64) -> Result<Self> {
        Self::read_binary(std::io::BufReader::new(std::fs::File::open(path)?), seed)
    }
}

/// Gaussian blobs: class `c` is `N(mu_c, spread^2 I)` with `mu_c` a seeded
/// random direction scaled to norm 3. Samples are laid out class by class.
pub fn gen_blobs(classes: usize, dim: usize, per_class: usize, spread: f64, seed: u64) -> Result<LabeledDataset> {
    if classes < 2 || dim < 2 || per_class == 0 {
        return Err(Error::Input(format!(
            "blobs need classes >= 2, dim >= 2, per_class >= 1 (got {classes}, {dim}, {per_class})"
        )));
    }
    if !(spread >= 0.0) {
        return Err(Error::Input(format!("spread must be >= 0, got {spread}")));
    }
    let mut r = rng::stream(seed, rng::DATA, &[]);
    let mut means: Vec<Vec<f64>> = Vec::with_capacity(classes);
    while means.len() < classes {
        let v: Vec<f64> = (0..dim).map(|_| r.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-9 {
            continue;
        }
        let mu: Vec<f64> = v.iter().map(|x| 3.0 * x / norm).collect();
        let distinct = means
            .iter()
            .all(|m| m.iter().zip(&mu).map(|(a, b)| (a - b).powi(2)).sum::<f64>() > 1e-6);
        if distinct {
            means.push(mu);
        }
    }
    let noise = Normal::new(0.0, spread).expect("finite spread");
    let n = classes * per_class;
    let mut inputs = Array2::zeros((n, dim));
    let mut labels = Vec::with_capacity(n);
    for (c, mu) in means.iter().enumerate() {
        for k in 0..per_class {
            let row = c * per_class + k;
            for j in 0..dim {
                inputs[[row, j]] = mu[j] + noise.sample(&mut r);
            }
            labels.push(c);
        }
    }
    LabeledDataset::new(inputs, labels, classes, seed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientSplit {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionPlan {
    pub alpha: f64,
    pub clients: Vec<ClientSplit>,
    /// 1-based onboarding batch of each client.
    pub batch_of: Vec<usize>,
}

impl PartitionPlan {
    pub fn clients_in_batch(&self, batch: usize) -> Vec<usize> {
        (0..self.batch_of.len())
            .filter(|&c| self.batch_of[c] == batch)
            .collect()
    }

    pub fn batch_count(&self) -> usize {
        self.batch_of.iter().copied().max().unwrap_or(0)
    }
}

/// Smallest client share produced by [`dirichlet_partition`]: one train and
/// one test sample.
pub const MIN_CLIENT_SAMPLES: usize = 2;

/// Label-skewed split: for each class draw `p ~ Dir(alpha 1_n)` and send each
/// class sample to a client drawn from `p`. Clients left below
/// [`MIN_CLIENT_SAMPLES`] steal one sample at a time from the largest client.
pub fn dirichlet_partition(
    labels: &[usize],
    classes: usize,
    n_clients: usize,
    alpha: f64,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    if n_clients == 0 {
        return Err(Error::Input("need at least one client".into()));
    }
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::Input(format!("Dirichlet alpha must be > 0, got {alpha}")));
    }
    if labels.len() < MIN_CLIENT_SAMPLES * n_clients {
        return Err(Error::Input(format!(
            "{} samples cannot cover {n_clients} clients with {MIN_CLIENT_SAMPLES} samples each",
            labels.len()
        )));
    }
    let mut r = rng::stream(seed, rng::PARTITION, &[]);
    let mut parts: Vec<Vec<usize>> = vec![Vec::new(); n_clients];
    let gamma = Gamma::new(alpha, 1.0).expect("alpha > 0");
    for c in 0..classes {
        let members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        if members.is_empty() {
            continue;
        }
        if n_clients == 1 {
            parts[0].extend(members);
            continue;
        }
        let mut draws: Vec<f64> = (0..n_clients).map(|_| gamma.sample(&mut r)).collect();
        let total: f64 = draws.iter().sum();
        if !(total > 0.0) || !total.is_finite() {
            draws.fill(1.0);
        }
        let picker = WeightedIndex::new(&draws).map_err(|e| Error::Numeric {
            phase: "dirichlet partition".into(),
            detail: e.to_string(),
        })?;
        for i in members {
            parts[picker.sample(&mut r)].push(i);
        }
    }
    while let Some(starved) = (0..n_clients).find(|&k| parts[k].len() < MIN_CLIENT_SAMPLES) {
        let largest = (0..n_clients)
            .max_by_key(|&k| (parts[k].len(), std::cmp::Reverse(k)))
            .expect("clients exist");
        let moved = parts[largest].pop().expect("largest client holds samples");
        parts[starved].push(moved);
    }
    for p in &mut parts {
        p.sort_unstable();
    }
    Ok(parts)
}

/// Shuffled split with `round(n * test_fraction)` test samples, clamped so
/// both sides are non-empty.
pub fn split_train_test<R: Rng + ?Sized>(indices: &[usize], test_fraction: f64, rng: &mut R) -> Result<ClientSplit> {
    if indices.len() < MIN_CLIENT_SAMPLES {
        return Err(Error::Input(format!(
            "client with {} samples cannot be split",
            indices.len()
        )));
    }
    let mut shuffled = indices.to_vec();
    shuffled.shuffle(rng);
    let n = shuffled.len();
    let test = ((n as f64 * test_fraction).round() as usize).clamp(1, n - 1);
    let mut train = shuffled.split_off(test);
    let mut test = shuffled;
    train.sort_unstable();
    test.sort_unstable();
    Ok(ClientSplit { train, test })
}

/// Seeded assignment of clients to onboarding batches; returns the 1-based
/// batch of each client.
pub fn schedule_batches(n_clients: usize, sizes: &[usize], seed: u64) -> Result<Vec<usize>> {
    let total: usize = sizes.iter().sum();
    if total != n_clients || sizes.contains(&0) {
        return Err(Error::Input(format!(
            "batch sizes {sizes:?} must be positive and sum to {n_clients} clients"
        )));
    }
    let mut order: Vec<usize> = (0..n_clients).collect();
    order.shuffle(&mut rng::stream(seed, rng::SCHEDULE, &[]));
    let mut batch_of = vec![0; n_clients];
    let mut at = 0;
    for (b, &size) in sizes.iter().enumerate() {
        for &c in &order[at..at + size] {
            batch_of[c] = b + 1;
        }
        at += size;
    }
    Ok(batch_of)
}

pub fn build_plan(
    dataset: &LabeledDataset,
    n_clients: usize,
    alpha: f64,
    test_fraction: f64,
    batch_sizes: &[usize],
    seed: u64,
) -> Result<PartitionPlan> {
    let parts = dirichlet_partition(&dataset.labels, dataset.classes, n_clients, alpha, seed)?;
    let clients = parts
        .iter()
        .enumerate()
        .map(|(k, idx)| {
            split_train_test(
                idx,
                test_fraction,
                &mut rng::stream(seed, rng::PARTITION, &[k as u64 + 1]),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PartitionPlan {
        alpha,
        clients,
        batch_of: schedule_batches(n_clients, batch_sizes, seed)?,
    })
}

/// Normalized label histogram of a set of sample indices.
pub fn label_histogram(labels: &[usize], indices: &[usize], classes: usize) -> Vec<f64> {
    let mut h = vec![0.0; classes];
    for &i in indices {
        h[labels[i]] += 1.0;
    }
    let n = indices.len().max(1) as f64;
    h.iter_mut().for_each(|v| *v /= n);
    h
}
