//! Server-side hypernetwork mapping client embeddings to full parameter
//! vectors of the client network.
//!
//! The map is `theta = W2 * relu(W1 * e + b1) + b2`. The output bias `b2` is
//! initialized to a standard initialization of the target network so that a
//! fresh hypernetwork already emits a trainable model for every embedding.

use ndarray::{ArrayView1, ArrayView2};
use rand::Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::nn::{NetSpec, ParamVector};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientEmbedding {
    pub client_id: u64,
    pub values: Vec<f64>,
}

/// Entries i.i.d. normal with standard deviation `1/sqrt(d)`, seeded by
/// `(seed, client_id)`.
pub fn init_embedding(client_id: u64, d: usize, seed: u64) -> Result<ClientEmbedding> {
    if d == 0 {
        return Err(Error::Input("embedding dimension must be at least 1".into()));
    }
    let dist = Normal::new(0.0, 1.0 / (d as f64).sqrt()).expect("positive std");
    let mut r = rng::stream(seed, rng::EMBEDDING, &[client_id]);
    Ok(ClientEmbedding {
        client_id,
        values: (0..d).map(|_| r.sample(dist)).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HypernetState {
    phi: ParamVector,
    embed_dim: usize,
    hidden: usize,
    target: usize,
}

impl HypernetState {
    pub fn new<R: Rng + ?Sized>(embed_dim: usize, hidden: usize, target: &NetSpec, rng: &mut R) -> Result<Self> {
        let mut state = Self::zeros(embed_dim, hidden, target.param_count())?;
        let (w1, _, w2, b2) = state.offsets();
        let glorot = |fan_in: usize, fan_out: usize| (6.0 / (fan_in + fan_out) as f64).sqrt();
        let l1 = glorot(embed_dim, hidden);
        for w in &mut state.phi[w1.clone()] {
            *w = rng.random_range(-l1..l1);
        }
        let l2 = glorot(hidden, state.target);
        for w in &mut state.phi[w2.clone()] {
            *w = rng.random_range(-l2..l2);
        }
        let base = target.init_params(rng);
        state.phi[b2].copy_from_slice(&base);
        Ok(state)
    }

    pub fn zeros(embed_dim: usize, hidden: usize, target: usize) -> Result<Self> {
        if embed_dim == 0 || hidden == 0 {
            return Err(Error::Input(
                "hypernetwork needs embedding dimension and hidden width >= 1".into(),
            ));
        }
        let len = embed_dim * hidden + hidden + hidden * target + target;
        Ok(Self {
            phi: ParamVector::zeros(len),
            embed_dim,
            hidden,
            target,
        })
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn target_len(&self) -> usize {
        self.target
    }

    pub fn phi(&self) -> &ParamVector {
        &self.phi
    }

    pub fn phi_mut(&mut self) -> &mut ParamVector {
        &mut self.phi
    }

    fn offsets(
        &self,
    ) -> (
        std::ops::Range<usize>,
        std::ops::Range<usize>,
        std::ops::Range<usize>,
        std::ops::Range<usize>,
    ) {
        let (d, h, t) = (self.embed_dim, self.hidden, self.target);
        let w1 = 0..d * h;
        let b1 = w1.end..w1.end + h;
        let w2 = b1.end..b1.end + h * t;
        let b2 = w2.end..w2.end + t;
        (w1, b1, w2, b2)
    }

    fn hidden_pre(&self, e: &[f64]) -> Vec<f64> {
        let (w1, b1, _, _) = self.offsets();
        let w1 = ArrayView2::from_shape((self.embed_dim, self.hidden), &self.phi[w1]).expect("w1");
        let pre = ArrayView1::from(e).dot(&w1) + ArrayView1::from(&self.phi[b1]);
        pre.to_vec()
    }

    /// `theta_c = H(e_c; phi)`.
    pub fn generate(&self, e: &ClientEmbedding) -> Result<ParamVector> {
        check_len("client embedding", self.embed_dim, e.values.len())?;
        let (_, _, w2, b2) = self.offsets();
        let hidden: Vec<f64> = self.hidden_pre(&e.values).into_iter().map(|v| v.max(0.0)).collect();
        let w2 = ArrayView2::from_shape((self.hidden, self.target), &self.phi[w2]).expect("w2");
        let theta = ArrayView1::from(&hidden).dot(&w2) + ArrayView1::from(&self.phi[b2]);
        Ok(ParamVector::from_vec(theta.to_vec()))
    }

    /// Vector-Jacobian products of `generate` against a cotangent on theta:
    /// returns `(J_phi^T delta, J_e^T delta)`.
    pub fn backprop(&self, e: &ClientEmbedding, delta_theta: &[f64]) -> Result<(ParamVector, Vec<f64>)> {
        check_len("client embedding", self.embed_dim, e.values.len())?;
        check_len("parameter cotangent", self.target, delta_theta.len())?;
        let (w1r, b1r, w2r, b2r) = self.offsets();
        let pre = self.hidden_pre(&e.values);
        let mut grad = ParamVector::zeros(self.phi.len());

        grad[b2r].copy_from_slice(delta_theta);
        {
            let gw2 = &mut grad[w2r.clone()];
            for (k, &pk) in pre.iter().enumerate() {
                if pk > 0.0 {
                    let row = &mut gw2[k * self.target..(k + 1) * self.target];
                    row.iter_mut().zip(delta_theta).for_each(|(g, d)| *g = pk * d);
                }
            }
        }

        let w2 = ArrayView2::from_shape((self.hidden, self.target), &self.phi[w2r]).expect("w2");
        let mut d_hidden = w2.dot(&ArrayView1::from(delta_theta));
        for (dh, &pk) in d_hidden.iter_mut().zip(&pre) {
            if pk <= 0.0 {
                *dh = 0.0;
            }
        }
        grad[b1r].copy_from_slice(d_hidden.as_slice().expect("contiguous"));
        {
            let gw1 = &mut grad[w1r.clone()];
            for (i, &ei) in e.values.iter().enumerate() {
                let row = &mut gw1[i * self.hidden..(i + 1) * self.hidden];
                row.iter_mut().zip(d_hidden.iter()).for_each(|(g, d)| *g = ei * d);
            }
        }
        let w1 = ArrayView2::from_shape((self.embed_dim, self.hidden), &self.phi[w1r]).expect("w1");
        let grad_e = w1.dot(&d_hidden).to_vec();
        Ok((grad, grad_e))
    }

    /// `phi <- phi - lr * grad`.
    pub fn apply_gradient(&mut self, grad: &[f64], lr: f64) -> Result<()> {
        check_len("hypernetwork gradient", self.phi.len(), grad.len())?;
        self.phi.iter_mut().zip(grad).for_each(|(p, g)| *p -= lr * g);
        Ok(())
    }
}
