//! Round orchestration over the onboarding schedule, plus the baselines and
//! ablations that share it.

mod config;
mod local;
mod output;

use std::collections::BTreeMap;
use std::time::Instant;

use rand::RngCore;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use config::{
    sample_count, DataConfig, DataSource, ExperimentConfig, HypernetConfig, MaskConfig, Method, NetConfig,
    ReplayConfig, ReplaySource, ScheduleConfig, ENV_PREFIX,
};
pub use local::{average_stats, local_train, test_accuracy, LocalData, LocalSgd};
pub use output::{sha256_hex, write_run_dir, RunManifest, RUN_FILES};

use crate::data::{build_plan, gen_blobs, LabeledDataset, PartitionPlan};
use crate::error::{Error, Result};
use crate::hypernet::{init_embedding, ClientEmbedding, HypernetState};
use crate::masking::{self, capacity_report, mask_grads, CapacityReport, MaskMode, MaskState};
use crate::metrics::{summarize, Checkpoint, MetricRow, MetricsLedger};
use crate::nn::{calibrate_stats, cosine_lr, loss_and_grads, BnStatSet, Mode, NetSpec, ParamVector};
use crate::replay::{
    build_pool_sourced, build_pool_traced, capture_bn_stats, class_evidence, finetune_prior, rehearsal_pool,
    PoolSource, SyntheticPool,
};
use crate::rng;

#[derive(Debug, Clone)]
pub struct ClientRecord {
    pub id: u64,
    pub batch: usize,
    pub embedding: ClientEmbedding,
    pub data: LocalData,
    /// Running statistics from local training; replaced by calibrated
    /// serving statistics when the client's batch completes.
    pub stats: BnStatSet,
    /// Frozen serving parameters (masked methods) or the persistent local
    /// model (`local_only`).
    pub serving: Option<ParamVector>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    Onboard {
        batch: usize,
        clients: Vec<u64>,
        mask_active: Option<usize>,
    },
    Round {
        batch: usize,
        round: usize,
        global_round: usize,
        sampled: Vec<u64>,
        sampled_batches: Vec<usize>,
        client_lr: f64,
        server_lr: f64,
        gamma: Option<f64>,
        mean_loss: f64,
        /// Squared norm of the mean hypernetwork gradient at round start.
        grad_norm_sq: Option<f64>,
    },
    Eval {
        batch: usize,
        round: usize,
        global_round: usize,
        accuracies: Vec<(u64, f64)>,
    },
    Freeze {
        batch: usize,
        active: usize,
        total: usize,
    },
    Replay {
        batch: usize,
        pool_size: usize,
        synthesis_initial: f64,
        synthesis_best: f64,
        best_iteration: usize,
        dropped_classes: Vec<usize>,
        finetuned: Vec<u64>,
    },
    ReplaySkipped {
        batch: usize,
        reason: String,
    },
}

struct ClientUpdate {
    client: usize,
    grad_phi: Option<ParamVector>,
    grad_e: Option<Vec<f64>>,
    grad_mask: Option<Vec<f64>>,
    full_grad: Option<ParamVector>,
    params: ParamVector,
    stats: BnStatSet,
    loss: f64,
}

pub struct FederationState {
    pub config: ExperimentConfig,
    pub spec: NetSpec,
    pub plan: PartitionPlan,
    pub clients: Vec<ClientRecord>,
    pub hypernet: Option<HypernetState>,
    /// Shared model and statistics of `fedavg`.
    pub global: Option<(ParamVector, BnStatSet)>,
    /// One mask per started batch, in batch order.
    pub masks: Vec<MaskState>,
    pub ledger: MetricsLedger,
    pub events: Vec<Event>,
    pub pools: Vec<SyntheticPool>,
    /// Highest batch whose rounds have finished.
    pub completed: usize,
    pub active: usize,
    pub global_round: usize,
}

/// Clients taking part in round `r` of batch `t`: a uniform draw without
/// replacement of `sample_count(fraction, pool.len())` members, sorted.
pub fn sample_clients(seed: u64, t: usize, r: usize, pool: &[usize], fraction: f64) -> Vec<usize> {
    let k = sample_count(fraction, pool.len());
    let mut sampling = rng::stream(seed, rng::SAMPLING, &[t as u64, r as u64]);
    let mut sampled: Vec<usize> = rand::seq::index::sample(&mut sampling, pool.len(), k)
        .into_iter()
        .map(|i| pool[i])
        .collect();
    sampled.sort_unstable();
    sampled
}

pub fn load_dataset(config: &ExperimentConfig) -> Result<LabeledDataset> {
    let d = &config.data;
    match d.source {
        DataSource::Blobs => gen_blobs(
            d.classes,
            d.dim,
            d.per_class,
            d.spread,
            u64::from_le_bytes(
                rng::stream_seed(config.seed, rng::DATA, &[])[..8]
                    .try_into()
                    .expect("8"),
            ),
        ),
        DataSource::File => {
            let path = d.path.as_ref().ok_or_else(|| Error::Config {
                field: "data.path".into(),
                detail: "missing".into(),
            })?;
            LabeledDataset::load(path, config.seed)
        }
    }
}

fn seed_of(root: u64, name: &str, coords: &[u64]) -> u64 {
    rng::stream(root, name, coords).next_u64()
}

impl FederationState {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let dataset = load_dataset(&config)?;
        let plan = build_plan(
            &dataset,
            config.data.clients,
            config.data.dirichlet_alpha,
            config.data.test_fraction,
            &config.schedule.batch_sizes,
            seed_of(config.seed, rng::PARTITION, &[]),
        )?;
        let spec = NetSpec::mlp(dataset.dim(), config.net.hidden, dataset.classes)?
            .with_bn(config.net.bn_eps, config.net.bn_momentum);
        let mut clients = Vec::with_capacity(plan.clients.len());
        for (k, split) in plan.clients.iter().enumerate() {
            let (train_x, train_y) = dataset.subset(&split.train);
            let (test_x, test_y) = dataset.subset(&split.test);
            clients.push(ClientRecord {
                id: k as u64,
                batch: plan.batch_of[k],
                embedding: init_embedding(
                    k as u64,
                    config.hypernet.embed_dim,
                    seed_of(config.seed, rng::EMBEDDING, &[]),
                )?,
                data: LocalData {
                    train_x,
                    train_y,
                    test_x,
                    test_y,
                },
                stats: BnStatSet::fresh(&spec),
                serving: None,
            });
        }
        let mut init = rng::stream(config.seed, rng::INIT, &[0]);
        let hypernet = if config.method.uses_hypernet() {
            Some(HypernetState::new(
                config.hypernet.embed_dim,
                config.hypernet.hidden,
                &spec,
                &mut init,
            )?)
        } else {
            None
        };
        let global = (config.method == Method::Fedavg).then(|| (spec.init_params(&mut init), BnStatSet::fresh(&spec)));
        let mut ledger = MetricsLedger::new();
        for c in &clients {
            ledger.register(c.id, c.batch)?;
        }
        Ok(Self {
            config,
            spec,
            plan,
            clients,
            hypernet,
            global,
            masks: Vec::new(),
            ledger,
            events: Vec::new(),
            pools: Vec::new(),
            completed: 0,
            active: 0,
            global_round: 0,
        })
    }

    pub fn batch_count(&self) -> usize {
        self.config.schedule.batch_sizes.len()
    }

    pub fn clients_in(&self, batch: usize) -> Vec<usize> {
        (0..self.clients.len())
            .filter(|&c| self.clients[c].batch == batch)
            .collect()
    }

    fn onboarded(&self) -> Vec<usize> {
        (0..self.clients.len())
            .filter(|&c| self.clients[c].batch <= self.active)
            .collect()
    }

    fn hyper(&self) -> Result<&HypernetState> {
        self.hypernet
            .as_ref()
            .ok_or_else(|| Error::State("method has no hypernetwork".into()))
    }

    /// Hard mask the active batch trains under; all ones without masks.
    fn train_mask(&self, batch: usize) -> Vec<f64> {
        match self.masks.get(batch.wrapping_sub(1)) {
            Some(m) if self.config.method.uses_mask() => m.materialize(MaskMode::Hard),
            _ => vec![1.0; self.spec.param_count()],
        }
    }

    fn sgd<'a>(&self, epochs: usize, lr: &'a dyn Fn(usize) -> f64, mask: Option<&'a [f64]>) -> LocalSgd<'a> {
        LocalSgd {
            epochs,
            lr,
            momentum: self.config.schedule.momentum,
            minibatch: self.config.schedule.minibatch,
            grad_mask: mask,
        }
    }

    /// Parameters and statistics client `c` is evaluated with right now.
    pub fn serving_model(&self, c: usize) -> Result<(ParamVector, &BnStatSet)> {
        let client = &self.clients[c];
        match self.config.method {
            Method::Fedavg => {
                let (p, s) = self.global.as_ref().expect("fedavg state");
                Ok((p.clone(), s))
            }
            Method::LocalOnly => Ok((
                client
                    .serving
                    .clone()
                    .ok_or_else(|| Error::State(format!("client {c} has no model")))?,
                &client.stats,
            )),
            m if m.uses_mask() => match &client.serving {
                Some(snapshot) => Ok((snapshot.clone(), &client.stats)),
                None => {
                    let theta = self.hyper()?.generate(&client.embedding)?;
                    Ok((masking::apply(&self.train_mask(client.batch), &theta)?, &client.stats))
                }
            },
            _ => Ok((self.hyper()?.generate(&client.embedding)?, &client.stats)),
        }
    }

    pub fn serving_accuracy(&self, c: usize) -> Result<f64> {
        let (params, stats) = self.serving_model(c)?;
        test_accuracy(&self.spec, &params, stats, &self.clients[c].data)
    }

    fn evaluate_onboarded(&self) -> Result<Vec<(u64, f64)>> {
        self.onboarded()
            .par_iter()
            .map(|&c| Ok((self.clients[c].id, self.serving_accuracy(c)?)))
            .collect()
    }

    fn record_all(&mut self, checkpoint: Checkpoint) -> Result<()> {
        for (id, acc) in self.evaluate_onboarded()? {
            self.ledger.record(id, checkpoint, acc)?;
        }
        Ok(())
    }

    /// Standalone training of a fresh model on the client's own data, used
    /// only for the pre-join baseline.
    fn pretrain_accuracy(&self, c: usize) -> Result<f64> {
        let cfg = &self.config.schedule;
        let client = &self.clients[c];
        let mut params = self
            .spec
            .init_params(&mut rng::stream(self.config.seed, rng::INIT, &[1, client.id]));
        let mut stats = BnStatSet::fresh(&self.spec);
        let lr = |e: usize| cosine_lr(e, cfg.pretrain_epochs, cfg.client_lr);
        local_train(
            &self.spec,
            &mut params,
            &mut stats,
            &client.data.train_x,
            &client.data.train_y,
            &self.sgd(cfg.pretrain_epochs, &lr, None),
            &mut rng::stream(self.config.seed, rng::LOCAL, &[0, client.id]),
        )?;
        let stats = calibrate_stats(&self.spec, &params, client.data.train_x.view())?;
        test_accuracy(&self.spec, &params, &stats, &client.data)
    }

    /// Starts batch `t`: records its clients' local-only baseline, sets up
    /// the batch mask and records accuracy at join.
    pub fn onboard_batch(&mut self, t: usize) -> Result<()> {
        if t != self.completed + 1 || t > self.batch_count() {
            return Err(Error::State(format!(
                "cannot onboard batch {t} after completing batch {}",
                self.completed
            )));
        }
        let members = self.clients_in(t);
        let local: Vec<f64> = members
            .par_iter()
            .map(|&c| self.pretrain_accuracy(c))
            .collect::<Result<_>>()?;
        for (&c, acc) in members.iter().zip(local) {
            self.ledger.record(self.clients[c].id, Checkpoint::LocalPretrain, acc)?;
        }
        let mut mask_active = None;
        if self.config.method.uses_mask() {
            let m = &self.config.mask;
            let len = self.spec.param_count();
            let mask = if t == 1 {
                MaskState::new(t, vec![m.init_logit; len], m.gamma)?
            } else {
                MaskState::reuse_biased(t, len, m.gamma, &self.masks, m.reuse_logit, m.init_logit)?
            };
            mask_active = Some(mask.materialize(MaskMode::Hard).iter().filter(|v| **v > 0.0).count());
            self.masks.push(mask);
        }
        if self.config.method == Method::LocalOnly {
            for &c in &members {
                let id = self.clients[c].id;
                self.clients[c].serving = Some(self.spec.init_params(&mut rng::stream(
                    self.config.seed,
                    rng::INIT,
                    &[2, id],
                )));
            }
        }
        self.active = t;
        for &c in &members {
            let (params, _) = self.serving_model(c)?;
            let stats = match &self.global {
                Some((_, s)) if s.total_count() > 0 => s.clone(),
                _ => calibrate_stats(&self.spec, &params, self.clients[c].data.train_x.view())?,
            };
            if self.global.is_none() {
                self.clients[c].stats = stats.clone();
            }
            let acc = test_accuracy(&self.spec, &params, &stats, &self.clients[c].data)?;
            self.ledger.record(self.clients[c].id, Checkpoint::AtJoin(t), acc)?;
        }
        self.events.push(Event::Onboard {
            batch: t,
            clients: members.iter().map(|&c| self.clients[c].id).collect(),
            mask_active,
        });
        Ok(())
    }

    fn server_lr(&self) -> f64 {
        let h = &self.config.hypernet;
        if h.robbins_monro {
            h.server_lr / (1.0 + self.global_round as f64)
        } else {
            h.server_lr
        }
    }

    fn client_update(&self, c: usize, t: usize, r: usize, lr: f64, hard: &[f64]) -> Result<ClientUpdate> {
        let client = &self.clients[c];
        let spec = &self.spec;
        let cfg = &self.config;
        let data = &client.data;
        let mut rng = rng::stream(cfg.seed, rng::LOCAL, &[t as u64, r as u64 + 1, client.id]);
        let lr_fn = |_| lr;
        let epochs = cfg.schedule.local_epochs;
        match cfg.method {
            Method::Fedavg | Method::LocalOnly => {
                let (start, stats) = self.serving_model(c)?;
                let mut params = start;
                let mut stats = stats.clone();
                let loss = local_train(
                    spec,
                    &mut params,
                    &mut stats,
                    &data.train_x,
                    &data.train_y,
                    &self.sgd(epochs, &lr_fn, None),
                    &mut rng,
                )?;
                Ok(ClientUpdate {
                    client: c,
                    grad_phi: None,
                    grad_e: None,
                    grad_mask: None,
                    full_grad: None,
                    params,
                    stats,
                    loss,
                })
            }
            _ => {
                let hyper = self.hyper()?;
                let theta = hyper.generate(&client.embedding)?;
                let start = masking::apply(hard, &theta)?;
                let grad_mask = match self.masks.get(t - 1) {
                    Some(mask) if cfg.method.uses_mask() => Some(
                        mask_grads(
                            spec,
                            hyper,
                            &client.embedding,
                            mask,
                            data.train_x.view(),
                            &data.train_y,
                            &client.stats,
                            cfg.mask.lambda,
                        )?
                        .grad_logits,
                    ),
                    _ => None,
                };
                let mut full = loss_and_grads(
                    spec,
                    &start,
                    data.train_x.view(),
                    &data.train_y,
                    &client.stats,
                    Mode::Train,
                )?;
                full.param_grads.iter_mut().zip(hard).for_each(|(g, m)| *g *= m);
                let full_grad = hyper.backprop(&client.embedding, &full.param_grads)?.0;

                let mut params = start.clone();
                let mut stats = client.stats.clone();
                let loss = local_train(
                    spec,
                    &mut params,
                    &mut stats,
                    &data.train_x,
                    &data.train_y,
                    &self.sgd(epochs, &lr_fn, Some(hard)),
                    &mut rng,
                )?;
                let delta: Vec<f64> = start.iter().zip(params.iter()).map(|(a, b)| a - b).collect();
                let (grad_phi, grad_e) = hyper.backprop(&client.embedding, &delta)?;
                Ok(ClientUpdate {
                    client: c,
                    grad_phi: Some(grad_phi),
                    grad_e: Some(grad_e),
                    grad_mask,
                    full_grad: Some(full_grad),
                    params,
                    stats,
                    loss,
                })
            }
        }
    }

    /// One communication round of the active batch.
    pub fn run_round(&mut self, t: usize, r: usize) -> Result<()> {
        if t != self.active || t == self.completed {
            return Err(Error::State(format!("batch {t} is not the active batch")));
        }
        let pool = self.clients_in(t);
        if pool.is_empty() {
            return Err(Error::State(format!("batch {t} has no clients to sample")));
        }
        let cfg = self.config.clone();
        let sampled = sample_clients(cfg.seed, t, r, &pool, cfg.schedule.sample_fraction);

        let gamma = if cfg.method.uses_mask() {
            let m = &cfg.mask;
            let g = (m.gamma * m.gamma_growth.powi(r as i32)).min(m.gamma_max);
            self.masks[t - 1].set_gamma(g)?;
            Some(g)
        } else {
            None
        };
        let lr = cosine_lr(r, cfg.schedule.rounds_for(t), cfg.schedule.client_lr);
        let hard = self.train_mask(t);
        let updates: Vec<ClientUpdate> = sampled
            .par_iter()
            .map(|&c| self.client_update(c, t, r, lr, &hard))
            .collect::<Result<_>>()?;

        // aggregation consumes updates in client-id order
        let server_lr = self.server_lr();
        let p = self.spec.param_count();
        let mut grad_norm_sq = None;
        match cfg.method {
            Method::Fedavg => {
                let (global, gstats) = self.global.as_mut().expect("fedavg state");
                let mut mean_delta = vec![0.0; p];
                for u in &updates {
                    for (d, (a, g)) in mean_delta.iter_mut().zip(u.params.iter().zip(global.iter())) {
                        *d += (a - g) / updates.len() as f64;
                    }
                }
                global.iter_mut().zip(&mean_delta).for_each(|(g, d)| *g += d);
                let parts: Vec<(&BnStatSet, f64)> = updates.iter().map(|u| (&u.stats, 1.0)).collect();
                *gstats = average_stats(&parts);
            }
            Method::LocalOnly => {
                for u in &updates {
                    self.clients[u.client].serving = Some(u.params.clone());
                }
            }
            _ => {
                let hyper = self.hypernet.as_mut().expect("hypernet state");
                let mut sum = vec![0.0; hyper.phi().len()];
                let mut aggregate = vec![0.0; hyper.phi().len()];
                for u in &updates {
                    let g = u.grad_phi.as_ref().expect("hypernet gradient");
                    sum.iter_mut().zip(g.iter()).for_each(|(s, v)| *s += v);
                    let tg = u.full_grad.as_ref().expect("full-data gradient");
                    aggregate
                        .iter_mut()
                        .zip(tg.iter())
                        .for_each(|(s, v)| *s += v / updates.len() as f64);
                }
                hyper.apply_gradient(&sum, server_lr)?;
                grad_norm_sq = Some(aggregate.iter().map(|v| v * v).sum());
                if cfg.hypernet.train_embeddings && cfg.hypernet.embedding_lr > 0.0 {
                    for u in &updates {
                        let ge = u.grad_e.as_ref().expect("embedding gradient");
                        let e = &mut self.clients[u.client].embedding.values;
                        e.iter_mut()
                            .zip(ge)
                            .for_each(|(v, g)| *v -= cfg.hypernet.embedding_lr * g);
                    }
                }
                if cfg.method.uses_mask() {
                    let mut msum = vec![0.0; p];
                    for u in &updates {
                        let g = u.grad_mask.as_ref().expect("mask gradient");
                        msum.iter_mut().zip(g).for_each(|(s, v)| *s += v);
                    }
                    self.masks[t - 1].apply_gradient(&msum, cfg.mask.lr)?;
                }
            }
        }
        if cfg.method != Method::Fedavg {
            for u in &updates {
                self.clients[u.client].stats = u.stats.clone();
            }
        }
        let mean_loss = updates.iter().map(|u| u.loss).sum::<f64>() / updates.len() as f64;
        if !mean_loss.is_finite() {
            return Err(Error::Numeric {
                phase: format!("local training, batch {t} round {r}"),
                detail: "non-finite client loss".into(),
            });
        }
        self.events.push(Event::Round {
            batch: t,
            round: r,
            global_round: self.global_round,
            sampled: sampled.iter().map(|&c| self.clients[c].id).collect(),
            sampled_batches: sampled.iter().map(|&c| self.clients[c].batch).collect(),
            client_lr: lr,
            server_lr,
            gamma,
            mean_loss,
            grad_norm_sq,
        });
        self.global_round += 1;
        let every = cfg.schedule.eval_every;
        if every > 0 && (r + 1).is_multiple_of(every) {
            let accuracies = self.evaluate_onboarded()?;
            self.events.push(Event::Eval {
                batch: t,
                round: r,
                global_round: self.global_round - 1,
                accuracies,
            });
        }
        Ok(())
    }

    /// Ends batch `t`'s rounds: freezes its mask, records serving snapshots
    /// and calibrated statistics, and evaluates every onboarded client.
    pub fn complete_batch(&mut self, t: usize) -> Result<()> {
        if t != self.active || t == self.completed {
            return Err(Error::State(format!("batch {t} is not running")));
        }
        let members = self.clients_in(t);
        if self.config.method.uses_mask() {
            let mask = &mut self.masks[t - 1];
            mask.freeze();
            let active = mask.active_count();
            self.events.push(Event::Freeze {
                batch: t,
                active,
                total: mask.len(),
            });
        }
        if self.config.method.uses_hypernet() {
            let updated: Vec<(usize, Option<ParamVector>, BnStatSet)> = members
                .par_iter()
                .map(|&c| {
                    let (params, _) = self.serving_model(c)?;
                    let stats = calibrate_stats(&self.spec, &params, self.clients[c].data.train_x.view())?;
                    let snapshot = self.config.method.uses_mask().then_some(params);
                    Ok((c, snapshot, stats))
                })
                .collect::<Result<_>>()?;
            for (c, snapshot, stats) in updated {
                self.clients[c].serving = snapshot;
                self.clients[c].stats = stats;
            }
        }
        self.completed = t;
        self.record_all(Checkpoint::PostBatch(t))
    }

    /// Server-side replay after batch `t`: synthesize a pool from batch `t`'s
    /// statistics, fine-tune every earlier batch, record post-replay accuracy.
    pub fn run_replay_phase(&mut self, t: usize) -> Result<()> {
        if t < 2 {
            return Err(Error::State("replay runs only after batches beyond the first".into()));
        }
        if t != self.completed {
            return Err(Error::State(format!("batch {t} has not completed its rounds")));
        }
        if !self.config.replay_active() {
            self.events.push(Event::ReplaySkipped {
                batch: t,
                reason: format!("replay disabled for {}", self.config.method),
            });
            return Ok(());
        }
        let members = self.clients_in(t);
        let hp = self.config.replay.hyperparams();
        let seed = seed_of(self.config.seed, rng::SYNTHESIS, &[t as u64]);
        let (pool, initial, best, best_iteration, dropped) = match self.config.replay.source {
            ReplaySource::Representative => {
                let stats: Vec<&BnStatSet> = members.iter().map(|&c| &self.clients[c].stats).collect();
                let target =
                    capture_bn_stats(&stats).map_err(|_| Error::State(format!("batch {t} has no statistics")))?;
                let hyper = self.hyper()?;
                let d = hyper.embed_dim();
                let mut mean = vec![0.0; d];
                for &c in &members {
                    mean.iter_mut()
                        .zip(&self.clients[c].embedding.values)
                        .for_each(|(m, v)| *m += v / members.len() as f64);
                }
                let rep = hyper.generate(&ClientEmbedding {
                    client_id: u64::MAX,
                    values: mean,
                })?;
                let rep = masking::apply(&self.train_mask(t), &rep)?;
                let (pool, s) = build_pool_traced(&self.spec, &rep, &target, t, &hp, seed)?;
                (pool, s.initial.total, s.best.total, s.best_iteration, Vec::new())
            }
            ReplaySource::Clients => {
                let models = members
                    .iter()
                    .map(|&c| self.serving_model(c))
                    .collect::<Result<Vec<_>>>()?;
                let sources: Vec<PoolSource<'_>> = models
                    .iter()
                    .map(|(params, stats)| PoolSource { params, stats })
                    .collect();
                let built = build_pool_sourced(&self.spec, &sources, t, &hp, self.config.replay.min_evidence, seed)?;
                let sum = |f: fn(&crate::replay::Synthesis) -> f64| built.runs.iter().map(|(_, s)| f(s)).sum::<f64>();
                let initial = sum(|s| s.initial.total);
                let best = sum(|s| s.best.total);
                let iteration = built.runs.iter().map(|(_, s)| s.best_iteration).max().unwrap_or(0);
                (built.pool, initial, best, iteration, built.dropped)
            }
        };
        if pool.is_empty() {
            self.events.push(Event::ReplaySkipped {
                batch: t,
                reason: "no class has evidence in the batch statistics".into(),
            });
            return self.record_all(Checkpoint::PostReplay(t));
        }
        let settings = self.config.replay.finetune();
        let prior: Vec<usize> = (0..self.clients.len()).filter(|&c| self.clients[c].batch < t).collect();
        if self.config.method.uses_mask() {
            let tuned: Vec<(usize, ParamVector)> = prior
                .par_iter()
                .map(|&c| {
                    let client = &self.clients[c];
                    let snapshot = client
                        .serving
                        .as_ref()
                        .ok_or_else(|| Error::State(format!("client {c} has no serving snapshot")))?;
                    let mask = &self.masks[client.batch - 1];
                    let Some(own) = self.client_pool(t, c, snapshot, &pool)? else {
                        return Ok((c, snapshot.clone()));
                    };
                    Ok((
                        c,
                        finetune_prior(&self.spec, snapshot, mask, &own, &client.stats, &settings)?,
                    ))
                })
                .collect::<Result<_>>()?;
            for (c, params) in tuned {
                self.clients[c].serving = Some(params);
            }
        } else {
            // earlier batches are served live, so fine-tuned deltas go into phi
            let all_on = MaskState::new(t, vec![1.0; self.spec.param_count()], 1.0)?.frozen();
            for &c in &prior {
                let hyper = self.hyper()?;
                let client = &self.clients[c];
                let theta = hyper.generate(&client.embedding)?;
                let Some(own) = self.client_pool(t, c, &theta, &pool)? else {
                    continue;
                };
                let tuned = finetune_prior(&self.spec, &theta, &all_on, &own, &client.stats, &settings)?;
                let delta: Vec<f64> = theta.iter().zip(tuned.iter()).map(|(a, b)| a - b).collect();
                let (g, _) = hyper.backprop(&client.embedding, &delta)?;
                let lr = self.config.replay.push_lr;
                self.hypernet.as_mut().expect("hypernet").apply_gradient(&g, lr)?;
            }
        }
        self.events.push(Event::Replay {
            batch: t,
            pool_size: pool.len(),
            synthesis_initial: initial,
            synthesis_best: best,
            best_iteration,
            dropped_classes: dropped,
            finetuned: prior.iter().map(|&c| self.clients[c].id).collect(),
        });
        self.pools.push(pool);
        self.record_all(Checkpoint::PostReplay(t))
    }

    /// The pool client `c` is fine-tuned on, or `None` when rehearsal
    /// leaves nothing relevant to it.
    fn client_pool(&self, t: usize, c: usize, params: &[f64], pool: &SyntheticPool) -> Result<Option<SyntheticPool>> {
        if !self.config.replay.rehearsal {
            return Ok(Some(pool.clone()));
        }
        let client = &self.clients[c];
        let seed = seed_of(self.config.seed, rng::SYNTHESIS, &[t as u64, client.id + 1]);
        let evidence = class_evidence(
            &self.spec,
            params,
            &client.stats,
            &self.config.replay.hyperparams(),
            seed,
        )?;
        let own = rehearsal_pool(pool, &evidence, self.config.replay.min_evidence);
        Ok(if own.labels.len() > evidence.predicted.len() {
            Some(own)
        } else {
            None
        })
    }

    pub fn capacity(&self) -> Result<Option<CapacityReport>> {
        let frozen: Vec<MaskState> = self.masks.iter().filter(|m| m.is_frozen()).cloned().collect();
        if frozen.is_empty() {
            return Ok(None);
        }
        capacity_report(&self.spec, &frozen).map(Some)
    }
}

/// Everything a finished run produces.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub config: ExperimentConfig,
    pub ledger: MetricsLedger,
    pub metrics: Vec<MetricRow>,
    pub events: Vec<Event>,
    pub masks: Vec<MaskState>,
    pub capacity: Option<CapacityReport>,
    pub snapshots: Vec<(u64, ParamVector)>,
    pub pools: Vec<SyntheticPool>,
    pub partition: PartitionPlan,
    /// Wall-clock seconds per phase; not part of the reproducible output.
    pub timings: BTreeMap<String, f64>,
}

impl RunOutcome {
    pub fn replay_phases(&self) -> usize {
        self.events.iter().filter(|e| matches!(e, Event::Replay { .. })).count()
    }

    pub fn metric(&self, name: &str, batch: usize) -> Option<f64> {
        self.metrics
            .iter()
            .find(|r| r.metric == name && r.batch == batch)
            .map(|r| r.value)
    }

    /// Squared aggregate-gradient norms in round order.
    pub fn grad_norms(&self) -> Vec<f64> {
        self.events
            .iter()
            .filter_map(|e| match e {
                Event::Round { grad_norm_sq, .. } => *grad_norm_sq,
                _ => None,
            })
            .collect()
    }

    /// Mean serving accuracy of all clients at the last ledger checkpoint,
    /// in percentage points.
    pub fn final_accuracy(&self) -> f64 {
        let cp = *self.ledger.checkpoints().last().expect("ledger has entries");
        let accs: Vec<f64> = (0..self.partition.clients.len() as u64)
            .filter_map(|c| self.ledger.get(c, cp))
            .collect();
        100.0 * accs.iter().sum::<f64>() / accs.len() as f64
    }
}

fn timed<T>(timings: &mut BTreeMap<String, f64>, phase: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    let start = Instant::now();
    let out = f();
    *timings.entry(phase.to_string()).or_default() += start.elapsed().as_secs_f64();
    out
}

/// Runs the full onboarding schedule for `config.method`.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunOutcome> {
    let mut timings = BTreeMap::new();
    let mut state = timed(&mut timings, "setup", || FederationState::new(config.clone()))?;
    for t in 1..=state.batch_count() {
        timed(&mut timings, "onboard", || state.onboard_batch(t))?;
        let rounds = config.schedule.rounds_for(t);
        timed(&mut timings, "rounds", || {
            (0..rounds).try_for_each(|r| state.run_round(t, r))
        })?;
        timed(&mut timings, "complete", || state.complete_batch(t))?;
        if t > 1 {
            timed(&mut timings, "replay", || state.run_replay_phase(t))?;
        }
    }
    let capacity = state.capacity()?;
    let metrics = summarize(&state.ledger, config.method.as_str())?;
    let snapshots = state
        .clients
        .iter()
        .filter_map(|c| c.serving.clone().map(|s| (c.id, s)))
        .collect();
    Ok(RunOutcome {
        config: config.clone(),
        ledger: state.ledger,
        metrics,
        events: state.events,
        masks: state.masks,
        capacity,
        snapshots,
        pools: state.pools,
        partition: state.plan,
        timings,
    })
}

/// Like [`run_experiment`] with at most `jobs` worker threads.
pub fn run_experiment_with_jobs(config: &ExperimentConfig, jobs: Option<usize>) -> Result<RunOutcome> {
    match jobs {
        None => run_experiment(config),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .map_err(|e| Error::State(format!("thread pool: {e}")))?
            .install(|| run_experiment(config)),
    }
}

#[cfg(test)]
mod tests;
