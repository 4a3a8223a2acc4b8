use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::replay::{FinetuneSettings, ReplayHyperparams};

/// Prefix of environment variables that override config keys. Nested keys
/// use a double underscore: `PFEDDSH_MASK__LAMBDA=1e-3` sets `mask.lambda`.
pub const ENV_PREFIX: &str = "PFEDDSH_";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Pfeddsh,
    PfedhnNomask,
    Fedavg,
    LocalOnly,
    PfeddshNoreplay,
    PfeddshNomask,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Pfeddsh,
        Method::PfedhnNomask,
        Method::Fedavg,
        Method::LocalOnly,
        Method::PfeddshNoreplay,
        Method::PfeddshNomask,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Pfeddsh => "pfeddsh",
            Method::PfedhnNomask => "pfedhn_nomask",
            Method::Fedavg => "fedavg",
            Method::LocalOnly => "local_only",
            Method::PfeddshNoreplay => "pfeddsh_noreplay",
            Method::PfeddshNomask => "pfeddsh_nomask",
        }
    }

    pub fn uses_hypernet(&self) -> bool {
        !matches!(self, Method::Fedavg | Method::LocalOnly)
    }

    pub fn uses_mask(&self) -> bool {
        matches!(self, Method::Pfeddsh | Method::PfeddshNoreplay)
    }

    /// Whether the method can replay at all; the config flag can still
    /// switch it off.
    pub fn supports_replay(&self) -> bool {
        matches!(self, Method::Pfeddsh | Method::PfeddshNomask)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config {
                field: "method".into(),
                detail: format!("unknown method {s:?}"),
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Blobs,
    File,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    /// Flat binary dataset, used when `source = "file"`.
    pub path: Option<PathBuf>,
    pub classes: usize,
    pub dim: usize,
    pub per_class: usize,
    pub spread: f64,
    pub dirichlet_alpha: f64,
    pub clients: usize,
    pub test_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Blobs,
            path: None,
            classes: 5,
            dim: 16,
            per_class: 200,
            spread: 1.5,
            dirichlet_alpha: 0.1,
            clients: 10,
            test_fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    pub hidden: usize,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            hidden: 32,
            bn_eps: crate::nn::DEFAULT_BN_EPS,
            bn_momentum: crate::nn::DEFAULT_BN_MOMENTUM,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HypernetConfig {
    pub embed_dim: usize,
    pub hidden: usize,
    /// Server step size applied to the summed client gradients.
    pub server_lr: f64,
    pub embedding_lr: f64,
    pub train_embeddings: bool,
    /// Use `server_lr / (1 + r)` at global round `r`.
    pub robbins_monro: bool,
}

impl Default for HypernetConfig {
    fn default() -> Self {
        Self {
            embed_dim: 32,
            hidden: 64,
            server_lr: 0.01,
            embedding_lr: 0.01,
            train_embeddings: true,
            robbins_monro: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskConfig {
    pub lambda: f64,
    pub gamma: f64,
    /// Per-round multiplicative growth of the sigmoid scale, capped at `gamma_max`.
    pub gamma_growth: f64,
    pub gamma_max: f64,
    pub lr: f64,
    /// Starting logit of positions no earlier batch uses.
    pub init_logit: f64,
    /// Starting logit of positions an earlier frozen mask keeps.
    pub reuse_logit: f64,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self {
            lambda: 5e-4,
            gamma: 10.0,
            gamma_growth: 1.05,
            gamma_max: 100.0,
            lr: 1.0,
            init_logit: 0.3,
            reuse_logit: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReplaySource {
    /// One model: the hypernetwork output at the batch's mean embedding,
    /// inverted against the batch's pooled statistics.
    Representative,
    /// Every client's serving model, each inverted against its own statistics.
    Clients,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReplayConfig {
    pub enabled: bool,
    pub tv: f64,
    pub l2: f64,
    pub feature: f64,
    pub iterations: usize,
    pub step: f64,
    pub images_per_class: usize,
    pub clamp: f64,
    pub label_weight: f64,
    /// Which models are inverted to build the pool.
    pub source: ReplaySource,
    /// Classes whose best evidence share falls below this are left out of
    /// per-client pools.
    pub min_evidence: f64,
    /// Fine-tune each earlier client on the pool classes it has evidence for,
    /// mixed with inputs inverted from its own model and statistics. When
    /// off, every earlier client is fine-tuned on the whole pool.
    pub rehearsal: bool,
    pub finetune_epochs: usize,
    pub finetune_lr: f64,
    pub finetune_momentum: f64,
    pub finetune_minibatch: usize,
    /// Step size for pushing fine-tuned deltas into the hypernetwork when
    /// earlier batches are served live (no masks).
    pub push_lr: f64,
}

impl Default for ReplayConfig {
    fn default() -> Self {
        let hp = ReplayHyperparams::default();
        Self {
            enabled: true,
            tv: hp.tv,
            l2: hp.l2,
            feature: hp.feature,
            iterations: hp.iterations,
            step: hp.step,
            images_per_class: hp.images_per_class,
            clamp: hp.clamp,
            label_weight: hp.label_weight,
            source: ReplaySource::Representative,
            min_evidence: 0.05,
            rehearsal: false,
            finetune_epochs: 5,
            finetune_lr: 0.01,
            finetune_momentum: 0.9,
            finetune_minibatch: 32,
            push_lr: 1.0,
        }
    }
}

impl ReplayConfig {
    pub fn hyperparams(&self) -> ReplayHyperparams {
        ReplayHyperparams {
            tv: self.tv,
            l2: self.l2,
            feature: self.feature,
            iterations: self.iterations,
            step: self.step,
            images_per_class: self.images_per_class,
            clamp: self.clamp,
            label_weight: self.label_weight,
            grid: None,
        }
    }

    pub fn finetune(&self) -> FinetuneSettings {
        FinetuneSettings {
            epochs: self.finetune_epochs,
            lr: self.finetune_lr,
            momentum: self.finetune_momentum,
            minibatch: self.finetune_minibatch,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub batch_sizes: Vec<usize>,
    pub rounds_first: usize,
    pub rounds_next: usize,
    pub local_epochs: usize,
    pub sample_fraction: f64,
    pub client_lr: f64,
    pub momentum: f64,
    pub minibatch: usize,
    /// Epochs of standalone training behind the pre-join baseline.
    pub pretrain_epochs: usize,
    /// Serving accuracy of every onboarded client is logged this often (0 = never).
    pub eval_every: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            batch_sizes: vec![8, 2],
            rounds_first: 60,
            rounds_next: 30,
            local_epochs: 1,
            sample_fraction: 0.25,
            client_lr: 0.01,
            momentum: 0.9,
            minibatch: 32,
            pretrain_epochs: 50,
            eval_every: 10,
        }
    }
}

impl ScheduleConfig {
    pub fn rounds_for(&self, batch: usize) -> usize {
        if batch <= 1 {
            self.rounds_first
        } else {
            self.rounds_next
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub method: Method,
    pub data: DataConfig,
    pub net: NetConfig,
    pub hypernet: HypernetConfig,
    pub mask: MaskConfig,
    pub replay: ReplayConfig,
    pub schedule: ScheduleConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            method: Method::Pfeddsh,
            data: DataConfig::default(),
            net: NetConfig::default(),
            hypernet: HypernetConfig::default(),
            mask: MaskConfig::default(),
            replay: ReplayConfig::default(),
            schedule: ScheduleConfig::default(),
        }
    }
}

fn config_err(field: &str, detail: impl Into<String>) -> Error {
    Error::Config {
        field: field.into(),
        detail: detail.into(),
    }
}

/// Parses an override value as a TOML literal, falling back to a bare string
/// so `method=fedavg` works without quotes.
fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key v"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn set_dotted(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(config_err(key, "malformed key"));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| config_err(key, format!("{p} is not a section")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

impl ExperimentConfig {
    /// Parses TOML text, applies `key=value` overrides (dotted keys), then
    /// validates.
    pub fn parse(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| config_err("(file)", e.to_string()))?;
        for (k, v) in overrides {
            set_dotted(&mut table, k, parse_value(v))?;
        }
        let cfg: Self = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| config_err("(file)", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Overrides collected from `PFEDDSH_*` environment variables, sorted by key.
    pub fn env_overrides() -> Vec<(String, String)> {
        let mut out: Vec<(String, String)> = std::env::vars()
            .filter_map(|(k, v)| {
                let rest = k.strip_prefix(ENV_PREFIX)?;
                Some((rest.to_ascii_lowercase().replace("__", "."), v))
            })
            .collect();
        out.sort();
        out
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        if d.clients == 0 {
            return Err(config_err("data.clients", "must be >= 1"));
        }
        if d.source == DataSource::File && d.path.is_none() {
            return Err(config_err("data.path", "required when data.source = \"file\""));
        }
        if d.source == DataSource::Blobs {
            if d.classes < 2 {
                return Err(config_err("data.classes", "must be >= 2"));
            }
            if d.dim == 0 || d.per_class == 0 {
                return Err(config_err("data.dim", "dim and per_class must be >= 1"));
            }
            if !(d.spread > 0.0) {
                return Err(config_err("data.spread", "must be > 0"));
            }
        }
        if !(d.dirichlet_alpha > 0.0) || !d.dirichlet_alpha.is_finite() {
            return Err(config_err("data.dirichlet_alpha", "must be a finite value > 0"));
        }
        if !(d.test_fraction > 0.0 && d.test_fraction < 1.0) {
            return Err(config_err("data.test_fraction", "must lie in (0, 1)"));
        }
        if self.net.hidden == 0 {
            return Err(config_err("net.hidden", "must be >= 1"));
        }
        if !(self.net.bn_eps > 0.0) {
            return Err(config_err("net.bn_eps", "must be > 0"));
        }
        if !(self.net.bn_momentum > 0.0 && self.net.bn_momentum <= 1.0) {
            return Err(config_err("net.bn_momentum", "must lie in (0, 1]"));
        }
        let h = &self.hypernet;
        if h.embed_dim == 0 || h.hidden == 0 {
            return Err(config_err("hypernet.embed_dim", "embed_dim and hidden must be >= 1"));
        }
        if !(h.server_lr > 0.0) {
            return Err(config_err("hypernet.server_lr", "must be > 0"));
        }
        if !(h.embedding_lr >= 0.0) {
            return Err(config_err("hypernet.embedding_lr", "must be >= 0"));
        }
        let m = &self.mask;
        if !(m.lambda >= 0.0) {
            return Err(config_err("mask.lambda", "must be >= 0"));
        }
        if !(m.gamma > 0.0) || !(m.gamma_max >= m.gamma) || !(m.gamma_growth >= 1.0) {
            return Err(config_err(
                "mask.gamma",
                "need gamma > 0, gamma_max >= gamma and gamma_growth >= 1",
            ));
        }
        if !(m.lr > 0.0) {
            return Err(config_err("mask.lr", "must be > 0"));
        }
        if !m.init_logit.is_finite() || !m.reuse_logit.is_finite() {
            return Err(config_err("mask.init_logit", "logits must be finite"));
        }
        self.replay.hyperparams().validate()?;
        if self.replay.images_per_class == 0 {
            return Err(config_err("replay.images_per_class", "must be >= 1"));
        }
        if !(self.replay.finetune_lr > 0.0) || !(0.0..1.0).contains(&self.replay.finetune_momentum) {
            return Err(config_err(
                "replay.finetune_lr",
                "need finetune_lr > 0 and finetune_momentum in [0, 1)",
            ));
        }
        if !(0.0..=1.0).contains(&self.replay.min_evidence) {
            return Err(config_err("replay.min_evidence", "must be in [0, 1]"));
        }
        if !(self.replay.push_lr >= 0.0) {
            return Err(config_err("replay.push_lr", "must be >= 0"));
        }
        let s = &self.schedule;
        if s.batch_sizes.is_empty() || s.batch_sizes.contains(&0) {
            return Err(config_err("schedule.batch_sizes", "need one or more non-empty batches"));
        }
        let total: usize = s.batch_sizes.iter().sum();
        if total != d.clients {
            return Err(config_err(
                "schedule.batch_sizes",
                format!("sizes sum to {total} but data.clients = {}", d.clients),
            ));
        }
        if s.rounds_first == 0 || (s.batch_sizes.len() > 1 && s.rounds_next == 0) {
            return Err(config_err("schedule.rounds_first", "rounds must be >= 1"));
        }
        if !(s.sample_fraction > 0.0 && s.sample_fraction <= 1.0) {
            return Err(config_err("schedule.sample_fraction", "must lie in (0, 1]"));
        }
        if !(s.client_lr > 0.0) {
            return Err(config_err("schedule.client_lr", "must be > 0"));
        }
        if !(0.0..1.0).contains(&s.momentum) {
            return Err(config_err("schedule.momentum", "must lie in [0, 1)"));
        }
        if s.minibatch < 2 {
            return Err(config_err("schedule.minibatch", "must be >= 2"));
        }
        Ok(())
    }

    pub fn replay_active(&self) -> bool {
        self.method.supports_replay() && self.replay.enabled
    }

    pub fn total_rounds(&self) -> usize {
        (1..=self.schedule.batch_sizes.len())
            .map(|t| self.schedule.rounds_for(t))
            .sum()
    }
}

/// `max(1, ceil(fraction * n))`.
pub fn sample_count(fraction: f64, n: usize) -> usize {
    // the small offset keeps 0.05 * 20 from rounding up to 2
    ((fraction * n as f64 - 1e-9).ceil() as usize).clamp(1, n.max(1))
}
