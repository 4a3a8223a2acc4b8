//! Accuracy ledger and the onboarding metrics derived from it.
//!
//! The ledger stores fractions in `[0, 1]`; every derived metric is reported
//! in percentage points.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Checkpoint {
    LocalPretrain,
    AtJoin(usize),
    PostBatch(usize),
    PostReplay(usize),
}

impl Checkpoint {
    /// Position on the run timeline; used to order checkpoints in reports.
    pub fn timeline_key(&self) -> (usize, u8) {
        match *self {
            Checkpoint::LocalPretrain => (0, 0),
            Checkpoint::AtJoin(t) => (t, 1),
            Checkpoint::PostBatch(t) => (t, 2),
            Checkpoint::PostReplay(t) => (t, 3),
        }
    }
}

impl fmt::Display for Checkpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Checkpoint::LocalPretrain => write!(f, "local_pretrain"),
            Checkpoint::AtJoin(t) => write!(f, "at_join({t})"),
            Checkpoint::PostBatch(t) => write!(f, "post_batch({t})"),
            Checkpoint::PostReplay(t) => write!(f, "post_replay({t})"),
        }
    }
}

impl FromStr for Checkpoint {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "local_pretrain" {
            return Ok(Checkpoint::LocalPretrain);
        }
        let bad = || Error::Data(format!("unknown checkpoint label {s:?}"));
        let (name, rest) = s.split_once('(').ok_or_else(bad)?;
        let t: usize = rest.strip_suffix(')').ok_or_else(bad)?.parse().map_err(|_| bad())?;
        match name {
            "at_join" => Ok(Checkpoint::AtJoin(t)),
            "post_batch" => Ok(Checkpoint::PostBatch(t)),
            "post_replay" => Ok(Checkpoint::PostReplay(t)),
            _ => Err(bad()),
        }
    }
}

/// Append-only record of per-client accuracies at named checkpoints.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsLedger {
    batch_of: BTreeMap<u64, usize>,
    entries: BTreeMap<(u64, Checkpoint), f64>,
}

pub const LEDGER_HEADER: &str = "client,batch,checkpoint,accuracy";
pub const METRICS_HEADER: &str = "method,batch,checkpoint,metric,value";

impl MetricsLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, client: u64, batch: usize) -> Result<()> {
        if batch == 0 {
            return Err(Error::Data(format!("client {client}: batches are numbered from 1")));
        }
        match self.batch_of.insert(client, batch) {
            Some(prev) if prev != batch => Err(Error::Data(format!(
                "client {client} registered in batch {prev} and {batch}"
            ))),
            _ => Ok(()),
        }
    }

    pub fn record(&mut self, client: u64, checkpoint: Checkpoint, accuracy: f64) -> Result<()> {
        if !self.batch_of.contains_key(&client) {
            return Err(Error::Data(format!("client {client} is not registered")));
        }
        if !(0.0..=1.0).contains(&accuracy) {
            return Err(Error::Data(format!(
                "client {client} {checkpoint}: accuracy {accuracy} outside [0, 1]"
            )));
        }
        if self.entries.insert((client, checkpoint), accuracy).is_some() {
            return Err(Error::Data(format!(
                "client {client} already has an entry at {checkpoint}"
            )));
        }
        Ok(())
    }

    pub fn get(&self, client: u64, checkpoint: Checkpoint) -> Option<f64> {
        self.entries.get(&(client, checkpoint)).copied()
    }

    pub fn batch_of(&self, client: u64) -> Option<usize> {
        self.batch_of.get(&client).copied()
    }

    pub fn clients_in(&self, batch: usize) -> Vec<u64> {
        self.batch_of
            .iter()
            .filter(|(_, &b)| b == batch)
            .map(|(&c, _)| c)
            .collect()
    }

    pub fn clients_before(&self, batch: usize) -> Vec<u64> {
        self.batch_of
            .iter()
            .filter(|(_, &b)| b < batch)
            .map(|(&c, _)| c)
            .collect()
    }

    pub fn batch_count(&self) -> usize {
        self.batch_of.values().copied().max().unwrap_or(0)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Checkpoints present for any client, in timeline order.
    pub fn checkpoints(&self) -> Vec<Checkpoint> {
        let mut cps: Vec<Checkpoint> = self.entries.keys().map(|(_, c)| *c).collect();
        cps.sort_by_key(|c| c.timeline_key());
        cps.dedup();
        cps
    }

    fn require(&self, client: u64, checkpoint: Checkpoint) -> Result<f64> {
        self.get(client, checkpoint)
            .ok_or_else(|| Error::Data(format!("client {client} has no entry at {checkpoint}")))
    }

    /// The last evaluation of `client` once batch `t` has completed.
    fn settled(&self, client: u64, t: usize) -> Result<f64> {
        match self.get(client, Checkpoint::PostReplay(t)) {
            Some(a) => Ok(a),
            None => self.require(client, Checkpoint::PostBatch(t)),
        }
    }

    pub fn to_csv(&self) -> String {
        let mut rows: Vec<(&(u64, Checkpoint), &f64)> = self.entries.iter().collect();
        rows.sort_by_key(|((c, cp), _)| (cp.timeline_key(), *c));
        let mut out = format!("{LEDGER_HEADER}\n");
        for ((client, cp), acc) in rows {
            out.push_str(&format!("{client},{},{cp},{acc:?}\n", self.batch_of[client]));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(LEDGER_HEADER) {
            return Err(Error::Data("ledger header mismatch".into()));
        }
        let mut ledger = Self::new();
        for (i, line) in lines.enumerate() {
            let bad = || Error::Data(format!("ledger row {}: {line:?}", i + 1));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 4 {
                return Err(bad());
            }
            let client = f[0].parse().map_err(|_| bad())?;
            ledger.register(client, f[1].parse().map_err(|_| bad())?)?;
            ledger.record(client, f[2].parse()?, f[3].parse().map_err(|_| bad())?)?;
        }
        Ok(ledger)
    }
}

fn mean_pp(diffs: &[f64]) -> f64 {
    100.0 * diffs.iter().sum::<f64>() / diffs.len() as f64
}

/// Mean gain of batch-`t` clients after federated training over their
/// standalone local model, in percentage points.
pub fn compute_pa(ledger: &MetricsLedger, t: usize) -> Result<f64> {
    let clients = ledger.clients_in(t);
    if clients.is_empty() {
        return Err(Error::Data(format!("batch {t} has no clients")));
    }
    let diffs = clients
        .iter()
        .map(|&c| Ok(ledger.require(c, Checkpoint::PostBatch(t))? - ledger.require(c, Checkpoint::LocalPretrain)?))
        .collect::<Result<Vec<_>>>()?;
    Ok(mean_pp(&diffs))
}

/// Mean accuracy change of clients from batches before `t` across the
/// integration of batch `t`, in percentage points. Both sides use the
/// post-replay checkpoint when one was recorded.
pub fn compute_ri(ledger: &MetricsLedger, t: usize) -> Result<f64> {
    if t < 2 {
        return Err(Error::Data("retro-active improvement starts at batch 2".into()));
    }
    let clients = ledger.clients_before(t);
    if clients.is_empty() {
        return Err(Error::Data(format!("no clients precede batch {t}")));
    }
    let diffs = clients
        .iter()
        .map(|&c| Ok(ledger.settled(c, t)? - ledger.settled(c, t - 1)?))
        .collect::<Result<Vec<_>>>()?;
    Ok(mean_pp(&diffs))
}

pub fn mutual(pa: f64, ri: f64) -> f64 {
    (pa + ri) / 2.0
}

/// Mean accuracy of batch-1 clients at every post-batch and post-replay
/// checkpoint, in timeline order, in percentage points.
pub fn first_batch_trajectory(ledger: &MetricsLedger) -> Vec<(Checkpoint, f64)> {
    let clients = ledger.clients_in(1);
    ledger
        .checkpoints()
        .into_iter()
        .filter(|c| matches!(c, Checkpoint::PostBatch(_) | Checkpoint::PostReplay(_)))
        .filter_map(|cp| {
            let accs: Option<Vec<f64>> = clients.iter().map(|&c| ledger.get(c, cp)).collect();
            accs.filter(|a| !a.is_empty()).map(|a| (cp, mean_pp(&a)))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub method: String,
    pub batch: usize,
    pub checkpoint: String,
    pub metric: String,
    pub value: f64,
}

/// Per-batch mean accuracies at every checkpoint plus PA, RI and mutual
/// benefit wherever defined.
pub fn summarize(ledger: &MetricsLedger, method: &str) -> Result<Vec<MetricRow>> {
    let mut rows = Vec::new();
    let row = |batch, checkpoint: String, metric: &str, value| MetricRow {
        method: method.to_string(),
        batch,
        checkpoint,
        metric: metric.to_string(),
        value,
    };
    for cp in ledger.checkpoints() {
        for batch in 1..=ledger.batch_count() {
            let accs: Vec<f64> = ledger
                .clients_in(batch)
                .iter()
                .filter_map(|&c| ledger.get(c, cp))
                .collect();
            if !accs.is_empty() {
                rows.push(row(batch, cp.to_string(), "accuracy", mean_pp(&accs)));
            }
        }
    }
    for t in 1..=ledger.batch_count() {
        let pa = compute_pa(ledger, t).ok();
        if let Some(pa) = pa {
            rows.push(row(t, Checkpoint::PostBatch(t).to_string(), "pa", pa));
        }
        if t >= 2 {
            let ri = compute_ri(ledger, t)?;
            let cp = if ledger.checkpoints().contains(&Checkpoint::PostReplay(t)) {
                Checkpoint::PostReplay(t)
            } else {
                Checkpoint::PostBatch(t)
            };
            rows.push(row(t, cp.to_string(), "ri", ri));
            if let Some(pa) = pa {
                rows.push(row(t, cp.to_string(), "mutual", mutual(pa, ri)));
            }
        }
    }
    Ok(rows)
}

pub fn rows_to_csv(rows: &[MetricRow]) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{:.6}\n",
            r.method, r.batch, r.checkpoint, r.metric, r.value
        ));
    }
    out
}

/// Sample mean and (n-1) standard deviation; the deviation is 0 for a
/// single value.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_batch(before: f64, after: f64, local: f64, trained: f64) -> MetricsLedger {
        let mut l = MetricsLedger::new();
        l.register(0, 1).unwrap();
        l.register(1, 2).unwrap();
        l.record(0, Checkpoint::LocalPretrain, local).unwrap();
        l.record(0, Checkpoint::PostBatch(1), before).unwrap();
        l.record(1, Checkpoint::LocalPretrain, local).unwrap();
        l.record(1, Checkpoint::PostBatch(2), trained).unwrap();
        l.record(0, Checkpoint::PostReplay(2), after).unwrap();
        l
    }

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() <= 0.005 + 1e-9
    }

    #[test]
    fn spec_examples() {
        let l = two_batch(0.6657, 0.6889, 0.7001, 0.7143);
        assert!(close(compute_pa(&l, 2).unwrap(), 1.42));
        assert!(close(compute_ri(&l, 2).unwrap(), 2.32));
        let l = two_batch(0.5115, 0.3259, 0.7001, 0.4369);
        assert!(close(compute_pa(&l, 2).unwrap(), -26.32));
        assert!(close(compute_ri(&l, 2).unwrap(), -18.56));
        assert!(close(mutual(-26.32, -18.56), -22.44));
        assert!(close(mutual(1.42, 2.32), 1.87));
        assert_eq!(mutual(0.0, 0.0), 0.0);
        let l = two_batch(0.5, 0.5, 0.5, 0.5);
        assert_eq!(compute_pa(&l, 2).unwrap(), 0.0);
        assert_eq!(compute_ri(&l, 2).unwrap(), 0.0);
    }

    #[test]
    fn paired_differences_not_mean_differences() {
        let mut l = MetricsLedger::new();
        for c in 0..3 {
            l.register(c, 1).unwrap();
        }
        l.register(9, 2).unwrap();
        let accs = [(0.2, 0.4), (0.6, 0.6), (1.0, 0.7)];
        for (c, (b, a)) in accs.iter().enumerate() {
            l.record(c as u64, Checkpoint::PostBatch(1), *b).unwrap();
            l.record(c as u64, Checkpoint::PostBatch(2), *a).unwrap();
        }
        let ri = compute_ri(&l, 2).unwrap();
        assert!((ri - 100.0 * (0.2 + 0.0 - 0.3) / 3.0).abs() < 1e-9);
    }

    #[test]
    fn missing_entries_name_the_client() {
        let mut l = two_batch(0.5, 0.5, 0.5, 0.5);
        l.register(7, 1).unwrap();
        l.record(7, Checkpoint::PostBatch(1), 0.3).unwrap();
        let err = compute_ri(&l, 2).unwrap_err().to_string();
        assert!(err.contains("client 7"), "{err}");
        l.register(8, 2).unwrap();
        let err = compute_pa(&l, 2).unwrap_err().to_string();
        assert!(err.contains("client 8"), "{err}");
    }

    #[test]
    fn ledger_rejects_bad_entries() {
        let mut l = MetricsLedger::new();
        assert!(l.record(1, Checkpoint::LocalPretrain, 0.5).is_err());
        l.register(1, 1).unwrap();
        assert!(l.register(1, 2).is_err());
        assert!(l.record(1, Checkpoint::LocalPretrain, 1.5).is_err());
        l.record(1, Checkpoint::LocalPretrain, 0.5).unwrap();
        assert!(l.record(1, Checkpoint::LocalPretrain, 0.6).is_err());
    }

    #[test]
    fn checkpoint_labels_round_trip() {
        for cp in [
            Checkpoint::LocalPretrain,
            Checkpoint::AtJoin(3),
            Checkpoint::PostBatch(1),
            Checkpoint::PostReplay(12),
        ] {
            assert_eq!(cp.to_string().parse::<Checkpoint>().unwrap(), cp);
        }
        assert!("post_batch(x)".parse::<Checkpoint>().is_err());
        assert!("round(3)".parse::<Checkpoint>().is_err());
    }

    #[test]
    fn csv_round_trip() {
        let l = two_batch(0.1 + 0.2, 0.7, 0.333333333333, 1.0);
        let text = l.to_csv();
        assert_eq!(MetricsLedger::from_csv(&text).unwrap(), l);
        assert!(MetricsLedger::from_csv("nope\n").is_err());
    }

    #[test]
    fn trajectory_and_summary() {
        let mut l = MetricsLedger::new();
        l.register(0, 1).unwrap();
        l.record(0, Checkpoint::LocalPretrain, 0.5).unwrap();
        l.record(0, Checkpoint::PostBatch(1), 0.6).unwrap();
        assert_eq!(first_batch_trajectory(&l).len(), 1);
        l.register(1, 2).unwrap();
        l.record(1, Checkpoint::LocalPretrain, 0.4).unwrap();
        l.record(1, Checkpoint::PostBatch(2), 0.5).unwrap();
        l.record(0, Checkpoint::PostBatch(2), 0.6).unwrap();
        l.record(0, Checkpoint::PostReplay(2), 0.65).unwrap();
        let traj = first_batch_trajectory(&l);
        assert_eq!(
            traj.iter().map(|t| t.0).collect::<Vec<_>>(),
            vec![
                Checkpoint::PostBatch(1),
                Checkpoint::PostBatch(2),
                Checkpoint::PostReplay(2)
            ]
        );
        let rows = summarize(&l, "pfeddsh").unwrap();
        let get = |m: &str, b: usize| rows.iter().find(|r| r.metric == m && r.batch == b).unwrap().value;
        assert!((get("pa", 2) - 10.0).abs() < 1e-9);
        assert!((get("ri", 2) - 5.0).abs() < 1e-9);
        assert!((get("mutual", 2) - 7.5).abs() < 1e-9);
        assert!(rows_to_csv(&rows).starts_with(METRICS_HEADER));
    }

    #[test]
    fn mean_std_basics() {
        assert_eq!(mean_std(&[2.0]), (2.0, 0.0));
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 2f64.sqrt()).abs() < 1e-12);
    }
}
