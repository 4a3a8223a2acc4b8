use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Event, ExperimentConfig, RunOutcome};
use crate::error::{Error, Result};
use crate::masking::CapacityReport;
use crate::metrics::rows_to_csv;

/// Files every run directory holds besides the mask, pool and snapshot
/// subdirectories.
pub const RUN_FILES: [&str; 7] = [
    "config.toml",
    "manifest.json",
    "ledger.csv",
    "metrics.csv",
    "capacity.csv",
    "events.jsonl",
    "partition.json",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub method: String,
    pub seed: u64,
    pub config: ExperimentConfig,
    pub replay_phases: usize,
    pub frozen_masks: Vec<String>,
    pub snapshots: Vec<String>,
    pub ledger_file: String,
    pub ledger_sha256: String,
    pub timings: BTreeMap<String, f64>,
    pub events: Vec<Event>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl RunOutcome {
    pub fn manifest(&self) -> RunManifest {
        let ledger = self.ledger.to_csv();
        RunManifest {
            version: env!("CARGO_PKG_VERSION").to_string(),
            method: self.config.method.to_string(),
            seed: self.config.seed,
            config: self.config.clone(),
            replay_phases: self.replay_phases(),
            frozen_masks: self
                .masks
                .iter()
                .filter(|m| m.is_frozen())
                .map(|m| format!("masks/batch_{}.mask", m.batch))
                .collect(),
            snapshots: self
                .snapshots
                .iter()
                .map(|(id, _)| format!("snapshots/client_{id}.bin"))
                .collect(),
            ledger_file: "ledger.csv".into(),
            ledger_sha256: sha256_hex(ledger.as_bytes()),
            timings: self.timings.clone(),
            events: self.events.clone(),
        }
    }

    pub fn capacity_csv(&self) -> String {
        match &self.capacity {
            Some(c) => c.to_csv(),
            None => CapacityReport {
                total_params: 0,
                batches: Vec::new(),
                neurons_used_fraction: 0.0,
            }
            .to_csv(),
        }
    }
}

fn json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("serializable")
}

/// Writes the complete run directory. An existing non-empty directory is
/// only reused when `force` is set.
pub fn write_run_dir(outcome: &RunOutcome, dir: &Path, force: bool) -> Result<()> {
    if dir.exists() && fs::read_dir(dir)?.next().is_some() {
        if !force {
            return Err(Error::Input(format!(
                "output directory {} is not empty (use --force to overwrite)",
                dir.display()
            )));
        }
        for sub in ["masks", "pools", "snapshots"] {
            let p = dir.join(sub);
            if p.exists() {
                fs::remove_dir_all(p)?;
            }
        }
    }
    for sub in ["masks", "pools", "snapshots"] {
        fs::create_dir_all(dir.join(sub))?;
    }
    let manifest = outcome.manifest();
    fs::write(dir.join("config.toml"), outcome.config.to_toml())?;
    fs::write(dir.join("manifest.json"), json(&manifest))?;
    fs::write(dir.join("ledger.csv"), outcome.ledger.to_csv())?;
    fs::write(dir.join("metrics.csv"), rows_to_csv(&outcome.metrics))?;
    fs::write(dir.join("capacity.csv"), outcome.capacity_csv())?;
    let mut events = String::new();
    for e in &outcome.events {
        events.push_str(&serde_json::to_string(e).expect("serializable"));
        events.push('\n');
    }
    fs::write(dir.join("events.jsonl"), events)?;
    fs::write(dir.join("partition.json"), json(&outcome.partition))?;
    for m in outcome.masks.iter().filter(|m| m.is_frozen()) {
        fs::write(dir.join(format!("masks/batch_{}.mask", m.batch)), m.to_bytes()?)?;
    }
    for p in &outcome.pools {
        fs::write(dir.join(format!("pools/batch_{}.pool", p.source_batch)), p.to_bytes())?;
    }
    for (id, params) in &outcome.snapshots {
        let bytes: Vec<u8> = params.iter().flat_map(|v| v.to_le_bytes()).collect();
        fs::write(dir.join(format!("snapshots/client_{id}.bin")), bytes)?;
    }
    Ok(())
}
