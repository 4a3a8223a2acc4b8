use std::fmt::Write as _;
use std::path::Path;
use std::process::ExitCode;

use anyhow::{bail, Result};
use pfeddsh::federation::{run_experiment_with_jobs, RunOutcome};

use super::{emit, load_config, Usage};
use crate::ConfigArgs;

pub const SWEEP_HEADER: &str = "param,value,accuracy,pa,ri,sparsity,active_neuron_fraction";

fn config_key(param: &str) -> Option<&'static str> {
    Some(match param {
        "lambda" => "mask.lambda",
        "embed_dim" => "hypernet.embed_dim",
        "gamma" => "mask.gamma",
        "alpha_dirichlet" => "data.dirichlet_alpha",
        "seed" => "seed",
        _ => return None,
    })
}

/// Mean of a per-batch metric over the onboarded batches after the first,
/// or over batch 1 when the schedule has a single batch.
fn batch_mean(outcome: &RunOutcome, metric: &str) -> f64 {
    let rows: Vec<_> = outcome.metrics.iter().filter(|r| r.metric == metric).collect();
    let later: Vec<f64> = rows.iter().filter(|r| r.batch >= 2).map(|r| r.value).collect();
    let values = if later.is_empty() {
        rows.iter().map(|r| r.value).collect()
    } else {
        later
    };
    if values.is_empty() {
        f64::NAN
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

pub fn sweep(
    args: &ConfigArgs,
    param: &str,
    values: &[String],
    out: Option<&Path>,
    force: bool,
    jobs: Option<usize>,
) -> Result<ExitCode> {
    let Some(key) = config_key(param) else {
        bail!(Usage(format!(
            "unknown sweep parameter `{param}` (expected lambda, embed_dim, gamma, alpha_dirichlet or seed)"
        )));
    };
    let values: Vec<&str> = values.iter().map(|v| v.trim()).filter(|v| !v.is_empty()).collect();
    if values.is_empty() {
        bail!(Usage("sweep needs at least one value".into()));
    }
    if let Some(path) = out {
        if path.exists() && !force {
            bail!(Usage(format!(
                "{} already exists (use --force to overwrite)",
                path.display()
            )));
        }
    }
    // validate every point before running any of them
    let configs = values
        .iter()
        .map(|v| load_config(args, &[(key.to_string(), v.to_string())]))
        .collect::<Result<Vec<_>>>()?;
    let mut csv = format!("{SWEEP_HEADER}\n");
    for (value, cfg) in values.iter().zip(configs) {
        let outcome = run_experiment_with_jobs(&cfg, jobs)?;
        let (sparsity, active) = match &outcome.capacity {
            Some(c) => (c.mean_sparsity(), c.neurons_used_fraction),
            None => (0.0, 1.0),
        };
        writeln!(
            csv,
            "{param},{value},{:.6},{:.6},{:.6},{:.6},{:.6}",
            outcome.final_accuracy(),
            batch_mean(&outcome, "pa"),
            batch_mean(&outcome, "ri"),
            sparsity,
            active
        )?;
        eprintln!("{param}={value} done");
    }
    emit(&csv, out, true)?;
    Ok(ExitCode::SUCCESS)
}
