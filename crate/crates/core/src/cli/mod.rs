use std::fs;
use std::path::Path;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use pfeddsh::federation::{run_experiment_with_jobs, write_run_dir, ExperimentConfig, Method};
use pfeddsh::metrics::{rows_to_csv, summarize, MetricsLedger};
use pfeddsh::Error;

use crate::ConfigArgs;

pub mod gradcheck;
pub mod sweep;
pub mod verify;

pub const EXIT_FAILURE: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_NUMERIC: u8 = 3;
pub const EXIT_VERIFY: u8 = 4;

/// Raised for command-line arguments that are well-formed but unusable.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct Usage(pub String);

pub fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<Usage>().is_some() {
        return EXIT_CONFIG;
    }
    match e.downcast_ref::<Error>() {
        Some(Error::Config { .. }) => EXIT_CONFIG,
        Some(Error::Numeric { .. }) => EXIT_NUMERIC,
        _ => EXIT_FAILURE,
    }
}

/// Config file, then `PFEDDSH_*` variables, then `--set`, then `--seed` and
/// `--method`.
pub fn load_config(args: &ConfigArgs, extra: &[(String, String)]) -> Result<ExperimentConfig> {
    let text = match &args.config {
        Some(path) => {
            fs::read_to_string(path).map_err(|e| Usage(format!("cannot read config {}: {e}", path.display())))?
        }
        None => String::new(),
    };
    let mut overrides = ExperimentConfig::env_overrides();
    for kv in &args.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Usage(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        overrides.push((k.trim().to_string(), v.trim().to_string()));
    }
    if let Some(seed) = args.seed {
        overrides.push(("seed".into(), seed.to_string()));
    }
    if let Some(method) = &args.method {
        let m: Method = method.parse()?;
        overrides.push(("method".into(), format!("\"{m}\"")));
    }
    overrides.extend(extra.iter().cloned());
    let cfg = ExperimentConfig::parse(&text, &overrides)?;
    Ok(cfg)
}

pub fn run(args: &ConfigArgs, out: &Path, force: bool, jobs: Option<usize>) -> Result<ExitCode> {
    let cfg = load_config(args, &[])?;
    refuse_clobber(out, force)?;
    let outcome = run_experiment_with_jobs(&cfg, jobs)?;
    write_run_dir(&outcome, out, force).with_context(|| format!("writing {}", out.display()))?;
    println!("method {} seed {} -> {}", cfg.method, cfg.seed, out.display());
    for row in outcome
        .metrics
        .iter()
        .filter(|r| matches!(r.metric.as_str(), "pa" | "ri" | "mutual"))
    {
        println!("  batch {} {:<6} {:>8.2}", row.batch, row.metric, row.value);
    }
    Ok(ExitCode::SUCCESS)
}

fn refuse_clobber(out: &Path, force: bool) -> Result<()> {
    let occupied = if out.is_dir() {
        fs::read_dir(out)?.next().is_some()
    } else {
        out.exists()
    };
    if occupied && !force {
        bail!(Usage(format!(
            "{} already exists (use --force to overwrite)",
            out.display()
        )));
    }
    Ok(())
}

/// Writes `text` to `out` (refusing to overwrite without `force`) or stdout.
pub fn emit(text: &str, out: Option<&Path>, force: bool) -> Result<()> {
    match out {
        Some(path) => {
            if path.exists() && !force {
                bail!(Usage(format!(
                    "{} already exists (use --force to overwrite)",
                    path.display()
                )));
            }
            if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(parent)?;
            }
            fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
        }
        None => print!("{text}"),
    }
    Ok(())
}

pub fn report(dir: &Path, out: Option<&Path>, force: bool) -> Result<ExitCode> {
    let ledger_text = fs::read_to_string(dir.join("ledger.csv"))
        .map_err(|e| Usage(format!("{} is not a run directory: {e}", dir.display())))?;
    let ledger = MetricsLedger::from_csv(&ledger_text)?;
    let config = ExperimentConfig::parse(&fs::read_to_string(dir.join("config.toml"))?, &[])?;
    let rows = summarize(&ledger, config.method.as_str())?;
    emit(&rows_to_csv(&rows), out, force)?;
    Ok(ExitCode::SUCCESS)
}
