use std::fs;
use std::path::Path;
use std::process::ExitCode;

use anyhow::{Context, Result};
use pfeddsh::federation::{run_experiment_with_jobs, sha256_hex, RunManifest};

use super::{Usage, EXIT_VERIFY};

fn mismatch(msg: String) -> Result<ExitCode> {
    eprintln!("verification failed: {msg}");
    Ok(ExitCode::from(EXIT_VERIFY))
}

/// First line where the two texts differ, as `(line number, left, right)`.
fn first_divergence<'a>(a: &'a str, b: &'a str) -> Option<(usize, &'a str, &'a str)> {
    let mut left = a.lines();
    let mut right = b.lines();
    for n in 1.. {
        match (left.next(), right.next()) {
            (None, None) => return None,
            (l, r) if l != r => return Some((n, l.unwrap_or("<end of file>"), r.unwrap_or("<end of file>"))),
            _ => {}
        }
    }
    unreachable!()
}

pub fn verify(manifest_path: &Path, jobs: Option<usize>) -> Result<ExitCode> {
    let text = fs::read_to_string(manifest_path)
        .map_err(|e| Usage(format!("cannot read manifest {}: {e}", manifest_path.display())))?;
    let manifest: RunManifest = serde_json::from_str(&text)
        .map_err(|e| Usage(format!("{} is not a run manifest: {e}", manifest_path.display())))?;
    let ours = env!("CARGO_PKG_VERSION");
    if manifest.version != ours {
        return mismatch(format!(
            "manifest written by version {}, this binary is version {ours}",
            manifest.version
        ));
    }
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let ledger_path = dir.join(&manifest.ledger_file);
    let recorded = fs::read(&ledger_path).with_context(|| format!("reading {}", ledger_path.display()))?;
    manifest.config.validate()?;
    let outcome = run_experiment_with_jobs(&manifest.config, jobs)?;
    let fresh = outcome.ledger.to_csv();
    if fresh.as_bytes() != recorded.as_slice() {
        let recorded = String::from_utf8_lossy(&recorded);
        let detail = match first_divergence(&recorded, &fresh) {
            Some((line, was, now)) => format!("ledger line {line} differs: recorded `{was}`, re-run `{now}`"),
            None => "ledger differs in line endings or trailing bytes".to_string(),
        };
        return mismatch(detail);
    }
    if sha256_hex(&recorded) != manifest.ledger_sha256 {
        return mismatch("ledger digest does not match the manifest".into());
    }
    println!("verified: {} rows identical", fresh.lines().count().saturating_sub(1));
    Ok(ExitCode::SUCCESS)
}
