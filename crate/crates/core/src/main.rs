use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod cli;

/// Progressive client onboarding simulator.
///
/// Exit codes: 0 success, 1 other failure, 2 configuration or usage error,
/// 3 numeric failure, 4 verification mismatch.
#[derive(Debug, Parser)]
#[command(name = "pfeddsh", version, about)]
struct Cli {
    /// Worker threads for client-parallel work (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// TOML config with dotted keys; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Root seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Method override (pfeddsh, pfedhn_nomask, fedavg, local_only,
    /// pfeddsh_noreplay, pfeddsh_nomask).
    #[arg(long)]
    method: Option<String>,
    /// Extra `key=value` overrides, applied after PFEDDSH_* variables.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run one experiment and write its run directory.
    Run {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output directory.
        #[arg(long, default_value = "runs/latest")]
        out: PathBuf,
        /// Overwrite a non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Run one experiment per parameter value and write a comparison CSV.
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,
        /// lambda, embed_dim, gamma, alpha_dirichlet or seed.
        #[arg(long)]
        param: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', num_args = 0..)]
        values: Vec<String>,
        /// CSV destination; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Print the metrics table of a finished run directory.
    Report {
        /// Run directory written by `run`.
        dir: PathBuf,
        /// CSV destination; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Re-run a manifest's config and compare the ledger byte for byte.
    Verify {
        /// manifest.json of a run directory.
        manifest: PathBuf,
    },
    /// Compare analytic gradients against central differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Random instances per gradient family.
        #[arg(long, default_value_t = 20)]
        instances: usize,
        /// Largest tolerated relative error.
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Run { config, out, force } => cli::run(&config, &out, force, cli.jobs),
        Command::Sweep {
            config,
            param,
            values,
            out,
            force,
        } => cli::sweep::sweep(&config, &param, &values, out.as_deref(), force, cli.jobs),
        Command::Report { dir, out, force } => cli::report(&dir, out.as_deref(), force),
        Command::Verify { manifest } => cli::verify::verify(&manifest, cli.jobs),
        Command::Gradcheck {
            seed,
            instances,
            tolerance,
        } => cli::gradcheck::gradcheck(seed, instances, tolerance),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(cli::exit_code(&e))
        }
    }
}
