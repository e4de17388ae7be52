//! `gfront <experiment> --config <file> [--out DIR] [--threads K]`

use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use gfront_core::harness::{run, Experiment, ExperimentConfig};
use gfront_core::Error;

const AFTER_HELP: &str = "\
Experiments: diagnostics, hbar_table, enhancement, certificate, wulff, front,
error_rate, slow_table, area_fraction.

Fields are unit-periodic in space and time. A field with period P is
rescaled by x -> x/P, t -> t/P before use; this leaves the G-equation and its
effective Hamiltonian unchanged. Sampled field files declare the period in
their header (`period=P`).

Exit codes: 0 ok, 2 config error, 3 numeric failure, 4 hypothesis violation.";

#[derive(Parser, Debug)]
#[command(name = "gfront", version, about = "Homogenization experiments for the G-equation", after_help = AFTER_HELP)]
struct Cli {
    /// Experiment to run.
    experiment: String,

    /// TOML config file.
    #[arg(long, short)]
    config: PathBuf,

    /// Output directory; overrides `output` in the config.
    #[arg(long, short)]
    out: Option<PathBuf>,

    /// Worker threads (0 = all cores).
    #[arg(long, env = "GFRONT_THREADS", default_value_t = 0)]
    threads: usize,
}

fn execute(cli: &Cli) -> Result<bool, Error> {
    let experiment: Experiment = cli.experiment.parse()?;
    let cfg = ExperimentConfig::load(&cli.config)?;
    let out = cli
        .out
        .clone()
        .or_else(|| cfg.output.clone())
        .unwrap_or_else(|| PathBuf::from("out").join(experiment.name()));
    if cli.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()
            .map_err(|e| Error::Config(format!("threads: {e}")))?;
    }
    let outcome = run(&cfg, experiment, &out)?;
    println!(
        "{experiment}: {}",
        if outcome.passed {
            "passed"
        } else {
            "checks failed"
        }
    );
    println!(
        "{}",
        serde_json::to_string_pretty(&outcome.summary).unwrap_or_default()
    );
    println!("artifacts in {}", outcome.out_dir.display());
    Ok(outcome.passed)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(_) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("gfront: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
