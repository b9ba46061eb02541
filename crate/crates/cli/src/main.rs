use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use reprobe::analysis::MetricsLedger;
use reprobe::data::load_table;
use reprobe::models::{Snapshot, Tap};
use reprobe::probe::{fit_and_evaluate, ProbeSpec};
use reprobe::Tensor64;
use reprobe_cli::config::{self, OUTPUT_ENV};
use reprobe_cli::report::{compare_csv, compare_figure, write_report};
use reprobe_cli::runner::{plan, run_experiment, RunError};
use reprobe_cli::selftest;

#[derive(Parser)]
#[command(name = "reprobe", version, about = "Continual-learning runs measured by task heads and linear probes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every experiment in a config file.
    Run {
        config: PathBuf,
        /// Override the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Validate and print the execution plan without training.
        #[arg(long)]
        dry_run: bool,
    },
    /// Regenerate summary CSV and figures from a ledger.
    Report {
        ledger: PathBuf,
        /// Output directory (defaults to the ledger's directory).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Overlay task-1 curves and tabulate several runs on the same data.
    Compare {
        #[arg(required = true)]
        ledgers: Vec<PathBuf>,
        #[arg(long, default_value = "compare")]
        out: PathBuf,
    },
    /// Fit a linear probe on a snapshot's features for a CSV dataset.
    Probe {
        snapshot: PathBuf,
        dataset: PathBuf,
        /// Block index or `final`.
        #[arg(long, default_value = "final")]
        tap: String,
    },
    /// Gradient, CKA and probe self-checks.
    Selftest {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn output_root() -> PathBuf {
    std::env::var_os(OUTPUT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("."))
}

fn run(config_path: &Path, seed: Option<u64>, dry_run: bool) -> Result<(), RunError> {
    let mut cfgs = config::load(config_path)?;
    if let Some(s) = seed {
        for c in &mut cfgs {
            c.seed = s;
        }
    }
    let root = output_root();
    let base = config_path.parent().unwrap_or(Path::new("."));
    if dry_run {
        for c in &cfgs {
            print!("{}", plan(c, &root));
        }
        return Ok(());
    }
    for c in &cfgs {
        let art = run_experiment::<f64>(c, &root, base)?;
        println!("{}: wrote {}", c.label(), art.dir.display());
    }
    Ok(())
}

fn read_ledger(path: &Path) -> anyhow::Result<MetricsLedger> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    MetricsLedger::from_json(&text).with_context(|| format!("parsing {}", path.display()))
}

fn probe(snapshot: &Path, dataset: &Path, tap: &str) -> anyhow::Result<()> {
    let snap = Snapshot::<f64>::read(snapshot)?;
    let tap: Tap = tap.parse()?;
    let ds = load_table(dataset)?;
    let net = snap.network();
    let shape = net.spec().input_shape.clone();
    if shape.iter().product::<usize>() != ds.feature_dim() {
        bail!("dataset has {} features, snapshot expects {:?}", ds.feature_dim(), shape);
    }
    let reshape = |x: &Tensor64| {
        let mut s = vec![x.shape()[0]];
        s.extend_from_slice(&shape);
        x.reshaped(&s)
    };
    let train = net.features(&reshape(&ds.train.x)?, tap)?;
    let test = net.features(&reshape(&ds.test.x)?, tap)?;
    let spec = ProbeSpec { tap, ..ProbeSpec::default() };
    let r = fit_and_evaluate(&train, &ds.train.labels, &test, &ds.test.labels, &spec)?;
    let out = serde_json::json!({
        "tap": tap,
        "train_accuracy": r.train_accuracy,
        "test_accuracy": r.accuracy,
        "train_loss": r.train_loss,
        "converged": r.converged,
        "iterations": r.iterations,
    });
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result: anyhow::Result<()> = match cli.command {
        Command::Run { config, seed, dry_run } => match run(&config, seed, dry_run) {
            Ok(()) => Ok(()),
            Err(e) => {
                eprintln!("error: {e}");
                return ExitCode::from(e.exit_code() as u8);
            }
        },
        Command::Report { ledger, out } => (|| {
            let l = read_ledger(&ledger)?;
            let dir = out.unwrap_or_else(|| ledger.parent().map(Path::to_path_buf).unwrap_or_default());
            let files = write_report(&l, &dir)?;
            println!("wrote {} and {} figures", files.summary_csv.display(), files.figures.len());
            Ok(())
        })(),
        Command::Compare { ledgers, out } => (|| {
            let ls = ledgers.iter().map(|p| read_ledger(p)).collect::<anyhow::Result<Vec<_>>>()?;
            let csv = compare_csv(&ls)?;
            let svg = compare_figure(&ls)?;
            std::fs::create_dir_all(&out)?;
            std::fs::write(out.join("compare.csv"), &csv)?;
            std::fs::write(out.join("task1.svg"), svg)?;
            print!("{csv}");
            Ok(())
        })(),
        Command::Probe { snapshot, dataset, tap } => probe(&snapshot, &dataset, &tap),
        Command::Selftest { seed } => {
            let checks = selftest::run_all(seed);
            let mut ok = true;
            for c in &checks {
                println!(
                    "{} {:<40} {:.3e} (bound {:e})",
                    if c.passed { "PASS" } else { "FAIL" },
                    c.name,
                    c.value,
                    c.bound
                );
                ok &= c.passed;
            }
            if ok {
                Ok(())
            } else {
                Err(anyhow::anyhow!("self-test failed"))
            }
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
