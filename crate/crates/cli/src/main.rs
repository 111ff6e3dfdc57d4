use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context as _, Result};
use clap::{Parser, Subcommand, ValueEnum};

use tabed_core::experiment::{run_experiment, train_models, ExperimentConfig, RunReport};
use tabed_core::report::compare_report;
use tabed_core::selftest::{run_selftest, SelftestSize};

#[derive(Parser)]
#[command(name = "tabed", version, about = "Speculative decoding experiments over toy models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Subcommand)]
enum Command {
    /// Fit every corpus-backed k-gram model in a config and save snapshots.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Snapshot directory (defaults to the config's output dir).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Execute an experiment config.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also print the summaries to stdout.
        #[arg(long, value_enum)]
        format: Option<Format>,
    },
    /// Rank methods per scenario from run summaries (files or directories).
    Report {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        /// Human-readable table when omitted.
        #[arg(long, value_enum)]
        format: Option<Format>,
        /// Also write comparison.csv and comparison.txt here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the distribution-preservation oracle suite.
    Selftest {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, value_enum)]
        format: Option<Format>,
    },
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn dispatch(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Train { config, out } => {
            let cfg = load(&config)?;
            let dir = out.unwrap_or_else(|| cfg.output_dir());
            for p in train_models(&cfg, &dir)? {
                println!("{}", p.display());
            }
        }
        Command::Run {
            config,
            seed,
            out,
            format,
        } => {
            let mut cfg = load(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let dir = out.unwrap_or_else(|| cfg.output_dir());
            let written = run_experiment(&cfg, &dir)?;
            match format {
                Some(Format::Json) => {
                    let all: Vec<&RunReport> = written.iter().map(|(r, _)| r).collect();
                    println!("{}", serde_json::to_string_pretty(&all)?);
                }
                Some(Format::Csv) => {
                    println!("scenario,method,gamma,d,block_efficiency,modeled_speedup");
                    for (r, _) in &written {
                        let d = r.d.map(|d| d.to_string()).unwrap_or_default();
                        println!(
                            "{},{},{},{d},{},{}",
                            r.scenario, r.method, r.gamma, r.block_efficiency, r.modeled_speedup
                        );
                    }
                }
                None => {
                    for (r, w) in &written {
                        println!(
                            "{:<40} tau={:.4} speedup={:.4}  {}",
                            r.method,
                            r.block_efficiency,
                            r.modeled_speedup,
                            w.summary.display()
                        );
                    }
                }
            }
        }
        Command::Report { inputs, format, out } => {
            let mut reports = Vec::new();
            for path in summary_files(&inputs)? {
                reports.push(RunReport::load(&path)?);
            }
            let table = compare_report(&reports)?;
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
                write(&dir.join("comparison.csv"), &table.to_csv())?;
                write(&dir.join("comparison.txt"), &table.to_text())?;
            }
            match format {
                Some(Format::Csv) => print!("{}", table.to_csv()),
                Some(Format::Json) => print!("{}", table.to_json()),
                None => print!("{}", table.to_text()),
            }
        }
        Command::Selftest { seed, format } => {
            let results = run_selftest(seed, SelftestSize::full())?;
            match format {
                Some(Format::Json) => println!("{}", serde_json::to_string_pretty(&results)?),
                Some(Format::Csv) => {
                    println!("check,passed,value,bound,elapsed_ms");
                    for r in &results {
                        println!("{},{},{},{},{}", r.name, r.passed, r.value, r.bound, r.elapsed_ms);
                    }
                }
                None => {
                    for r in &results {
                        let verdict = if r.passed { "PASS" } else { "FAIL" };
                        println!(
                            "{verdict} {:<20} value={:<11.4e} bound={:<7.0e} {:>6}ms  {}",
                            r.name, r.value, r.bound, r.elapsed_ms, r.detail
                        );
                    }
                }
            }
            return Ok(results.iter().all(|r| r.passed));
        }
    }
    Ok(true)
}

fn load(path: &Path) -> Result<ExperimentConfig> {
    let cfg = ExperimentConfig::load(path)?;
    cfg.validate()?;
    Ok(cfg)
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Expands directories to the `.json` files directly inside them, sorted.
fn summary_files(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = std::fs::read_dir(p)
                .with_context(|| format!("reading {}", p.display()))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.extension().is_some_and(|x| x == "json"))
                .collect();
            found.sort();
            out.extend(found);
        } else {
            out.push(p.clone());
        }
    }
    if out.is_empty() {
        bail!("no summary files found");
    }
    Ok(out)
}
