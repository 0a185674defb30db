//! `flowlab` experiment runner.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use serde_json::json;

mod config;
mod experiments;

use config::{Config, Experiment};

#[derive(Parser)]
#[command(name = "flowlab", about = "Continuity-equation experiments from config files")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Runs the experiment described by a JSON config.
    Run {
        config: PathBuf,
        /// Overrides `output_dir` from the config.
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Lists experiments, fields, noise kinds and initial distributions.
    List,
    Version,
}

const FAIL: u8 = 2;
const ERROR: u8 = 1;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::List => {
            print!("{}", catalog());
            ExitCode::SUCCESS
        }
        Command::Version => {
            println!("flowlab {}", env!("CARGO_PKG_VERSION"));
            ExitCode::SUCCESS
        }
        Command::Run { config, output_dir } => match run(&config, output_dir) {
            Ok(true) => ExitCode::SUCCESS,
            Ok(false) => ExitCode::from(FAIL),
            Err(e) => {
                eprintln!("error: {e:#}");
                ExitCode::from(ERROR)
            }
        },
    }
}

fn catalog() -> String {
    use flowlab::fields::FieldSpec;
    use flowlab::noise::NoiseKind;
    use flowlab::particles::InitialDistribution;
    let sections: [(&str, &[&str]); 4] = [
        ("distributions", &InitialDistribution::CATALOG),
        ("experiments", &Experiment::CATALOG),
        ("fields", &FieldSpec::CATALOG),
        ("noise", &NoiseKind::CATALOG),
    ];
    let mut out = String::new();
    for (title, names) in sections {
        out.push_str(title);
        out.push_str(":\n");
        for n in names {
            out.push_str("  ");
            out.push_str(n);
            out.push('\n');
        }
    }
    out
}

fn default_output_dir(path: &Path, cfg: &Config) -> PathBuf {
    if let Some(dir) = &cfg.output_dir {
        return dir.clone();
    }
    let stem = path.file_stem().map_or("run".into(), |s| s.to_string_lossy().into_owned());
    PathBuf::from("output").join(stem)
}

fn run(path: &Path, output_dir: Option<PathBuf>) -> Result<bool> {
    let cfg = config::load(path)?;
    let out = output_dir.unwrap_or_else(|| default_output_dir(path, &cfg));
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    std::fs::write(out.join("config.resolved.json"), serde_json::to_string_pretty(&cfg)? + "\n")?;

    let start = Instant::now();
    let outcome = flowlab::par::with_threads(cfg.threads, || experiments::run(&cfg, &out))
        .with_context(|| format!("experiment {:?}", cfg.experiment))?;
    let elapsed = start.elapsed().as_secs_f64();
    let timestamp = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());

    let report = json!({
        "experiment": cfg.experiment,
        "pass": outcome.pass,
        "results": outcome.results,
        "config": cfg,
        "meta": {
            "version": env!("CARGO_PKG_VERSION"),
            "timestamp": timestamp,
            "elapsed_seconds": elapsed,
            "output_dir": out,
        },
    });
    std::fs::write(out.join("report.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    println!(
        "{:?}: {} ({elapsed:.2} s) -> {}",
        cfg.experiment,
        if outcome.pass { "pass" } else { "fail" },
        out.join("report.json").display()
    );
    Ok(outcome.pass)
}
