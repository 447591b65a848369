//! Command-line interface.

use crate::config::{ExperimentConfig, DEFAULT_SWEEP_BETAS};
use crate::error::{Error, Result};
use crate::experts::{classifier_file, detector_file};
use crate::report::{
    export_results, load_traces, render_report, sweep_from_traces, write_file, write_traces, CROSSOVER_FILE,
    SWEEP_FILE,
};
use crate::simulation::{model_dir, prepare, run_systems, system_kinds, Mechanism, RunTrace, SystemState};
use clap::{Parser, Subcommand};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Debug, Parser)]
#[command(name = "aiitl", version, about = "Simulate HITL and AIITL classification systems")]
pub struct Cli {
    /// Replace every seed in the config with ones derived from this value.
    #[arg(long, global = true)]
    pub seed_override: Option<u64>,
    /// Print nothing on success.
    #[arg(long, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the AIITL system and the three baselines on one stream.
    Run {
        config: PathBuf,
        /// Output directory; overrides the config.
        #[arg(long)]
        output: Option<PathBuf>,
        /// Run an AIITL system for every mechanism, not only the configured one.
        #[arg(long)]
        all_mechanisms: bool,
    },
    /// Recompute utilities of a finished run for several values of beta.
    Sweep {
        config: PathBuf,
        /// Comma-separated list; empty means 0.5,0.75,1.0,2.0.
        #[arg(long, default_value = "", allow_hyphen_values = true)]
        betas: String,
        #[arg(long)]
        output: Option<PathBuf>,
        /// Run the experiment first instead of reading existing traces.
        #[arg(long)]
        rerun: bool,
    },
    /// Print the comparison table and utility series of a run directory.
    Report { dir: PathBuf },
}

/// Failure of a command, split by exit code.
#[derive(Debug)]
pub enum Failure {
    /// Invalid input: exit code 2.
    Usage(Error),
    /// Anything that went wrong while running: exit code 1.
    Runtime(Error),
}

impl Failure {
    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Runtime(_) => 1,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Usage(e) | Failure::Runtime(e) => write!(f, "{e}"),
        }
    }
}

type CmdResult = std::result::Result<(), Failure>;

fn usage(e: Error) -> Failure {
    Failure::Usage(e)
}

fn runtime(e: Error) -> Failure {
    Failure::Runtime(e)
}

pub fn main_with(cli: Cli) -> ExitCode {
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.exit_code())
        }
    }
}

pub fn execute(cli: &Cli) -> CmdResult {
    match &cli.command {
        Command::Run {
            config,
            output,
            all_mechanisms,
        } => {
            let (cfg, dir) = load_config(config, cli.seed_override, output.as_deref())?;
            let traces = run_and_write(&cfg, &dir, *all_mechanisms)?;
            if !cli.quiet {
                print!("{}", render_report(&traces));
                println!("\nwrote {}", dir.display());
            }
            Ok(())
        }
        Command::Sweep {
            config,
            betas,
            output,
            rerun,
        } => {
            let betas = parse_betas(betas).map_err(usage)?;
            let (cfg, dir) = load_config(config, cli.seed_override, output.as_deref())?;
            let traces = if *rerun {
                run_and_write(&cfg, &dir, false)?
            } else {
                load_traces(&dir).map_err(|e| {
                    usage(Error::Data(format!("{e}; run the experiment first or pass --rerun")))
                })?
            };
            let table = sweep_from_traces(&traces, &betas).map_err(runtime)?;
            let csv = table.to_csv();
            write_file(&dir.join(SWEEP_FILE), &csv).map_err(runtime)?;
            let crossovers = crate::report::crossover_table(&traces);
            write_file(&dir.join(CROSSOVER_FILE), &crossovers).map_err(runtime)?;
            if !cli.quiet {
                print!("{csv}\n{crossovers}");
            }
            Ok(())
        }
        Command::Report { dir } => {
            let traces = load_traces(dir).map_err(usage)?;
            if !cli.quiet {
                print!("{}", render_report(&traces));
            }
            Ok(())
        }
    }
}

/// Parses a comma-separated β list; an empty list yields the defaults.
pub fn parse_betas(text: &str) -> Result<Vec<f64>> {
    let mut betas = Vec::new();
    for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let b: f64 = part
            .parse()
            .map_err(|_| Error::Parameter(format!("'{part}' is not a number")))?;
        if !(b.is_finite() && b >= 0.0) {
            return Err(Error::Parameter(format!("beta must be >= 0, got {part}")));
        }
        if !betas.contains(&b) {
            betas.push(b);
        }
    }
    if betas.is_empty() {
        betas = DEFAULT_SWEEP_BETAS.to_vec();
    }
    Ok(betas)
}

fn load_config(
    path: &Path,
    seed_override: Option<u64>,
    output: Option<&Path>,
) -> std::result::Result<(ExperimentConfig, PathBuf), Failure> {
    let mut cfg = ExperimentConfig::load(path).map_err(usage)?;
    if let Some(seed) = seed_override {
        cfg = cfg.with_seed_override(seed);
    }
    if let Some(dir) = output {
        cfg.output.dir = dir.to_path_buf();
    }
    let dir = cfg.output.dir.clone();
    Ok((cfg, dir))
}

fn run_and_write(cfg: &ExperimentConfig, dir: &Path, all_mechanisms: bool) -> std::result::Result<Vec<RunTrace>, Failure> {
    let mechanisms = if all_mechanisms {
        Mechanism::ALL.to_vec()
    } else {
        vec![cfg.mechanism.kind]
    };
    let prepared = prepare(cfg).map_err(runtime)?;
    let results = run_systems(&prepared, &system_kinds(&mechanisms)).map_err(runtime)?;
    std::fs::create_dir_all(dir).map_err(|e| runtime(Error::io(dir, e)))?;
    write_models(&prepared.state, &results, dir).map_err(runtime)?;
    let mut traces: Vec<RunTrace> = results.into_iter().map(|(t, _)| t).collect();
    crate::report::sort_traces(&mut traces);
    write_traces(&traces, dir).map_err(runtime)?;
    export_results(&traces, &cfg.utility.sweep_betas, dir).map_err(runtime)?;
    write_file(&dir.join("config.toml"), &cfg.to_toml().map_err(runtime)?).map_err(runtime)?;
    Ok(traces)
}

/// General model, its detector, and every system's experts and registry.
fn write_models(initial: &SystemState, results: &[(RunTrace, SystemState)], dir: &Path) -> Result<()> {
    let models = dir.join("models");
    std::fs::create_dir_all(&models).map_err(|e| Error::io(&models, e))?;
    initial.general.save(&models.join("general_classifier.json"))?;
    write_file(&models.join("general_detector.json"), &initial.general_detector.to_dump()?)?;
    for (trace, state) in results {
        let sub = dir.join(model_dir(&trace.system));
        std::fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
        for e in &state.pool.experts {
            if let Some(c) = &e.classifier {
                c.save(&sub.join(classifier_file(e.id)))?;
            }
            if let Some(d) = &e.detector {
                write_file(&sub.join(detector_file(e.id)), &d.to_dump()?)?;
            }
        }
        let registry = serde_json::to_string_pretty(&trace.registry)? + "\n";
        write_file(&sub.join("registry.json"), &registry)?;
    }
    Ok(())
}
