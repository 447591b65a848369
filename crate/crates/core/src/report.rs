//! Run artifacts on disk: traces, result tables, and the printed report.

use crate::error::{Error, Result};
use crate::metrics::{beta_label, beta_sweep, crossover_beta, fmt2, utility, SweepTable, UtilityWeights};
use crate::simulation::{Mechanism, RunTrace};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

pub const TRACE_PREFIX: &str = "trace_";
pub const RESULTS_FILE: &str = "results.csv";
pub const RESULTS_EVAL_FILE: &str = "results_eval.csv";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const SWEEP_FILE: &str = "sweep.csv";
pub const CROSSOVER_FILE: &str = "crossover.csv";
pub const HITL_ID: &str = "traditional-hitl";

pub fn trace_file_name(system: &str) -> String {
    format!("{TRACE_PREFIX}{system}.json")
}

/// Canonical display order: HITL, AIITL mechanisms, then the other baselines.
pub fn system_rank(system: &str) -> usize {
    if system == HITL_ID {
        return 0;
    }
    if let Some(pos) = Mechanism::ALL.iter().position(|m| system == format!("aiitl-{m}")) {
        return 1 + pos;
    }
    match system {
        "full-automation" => 10,
        "hitl-perfect" => 11,
        _ => 20,
    }
}

pub fn sort_traces(traces: &mut [RunTrace]) {
    traces.sort_by(|a, b| {
        system_rank(&a.system)
            .cmp(&system_rank(&b.system))
            .then_with(|| a.system.cmp(&b.system))
    });
}

/// Which per-step metrics a results table reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Series {
    /// The step's streamed batch.
    Stream,
    /// The held-out final batch, classified by the state that routed the step.
    HeldOut,
}

/// The β columns of the results tables: 0.5 first, then the sweep values.
pub fn result_betas(sweep: &[f64]) -> Vec<f64> {
    let mut betas = vec![0.5];
    for &b in sweep {
        if !betas.contains(&b) {
            betas.push(b);
        }
    }
    betas
}

/// One row per (step, system): `step,system,phi,rho,utility_at_beta_*`.
pub fn results_table(traces: &[RunTrace], sweep: &[f64], series: Series) -> Result<String> {
    let betas = result_betas(sweep);
    let mut out = String::from("step,system,phi,rho");
    for b in &betas {
        write!(out, ",utility_at_beta_{}", beta_label(*b)).unwrap();
    }
    out.push('\n');
    let steps = traces.iter().map(|t| t.steps.len()).max().unwrap_or(0);
    for s in 0..steps {
        for t in traces {
            let Some(record) = t.steps.get(s) else { continue };
            let m = match series {
                Series::Stream => &record.stream,
                Series::HeldOut => &record.held_out,
            };
            write!(out, "{},{},{},{}", record.step, t.system, fmt2(m.phi), fmt2(m.rho)).unwrap();
            for &beta in &betas {
                let u = utility(m.phi, m.rho, &UtilityWeights { alpha: 1.0, beta })?;
                write!(out, ",{}", fmt2(u)).unwrap();
            }
            out.push('\n');
        }
    }
    Ok(out)
}

/// Final-batch human effort, accuracy, and utility with HITL and AIITL systems as columns.
pub fn summary_table(traces: &[RunTrace]) -> String {
    let columns: Vec<&RunTrace> = traces
        .iter()
        .filter(|t| t.system == HITL_ID || t.system.starts_with("aiitl-"))
        .collect();
    let mut out = String::from("metric");
    for t in &columns {
        write!(out, ",{}", t.system).unwrap();
    }
    out.push('\n');
    let rows: [(&str, fn(&RunTrace) -> f64); 3] = [
        ("human_effort", |t| t.final_metrics.rho),
        ("accuracy", |t| t.final_metrics.phi),
        ("utility", |t| t.final_metrics.utility),
    ];
    for (name, get) in rows {
        out.push_str(name);
        for t in &columns {
            write!(out, ",{}", fmt2(get(t))).unwrap();
        }
        out.push('\n');
    }
    out
}

/// Utility of every system's final-batch (φ, ρ) at each β.
pub fn sweep_from_traces(traces: &[RunTrace], betas: &[f64]) -> Result<SweepTable> {
    let systems: Vec<(String, f64, f64)> = traces
        .iter()
        .map(|t| (t.system.clone(), t.final_metrics.phi, t.final_metrics.rho))
        .collect();
    beta_sweep(&systems, betas)
}

/// β* between the HITL baseline and every AIITL system, on final-batch metrics.
pub fn crossover_table(traces: &[RunTrace]) -> String {
    let mut out = String::from("system_a,system_b,beta_star\n");
    let Some(hitl) = traces.iter().find(|t| t.system == HITL_ID) else {
        return out;
    };
    let point = |t: &RunTrace| (t.final_metrics.phi, t.final_metrics.rho);
    for t in traces.iter().filter(|t| t.system.starts_with("aiitl-")) {
        let b = crossover_beta(point(hitl), point(t));
        let cell = b.map_or_else(|| "none".to_string(), |b| format!("{b:.4}"));
        writeln!(out, "{},{},{cell}", hitl.system, t.system).unwrap();
    }
    out
}

pub(crate) fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

pub fn write_traces(traces: &[RunTrace], dir: &Path) -> Result<Vec<PathBuf>> {
    traces
        .iter()
        .map(|t| {
            let path = dir.join(trace_file_name(&t.system));
            write_file(&path, &t.to_json()?)?;
            Ok(path)
        })
        .collect()
}

/// Writes the per-step tables, the summary, the sweep and the crossovers.
pub fn export_results(traces: &[RunTrace], sweep_betas: &[f64], dir: &Path) -> Result<Vec<PathBuf>> {
    let files = [
        (RESULTS_FILE, results_table(traces, sweep_betas, Series::Stream)?),
        (RESULTS_EVAL_FILE, results_table(traces, sweep_betas, Series::HeldOut)?),
        (SUMMARY_FILE, summary_table(traces)),
        (SWEEP_FILE, sweep_from_traces(traces, &result_betas(sweep_betas))?.to_csv()),
        (CROSSOVER_FILE, crossover_table(traces)),
    ];
    files
        .into_iter()
        .map(|(name, text)| {
            let path = dir.join(name);
            write_file(&path, &text)?;
            Ok(path)
        })
        .collect()
}

/// Reads every trace file in `dir`, in canonical system order.
pub fn load_traces(dir: &Path) -> Result<Vec<RunTrace>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with(TRACE_PREFIX) && n.ends_with(".json"))
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Data(format!("no trace files in {}", dir.display())));
    }
    let mut traces = paths
        .iter()
        .map(|p| {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            RunTrace::from_json(&text).map_err(|e| Error::Format(format!("{}: {e}", p.display())))
        })
        .collect::<Result<Vec<_>>>()?;
    sort_traces(&mut traces);
    Ok(traces)
}

/// The final-batch comparison followed by the per-step utility series.
pub fn render_report(traces: &[RunTrace]) -> String {
    let mut out = String::new();
    let table = summary_table(traces);
    let rows: Vec<Vec<&str>> = table.lines().map(|l| l.split(',').collect()).collect();
    let widths: Vec<usize> = (0..rows[0].len())
        .map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0))
        .collect();
    out.push_str("Final test batch\n");
    for row in &rows {
        let cells: Vec<String> = row
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (cell, w))| if i == 0 { format!("{cell:<w$}") } else { format!("{cell:>w$}") })
            .collect();
        out.push_str(cells.join("  ").trim_end());
        out.push('\n');
    }
    for t in traces.iter().filter(|t| !(t.system == HITL_ID || t.system.starts_with("aiitl-"))) {
        writeln!(
            out,
            "{}: human_effort {} accuracy {} utility {}",
            t.system,
            fmt2(t.final_metrics.rho),
            fmt2(t.final_metrics.phi),
            fmt2(t.final_metrics.utility)
        )
        .unwrap();
    }
    out.push_str("\nUtility at beta 0.5 per step (streamed batches)\nstep");
    for t in traces {
        write!(out, "  {}", t.system).unwrap();
    }
    out.push('\n');
    let steps = traces.iter().map(|t| t.steps.len()).max().unwrap_or(0);
    for s in 0..steps {
        write!(out, "{:>4}", s + 1).unwrap();
        for t in traces {
            let cell = t.steps.get(s).map_or_else(
                || "-".into(),
                |r| fmt2(r.stream.phi - 0.5 * r.stream.rho),
            );
            write!(out, "  {cell:>w$}", w = t.system.len()).unwrap();
        }
        out.push('\n');
    }
    out
}
