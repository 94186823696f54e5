//! Result persistence.
//!
//! Three files per run, strictly separated by determinism:
//!
//! - `results.tsv` — append-only delimiter-separated rows, byte-identical
//!   across reruns of the same config and seed;
//! - `summary.json` — the machine-readable structured summary (also
//!   deterministic), the only input the plotting stage reads;
//! - `timings.tsv` — wall-clock times, the one deliberately
//!   non-deterministic output.

use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::Path;

use fiva_core::error::Result;
use fiva_core::metrics::CalibrationReport;
use fiva_core::synthdata::HeterogeneityRow;

pub const RESULTS_SCHEMA: u32 = 1;

/// One evaluation row: a (method, client, label) cell with its statistics
/// over evaluation repeats.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultsRow {
    pub method: String,
    pub regime: String,
    pub client: String,
    /// "1".."6" for per-label rows, "mean" for the per-client aggregate.
    pub label: String,
    pub dice_mean: f64,
    pub dice_std: f64,
    pub ece_mean: f64,
    pub ece_std: f64,
    pub round: u64,
}

/// Per-client aggregate used by trend checks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientAggregate {
    pub client: String,
    pub holdout: bool,
    /// Mean over labels of per-label Dice, mean and std over repeats.
    pub dice_mean: f64,
    pub dice_std: f64,
    /// Label-uniform mean of per-label ECE, mean and std over repeats.
    pub ece_mean: f64,
    pub ece_std: f64,
}

/// Per-client pooled calibration bins for reliability plots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientCalibration {
    pub client: String,
    pub report: CalibrationReport,
}

/// Deterministic per-round training diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundLoss {
    pub round: u64,
    /// Mean training loss per client over the round's steps.
    pub client_losses: Vec<f64>,
}

/// Everything a run writes, minus timings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub schema_version: u32,
    pub name: String,
    pub method: String,
    pub regime: String,
    pub seed: u64,
    pub rounds: u64,
    pub rows: Vec<ResultsRow>,
    pub aggregates: Vec<ClientAggregate>,
    pub calibration: Vec<ClientCalibration>,
    pub heterogeneity: Vec<HeterogeneityRow>,
    pub round_losses: Vec<RoundLoss>,
}

impl RunSummary {
    pub fn aggregate_for(&self, client: &str) -> Option<&ClientAggregate> {
        self.aggregates.iter().find(|a| a.client == client)
    }

    pub fn holdout_aggregate(&self) -> Option<&ClientAggregate> {
        self.aggregates.iter().find(|a| a.holdout)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| fiva_core::Error::Format(format!("summary encode: {e}")))?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn read_json(path: &Path) -> Result<RunSummary> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text)
            .map_err(|e| fiva_core::Error::Format(format!("summary decode: {e}")))
    }
}

/// Render rows as the append-only results table.
pub fn results_tsv(rows: &[ResultsRow]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# results schema v{RESULTS_SCHEMA}");
    let _ = writeln!(
        out,
        "method\tregime\tclient\tlabel\tdice_mean\tdice_std\tece_mean\tece_std\tround"
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{}",
            r.method, r.regime, r.client, r.label, r.dice_mean, r.dice_std, r.ece_mean, r.ece_std,
            r.round
        );
    }
    out
}

/// Append rows to `results.tsv`, writing the header only once.
pub fn append_results(path: &Path, rows: &[ResultsRow]) -> Result<()> {
    use std::io::Write;
    let exists = path.exists();
    let mut file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)?;
    let text = results_tsv(rows);
    if exists {
        // drop the header lines; the table is append-only
        let body: String = text.lines().skip(2).map(|l| format!("{l}\n")).collect();
        file.write_all(body.as_bytes())?;
    } else {
        file.write_all(text.as_bytes())?;
    }
    Ok(())
}

/// Heterogeneity profile as a standalone table.
pub fn heterogeneity_tsv(rows: &[HeterogeneityRow]) -> String {
    let mut out = String::new();
    let num_labels = rows.iter().map(|r| r.label_counts.len()).max().unwrap_or(0);
    let _ = write!(out, "client\tholdout\tsamples");
    for l in 1..=num_labels {
        let _ = write!(out, "\tlabel{l}");
    }
    out.push('\n');
    for r in rows {
        let _ = write!(out, "{}\t{}\t{}", r.client, r.holdout, r.samples);
        for c in &r.label_counts {
            let _ = write!(out, "\t{c}");
        }
        out.push('\n');
    }
    out
}

/// Wall-clock entries (phase, label, seconds).
#[derive(Debug, Clone)]
pub struct Timing {
    pub phase: String,
    pub label: String,
    pub seconds: f64,
}

pub fn timings_tsv(timings: &[Timing]) -> String {
    let mut out = String::from("phase\tlabel\tseconds\n");
    for t in timings {
        let _ = writeln!(out, "{}\t{}\t{:.6}", t.phase, t.label, t.seconds);
    }
    out
}
