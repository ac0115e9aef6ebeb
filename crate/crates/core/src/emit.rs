//! CSV and JSON writers. Output depends only on the results, so emitting the
//! same results twice gives identical bytes.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::analysis::{comm_summary, CommSummary};
use crate::config::ExperimentConfig;
use crate::experiment::{ExperimentResult, ExperimentSummary, SweepPoint};
use crate::simulator::{MetricsRow, StopReason};

pub const CSV_HEADER: &str = "t,sim_time,uploads,bytes_up,bytes_down,grad_norm_sq,loss,mean_staleness,max_staleness,running_R";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Csv,
    Json,
}

impl FromStr for Format {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "csv" => Ok(Format::Csv),
            "json" => Ok(Format::Json),
            other => Err(format!("unknown format {other:?}, expected csv or json")),
        }
    }
}

// Debug formatting is the shortest representation that parses back exactly.
fn num(v: f64) -> String {
    format!("{v:?}")
}

/// Per-step metrics as CSV; an empty slice gives the header line only.
pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::with_capacity(64 * (rows.len() + 1));
    out.push_str(CSV_HEADER);
    out.push('\n');
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.t,
            num(r.sim_time),
            r.uploads,
            r.bytes_up,
            r.bytes_down,
            num(r.grad_norm_sq),
            num(r.loss),
            num(r.mean_staleness),
            r.max_staleness,
            num(r.running_r)
        )
        .expect("writing to a String cannot fail");
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunDocument {
    pub seed: u64,
    pub stop: StopReason,
    pub uploads_to_target: Option<u64>,
    pub coherence_violations: u64,
    pub comm: CommSummary,
    pub rows: Vec<MetricsRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultsDocument {
    pub config: ExperimentConfig,
    pub summary: ExperimentSummary,
    pub runs: Vec<RunDocument>,
}

impl ResultsDocument {
    pub fn new(result: &ExperimentResult) -> Self {
        Self {
            config: result.config.clone(),
            summary: result.summary.clone(),
            runs: result
                .runs
                .iter()
                .map(|r| RunDocument {
                    seed: r.seed,
                    stop: r.log.stop,
                    uploads_to_target: r.log.uploads_to_target,
                    coherence_violations: r.log.coherence_violations,
                    comm: comm_summary(&r.log),
                    rows: r.log.rows.clone(),
                })
                .collect(),
        }
    }
}

pub fn results_json(result: &ExperimentResult) -> String {
    serde_json::to_string_pretty(&ResultsDocument::new(result)).expect("results serialize")
}

const SUMMARY_COLUMNS: &[&str] = &[
    "runs",
    "steps",
    "uploads_mean",
    "uploads_std",
    "reached_target",
    "uploads_to_target_mean",
    "uploads_to_target_std",
    "mb_uploaded_mean",
    "mb_uploaded_std",
    "mb_broadcast_mean",
    "mb_broadcast_std",
    "kb_per_upload",
    "kb_per_broadcast",
    "final_loss_mean",
    "final_loss_std",
    "R_mean",
    "R_std",
    "tau_max",
    "lr_satisfied",
    "lr_margin",
    "bound",
];

fn summary_fields(s: &ExperimentSummary) -> Vec<String> {
    let (ut_mean, ut_std) = s
        .uploads_to_target
        .map_or((String::new(), String::new()), |u| {
            (num(u.mean), num(u.std))
        });
    vec![
        s.runs.to_string(),
        s.steps.to_string(),
        num(s.uploads.mean),
        num(s.uploads.std),
        s.reached_target.to_string(),
        ut_mean,
        ut_std,
        num(s.mb_uploaded.mean),
        num(s.mb_uploaded.std),
        num(s.mb_broadcast.mean),
        num(s.mb_broadcast.std),
        num(s.kb_per_upload.mean),
        num(s.kb_per_broadcast.mean),
        num(s.final_loss.mean),
        num(s.final_loss.std),
        num(s.rate.mean),
        num(s.rate.std),
        s.tau_max.to_string(),
        s.lr.satisfied.to_string(),
        num(s.lr.margin),
        num(s.bound.total),
    ]
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// One summary row per sweep point, columns prefixed by the grid keys.
pub fn sweep_csv(points: &[SweepPoint]) -> String {
    let mut out = String::new();
    let keys: Vec<String> = points
        .first()
        .map(|p| p.assignment.iter().map(|(k, _)| csv_field(k)).collect())
        .unwrap_or_default();
    let header: Vec<String> = keys
        .into_iter()
        .chain(SUMMARY_COLUMNS.iter().map(|c| c.to_string()))
        .collect();
    out.push_str(&header.join(","));
    out.push('\n');
    for p in points {
        let fields: Vec<String> = p
            .assignment
            .iter()
            .map(|(_, v)| csv_field(v))
            .chain(summary_fields(&p.result.summary))
            .collect();
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    out
}

pub fn summary_csv(result: &ExperimentResult) -> String {
    format!(
        "{}\n{}\n",
        SUMMARY_COLUMNS.join(","),
        summary_fields(&result.summary).join(",")
    )
}

#[derive(Debug, Clone, PartialEq, Serialize)]
struct SweepEntry<'a> {
    assignment: &'a [(String, String)],
    summary: &'a ExperimentSummary,
}

pub fn sweep_json(points: &[SweepPoint]) -> String {
    let entries: Vec<SweepEntry> = points
        .iter()
        .map(|p| SweepEntry {
            assignment: &p.assignment,
            summary: &p.result.summary,
        })
        .collect();
    serde_json::to_string_pretty(&entries).expect("sweep serializes")
}

/// Writes an experiment into `dir`: `seed_<n>.csv` per run plus `summary.csv`,
/// or a single `results.json`.
pub fn emit(result: &ExperimentResult, format: Format, dir: &Path) -> io::Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    match format {
        Format::Csv => {
            for run in &result.runs {
                let path = dir.join(format!("seed_{}.csv", run.seed));
                fs::write(&path, metrics_csv(&run.log.rows))?;
                written.push(path);
            }
            let path = dir.join("summary.csv");
            fs::write(&path, summary_csv(result))?;
            written.push(path);
        }
        Format::Json => {
            let path = dir.join("results.json");
            fs::write(&path, results_json(result))?;
            written.push(path);
        }
    }
    Ok(written)
}

pub fn emit_sweep(points: &[SweepPoint], format: Format, dir: &Path) -> io::Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let (path, body) = match format {
        Format::Csv => (dir.join("sweep.csv"), sweep_csv(points)),
        Format::Json => (dir.join("sweep.json"), sweep_json(points)),
    };
    fs::write(&path, body)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_log_is_header_only() {
        assert_eq!(metrics_csv(&[]), format!("{CSV_HEADER}\n"));
    }

    #[test]
    fn numbers_keep_full_precision() {
        let row = MetricsRow {
            t: 1,
            sim_time: 0.1 + 0.2,
            uploads: 2,
            bytes_up: 3,
            bytes_down: 4,
            grad_norm_sq: 1e-300,
            loss: 12345.678901234567,
            mean_staleness: 0.5,
            max_staleness: 1,
            running_r: 1.0 / 3.0,
        };
        let csv = metrics_csv(&[row.clone()]);
        let line = csv.lines().nth(1).unwrap();
        let fields: Vec<&str> = line.split(',').collect();
        assert_eq!(fields[1].parse::<f64>().unwrap(), row.sim_time);
        assert_eq!(fields[5].parse::<f64>().unwrap(), row.grad_norm_sq);
        assert_eq!(fields[6].parse::<f64>().unwrap(), row.loss);
        assert_eq!(fields[9].parse::<f64>().unwrap(), row.running_r);
    }

    #[test]
    fn quoting() {
        assert_eq!(csv_field("a,b"), "\"a,b\"");
        assert_eq!(csv_field("qsgd:4"), "qsgd:4");
    }
}
