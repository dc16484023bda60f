//! Run accounting across finished run directories.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use fedsilo::federation::read_metrics_csv;
use serde::Serialize;

use crate::{CliError, RunSummary};

/// One line of the report: all runs sharing a phase and variant.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReportRow {
    pub phase: u8,
    pub variant: String,
    pub runs: usize,
    pub rounds: usize,
    pub metric_rows: usize,
    pub mean_auroc: Option<f64>,
    pub mean_rmse: Option<f64>,
    pub mean_loss: Option<f64>,
}

#[derive(Default)]
struct Acc {
    runs: usize,
    rounds: usize,
    metric_rows: usize,
    sums: BTreeMap<String, (f64, usize)>,
}

impl Acc {
    fn mean(&self, name: &str) -> Option<f64> {
        self.sums.get(name).map(|&(s, n)| s / n as f64)
    }
}

fn load_run(dir: &Path) -> Result<(RunSummary, Vec<fedsilo::federation::MetricRow>), CliError> {
    let missing = |what: &str, e: &dyn std::fmt::Display| CliError::Config {
        field: "run",
        message: format!("{}: {what}: {e}", dir.display()),
    };
    let summary: RunSummary = serde_json::from_slice(
        &fs::read(dir.join("summary.json")).map_err(|e| missing("summary.json", &e))?,
    )
    .map_err(|e| missing("summary.json", &e))?;
    let file = fs::File::open(dir.join("metrics.csv")).map_err(|e| missing("metrics.csv", &e))?;
    Ok((summary, read_metrics_csv(file)?))
}

/// Per (phase, variant) counts; metric means use each run's last tested round.
pub fn build_report(runs: &[PathBuf]) -> Result<Vec<ReportRow>, CliError> {
    let mut groups: BTreeMap<(u8, String), Acc> = BTreeMap::new();
    for dir in runs {
        let (summary, metrics) = load_run(dir)?;
        let acc = groups.entry((summary.phase, summary.variant.clone())).or_default();
        acc.runs += 1;
        acc.rounds += summary.rounds;
        acc.metric_rows += metrics.len();
        if let Some(last) = metrics.iter().map(|m| m.round).max() {
            for m in metrics.iter().filter(|m| m.round == last) {
                let e = acc.sums.entry(m.metric_name.clone()).or_insert((0.0, 0));
                e.0 += m.value;
                e.1 += 1;
            }
        }
    }
    Ok(groups
        .into_iter()
        .map(|((phase, variant), a)| ReportRow {
            phase,
            variant,
            runs: a.runs,
            rounds: a.rounds,
            metric_rows: a.metric_rows,
            mean_auroc: a.mean("auroc"),
            mean_rmse: a.mean("rmse"),
            mean_loss: a.mean("loss"),
        })
        .collect())
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.4}"))
}

pub fn render_table(rows: &[ReportRow]) -> String {
    let mut s = format!(
        "{:>5} {:<7} {:>5} {:>7} {:>8} {:>8} {:>8} {:>8}\n",
        "phase", "variant", "runs", "rounds", "metrics", "auroc", "rmse", "loss"
    );
    for r in rows {
        s += &format!(
            "{:>5} {:<7} {:>5} {:>7} {:>8} {:>8} {:>8} {:>8}\n",
            r.phase,
            r.variant,
            r.runs,
            r.rounds,
            r.metric_rows,
            cell(r.mean_auroc),
            cell(r.mean_rmse),
            cell(r.mean_loss)
        );
    }
    let total: usize = rows.iter().map(|r| r.runs).sum();
    s += &format!("total runs: {total}");
    s
}

pub fn cmd_report(out: &Option<PathBuf>, json: bool, runs: &[PathBuf]) -> Result<(), CliError> {
    let rows = build_report(runs)?;
    if let Some(path) = out {
        let mut w = csv::Writer::from_path(path)?;
        for r in &rows {
            w.serialize(r)?;
        }
        w.flush()?;
    }
    crate::emit(json, &rows, || render_table(&rows))
}
