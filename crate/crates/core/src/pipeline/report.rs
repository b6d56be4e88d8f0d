//! Run reports: one row per target task with baseline score, ensemble
//! score and their difference, plus the audit trail behind them.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{ManifestEntry, PipelineError, Stage};
use crate::simplex::{ScoredWeights, Termination};
use crate::weight_space::MixtureWeights;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Complete,
    Partial,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub stage: Stage,
    pub cause: String,
}

/// A trained checkpoint and how its training went.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedArtifact {
    pub checkpoint: ManifestEntry,
    pub log_path: String,
    pub best_epoch: usize,
    /// Early-stopping score of the returned epoch.
    pub stop_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertEntry {
    pub label: String,
    /// Task ids pooled into this expert's stage-1 training set.
    pub tasks: Vec<String>,
    pub stage1: TrainedArtifact,
    pub stage2: Option<TrainedArtifact>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineEntry {
    pub artifact: TrainedArtifact,
    pub dev_score: f64,
    pub test_score: f64,
}

/// Dev-split scores behind the chosen mixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DevScores {
    /// Uniform point first, then the near-vertex points in member order.
    pub initial_vertices: Vec<ScoredWeights>,
    /// Each finetuned expert on its own, in member order.
    pub members: Vec<f64>,
    pub uniform: f64,
    pub dfwe: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSummary {
    pub trace_path: String,
    pub iterations: usize,
    pub optimizer_evaluations: usize,
    pub dev_evaluations: usize,
    pub termination: Termination,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskResult {
    pub task: String,
    pub metric: String,
    pub baseline: f64,
    pub dfwe: f64,
    /// Always `dfwe - baseline`.
    pub delta: f64,
    pub members: Vec<String>,
    pub alpha_star: MixtureWeights,
    pub dev: Option<DevScores>,
    pub search: Option<SearchSummary>,
}

impl TaskResult {
    pub fn new(
        task: impl Into<String>,
        metric: impl Into<String>,
        baseline: f64,
        dfwe: f64,
        members: Vec<String>,
        alpha_star: MixtureWeights,
    ) -> Self {
        Self {
            task: task.into(),
            metric: metric.into(),
            baseline,
            dfwe,
            delta: dfwe - baseline,
            members,
            alpha_star,
            dev: None,
            search: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub seed: Option<u64>,
    /// Hash of the resolved configuration with the output directory blanked.
    pub config_sha256: Option<String>,
    pub status: RunStatus,
    pub failure: Option<Failure>,
    pub tasks: Vec<TaskResult>,
    pub experts: Vec<ExpertEntry>,
    pub baseline: Option<BaselineEntry>,
    pub manifest: Vec<ManifestEntry>,
    /// Seconds per stage. Not part of the canonical form.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub wall_clock_secs: BTreeMap<String, f64>,
}

impl Default for RunReport {
    fn default() -> Self {
        Self {
            schema_version: REPORT_SCHEMA_VERSION,
            seed: None,
            config_sha256: None,
            status: RunStatus::Complete,
            failure: None,
            tasks: Vec::new(),
            experts: Vec::new(),
            baseline: None,
            manifest: Vec::new(),
            wall_clock_secs: BTreeMap::new(),
        }
    }
}

impl RunReport {
    pub fn from_tasks(tasks: Vec<TaskResult>) -> Self {
        Self {
            tasks,
            ..Default::default()
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// JSON without timing fields: equal runs give equal bytes.
    pub fn canonical_json(&self) -> String {
        let mut c = self.clone();
        c.wall_clock_secs.clear();
        c.to_json()
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path).map_err(|source| PipelineError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text).map_err(|e| PipelineError::Io {
            path: path.to_path_buf(),
            source: std::io::Error::new(std::io::ErrorKind::InvalidData, e),
        })
    }

    pub fn mean_delta(&self) -> Option<f64> {
        mean(self.tasks.iter().map(|t| t.delta))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Text,
    Csv,
}

impl ReportFormat {
    pub fn file_name(self) -> &'static str {
        match self {
            ReportFormat::Json => "report.json",
            ReportFormat::Text => "report.txt",
            ReportFormat::Csv => "report.csv",
        }
    }
}

impl std::str::FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "json" => Ok(ReportFormat::Json),
            "text" | "txt" => Ok(ReportFormat::Text),
            "csv" => Ok(ReportFormat::Csv),
            other => Err(format!("unknown report format `{other}`")),
        }
    }
}

pub fn render(report: &RunReport, format: ReportFormat) -> String {
    match format {
        ReportFormat::Json => report.to_json(),
        ReportFormat::Text => render_text(report),
        ReportFormat::Csv => render_csv(report),
    }
}

/// Writes `report.json`, `report.txt` and `report.csv` into `dir`.
pub fn emit_report(report: &RunReport, dir: &Path) -> Result<Vec<PathBuf>, PipelineError> {
    fs::create_dir_all(dir).map_err(|source| PipelineError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    [ReportFormat::Json, ReportFormat::Text, ReportFormat::Csv]
        .into_iter()
        .map(|f| {
            let path = dir.join(f.file_name());
            fs::write(&path, render(report, f)).map_err(|source| PipelineError::Io {
                path: path.clone(),
                source,
            })?;
            Ok(path)
        })
        .collect()
}

/// Three decimals, never `-0.000`.
fn fmt3(x: f64) -> String {
    let s = format!("{x:.3}");
    if s == "-0.000" {
        "0.000".to_string()
    } else {
        s
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| sum / n as f64)
}

fn render_text(report: &RunReport) -> String {
    let mut out = String::new();
    match (&report.status, &report.failure) {
        (RunStatus::Partial, Some(f)) => {
            out += &format!("status: partial (stage {} failed: {})\n", f.stage, f.cause)
        }
        (RunStatus::Partial, None) => out += "status: partial\n",
        (RunStatus::Complete, _) => out += "status: complete\n",
    }
    if let Some(seed) = report.seed {
        out += &format!("seed: {seed}\n");
    }
    out.push('\n');

    let header = ["Task", "Metric", "Baseline", "DFWE", "Score Delta"];
    let mut rows: Vec<[String; 5]> = report
        .tasks
        .iter()
        .map(|t| {
            [
                t.task.clone(),
                t.metric.clone(),
                fmt3(t.baseline),
                fmt3(t.dfwe),
                fmt3(t.delta),
            ]
        })
        .collect();
    if report.tasks.len() > 1 {
        let avg = |f: fn(&TaskResult) -> f64| fmt3(mean(report.tasks.iter().map(f)).unwrap_or(0.0));
        rows.push([
            "average".into(),
            String::new(),
            avg(|t| t.baseline),
            avg(|t| t.dfwe),
            avg(|t| t.delta),
        ]);
    }

    let mut widths = header.map(str::len);
    for r in &rows {
        for (w, cell) in widths.iter_mut().zip(r) {
            *w = (*w).max(cell.len());
        }
    }
    let line = |cells: [&str; 5]| {
        let mut s = String::new();
        for (i, (cell, w)) in cells.iter().zip(widths).enumerate() {
            if i > 0 {
                s += "  ";
            }
            // Names left-aligned, numbers right-aligned.
            if i < 2 {
                s += &format!("{cell:<w$}");
            } else {
                s += &format!("{cell:>w$}");
            }
        }
        s.trim_end().to_string() + "\n"
    };
    out += &line(header);
    for r in &rows {
        out += &line([&r[0], &r[1], &r[2], &r[3], &r[4]]);
    }

    for t in &report.tasks {
        out += &format!("\nA* for {}:\n", t.task);
        let w = t.members.iter().map(String::len).max().unwrap_or(0);
        for (label, a) in t.members.iter().zip(t.alpha_star.alphas()) {
            out += &format!("  {label:<w$}  {}\n", fmt3(*a));
        }
    }
    out
}

const CSV_HEADER: [&str; 7] = [
    "task",
    "metric",
    "baseline",
    "dfwe",
    "delta",
    "members",
    "alpha_star",
];

/// Full-precision values: the CSV parses back to exactly the JSON numbers.
fn render_csv(report: &RunReport) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CSV_HEADER).expect("in-memory write");
    for t in &report.tasks {
        let alphas: Vec<String> = t.alpha_star.alphas().iter().map(f64::to_string).collect();
        w.write_record([
            t.task.clone(),
            t.metric.clone(),
            t.baseline.to_string(),
            t.dfwe.to_string(),
            t.delta.to_string(),
            t.members.join(";"),
            alphas.join(";"),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 fields")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_task(baseline: f64, dfwe: f64) -> RunReport {
        RunReport::from_tasks(vec![TaskResult::new(
            "emory emotion recognition",
            "accuracy",
            baseline,
            dfwe,
            vec!["a".into(), "b".into()],
            MixtureWeights::new(vec![0.25, 0.75]).unwrap(),
        )])
    }

    #[test]
    fn delta_printed_to_three_decimals() {
        let r = one_task(31.167, 34.099);
        let text = render(&r, ReportFormat::Text);
        let row = text.lines().find(|l| l.starts_with("emory")).unwrap();
        assert!(row.ends_with("2.932"), "{row}");
        assert!(row.contains("31.167") && row.contains("34.099"));
    }

    #[test]
    fn equal_scores_print_zero_delta() {
        let r = one_task(0.5, 0.5);
        assert_eq!(r.tasks[0].delta, 0.0);
        let text = render(&r, ReportFormat::Text);
        assert!(text
            .lines()
            .any(|l| l.starts_with("emory") && l.ends_with("0.000")));
        assert_eq!(fmt3(-1e-17), "0.000");
    }

    #[test]
    fn csv_parses_back_to_json_values() {
        let r = one_task(0.1 + 0.2, 1.0 / 3.0);
        let csv_text = render(&r, ReportFormat::Csv);
        let mut rd = csv::Reader::from_reader(csv_text.as_bytes());
        let row = rd.records().next().unwrap().unwrap();
        let json: RunReport = RunReport::from_json(&r.to_json()).unwrap();
        assert_eq!(row[2].parse::<f64>().unwrap(), json.tasks[0].baseline);
        assert_eq!(row[3].parse::<f64>().unwrap(), json.tasks[0].dfwe);
        assert_eq!(row[4].parse::<f64>().unwrap(), json.tasks[0].delta);
        let alphas: Vec<f64> = row[6].split(';').map(|a| a.parse().unwrap()).collect();
        assert_eq!(alphas, json.tasks[0].alpha_star.alphas());
    }

    #[test]
    fn canonical_form_drops_timing() {
        let mut a = one_task(0.4, 0.6);
        let b = a.clone();
        a.wall_clock_secs.insert("train-experts".into(), 1.5);
        assert_ne!(a.to_json(), b.to_json());
        assert_eq!(a.canonical_json(), b.canonical_json());
        assert_eq!(RunReport::from_json(&a.to_json()).unwrap(), a);
    }

    #[test]
    fn partial_report_renders_cause() {
        let r = RunReport {
            status: RunStatus::Partial,
            failure: Some(Failure {
                stage: Stage::Finetune,
                cause: "training diverged".into(),
            }),
            ..Default::default()
        };
        let text = render(&r, ReportFormat::Text);
        assert!(text.starts_with("status: partial (stage finetune failed: training diverged)"));
        assert_eq!(render(&r, ReportFormat::Csv).lines().count(), 1);
    }

    #[test]
    fn emit_writes_three_files() {
        let dir = tempfile::tempdir().unwrap();
        let paths = emit_report(&one_task(1.0, 2.0), dir.path()).unwrap();
        assert_eq!(paths.len(), 3);
        assert!(paths.iter().all(|p| p.exists()));
    }
}
