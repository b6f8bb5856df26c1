//! Run reports and their JSON/CSV serializations.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{ExperimentConfig, ExperimentError, Result};
use crate::dataset::BinaryClass;
use crate::metrics::{format_metric, MetricsReport};
use crate::nn::{EpochRecord, MODEL_FORMAT_VERSION};
use crate::provenance::AuditEntry;

pub const SCHEMA_VERSION: u32 = 1;

/// JSON Schema every emitted report validates against.
pub const REPORT_SCHEMA: &str = include_str!("../../schema/run_report.schema.json");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    Failed { error: String, exit_code: i32 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub history: Vec<EpochRecord>,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub stopped_early: bool,
    pub max_epochs: usize,
}

/// Meta-learner scores on its own training fold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fold2Diagnostics {
    pub evaluation: String,
    pub fold1_size: usize,
    pub fold2_size: usize,
    pub metrics: Vec<MetricsReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Versions {
    pub package: String,
    pub model_format: u32,
    pub schema: u32,
}

impl Default for Versions {
    fn default() -> Self {
        Self {
            package: env!("CARGO_PKG_VERSION").to_string(),
            model_format: MODEL_FORMAT_VERSION,
            schema: SCHEMA_VERSION,
        }
    }
}

/// Everything needed to reproduce and compare one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub run_id: String,
    /// Extractor name, or `meta_<extractor>` for stacked runs.
    pub model: String,
    pub head: String,
    pub batch_size: usize,
    pub stacked: bool,
    pub status: RunStatus,
    pub evaluation: String,
    /// One entry per class, PreHypertension first.
    pub metrics: Vec<MetricsReport>,
    pub fold2_diagnostics: Option<Fold2Diagnostics>,
    pub training: Option<TrainingSummary>,
    pub meta_training: Option<TrainingSummary>,
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
    pub model_seed: Option<u64>,
    pub wall_clock_secs: f64,
    pub versions: Versions,
    pub audit: Vec<AuditEntry>,
    pub config: ExperimentConfig,
}

impl RunReport {
    fn base(config: &ExperimentConfig, status: RunStatus, wall_clock_secs: f64) -> Self {
        let model = if config.stacked { format!("meta_{}", config.extractor) } else { config.extractor.to_string() };
        Self {
            schema_version: SCHEMA_VERSION,
            run_id: config.run_id(),
            model,
            head: config.head.to_string(),
            batch_size: config.batch_size,
            stacked: config.stacked,
            status,
            evaluation: "held_out_test".into(),
            metrics: Vec::new(),
            fold2_diagnostics: None,
            training: None,
            meta_training: None,
            n_train: 0,
            n_test: 0,
            seed: config.seed,
            model_seed: None,
            wall_clock_secs,
            versions: Versions::default(),
            audit: Vec::new(),
            config: config.clone(),
        }
    }

    pub fn completed(config: &ExperimentConfig, training: &TrainingSummary, wall_clock_secs: f64) -> Self {
        Self { training: Some(training.clone()), ..Self::base(config, RunStatus::Completed, wall_clock_secs) }
    }

    pub fn failed(config: &ExperimentConfig, error: String, exit_code: i32, wall_clock_secs: f64) -> Self {
        Self::base(config, RunStatus::Failed { error, exit_code }, wall_clock_secs)
    }

    pub fn with_metrics(mut self, metrics: Vec<MetricsReport>, n_train: usize, n_test: usize) -> Self {
        self.metrics = metrics;
        self.n_train = n_train;
        self.n_test = n_test;
        self
    }

    pub fn with_stacking(mut self, meta: Option<TrainingSummary>, diagnostics: Option<Fold2Diagnostics>) -> Self {
        self.meta_training = meta;
        self.fold2_diagnostics = diagnostics;
        self
    }

    pub fn with_provenance(mut self, model_seed: u64, audit: Vec<AuditEntry>) -> Self {
        self.model_seed = Some(model_seed);
        self.audit = audit;
        self
    }

    pub fn is_completed(&self) -> bool {
        self.status == RunStatus::Completed
    }

    /// Metrics with `class` as the positive class.
    pub fn class_metrics(&self, class: BinaryClass) -> Option<&MetricsReport> {
        self.metrics.iter().find(|m| m.positive_class == class)
    }

    /// Test accuracy; identical for both classes.
    pub fn accuracy(&self) -> Option<f64> {
        self.metrics.first().and_then(|m| m.accuracy).map(|f| f.value())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| ExperimentError::Config(format!("invalid report: {e}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputFormat {
    #[default]
    Json,
    Csv,
}

impl FromStr for OutputFormat {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "json" => Ok(OutputFormat::Json),
            "csv" => Ok(OutputFormat::Csv),
            _ => Err(format!("unknown format '{s}' (expected json or csv)")),
        }
    }
}

pub const CSV_COLUMNS: [&str; 9] =
    ["model", "head", "batch_size", "class", "precision", "recall", "f1", "specificity", "accuracy"];

fn class_name(c: BinaryClass) -> &'static str {
    match c {
        BinaryClass::PreHypertension => "pre_hypertension",
        BinaryClass::Hypertension => "hypertension",
    }
}

/// Two rows per completed run, one per positive class.
pub fn metrics_csv(reports: &[RunReport]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CSV_COLUMNS).expect("in-memory write");
    for r in reports.iter().filter(|r| r.is_completed()) {
        for m in &r.metrics {
            let mut row = vec![r.model.clone(), r.head.clone(), r.batch_size.to_string(), class_name(m.positive_class).into()];
            row.extend([m.precision, m.recall, m.f1, m.specificity, m.accuracy].map(format_metric));
            w.write_record(&row).expect("in-memory write");
        }
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 fields")
}

/// `epoch,train_loss,val_loss` for the extractor's training run.
pub fn curve_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,train_loss,val_loss\n");
    for e in history {
        let val = e.val_loss.map_or(String::new(), |v| v.to_string());
        let _ = writeln!(out, "{},{},{}", e.epoch, e.train_loss, val);
    }
    out
}

/// Plain-text table with one row per run and class, in the grid's order.
pub fn format_table(reports: &[RunReport]) -> String {
    let mut out = format!(
        "{:<14} {:<8} {:>5} {:<17} {:>9} {:>9} {:>9} {:>11} {:>9}\n",
        "model", "head", "batch", "class", "precision", "recall", "f1", "specificity", "accuracy"
    );
    for r in reports {
        match &r.status {
            RunStatus::Failed { error, .. } => {
                let _ = writeln!(out, "{:<14} {:<8} {:>5} FAILED: {error}", r.model, r.head, r.batch_size);
            }
            RunStatus::Completed => {
                for m in &r.metrics {
                    let v = [m.precision, m.recall, m.f1, m.specificity, m.accuracy].map(format_metric);
                    let _ = writeln!(
                        out,
                        "{:<14} {:<8} {:>5} {:<17} {:>9} {:>9} {:>9} {:>11} {:>9}",
                        r.model,
                        r.head,
                        r.batch_size,
                        class_name(m.positive_class),
                        v[0],
                        v[1],
                        v[2],
                        v[3],
                        v[4]
                    );
                }
            }
        }
    }
    out
}

/// Writes `<run_id>.json` per report, or `metrics.csv` plus one training
/// curve per completed run under `curves/`.
pub fn emit_report(reports: &[RunReport], format: OutputFormat, dir: &Path) -> Result<Vec<PathBuf>> {
    if reports.is_empty() {
        return Err(ExperimentError::Config("no reports to emit".into()));
    }
    std::fs::create_dir_all(dir).map_err(ExperimentError::io(dir))?;
    let mut written = Vec::new();
    match format {
        OutputFormat::Json => {
            for r in reports {
                let path = dir.join(format!("{}.json", r.run_id));
                std::fs::write(&path, r.to_json()).map_err(ExperimentError::io(&path))?;
                written.push(path);
            }
        }
        OutputFormat::Csv => {
            let path = dir.join("metrics.csv");
            std::fs::write(&path, metrics_csv(reports)).map_err(ExperimentError::io(&path))?;
            written.push(path);
            let curves = dir.join("curves");
            std::fs::create_dir_all(&curves).map_err(ExperimentError::io(&curves))?;
            for r in reports {
                if let Some(t) = &r.training {
                    let path = curves.join(format!("{}.csv", r.run_id));
                    std::fs::write(&path, curve_csv(&t.history)).map_err(ExperimentError::io(&path))?;
                    written.push(path);
                }
            }
        }
    }
    Ok(written)
}

/// Reads every `*.json` report in `dir`, sorted by file name.
pub fn load_reports(dir: &Path) -> Result<Vec<RunReport>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(ExperimentError::io(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| {
            let text = std::fs::read_to_string(p).map_err(ExperimentError::io(p))?;
            RunReport::from_json(&text)
        })
        .collect()
}
