//! Machine-readable benchmark report with a markdown rendering.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::benchmarks::regression::RegressionReport;
use crate::benchmarks::retrieval::{RetrievalKind, RetrievalResult};
use crate::error::{Error, Result};

pub const REPORT_SCHEMA: &str = "phenom-report/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallEntry {
    pub database: String,
    pub tail_pct: f64,
    pub recall: f64,
    pub n_pairs: usize,
}

/// Optional experimental context a retrieval result is keyed by.
#[derive(Debug, Clone, Default, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ContextKey {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cell_type: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub modality: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub time_point: Option<String>,
}

impl ContextKey {
    pub fn is_empty(&self) -> bool {
        self.cell_type.is_none() && self.modality.is_none() && self.time_point.is_none()
    }

    fn label(&self) -> String {
        if self.is_empty() {
            return "all".into();
        }
        [&self.cell_type, &self.modality, &self.time_point]
            .iter()
            .map(|v| v.as_deref().unwrap_or("-"))
            .collect::<Vec<_>>()
            .join(" / ")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalEntry {
    pub task: RetrievalKind,
    #[serde(default, skip_serializing_if = "ContextKey::is_empty")]
    pub context: ContextKey,
    pub fraction_retrieved: f64,
    pub n_groups: usize,
    pub n_retrieved: usize,
    pub result: RetrievalResult,
}

impl RetrievalEntry {
    pub fn new(context: ContextKey, result: RetrievalResult) -> Self {
        let n_retrieved = result.groups.iter().filter(|g| g.retrieved).count();
        Self {
            task: result.kind,
            context,
            fraction_retrieved: result.fraction_retrieved,
            n_groups: result.groups.len(),
            n_retrieved,
            result,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub schema: String,
    /// Free-form label, e.g. the embedding table or transformation used.
    #[serde(default)]
    pub label: String,
    #[serde(default)]
    pub recall: Vec<RecallEntry>,
    #[serde(default)]
    pub retrieval: Vec<RetrievalEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub regression: Option<RegressionReport>,
}

impl BenchmarkReport {
    pub fn new(label: impl Into<String>) -> Self {
        Self {
            schema: REPORT_SCHEMA.into(),
            label: label.into(),
            recall: Vec::new(),
            retrieval: Vec::new(),
            regression: None,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.recall.is_empty() && self.retrieval.is_empty() && self.regression.is_none()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Write atomically: a temporary sibling file is renamed into place.
    pub fn write(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("json.partial");
        std::fs::write(&tmp, self.to_json()? + "\n")?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let report: Self = serde_json::from_slice(&std::fs::read(path)?)?;
        if report.schema != REPORT_SCHEMA {
            return Err(Error::Format {
                path: path.to_path_buf(),
                msg: format!("schema {:?}, expected {REPORT_SCHEMA:?}", report.schema),
            });
        }
        Ok(report)
    }

    pub fn to_markdown(&self) -> String {
        render_markdown(std::slice::from_ref(self))
    }
}

/// One table per benchmark family; each report becomes a row (or rows).
pub fn render_markdown(reports: &[BenchmarkReport]) -> String {
    let mut out = String::new();
    let recall_dbs: Vec<String> = {
        let mut v: Vec<String> = reports
            .iter()
            .flat_map(|r| r.recall.iter().map(|e| e.database.clone()))
            .collect();
        v.sort();
        v.dedup();
        v
    };
    if !recall_dbs.is_empty() {
        let _ = writeln!(out, "## Known-relationship recall\n");
        let _ = writeln!(out, "| Embedding | {} |", recall_dbs.join(" | "));
        let _ = writeln!(out, "|---|{}", "---:|".repeat(recall_dbs.len()));
        for r in reports.iter().filter(|r| !r.recall.is_empty()) {
            let cells: Vec<String> = recall_dbs
                .iter()
                .map(|db| {
                    r.recall
                        .iter()
                        .find(|e| &e.database == db)
                        .map_or("-".into(), |e| format!("{:.3}", e.recall))
                })
                .collect();
            let _ = writeln!(out, "| {} | {} |", label(r), cells.join(" | "));
        }
        out.push('\n');
    }
    if reports.iter().any(|r| !r.retrieval.is_empty()) {
        let _ = writeln!(out, "## Retrieval\n");
        let _ = writeln!(out, "| Embedding | Task | Context | Retrieved | Groups |");
        let _ = writeln!(out, "|---|---|---|---:|---:|");
        for r in reports {
            for e in &r.retrieval {
                let task = match e.task {
                    RetrievalKind::Perturbation => "perturbation",
                    RetrievalKind::Siblings => "siblings",
                };
                let _ = writeln!(
                    out,
                    "| {} | {task} | {} | {:.3} | {}/{} |",
                    label(r),
                    e.context.label(),
                    e.fraction_retrieved,
                    e.n_retrieved,
                    e.n_groups
                );
            }
        }
        out.push('\n');
    }
    if reports.iter().any(|r| r.regression.is_some()) {
        let _ = writeln!(out, "## Feature prediction (test R²)\n");
        let _ = writeln!(out, "| Embedding | Category | Features | Median ± MAD |");
        let _ = writeln!(out, "|---|---|---:|---:|");
        for r in reports {
            for c in r.regression.iter().flat_map(|g| &g.categories) {
                let _ = writeln!(
                    out,
                    "| {} | {} | {} | {:.3} ± {:.3} |",
                    label(r),
                    c.category.name(),
                    c.n_features,
                    c.median_r2,
                    c.mad_r2
                );
            }
        }
        out.push('\n');
    }
    if out.is_empty() {
        out.push_str("_empty report_\n");
    }
    out
}

fn label(r: &BenchmarkReport) -> &str {
    if r.label.is_empty() {
        "embedding"
    } else {
        &r.label
    }
}
