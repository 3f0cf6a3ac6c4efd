//! Evaluation reports: raw counts per cell, provenance, and the three
//! output renderings (text table, JSON, CSV).

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::score::ObjectVerdict;
use super::Phase;
use crate::domain::{RouteCategory, RouteProvenance};
use crate::metrics::Rate;
use crate::router::RoutingMode;

pub const REPORT_FORMAT: &str = "tidyhome-eval/1";
pub const TOTAL_ITEM: &str = "total";

pub const METRIC_STRICT: &str = "strict";
pub const METRIC_LENIENT: &str = "lenient";
pub const METRIC_WITH_RAG: &str = "with_rag";
pub const METRIC_WITHOUT_RAG: &str = "without_rag";
pub const METRIC_SUCCESS: &str = "success";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub name: String,
    pub model_id: String,
    pub temperature: f64,
    pub supports_tools: bool,
    pub included: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub excluded_reason: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub routing_mode: Option<RoutingMode>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub models: Vec<ModelMeta>,
    pub repetitions: u32,
    pub k: usize,
    pub embedder: String,
    pub prompt_version: String,
    pub fixture_sha256: String,
    pub ablation: bool,
    pub routing_fallback: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub judge: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportCell {
    pub model: String,
    /// Scenario id, question id, query group, or `total`.
    pub item: String,
    pub label: String,
    pub metric: String,
    pub numerator: u64,
    pub denominator: u64,
    pub percent: String,
}

impl ReportCell {
    pub fn new(model: &str, item: &str, label: &str, metric: &str, rate: Rate) -> Self {
        Self {
            model: model.to_string(),
            item: item.to_string(),
            label: label.to_string(),
            metric: metric.to_string(),
            numerator: rate.numerator,
            denominator: rate.denominator,
            percent: rate.display(),
        }
    }

    pub fn rate(&self) -> Rate {
        Rate::new(self.numerator, self.denominator)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RunDetail {
    Plan {
        verdicts: Vec<ObjectVerdict>,
        attempts: u32,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        error: Option<String>,
    },
    Answer {
        answer: String,
        retrieved: Vec<u64>,
        score: Rate,
    },
    Route {
        expected: RouteCategory,
        actual: RouteCategory,
        provenance: RouteProvenance,
    },
}

/// One item × repetition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub model: String,
    pub item: String,
    pub metric: String,
    pub rep: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<RunDetail>,
    /// Set when the run could not be completed; it then counts as wrong.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub invalid: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub format: String,
    pub phase: Phase,
    pub metadata: ReportMetadata,
    pub cells: Vec<ReportCell>,
    pub runs: Vec<RunRecord>,
    pub warnings: Vec<String>,
}

impl EvalReport {
    pub fn cell(&self, model: &str, item: &str, metric: &str) -> Option<&ReportCell> {
        self.cells
            .iter()
            .find(|c| c.model == model && c.item == item && c.metric == metric)
    }

    fn models(&self) -> Vec<&str> {
        let mut seen = BTreeSet::new();
        self.cells
            .iter()
            .map(|c| c.model.as_str())
            .filter(|m| seen.insert(*m))
            .collect()
    }

    fn items(&self, metric: &str) -> Vec<(&str, &str)> {
        let mut seen = BTreeSet::new();
        self.cells
            .iter()
            .filter(|c| c.metric == metric)
            .map(|c| (c.item.as_str(), c.label.as_str()))
            .filter(|(i, _)| seen.insert(*i))
            .collect()
    }

    /// Every percentage recomputes from its counts, and every total from
    /// its component cells.
    pub fn check_consistency(&self) -> Result<(), String> {
        for c in &self.cells {
            if c.denominator == 0 || c.numerator > c.denominator {
                return Err(format!("{}/{}/{}: invalid counts", c.model, c.item, c.metric));
            }
            let expected = c.rate().display();
            if c.percent != expected {
                return Err(format!(
                    "{}/{}/{}: percent {} but counts give {expected}",
                    c.model, c.item, c.metric, c.percent
                ));
            }
        }
        for total in self.cells.iter().filter(|c| c.item == TOTAL_ITEM) {
            let parts: Vec<Rate> = self
                .cells
                .iter()
                .filter(|c| c.model == total.model && c.metric == total.metric && c.item != TOTAL_ITEM)
                .map(ReportCell::rate)
                .collect();
            if parts.is_empty() {
                return Err(format!("{}/{}: total without components", total.model, total.metric));
            }
            let recomputed = match self.phase {
                Phase::Routing => Rate::pooled(&parts),
                _ => Rate::mean(&parts),
            };
            if recomputed.ratio() != total.rate().ratio() {
                return Err(format!(
                    "{}/{}: total {}/{} does not recompute ({}/{})",
                    total.model,
                    total.metric,
                    total.numerator,
                    total.denominator,
                    recomputed.numerator,
                    recomputed.denominator
                ));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn to_csv(&self) -> Result<String, csv::Error> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "phase",
            "model",
            "scenario/question",
            "metric",
            "numerator",
            "denominator",
            "percent",
        ])?;
        for c in &self.cells {
            w.write_record([
                self.phase.as_str(),
                &c.model,
                &c.item,
                &c.metric,
                &c.numerator.to_string(),
                &c.denominator.to_string(),
                &c.percent,
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| e.into_error())?;
        Ok(String::from_utf8(bytes).expect("csv of utf-8 fields"))
    }

    /// Plain-text table laid out like the published tables.
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        match self.phase {
            Phase::TaskPlanning => {
                out.push_str("Task Planning Accuracy (%)\n");
                let items = self.items(METRIC_STRICT);
                let mut groups = vec![("Model".to_string(), 1usize)];
                let mut header = vec![String::new()];
                for (_, label) in &items {
                    groups.push((label.to_string(), 2));
                    header.push("Strict".into());
                    header.push("Lenient".into());
                }
                let rows = self
                    .models()
                    .into_iter()
                    .map(|m| {
                        let mut row = vec![m.to_string()];
                        for (item, _) in &items {
                            for metric in [METRIC_STRICT, METRIC_LENIENT] {
                                row.push(self.percent(m, item, metric));
                            }
                        }
                        row
                    })
                    .collect();
                out.push_str(&table(Some(&groups), &header, rows));
            }
            Phase::KnowledgeBase => {
                out.push_str("Knowledge Base Response Validity (%)\n");
                let metrics: Vec<&str> = [METRIC_WITHOUT_RAG, METRIC_WITH_RAG]
                    .into_iter()
                    .filter(|m| self.cells.iter().any(|c| c.metric == *m))
                    .collect();
                let items = self.items(metrics.first().copied().unwrap_or(METRIC_WITH_RAG));
                let mut header = vec!["Method".to_string(), "Model".to_string()];
                header.extend(items.iter().map(|(_, l)| l.to_string()));
                let mut rows = Vec::new();
                for metric in metrics {
                    for m in self.models() {
                        let mut row = vec![method_label(metric).to_string(), m.to_string()];
                        row.extend(items.iter().map(|(item, _)| self.percent(m, item, metric)));
                        rows.push(row);
                    }
                }
                out.push_str(&table(None, &header, rows));
            }
            Phase::Routing => {
                out.push_str("Routing Success Rate (%)\n");
                let items = self.items(METRIC_SUCCESS);
                let mut header = vec!["Model".to_string()];
                header.extend(items.iter().map(|(_, l)| l.to_string()));
                let rows = self
                    .models()
                    .into_iter()
                    .map(|m| {
                        let mut row = vec![m.to_string()];
                        row.extend(items.iter().map(|(item, _)| self.percent(m, item, METRIC_SUCCESS)));
                        row
                    })
                    .collect();
                out.push_str(&table(None, &header, rows));
            }
        }
        let excluded: Vec<&ModelMeta> = self.metadata.models.iter().filter(|m| !m.included).collect();
        for m in excluded {
            out.push_str(&format!(
                "excluded: {} ({})\n",
                m.name,
                m.excluded_reason.as_deref().unwrap_or("not evaluated")
            ));
        }
        out.push_str(&format!(
            "repetitions: {}  k: {}  embedder: {}  prompts: {}  fixtures: {}\n",
            self.metadata.repetitions,
            self.metadata.k,
            self.metadata.embedder,
            self.metadata.prompt_version,
            &self.metadata.fixture_sha256[..12.min(self.metadata.fixture_sha256.len())]
        ));
        for w in &self.warnings {
            out.push_str(&format!("warning: {w}\n"));
        }
        out
    }

    fn percent(&self, model: &str, item: &str, metric: &str) -> String {
        self.cell(model, item, metric)
            .map(|c| c.percent.clone())
            .unwrap_or_else(|| "-".into())
    }
}

pub fn method_label(metric: &str) -> &'static str {
    match metric {
        METRIC_WITHOUT_RAG => "Without RAG (Ablation Study)",
        METRIC_WITH_RAG => "With RAG",
        _ => "",
    }
}

/// Renders rows as a `|`-separated table. `groups` optionally adds a row of
/// headers spanning several columns each.
fn table(groups: Option<&[(String, usize)]>, header: &[String], rows: Vec<Vec<String>>) -> String {
    let n = header.len();
    let mut width: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
    for r in &rows {
        for (w, c) in width.iter_mut().zip(r) {
            *w = (*w).max(c.chars().count());
        }
    }
    if let Some(groups) = groups {
        // Widen the last column of a group if its title does not fit.
        let mut col = 0;
        for (title, span) in groups {
            let span_width: usize = width[col..col + span].iter().sum::<usize>() + 3 * (span - 1);
            let need = title.chars().count();
            if need > span_width {
                width[col + span - 1] += need - span_width;
            }
            col += span;
        }
    }
    let line = |cells: Vec<String>, widths: &[usize]| -> String {
        let parts: Vec<String> = cells
            .iter()
            .zip(widths)
            .map(|(c, w)| {
                if c == "-" || c.parse::<f64>().is_ok() {
                    format!("{c:>w$}")
                } else {
                    format!("{c:<w$}")
                }
            })
            .collect();
        format!("{}\n", parts.join(" | ").trim_end())
    };
    let mut out = String::new();
    if let Some(groups) = groups {
        let mut col = 0;
        let mut cells = Vec::new();
        let mut widths = Vec::new();
        for (title, span) in groups {
            cells.push(title.clone());
            widths.push(width[col..col + span].iter().sum::<usize>() + 3 * (span - 1));
            col += span;
        }
        let parts: Vec<String> = cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:^w$}"))
            .collect();
        out.push_str(&format!("{}\n", parts.join(" | ").trim_end()));
    }
    out.push_str(&line(header.to_vec(), &width));
    let total: usize = width.iter().sum::<usize>() + 3 * (n - 1);
    out.push_str(&"-".repeat(total));
    out.push('\n');
    for r in rows {
        out.push_str(&line(r, &width));
    }
    out
}
