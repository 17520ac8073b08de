//! Per-model scorecards and the comparison report.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::{aggregate_across_datasets, fmt1, round1, MedDlcScore};
use crate::qa::QaPolicy;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("no scorecards")]
    Empty,
    #[error("{0}")]
    Parse(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetScore {
    pub meddlc: MedDlcScore,
    #[serde(default)]
    pub llm_score: Option<f64>,
    #[serde(default)]
    pub regions_rated: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AverageScore {
    pub llm_score: Option<f64>,
    pub meddlc: f64,
    pub pos_qa: f64,
    pub neg_qa: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreCard {
    pub model: String,
    pub model_type: String,
    pub backend: String,
    pub judge: String,
    pub config_digest: String,
    pub qa_policy: QaPolicy,
    pub llm_judge_sees_image: bool,
    pub datasets: BTreeMap<String, DatasetScore>,
    pub average: AverageScore,
}

impl ScoreCard {
    /// Averages each metric over datasets without weighting. `None` when
    /// there are no datasets.
    pub fn average_of(datasets: &BTreeMap<String, DatasetScore>) -> Option<AverageScore> {
        let pick = |f: fn(&DatasetScore) -> f64| aggregate_across_datasets(&datasets.iter().map(|(k, d)| (k.as_str(), f(d))).collect());
        let llm: BTreeMap<&str, f64> = datasets.iter().filter_map(|(k, d)| d.llm_score.map(|s| (k.as_str(), s))).collect();
        Some(AverageScore {
            meddlc: pick(|d| d.meddlc.overall)?,
            pos_qa: pick(|d| d.meddlc.pos_accuracy)?,
            neg_qa: pick(|d| d.meddlc.neg_accuracy)?,
            llm_score: aggregate_across_datasets(&llm),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    TableText,
    MachineReadable,
    Delimited,
}

impl ReportFormat {
    pub fn extension(&self) -> &'static str {
        match self {
            Self::TableText => "txt",
            Self::MachineReadable => "json",
            Self::Delimited => "csv",
        }
    }
}

impl std::str::FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "table_text" | "text" => Ok(Self::TableText),
            "machine_readable" | "json" => Ok(Self::MachineReadable),
            "delimited" | "csv" => Ok(Self::Delimited),
            other => Err(format!("unknown report format {other}")),
        }
    }
}

/// One report line, values already rounded to one decimal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub model: String,
    #[serde(rename = "type")]
    pub model_type: String,
    pub llm_score: Option<f64>,
    pub meddlc_score: f64,
    pub pos_qa: f64,
    pub neg_qa: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MachineReport {
    pub schema_version: u32,
    pub config_digests: Vec<String>,
    pub rows: Vec<ReportRow>,
}

/// Rows sorted by overall MedDLC, best first; ties by model name.
pub fn report_rows(cards: &[ScoreCard]) -> Vec<ReportRow> {
    let mut sorted: Vec<&ScoreCard> = cards.iter().collect();
    sorted.sort_by(|a, b| b.average.meddlc.total_cmp(&a.average.meddlc).then_with(|| a.model.cmp(&b.model)));
    sorted
        .into_iter()
        .map(|c| ReportRow {
            model: c.model.clone(),
            model_type: c.model_type.clone(),
            llm_score: c.average.llm_score.map(round1),
            meddlc_score: round1(c.average.meddlc),
            pos_qa: round1(c.average.pos_qa),
            neg_qa: round1(c.average.neg_qa),
        })
        .collect()
}

const HEADER: [&str; 6] = ["Model", "Type", "LLM-score", "MedDLC-score", "Pos QA", "Neg QA"];

fn cells(r: &ReportRow) -> [String; 6] {
    [
        r.model.clone(),
        r.model_type.clone(),
        r.llm_score.map(fmt1).unwrap_or_else(|| "-".into()),
        fmt1(r.meddlc_score),
        fmt1(r.pos_qa),
        fmt1(r.neg_qa),
    ]
}

pub fn emit_report(cards: &[ScoreCard], format: ReportFormat) -> Result<String, ReportError> {
    if cards.is_empty() {
        return Err(ReportError::Empty);
    }
    let rows = report_rows(cards);
    Ok(match format {
        ReportFormat::TableText => table_text(&rows),
        ReportFormat::MachineReadable => {
            let mut digests: Vec<String> = cards.iter().map(|c| c.config_digest.clone()).collect();
            digests.sort();
            digests.dedup();
            let mut s = serde_json::to_string_pretty(&MachineReport { schema_version: 1, config_digests: digests, rows })
                .expect("report serializes");
            s.push('\n');
            s
        }
        ReportFormat::Delimited => {
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(HEADER).expect("in-memory write");
            for r in &rows {
                let mut c = cells(r);
                if r.llm_score.is_none() {
                    c[2].clear();
                }
                w.write_record(&c).expect("in-memory write");
            }
            String::from_utf8(w.into_inner().expect("flush")).expect("utf8")
        }
    })
}

fn table_text(rows: &[ReportRow]) -> String {
    let body: Vec<[String; 6]> = rows.iter().map(cells).collect();
    let mut widths = HEADER.map(str::len);
    for r in &body {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.chars().count());
        }
    }
    let line = |c: &[String]| {
        let mut s = String::new();
        for (i, (cell, w)) in c.iter().zip(widths).enumerate() {
            if i < 2 {
                s.push_str(&format!("{cell:<w$}"));
            } else {
                s.push_str(&format!("{cell:>w$}"));
            }
            s.push_str(if i + 1 < c.len() { "  " } else { "" });
        }
        s.trim_end().to_string()
    };
    let mut out = vec![line(&HEADER.map(String::from)), widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("  ")];
    out.extend(body.iter().map(|r| line(r)));
    out.join("\n") + "\n"
}

pub fn parse_machine_readable(text: &str) -> Result<MachineReport, ReportError> {
    serde_json::from_str(text).map_err(|e| ReportError::Parse(e.to_string()))
}
