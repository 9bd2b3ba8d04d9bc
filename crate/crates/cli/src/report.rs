//! Plain-text and CSV rendering of evaluation results.

use std::fmt::Write;

use editdiff_core::detmetrics::APReport;
use editdiff_core::evalcomp::{CorrelationTable, CorrelationUnit, HumanDimension, RankingReport};

use crate::commands::{CorrelateSummary, EvalDetectSummary, EvalPipelineSummary};
use crate::error::{CliError, Result};
use crate::io::Provenance;

/// Column-aligned text table; the first `left` columns are left-aligned,
/// the rest right-aligned.
struct Table {
    header: Vec<String>,
    left: usize,
    rows: Vec<Vec<String>>,
}

impl Table {
    fn new(header: &[&str]) -> Self {
        Self::with_text_columns(header, 1)
    }

    fn with_text_columns(header: &[&str], left: usize) -> Self {
        Self {
            header: header.iter().map(|s| s.to_string()).collect(),
            left,
            rows: Vec::new(),
        }
    }

    fn row(&mut self, cells: Vec<String>) {
        self.rows.push(cells);
    }

    fn render(&self) -> String {
        let cols = self.header.len();
        let mut width = vec![0usize; cols];
        for r in std::iter::once(&self.header).chain(&self.rows) {
            for (w, c) in width.iter_mut().zip(r) {
                *w = (*w).max(c.chars().count());
            }
        }
        let line = |cells: &[String]| {
            let mut s = String::new();
            for (i, (c, w)) in cells.iter().zip(&width).enumerate() {
                let sep = if i == 0 { "" } else { "  " };
                if i < self.left {
                    let _ = write!(s, "{sep}{c:<w$}");
                } else {
                    let _ = write!(s, "{sep}{c:>w$}");
                }
            }
            s.trim_end().to_string() + "\n"
        };
        let mut out = line(&self.header);
        out.push_str(&line(&width.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>()));
        for r in &self.rows {
            out.push_str(&line(r));
        }
        out
    }
}

fn f3(v: f64) -> String {
    format!("{v:.3}")
}

fn opt3(v: Option<f64>) -> String {
    v.map(f3).unwrap_or_else(|| "-".into())
}

fn ap_cells(label: &str, r: &APReport) -> Vec<String> {
    vec![
        label.into(),
        f3(r.ap),
        f3(r.ap50),
        f3(r.ap75),
        opt3(r.ap_m),
        opt3(r.ap_l),
    ]
}

pub fn detection_table(s: &EvalDetectSummary) -> String {
    let mut t = Table::new(&["setting", "AP", "AP50", "AP75", "AP_M", "AP_L", "ADD", "REMOVE", "EDIT"]);
    let mut agnostic = ap_cells("class-agnostic", &s.class_agnostic);
    agnostic.extend(["-", "-", "-"].map(String::from));
    t.row(agnostic);
    let a = &s.class_aware;
    let mut aware = ap_cells("class-aware", a);
    aware.extend([opt3(a.ap_add), opt3(a.ap_rem), opt3(a.ap_edit)]);
    t.row(aware);
    let mut out = format!("Difference detection ({} cases", s.cases);
    if !s.failed_cases.is_empty() {
        let _ = write!(out, ", {} without detections", s.failed_cases.len());
    }
    out.push_str(")\n");
    out.push_str(&t.render());
    out
}

pub fn pipeline_table(s: &EvalPipelineSummary) -> String {
    let mut out = format!(
        "Coherence ({} cases, {} ground-truth differences)\ncoherence accuracy over ground-truth areas: {}\n",
        s.cases,
        s.gt_differences,
        f3(s.coherence_accuracy)
    );
    let mut t = Table::new(&[
        "coherence AP",
        "AP",
        "AP50",
        "AP75",
        "AP_M",
        "AP_L",
        "coherent",
        "non-coherent",
    ]);
    let r = &s.coherence_ap;
    let mut cells = ap_cells("detected areas", r);
    cells.extend([opt3(r.ap_coherent), opt3(r.ap_non_coherent)]);
    t.row(cells);
    out.push_str(&t.render());
    out
}

pub fn ranking_table(r: &RankingReport) -> String {
    let mut t = Table::new(&[
        "model",
        "cases",
        "correct edits %",
        "unwanted edit area %",
        "no visual change %",
    ]);
    for row in &r.rows {
        t.row(vec![
            row.model.clone(),
            row.cases.to_string(),
            format!("{:.2}", row.correct_edits_pct),
            format!("{:.2}", row.unwanted_edit_area_pct),
            format!("{:.2}", row.no_visual_change_pct),
        ]);
    }
    format!(
        "Model ranking (confidence floor {:.2})\n{}",
        r.confidence_floor,
        t.render()
    )
}

pub fn ranking_csv(r: &RankingReport) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| CliError::Other(e.to_string());
    w.write_record([
        "model",
        "cases",
        "correct_edits_pct",
        "unwanted_edit_area_pct",
        "no_visual_change_pct",
    ])
    .map_err(csv_err)?;
    for row in &r.rows {
        w.write_record([
            row.model.clone(),
            row.cases.to_string(),
            row.correct_edits_pct.to_string(),
            row.unwanted_edit_area_pct.to_string(),
            row.no_visual_change_pct.to_string(),
        ])
        .map_err(csv_err)?;
    }
    String::from_utf8(w.into_inner().map_err(|e| CliError::Other(e.to_string()))?)
        .map_err(|e| CliError::Other(e.to_string()))
}

fn dimension_label(d: HumanDimension) -> &'static str {
    match d {
        HumanDimension::BackgroundPreservation => "background preservation",
        HumanDimension::PromptAdherence => "prompt adherence",
    }
}

fn unit_label(u: CorrelationUnit) -> &'static str {
    match u {
        CorrelationUnit::PerCase => "per case",
        CorrelationUnit::PerGroupMean => "per group mean",
    }
}

pub fn correlation_table(table: &CorrelationTable) -> String {
    let mut t = Table::with_text_columns(
        &["metric", "mask", "human rating", "n", "pearson", "spearman", "kendall"],
        3,
    );
    for row in &table.rows {
        let mut cells = vec![
            row.metric.label().to_string(),
            row.policy.as_str().to_string(),
            dimension_label(row.human_dimension).to_string(),
        ];
        match &row.result {
            Some(r) => cells.extend([r.n.to_string(), f3(r.pearson), f3(r.spearman), f3(r.kendall)]),
            None => cells.extend(["-", "undefined", "undefined", "undefined"].map(String::from)),
        }
        t.row(cells);
    }
    format!(
        "Correlation with human ratings ({})\n{}",
        unit_label(table.unit),
        t.render()
    )
}

pub fn correlation_csv(table: &CorrelationTable) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| CliError::Other(e.to_string());
    w.write_record([
        "metric",
        "mask",
        "human_rating",
        "n",
        "pearson",
        "spearman",
        "kendall",
        "excluded",
        "error",
    ])
    .map_err(csv_err)?;
    for row in &table.rows {
        let (n, p, s, k) = match &row.result {
            Some(r) => (
                r.n.to_string(),
                r.pearson.to_string(),
                r.spearman.to_string(),
                r.kendall.to_string(),
            ),
            None => Default::default(),
        };
        w.write_record([
            row.metric.label().to_string(),
            row.policy.as_str().to_string(),
            dimension_label(row.human_dimension).to_string(),
            n,
            p,
            s,
            k,
            row.excluded.to_string(),
            row.error.clone().unwrap_or_default(),
        ])
        .map_err(csv_err)?;
    }
    String::from_utf8(w.into_inner().map_err(|e| CliError::Other(e.to_string()))?)
        .map_err(|e| CliError::Other(e.to_string()))
}

#[derive(Debug, Default)]
pub struct Sections {
    pub provenance: Vec<Provenance>,
    pub detection: Option<EvalDetectSummary>,
    pub pipeline: Option<EvalPipelineSummary>,
    pub ranking: Option<RankingReport>,
    pub correlation: Option<CorrelateSummary>,
}

pub fn render(s: &Sections) -> String {
    let mut out = String::from("Image edit evaluation report\n\n");
    let first = &s.provenance[0];
    let _ = writeln!(out, "tool:         {} {}", first.tool, first.tool_version);
    let _ = writeln!(out, "dataset hash: {}", first.dataset_hash.as_deref().unwrap_or("-"));
    for p in &s.provenance {
        let _ = writeln!(out, "{:<13} config {}", p.command, p.config_hash);
    }
    let blocks = [
        s.detection.as_ref().map(detection_table),
        s.pipeline.as_ref().map(pipeline_table),
        s.ranking.as_ref().map(ranking_table),
        s.correlation.as_ref().map(|c| {
            let mut t = correlation_table(&c.table);
            if !c.failed_cases.is_empty() {
                let _ = writeln!(t, "cases without scores: {}", c.failed_cases.join(", "));
            }
            t
        }),
    ];
    for b in blocks.into_iter().flatten() {
        out.push('\n');
        out.push_str(&b);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use editdiff_core::evalcomp::RankingRow;

    #[test]
    fn table_alignment() {
        let mut t = Table::new(&["name", "v"]);
        t.row(vec!["a".into(), "1.000".into()]);
        t.row(vec!["longer".into(), "12.5".into()]);
        assert_eq!(
            t.render(),
            "name        v\n------  -----\na       1.000\nlonger   12.5\n"
        );
    }

    #[test]
    fn ranking_csv_has_header_and_rows() {
        let r = RankingReport {
            confidence_floor: 0.0,
            rows: vec![RankingRow {
                model: "m".into(),
                cases: 4,
                correct_edits_pct: 50.0,
                unwanted_edit_area_pct: 9.5,
                no_visual_change_pct: 25.0,
            }],
        };
        assert_eq!(
            ranking_csv(&r).unwrap(),
            "model,cases,correct_edits_pct,unwanted_edit_area_pct,no_visual_change_pct\nm,4,50,9.5,25\n"
        );
    }
}
