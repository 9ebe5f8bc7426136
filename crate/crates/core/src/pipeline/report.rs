use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::run::{Aggregate, RunResult, VariantResult};
use super::PipelineError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Csv,
    Markdown,
}

impl ReportFormat {
    pub fn extension(&self) -> &'static str {
        match self {
            Self::Csv => "csv",
            Self::Markdown => "md",
        }
    }
}

impl FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "csv" => Ok(Self::Csv),
            "markdown" | "md" => Ok(Self::Markdown),
            other => Err(format!("unknown report format {other:?} (expected csv or markdown)")),
        }
    }
}

/// Rendered cells shared by every output format.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportTable {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

#[derive(Clone, Copy)]
enum Metric {
    MIou,
    AIou,
    MDice,
    ADice,
    Hd95,
}

impl Metric {
    fn case_value(self, m: &crate::metrics::MetricReport) -> Option<f64> {
        match self {
            Self::MIou => Some(m.overlap.miou),
            Self::AIou => Some(m.overlap.aiou),
            Self::MDice => Some(m.overlap.mdice),
            Self::ADice => Some(m.overlap.adice),
            Self::Hd95 => m.hd95_mm,
        }
    }

    fn mean_value(self, a: &Aggregate) -> Option<f64> {
        match self {
            Self::MIou => a.miou,
            Self::AIou => a.aiou,
            Self::MDice => a.mdice,
            Self::ADice => a.adice,
            Self::Hd95 => a.hd95_mm,
        }
    }

    /// Overlap scores are shown as percentages, distances in mm.
    fn display(self, v: f64) -> f64 {
        match self {
            Self::Hd95 => v,
            _ => 100.0 * v,
        }
    }
}

fn columns(num_classes: usize) -> Vec<(&'static str, Metric)> {
    if num_classes <= 2 {
        vec![("IoU", Metric::MIou), ("Dice", Metric::MDice), ("HD95", Metric::Hd95)]
    } else {
        vec![
            ("mIoU", Metric::MIou),
            ("aIoU", Metric::AIou),
            ("mDice", Metric::MDice),
            ("aDice", Metric::ADice),
            ("HD95", Metric::Hd95),
        ]
    }
}

const NA: &str = "n/a";

fn fixed(v: Option<f64>) -> String {
    v.map_or_else(|| NA.to_string(), |v| format!("{v:.2}"))
}

fn signed(v: Option<f64>) -> String {
    match v {
        None => NA.to_string(),
        Some(v) => {
            let s = format!("{v:+.2}");
            if s == "-0.00" {
                "+0.00".into()
            } else {
                s
            }
        }
    }
}

/// Long-form table: per-case rows for every variant followed by its mean
/// row; deltas against the variant's reference appear on mean rows only.
pub fn report_table(result: &RunResult) -> ReportTable {
    let cols = columns(result.num_classes);
    let mut header = vec!["variant".to_string(), "case".to_string()];
    header.extend(cols.iter().map(|(n, _)| n.to_string()));
    header.push("FG volume (mm3)".into());
    header.extend(cols.iter().map(|(n, _)| format!("Δ{n}")));

    let mut rows = Vec::new();
    for v in &result.variants {
        if v.cases.is_empty() {
            continue;
        }
        for c in &v.cases {
            let mut row = vec![v.name.clone(), c.case_id.clone()];
            row.extend(cols.iter().map(|&(_, m)| {
                fixed(c.metrics.as_ref().and_then(|r| m.case_value(r)).map(|x| m.display(x)))
            }));
            row.push(fixed(Some(c.foreground_mm3)));
            row.extend(cols.iter().map(|_| String::new()));
            rows.push(row);
        }
        let reference = reference_of(result, v);
        let mut row = vec![v.name.clone(), "mean".to_string()];
        row.extend(
            cols.iter()
                .map(|&(_, m)| fixed(m.mean_value(&v.aggregate).map(|x| m.display(x)))),
        );
        row.push(fixed(v.aggregate.foreground_mm3));
        row.extend(cols.iter().map(|&(_, m)| match reference {
            None => String::new(),
            Some(r) => signed(
                m.mean_value(&v.aggregate)
                    .zip(m.mean_value(&r.aggregate))
                    .map(|(a, b)| m.display(a) - m.display(b)),
            ),
        }));
        rows.push(row);
    }
    ReportTable { header, rows }
}

fn reference_of<'a>(result: &'a RunResult, v: &VariantResult) -> Option<&'a VariantResult> {
    v.reference.as_deref().and_then(|name| result.variant(name))
}

pub fn render_report(result: &RunResult, format: ReportFormat) -> String {
    let table = report_table(result);
    match format {
        ReportFormat::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(&table.header).expect("writing to memory");
            for row in &table.rows {
                w.write_record(row).expect("writing to memory");
            }
            String::from_utf8(w.into_inner().expect("writing to memory")).expect("cells are UTF-8")
        }
        ReportFormat::Markdown => {
            let mut out = String::new();
            let line = |cells: &[String]| format!("| {} |\n", cells.join(" | "));
            out.push_str(&line(&table.header));
            let sep: Vec<String> = table
                .header
                .iter()
                .enumerate()
                .map(|(i, _)| if i < 2 { "---".into() } else { "---:".into() })
                .collect();
            out.push_str(&line(&sep));
            for row in &table.rows {
                let escaped: Vec<String> = row.iter().map(|c| c.replace('|', "\\|")).collect();
                out.push_str(&line(&escaped));
            }
            out
        }
    }
}

/// Writes the rendered report to `path`.
pub fn emit_report(result: &RunResult, format: ReportFormat, path: impl AsRef<Path>) -> Result<(), PipelineError> {
    let path = path.as_ref();
    std::fs::write(path, render_report(result, format)).map_err(|e| PipelineError::io(path, e))
}

/// One-paragraph plain-text summary of the aggregate rows.
pub fn summary(result: &RunResult) -> String {
    let mut s = String::new();
    for v in &result.variants {
        let a = &v.aggregate;
        let _ = writeln!(
            s,
            "{:<24} cases={:<3} mIoU={} mDice={} HD95={} (undefined {})",
            v.name,
            a.cases,
            fixed(a.miou.map(|x| 100.0 * x)),
            fixed(a.mdice.map(|x| 100.0 * x)),
            fixed(a.hd95_mm),
            a.hd95_undefined
        );
    }
    for f in &result.failures {
        let _ = writeln!(s, "failed: {} ({})", f.case_id, f.error);
    }
    s
}
