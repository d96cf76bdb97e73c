use std::fmt::Write as _;

use super::metrics::RECALL_KS;
use super::offline::EvalReport;
use crate::error::{Error, Result};

fn header() -> Vec<String> {
    let mut h = vec!["Model".to_string(), "Category Accuracy".to_string()];
    h.extend(RECALL_KS.iter().map(|k| format!("Recall@{k}")));
    h
}

fn cells(report: &EvalReport) -> Vec<Vec<String>> {
    report
        .rows
        .iter()
        .map(|r| {
            let mut row = vec![r.model.clone(), format!("{:.3}", r.category_accuracy)];
            row.extend(r.recall.iter().map(|v| format!("{v:.3}")));
            row
        })
        .collect()
}

impl EvalReport {
    /// One header line and one line per model.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let fail = |e: csv::Error| Error::Format(format!("csv: {e}"));
        w.write_record(header()).map_err(fail)?;
        for row in cells(self) {
            w.write_record(row).map_err(fail)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Format(format!("csv: {e}")))?;
        String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
    }

    /// Right-aligned table followed by the effective settings.
    pub fn to_text(&self) -> String {
        let head = header();
        let body = cells(self);
        let widths: Vec<usize> = (0..head.len())
            .map(|c| body.iter().map(|r| r[c].len()).chain([head[c].len()]).max().unwrap_or(0))
            .collect();
        let line = |row: &[String]| -> String {
            let mut s = format!("{:<w$}", row[0], w = widths[0]);
            for (c, v) in row.iter().enumerate().skip(1) {
                let _ = write!(s, "  {v:>w$}", w = widths[c]);
            }
            s.push('\n');
            s
        };
        let mut out = line(&head);
        out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
        out.push('\n');
        for r in &body {
            out.push_str(&line(r));
        }
        let _ = writeln!(out, "\n{} queries", self.queries);
        if let Some(s) = &self.sweep {
            let curve: Vec<String> = s.curve.iter().map(|(w, r)| format!("{w}:{r:.3}")).collect();
            let _ = writeln!(out, "fusion sweep (weight:Recall@5) {}", curve.join(" "));
        }
        for (k, v) in &self.config {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}
