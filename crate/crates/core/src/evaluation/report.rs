//! Markdown and CSV renderings of an [`AblationReport`].

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use super::{AblationReport, Metric};
use crate::numfmt::format_fixed;
use crate::prompts::TemplateId;

pub const NOT_APPLICABLE: &str = "n/a";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Markdown,
    Csv,
}

impl ReportFormat {
    pub fn file_name(self) -> &'static str {
        match self {
            ReportFormat::Markdown => "report.md",
            ReportFormat::Csv => "report.csv",
        }
    }
}

fn format_delta(delta: f64) -> String {
    let text = format!("{delta:+.2}");
    // A tiny negative delta must not print as "-0.00".
    if text == "-0.00" {
        "+0.00".to_string()
    } else {
        text
    }
}

fn format_value(report: &AblationReport, backend: &str, template: TemplateId, metric: Metric) -> Option<String> {
    let cell = report.cell(backend, template)?;
    Some(match cell.metric(metric) {
        Some(v) => format_fixed(v, metric.decimals()),
        None => NOT_APPLICABLE.to_string(),
    })
}

fn table(report: &AblationReport, title: &str, metrics: &[Metric], with_deltas: bool) -> String {
    let templates = report.templates();
    let mut out = format!("## {title}\n\n| Backend | Metric |");
    for t in &templates {
        out.push_str(&format!(" {t} |"));
    }
    out.push_str("\n|---|---|");
    out.push_str(&"---|".repeat(templates.len()));
    out.push('\n');
    for backend in report.backends() {
        for (i, metric) in metrics.iter().enumerate() {
            let name = if i == 0 { backend.as_str() } else { "" };
            out.push_str(&format!("| {name} | {} |", metric.label()));
            for &t in &templates {
                let mut cell = format_value(report, backend, t, *metric).unwrap_or_else(|| NOT_APPLICABLE.into());
                if with_deltas {
                    if let Some(d) = report.delta(backend, t, *metric) {
                        cell.push_str(&format!(" ({}%)", format_delta(d)));
                    }
                }
                out.push_str(&format!(" {cell} |"));
            }
            out.push('\n');
        }
    }
    out
}

/// Accuracy table with deltas against P3, then the anomaly-rate table
/// (percent).
pub fn render_markdown(report: &AblationReport) -> String {
    let mut out = table(report, "Accuracy", &Metric::ACCURACY, true);
    out.push('\n');
    out.push_str(&table(report, "Abnormal outputs (%)", &Metric::ANOMALY, false));
    out
}

/// Long form: `backend,template,metric,value,delta_vs_p3`.
pub fn render_csv(report: &AblationReport) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["backend", "template", "metric", "value", "delta_vs_p3"])
        .expect("write to memory");
    for cell in report.cells() {
        for metric in Metric::ACCURACY.into_iter().chain(Metric::ANOMALY) {
            let value = cell
                .metric(metric)
                .map(|v| format_fixed(v, metric.decimals()))
                .unwrap_or_else(|| NOT_APPLICABLE.into());
            let delta = if Metric::ACCURACY.contains(&metric) {
                report
                    .delta(&cell.backend, cell.template, metric)
                    .map(format_delta)
                    .unwrap_or_default()
            } else {
                String::new()
            };
            w.write_record([
                cell.backend.as_str(),
                cell.template.as_str(),
                metric.key(),
                &value,
                &delta,
            ])
            .expect("write to memory");
        }
    }
    String::from_utf8(w.into_inner().expect("flush to memory")).expect("csv output is utf-8")
}

/// Writes the requested renderings into `dir` and returns their paths.
pub fn emit_reports(report: &AblationReport, formats: &[ReportFormat], dir: &Path) -> io::Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    for format in formats {
        let path = dir.join(format.file_name());
        let text = match format {
            ReportFormat::Markdown => render_markdown(report),
            ReportFormat::Csv => render_csv(report),
        };
        fs::write(&path, text)?;
        written.push(path);
    }
    Ok(written)
}
