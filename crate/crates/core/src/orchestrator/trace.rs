//! Per-record results and their on-disk forms: `trace.log` (JSON lines,
//! everything needed to rebuild reports) and `outcomes.csv`.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::flow_data::Label;
use crate::numfmt::format_number;
use crate::prompts::TemplateId;
use crate::reasoning::{InferenceOutcome, ParsedClassification, ReasoningTrace};

/// Result of one (backend, template, record) pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct OutcomeRecord {
    pub backend: String,
    pub template: TemplateId,
    pub record_index: usize,
    pub true_label: Label,
    pub token_text: String,
    pub trace: Option<ReasoningTrace>,
    /// `Err` holds the stage-attributed backend error.
    pub result: Result<InferenceOutcome, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TraceOutcome {
    Valid {
        p_attack: f64,
        p_benign: f64,
        predicted: String,
    },
    L1 {
        p_attack: f64,
        p_benign: f64,
        sum_deviation: f64,
    },
    L2,
    ParseFailure,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceLine {
    pub backend: String,
    pub template: String,
    pub record_index: usize,
    pub true_label: String,
    pub token_text: String,
    pub r1: Option<String>,
    pub r2: Option<String>,
    pub stage1_latency_ms: Option<f64>,
    pub stage2_latency_ms: Option<f64>,
    pub outcome: Option<TraceOutcome>,
    pub error: Option<String>,
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("trace line {line}: {detail}")]
    Malformed { line: usize, detail: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<&OutcomeRecord> for TraceLine {
    fn from(r: &OutcomeRecord) -> Self {
        let outcome = r.result.as_ref().ok().map(|o| match o {
            InferenceOutcome::Valid(p) => TraceOutcome::Valid {
                p_attack: p.p_attack,
                p_benign: p.p_benign,
                predicted: p.predicted.as_str().to_string(),
            },
            InferenceOutcome::AnomalyL1 {
                p_attack,
                p_benign,
                sum_deviation,
                ..
            } => TraceOutcome::L1 {
                p_attack: *p_attack,
                p_benign: *p_benign,
                sum_deviation: *sum_deviation,
            },
            InferenceOutcome::AnomalyL2 { .. } => TraceOutcome::L2,
            InferenceOutcome::ParseFailure { .. } => TraceOutcome::ParseFailure,
        });
        let ms = |d: std::time::Duration| d.as_secs_f64() * 1000.0;
        TraceLine {
            backend: r.backend.clone(),
            template: r.template.as_str().to_string(),
            record_index: r.record_index,
            true_label: r.true_label.as_str().to_string(),
            token_text: r.token_text.clone(),
            r1: r.trace.as_ref().and_then(|t| t.r1_text.clone()),
            r2: r.trace.as_ref().map(|t| t.r2_text.clone()),
            stage1_latency_ms: r.trace.as_ref().and_then(|t| t.stage1_latency).map(ms),
            stage2_latency_ms: r.trace.as_ref().map(|t| ms(t.stage2_latency)),
            outcome,
            error: r.result.as_ref().err().cloned(),
        }
    }
}

impl TraceLine {
    /// Rebuilds `(backend, template, record_index, truth, outcome)`; `None`
    /// outcome for records that failed.
    pub fn decode(&self, line: usize) -> Result<(TemplateId, Label, Option<InferenceOutcome>), TraceError> {
        let bad = |detail: String| TraceError::Malformed { line, detail };
        let template: TemplateId = self
            .template
            .parse()
            .map_err(|e: crate::prompts::PromptError| bad(e.to_string()))?;
        let truth = Label::parse(&self.true_label).ok_or_else(|| bad(format!("bad label `{}`", self.true_label)))?;
        let raw = self.r2.clone().unwrap_or_default();
        let outcome = match &self.outcome {
            None => None,
            Some(TraceOutcome::Valid {
                p_attack,
                p_benign,
                predicted,
            }) => Some(InferenceOutcome::Valid(ParsedClassification {
                p_attack: *p_attack,
                p_benign: *p_benign,
                predicted: Label::parse(predicted).ok_or_else(|| bad(format!("bad prediction `{predicted}`")))?,
                raw,
            })),
            Some(TraceOutcome::L1 {
                p_attack,
                p_benign,
                sum_deviation,
            }) => Some(InferenceOutcome::AnomalyL1 {
                p_attack: *p_attack,
                p_benign: *p_benign,
                sum_deviation: *sum_deviation,
                raw,
            }),
            Some(TraceOutcome::L2) => Some(InferenceOutcome::AnomalyL2 { raw }),
            Some(TraceOutcome::ParseFailure) => Some(InferenceOutcome::ParseFailure { raw }),
        };
        if outcome.is_none() && self.error.is_none() {
            return Err(bad("neither outcome nor error".into()));
        }
        Ok((template, truth, outcome))
    }
}

pub fn write_trace<W: Write>(records: &[OutcomeRecord], mut out: W) -> std::io::Result<()> {
    for r in records {
        let line = serde_json::to_string(&TraceLine::from(r)).map_err(std::io::Error::other)?;
        writeln!(out, "{line}")?;
    }
    out.flush()
}

pub fn read_trace<R: BufRead>(input: R) -> Result<Vec<TraceLine>, TraceError> {
    let mut lines = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        lines.push(serde_json::from_str(&line).map_err(|e| TraceError::Malformed {
            line: i + 1,
            detail: e.to_string(),
        })?);
    }
    Ok(lines)
}

pub const OUTCOMES_HEADER: [&str; 10] = [
    "backend",
    "template",
    "record_index",
    "true_label",
    "outcome",
    "p_attack",
    "p_benign",
    "predicted",
    "sum_deviation",
    "error",
];

pub fn write_outcomes_csv<W: Write>(records: &[OutcomeRecord], out: W) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| std::io::Error::other(e);
    w.write_record(OUTCOMES_HEADER).map_err(io)?;
    for r in records {
        let (kind, pa, pb, predicted, dev) = match &r.result {
            Ok(InferenceOutcome::Valid(p)) => (
                "valid",
                format_number(p.p_attack),
                format_number(p.p_benign),
                p.predicted.as_str().to_string(),
                String::new(),
            ),
            Ok(InferenceOutcome::AnomalyL1 {
                p_attack,
                p_benign,
                sum_deviation,
                ..
            }) => (
                "l1",
                format_number(*p_attack),
                format_number(*p_benign),
                String::new(),
                format_number(*sum_deviation),
            ),
            Ok(o) => (
                o.variant_name(),
                String::new(),
                String::new(),
                String::new(),
                String::new(),
            ),
            Err(_) => ("error", String::new(), String::new(), String::new(), String::new()),
        };
        let index = r.record_index.to_string();
        let error = r.result.as_ref().err().cloned().unwrap_or_default();
        w.write_record([
            r.backend.as_str(),
            r.template.as_str(),
            &index,
            r.true_label.as_str(),
            kind,
            &pa,
            &pb,
            &predicted,
            &dev,
            &error,
        ])
        .map_err(io)?;
    }
    w.flush()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::time::Duration;

    fn record(result: Result<InferenceOutcome, String>) -> OutcomeRecord {
        OutcomeRecord {
            backend: "m".into(),
            template: TemplateId::P3Prime,
            record_index: 3,
            true_label: Label::Benign,
            token_text: "A: 1".into(),
            trace: result.as_ref().ok().map(|o| ReasoningTrace {
                record_index: 3,
                template: TemplateId::P3Prime,
                r1_text: Some("OK".into()),
                r2_text: o.raw().to_string(),
                stage1_latency: Some(Duration::from_millis(2)),
                stage2_latency: Duration::from_millis(5),
            }),
            result,
        }
    }

    #[test]
    fn trace_round_trips_outcomes() {
        let outcomes = vec![
            crate::reasoning::extract_outcome("Attack: 0.33, Benign: 0.66"),
            crate::reasoning::extract_outcome("Attack: 0.9, Benign: 0.3"),
            crate::reasoning::extract_outcome("I cannot say"),
            crate::reasoning::extract_outcome("hmm"),
        ];
        let mut records: Vec<_> = outcomes.iter().cloned().map(|o| record(Ok(o))).collect();
        records.push(record(Err("stage2 failed: boom".into())));
        let mut buf = Vec::new();
        write_trace(&records, &mut buf).unwrap();
        let lines = read_trace(buf.as_slice()).unwrap();
        assert_eq!(lines.len(), 5);
        for (line, original) in lines.iter().zip(&outcomes) {
            let (t, truth, o) = line.decode(1).unwrap();
            assert_eq!(t, TemplateId::P3Prime);
            assert_eq!(truth, Label::Benign);
            assert_eq!(o.as_ref(), Some(original));
        }
        assert_eq!(lines[4].decode(5).unwrap().2, None);
        assert_eq!(lines[0].r1.as_deref(), Some("OK"));
    }

    #[test]
    fn malformed_trace() {
        assert!(matches!(
            read_trace("{\"x\":1}\n".as_bytes()),
            Err(TraceError::Malformed { line: 1, .. })
        ));
    }

    #[test]
    fn outcomes_csv_columns() {
        let records = vec![
            record(Ok(crate::reasoning::extract_outcome("Attack: 0.2, Benign: 0.8"))),
            record(Err("stage1 failed: x, y".into())),
        ];
        let mut buf = Vec::new();
        write_outcomes_csv(&records, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], OUTCOMES_HEADER.join(","));
        assert_eq!(lines[1], "m,P3prime,3,Benign,valid,0.2,0.8,Benign,,");
        assert_eq!(lines[2], "m,P3prime,3,Benign,error,,,,,\"stage1 failed: x, y\"");
    }
}
