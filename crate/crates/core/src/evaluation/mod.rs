//! Metrics and anomaly rates per (backend, template) cell.
//!
//! Attack is the positive class. By default only `Valid` outcomes enter the
//! confusion matrix and the AUC; anomalies are reported as rates.
//! [`AnomalyMode::Misclassify`] instead counts every anomaly as a wrong
//! answer with the worst possible score.

mod report;

use std::collections::BTreeSet;

use thiserror::Error;

use crate::flow_data::Label;
use crate::prompts::TemplateId;
use crate::reasoning::InferenceOutcome;

pub use report::{emit_reports, render_csv, render_markdown, ReportFormat};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AnomalyMode {
    #[default]
    Exclude,
    Misclassify,
}

impl AnomalyMode {
    pub fn as_str(self) -> &'static str {
        match self {
            AnomalyMode::Exclude => "exclude",
            AnomalyMode::Misclassify => "misclassify",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "exclude" => Some(AnomalyMode::Exclude),
            "misclassify" => Some(AnomalyMode::Misclassify),
            _ => None,
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EvalError {
    #[error("no outcomes to evaluate")]
    Empty,
    #[error("{scores} scores but {labels} labels")]
    LengthMismatch { scores: usize, labels: usize },
    #[error("AUC is undefined when only one class is present")]
    SingleClass,
    #[error("score {0} is not a finite number")]
    NonFiniteScore(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    fn add(&mut self, predicted: Label, truth: Label) {
        match (predicted, truth) {
            (Label::Attack, Label::Attack) => self.tp += 1,
            (Label::Attack, Label::Benign) => self.fp += 1,
            (Label::Benign, Label::Benign) => self.tn += 1,
            (Label::Benign, Label::Attack) => self.fn_ += 1,
        }
    }
}

fn wrong(truth: Label) -> Label {
    match truth {
        Label::Attack => Label::Benign,
        Label::Benign => Label::Attack,
    }
}

fn worst_score(truth: Label) -> f64 {
    match truth {
        Label::Attack => 0.0,
        Label::Benign => 1.0,
    }
}

pub fn compute_confusion<'a>(outcomes: impl IntoIterator<Item = (&'a InferenceOutcome, Label)>) -> ConfusionCounts {
    compute_confusion_with(outcomes, AnomalyMode::Exclude)
}

pub fn compute_confusion_with<'a>(
    outcomes: impl IntoIterator<Item = (&'a InferenceOutcome, Label)>,
    mode: AnomalyMode,
) -> ConfusionCounts {
    let mut counts = ConfusionCounts::default();
    for (outcome, truth) in outcomes {
        match (outcome.as_valid(), mode) {
            (Some(p), _) => counts.add(p.predicted, truth),
            (None, AnomalyMode::Misclassify) => counts.add(wrong(truth), truth),
            (None, AnomalyMode::Exclude) => {}
        }
    }
    counts
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// `(f1, recall)`; every 0/0 is taken as 0.
pub fn f1_recall(counts: &ConfusionCounts) -> (f64, f64) {
    let recall = ratio(counts.tp, counts.tp + counts.fn_);
    let precision = ratio(counts.tp, counts.tp + counts.fp);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    (f1, recall)
}

/// Mann–Whitney AUC via midranks: the fraction of (Attack, Benign) pairs
/// where the Attack score is higher, ties counting one half.
pub fn compute_auc(scores: &[f64], labels: &[Label]) -> Result<f64, EvalError> {
    if scores.len() != labels.len() {
        return Err(EvalError::LengthMismatch {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    if let Some(bad) = scores.iter().find(|s| !s.is_finite()) {
        return Err(EvalError::NonFiniteScore(bad.to_string()));
    }
    let n_attack = labels.iter().filter(|l| **l == Label::Attack).count();
    let n_benign = labels.len() - n_attack;
    if n_attack == 0 || n_benign == 0 {
        return Err(EvalError::SingleClass);
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Ranks are 1-based; a tie group spanning ranks i+1..=j gets (i+1+j)/2.
    // Work in doubled ranks so every quantity stays an integer.
    let mut attack_rank_sum_x2: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let midrank_x2 = (i + 1 + j) as u128;
        let attacks = order[i..j].iter().filter(|&&k| labels[k] == Label::Attack).count() as u128;
        attack_rank_sum_x2 += midrank_x2 * attacks;
        i = j;
    }
    let na = n_attack as u128;
    let u_x2 = attack_rank_sum_x2 - na * (na + 1);
    Ok(u_x2 as f64 / (2 * na * n_benign as u128) as f64)
}

/// Outcome counts of one cell. `n_l2` includes parse failures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct OutcomeTally {
    pub n_valid: u64,
    pub n_l1: u64,
    pub n_l2: u64,
    pub n_parse_failure: u64,
}

impl OutcomeTally {
    pub fn from_outcomes<'a>(outcomes: impl IntoIterator<Item = &'a InferenceOutcome>) -> Self {
        let mut t = Self::default();
        for o in outcomes {
            match o {
                InferenceOutcome::Valid(_) => t.n_valid += 1,
                InferenceOutcome::AnomalyL1 { .. } => t.n_l1 += 1,
                InferenceOutcome::AnomalyL2 { .. } => t.n_l2 += 1,
                InferenceOutcome::ParseFailure { .. } => {
                    t.n_l2 += 1;
                    t.n_parse_failure += 1;
                }
            }
        }
        t
    }

    pub fn total(&self) -> u64 {
        self.n_valid + self.n_l1 + self.n_l2
    }

    /// `(l1_rate, l2_rate)` in percent.
    pub fn rates(&self) -> Result<(f64, f64), EvalError> {
        let n = self.total();
        if n == 0 {
            return Err(EvalError::Empty);
        }
        Ok((100.0 * self.n_l1 as f64 / n as f64, 100.0 * self.n_l2 as f64 / n as f64))
    }
}

/// `(l1_rate, l2_rate)` in percent; parse failures count towards L2.
pub fn anomaly_rates<'a>(outcomes: impl IntoIterator<Item = &'a InferenceOutcome>) -> Result<(f64, f64), EvalError> {
    OutcomeTally::from_outcomes(outcomes).rates()
}

/// Signed percentage change of `value` relative to `reference`.
pub fn delta_percent(value: f64, reference: f64) -> Option<f64> {
    (reference != 0.0).then(|| 100.0 * (value - reference) / reference)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Metric {
    F1,
    Recall,
    Auc,
    L1Rate,
    L2Rate,
}

impl Metric {
    pub const ACCURACY: [Metric; 3] = [Metric::F1, Metric::Recall, Metric::Auc];
    pub const ANOMALY: [Metric; 2] = [Metric::L1Rate, Metric::L2Rate];

    pub fn label(self) -> &'static str {
        match self {
            Metric::F1 => "F1",
            Metric::Recall => "Recall",
            Metric::Auc => "AUC",
            Metric::L1Rate => "L1",
            Metric::L2Rate => "L2",
        }
    }

    pub fn key(self) -> &'static str {
        match self {
            Metric::F1 => "f1",
            Metric::Recall => "recall",
            Metric::Auc => "auc",
            Metric::L1Rate => "l1_rate",
            Metric::L2Rate => "l2_rate",
        }
    }

    pub fn decimals(self) -> usize {
        match self {
            Metric::F1 | Metric::Recall | Metric::Auc => 4,
            Metric::L1Rate | Metric::L2Rate => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellReport {
    pub backend: String,
    pub template: TemplateId,
    pub f1: f64,
    pub recall: f64,
    /// `None` when the scored outcomes hold a single class.
    pub auc: Option<f64>,
    pub l1_rate: f64,
    pub l2_rate: f64,
    pub tally: OutcomeTally,
    pub confusion: ConfusionCounts,
}

impl CellReport {
    pub fn from_outcomes(
        backend: impl Into<String>,
        template: TemplateId,
        outcomes: &[(&InferenceOutcome, Label)],
        mode: AnomalyMode,
    ) -> Result<Self, EvalError> {
        let tally = OutcomeTally::from_outcomes(outcomes.iter().map(|(o, _)| *o));
        let (l1_rate, l2_rate) = tally.rates()?;
        let confusion = compute_confusion_with(outcomes.iter().copied(), mode);
        let (f1, recall) = f1_recall(&confusion);

        let mut scores = Vec::with_capacity(outcomes.len());
        let mut labels = Vec::with_capacity(outcomes.len());
        for (outcome, truth) in outcomes {
            let score = match (outcome.as_valid(), mode) {
                (Some(p), _) => Some(p.p_attack),
                (None, AnomalyMode::Misclassify) => Some(worst_score(*truth)),
                (None, AnomalyMode::Exclude) => None,
            };
            if let Some(s) = score {
                scores.push(s);
                labels.push(*truth);
            }
        }
        let auc = match compute_auc(&scores, &labels) {
            Ok(a) => Some(a),
            Err(EvalError::SingleClass) => None,
            Err(e) => return Err(e),
        };
        Ok(Self {
            backend: backend.into(),
            template,
            f1,
            recall,
            auc,
            l1_rate,
            l2_rate,
            tally,
            confusion,
        })
    }

    pub fn metric(&self, metric: Metric) -> Option<f64> {
        match metric {
            Metric::F1 => Some(self.f1),
            Metric::Recall => Some(self.recall),
            Metric::Auc => self.auc,
            Metric::L1Rate => Some(self.l1_rate),
            Metric::L2Rate => Some(self.l2_rate),
        }
    }
}

/// Backends × templates grid. Rows keep the order backends were first
/// added; columns follow the canonical template order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AblationReport {
    backends: Vec<String>,
    cells: Vec<CellReport>,
}

impl AblationReport {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds or replaces the cell for `(cell.backend, cell.template)`.
    pub fn insert(&mut self, cell: CellReport) {
        if !self.backends.contains(&cell.backend) {
            self.backends.push(cell.backend.clone());
        }
        self.cells
            .retain(|c| !(c.backend == cell.backend && c.template == cell.template));
        self.cells.push(cell);
    }

    pub fn backends(&self) -> &[String] {
        &self.backends
    }

    pub fn templates(&self) -> Vec<TemplateId> {
        let present: BTreeSet<TemplateId> = self.cells.iter().map(|c| c.template).collect();
        TemplateId::ALL.into_iter().filter(|t| present.contains(t)).collect()
    }

    pub fn cell(&self, backend: &str, template: TemplateId) -> Option<&CellReport> {
        self.cells
            .iter()
            .find(|c| c.backend == backend && c.template == template)
    }

    pub fn cells(&self) -> impl Iterator<Item = &CellReport> {
        self.backends
            .iter()
            .flat_map(move |b| TemplateId::ALL.into_iter().filter_map(move |t| self.cell(b, t)))
    }

    /// Delta of a cell against the same backend's P3 cell. `None` for the
    /// P3 column itself, when P3 is missing, or when either value is
    /// undefined or the P3 value is zero.
    pub fn delta(&self, backend: &str, template: TemplateId, metric: Metric) -> Option<f64> {
        if template == TemplateId::P3 {
            return None;
        }
        let value = self.cell(backend, template)?.metric(metric)?;
        let reference = self.cell(backend, TemplateId::P3)?.metric(metric)?;
        delta_percent(value, reference)
    }

    /// Cells whose AUC could not be computed.
    pub fn not_applicable(&self) -> Vec<(&str, TemplateId)> {
        self.cells()
            .filter(|c| c.auc.is_none())
            .map(|c| (c.backend.as_str(), c.template))
            .collect()
    }
}
