//! Global per-feature statistics and their text rendering.
//!
//! Every feature column is summarised by the 5-tuple max, min, median, mean
//! and population variance. The rendered text is one line per feature and
//! is what the knowledge prompt carries into the first reasoning stage.

use thiserror::Error;

use crate::flow_data::{Dataset, FeatureSchema};
use crate::numfmt::format_number;

/// Statistic names in rendering order.
pub const STAT_NAMES: [&str; 5] = ["Max", "Min", "Median", "Mean", "Variance"];

#[derive(Debug, Error, PartialEq, Eq)]
pub enum KnowledgeError {
    #[error("cannot profile an empty dataset")]
    EmptyDataset,
    #[error("column {0} contains a non-finite value; preprocess first")]
    NonFinite(String),
    #[error("profile has {profile} entries but schema has {schema} features")]
    ArityMismatch { profile: usize, schema: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ColumnStats {
    pub max: f64,
    pub min: f64,
    pub median: f64,
    pub mean: f64,
    pub variance: f64,
}

impl ColumnStats {
    /// Statistics of one non-empty column of finite values.
    ///
    /// Sums run over the sorted values with Neumaier compensation, so the
    /// result does not depend on row order.
    pub fn from_column(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        let min = sorted[0];
        let max = sorted[n - 1];
        let median = if n % 2 == 1 {
            sorted[n / 2]
        } else {
            let (lo, hi) = (sorted[n / 2 - 1], sorted[n / 2]);
            let mid = (lo + hi) / 2.0;
            if mid.is_finite() {
                mid
            } else {
                lo / 2.0 + hi / 2.0
            }
        };
        if min == max {
            return Some(Self {
                max,
                min,
                median: min,
                mean: min,
                variance: 0.0,
            });
        }
        let mean = (compensated_sum(sorted.iter().copied()) / n as f64).clamp(min, max);
        let variance = compensated_sum(sorted.iter().map(|x| (x - mean) * (x - mean))) / n as f64;
        Some(Self {
            max,
            min,
            median,
            mean,
            variance,
        })
    }

    pub fn as_array(&self) -> [f64; 5] {
        [self.max, self.min, self.median, self.mean, self.variance]
    }
}

fn compensated_sum(values: impl Iterator<Item = f64>) -> f64 {
    let mut sum = 0.0f64;
    let mut carry = 0.0f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            carry += (sum - t) + v;
        } else {
            carry += (v - t) + sum;
        }
        sum = t;
    }
    sum + carry
}

#[derive(Debug, Clone, PartialEq)]
pub struct KnowledgeProfile {
    pub columns: Vec<ColumnStats>,
    pub row_count: usize,
}

pub fn compute_profile(dataset: &Dataset) -> Result<KnowledgeProfile, KnowledgeError> {
    if dataset.is_empty() {
        return Err(KnowledgeError::EmptyDataset);
    }
    let columns = dataset
        .schema()
        .feature_names()
        .iter()
        .enumerate()
        .map(|(j, name)| {
            let col = dataset.column(j);
            if col.iter().any(|v| !v.is_finite()) {
                return Err(KnowledgeError::NonFinite(name.clone()));
            }
            Ok(ColumnStats::from_column(&col).expect("non-empty column"))
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(KnowledgeProfile {
        columns,
        row_count: dataset.len(),
    })
}

fn check_arity(profile: &KnowledgeProfile, schema: &FeatureSchema) -> Result<(), KnowledgeError> {
    if profile.columns.len() != schema.len() {
        return Err(KnowledgeError::ArityMismatch {
            profile: profile.columns.len(),
            schema: schema.len(),
        });
    }
    Ok(())
}

/// `<Feature> -> Max: a, Min: b, Median: c, Mean: d, Variance: v`, one line
/// per feature in schema order, no trailing newline.
pub fn render_knowledge_text(profile: &KnowledgeProfile, schema: &FeatureSchema) -> Result<String, KnowledgeError> {
    check_arity(profile, schema)?;
    Ok(render_stats_lines(schema.feature_names(), &profile.columns))
}

/// Renders `names[i] -> ...` for each pair; extra entries on either side are
/// ignored.
pub fn render_stats_lines(names: &[String], columns: &[ColumnStats]) -> String {
    let lines: Vec<String> = names
        .iter()
        .zip(columns)
        .map(|(name, stats)| {
            let parts: Vec<String> = STAT_NAMES
                .iter()
                .zip(stats.as_array())
                .map(|(label, v)| format!("{label}: {}", format_number(v)))
                .collect();
            format!("{name} -> {}", parts.join(", "))
        })
        .collect();
    lines.join("\n")
}

/// Comma-separated `feature,max,min,median,mean,variance` table.
pub fn render_profile_csv(profile: &KnowledgeProfile, schema: &FeatureSchema) -> Result<String, KnowledgeError> {
    check_arity(profile, schema)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    let header = ["feature", "max", "min", "median", "mean", "variance"];
    w.write_record(header).expect("in-memory write");
    for (name, stats) in schema.feature_names().iter().zip(&profile.columns) {
        let mut row = vec![name.clone()];
        row.extend(stats.as_array().iter().map(|v| format_number(*v)));
        w.write_record(&row).expect("in-memory write");
    }
    Ok(String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf8 csv"))
}
