//! Seeded generator of CICDDoS2019-shaped flows for offline runs.
//!
//! Attack flows are short, forward-heavy UDP bursts with little or no return
//! traffic; benign flows are longer bidirectional TCP/UDP sessions. The two
//! distributions overlap so that no single feature separates the classes.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};

use super::{Dataset, FeatureSchema, FlowRecord, Label, Provenance, DEFAULT_LABEL_COLUMN};

pub const SYNTHETIC_FEATURES: &[&str] = &[
    "Protocol",
    "Flow Duration",
    "Total Fwd Packets",
    "Total Backward Packets",
    "Fwd Packet Length Mean",
    "Bwd Packet Length Mean",
    "Flow Bytes/s",
    "Flow Packets/s",
    "Flow IAT Mean",
];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticSpec {
    pub records: usize,
    pub seed: u64,
    /// Share of attack flows, rounded to a whole record count.
    pub attack_fraction: f64,
    /// Share of rows that get a `NaN` or `Inf` rate field, as in the raw
    /// CICDDoS2019 exports.
    pub dirty_fraction: f64,
}

impl SyntheticSpec {
    pub fn new(records: usize, seed: u64) -> Self {
        Self {
            records,
            seed,
            attack_fraction: 0.5,
            dirty_fraction: 0.0,
        }
    }
}

fn round_to(v: f64, decimals: i32) -> f64 {
    let p = 10f64.powi(decimals);
    (v * p).round() / p
}

fn lognormal(rng: &mut ChaCha8Rng, median: f64, sigma: f64) -> f64 {
    LogNormal::new(median.ln(), sigma)
        .expect("finite lognormal parameters")
        .sample(rng)
}

fn flow(rng: &mut ChaCha8Rng, label: Label) -> Vec<f64> {
    let (protocol, duration, fwd, bwd, fwd_len, bwd_len) = match label {
        Label::Attack => {
            let protocol = if rng.random_bool(0.85) { 17.0 } else { 6.0 };
            let duration = lognormal(rng, 1_500.0, 2.0).round().max(1.0);
            let fwd = lognormal(rng, 4.0, 0.9).round().max(1.0);
            let bwd = if rng.random_bool(0.8) {
                0.0
            } else {
                lognormal(rng, 2.0, 0.7).round()
            };
            let fwd_len = round_to(lognormal(rng, 420.0, 0.8), 3);
            let bwd_len = if bwd > 0.0 {
                round_to(lognormal(rng, 60.0, 0.6), 3)
            } else {
                0.0
            };
            (protocol, duration, fwd, bwd, fwd_len, bwd_len)
        }
        Label::Benign => {
            let protocol = if rng.random_bool(0.6) { 6.0 } else { 17.0 };
            let duration = lognormal(rng, 250_000.0, 2.5).round().max(1.0);
            let fwd = lognormal(rng, 8.0, 1.1).round().max(1.0);
            let bwd = lognormal(rng, 6.0, 1.2).round();
            let fwd_len = round_to(lognormal(rng, 90.0, 1.0), 3);
            let bwd_len = if bwd > 0.0 {
                round_to(lognormal(rng, 300.0, 1.0), 3)
            } else {
                0.0
            };
            (protocol, duration, fwd, bwd, fwd_len, bwd_len)
        }
    };
    let bytes = fwd * fwd_len + bwd * bwd_len;
    let seconds = duration / 1e6;
    let bytes_per_s = round_to(bytes / seconds, 3);
    let packets_per_s = round_to((fwd + bwd) / seconds, 3);
    let iat_mean = round_to(duration / (fwd + bwd - 1.0).max(1.0), 3);
    vec![
        protocol,
        duration,
        fwd,
        bwd,
        fwd_len,
        bwd_len,
        bytes_per_s,
        packets_per_s,
        iat_mean,
    ]
}

/// Generates a raw (not yet preprocessed) synthetic dataset.
pub fn synthetic_dataset(spec: &SyntheticSpec) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n_attack = (spec.records as f64 * spec.attack_fraction).round() as usize;
    let mut labels: Vec<Label> = (0..spec.records)
        .map(|i| if i < n_attack { Label::Attack } else { Label::Benign })
        .collect();
    labels.shuffle(&mut rng);

    let records = labels
        .into_iter()
        .enumerate()
        .map(|(index, label)| {
            let mut values = flow(&mut rng, label);
            if spec.dirty_fraction > 0.0 && rng.random_bool(spec.dirty_fraction) {
                // Flow Bytes/s or Flow Packets/s, as in the source corpus.
                let col = if rng.random_bool(0.5) { 6 } else { 7 };
                values[col] = if rng.random_bool(0.5) { f64::NAN } else { f64::INFINITY };
            }
            FlowRecord { index, values, label }
        })
        .collect();

    let schema = FeatureSchema::numeric(
        SYNTHETIC_FEATURES.iter().map(|s| s.to_string()).collect(),
        DEFAULT_LABEL_COLUMN,
    )
    .expect("static synthetic schema is valid");
    let provenance = Provenance {
        source: format!("synthetic:records={},seed={}", spec.records, spec.seed),
        rows_loaded: spec.records,
        ..Provenance::default()
    };
    Dataset::new(schema, records, provenance).expect("synthetic records match schema")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow_data::preprocess;

    #[test]
    fn deterministic_and_balanced() {
        let spec = SyntheticSpec::new(200, 7);
        let a = synthetic_dataset(&spec);
        let b = synthetic_dataset(&spec);
        assert_eq!(a, b);
        let counts = a.label_counts();
        assert_eq!((counts.attack, counts.benign), (100, 100));
        assert!(a.records().iter().all(|r| r.is_finite()));
    }

    #[test]
    fn dirty_rows_are_dropped_by_preprocess() {
        let spec = SyntheticSpec {
            dirty_fraction: 0.1,
            ..SyntheticSpec::new(500, 3)
        };
        let raw = synthetic_dataset(&spec);
        let dirty = raw.records().iter().filter(|r| !r.is_finite()).count();
        assert!(dirty > 0);
        let clean = preprocess(raw).unwrap();
        assert_eq!(clean.len(), 500 - dirty);
    }
}
