//! Flow dataset loading, cleaning, projection and subsampling.
//!
//! Input files follow the CICDDoS2019 layout: a comma-separated header row,
//! one flow per line, and a label column whose raw values are collapsed into
//! the binary [`Label`]. Rows carrying `NaN`/`Inf` (or anything that does not
//! parse as a number) survive loading as non-finite values and are removed by
//! [`preprocess`].

mod synthetic;

use std::collections::HashSet;
use std::fmt;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::numfmt::format_number;

pub use synthetic::{synthetic_dataset, SyntheticSpec};

/// Identifier columns of the CICDDoS2019 CSV exports. They are not numeric
/// features and are skipped at load time unless the caller overrides the list.
pub const DEFAULT_IGNORED_COLUMNS: &[&str] = &[
    "Unnamed: 0",
    "Flow ID",
    "Source IP",
    "Src IP",
    "Destination IP",
    "Dst IP",
    "Timestamp",
    "SimillarHTTP",
];

pub const DEFAULT_LABEL_COLUMN: &str = "Label";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("file has no header row")]
    MissingHeader,
    #[error("header has no label column `{0}`")]
    MissingLabelColumn(String),
    #[error("duplicate column name `{0}` in header")]
    DuplicateColumn(String),
    #[error("row {row}: expected {expected} fields, got {got}")]
    Arity { row: u64, expected: usize, got: usize },
    #[error("row {row}: label `{label}` has no mapping")]
    UnmappedLabel { row: u64, label: String },
    #[error("schema has no numeric feature")]
    NoNumericFeatures,
    #[error("invalid schema: {0}")]
    InvalidSchema(String),
    #[error("no rows survive preprocessing")]
    EmptyAfterPreprocess,
    #[error("cannot sample {requested} records from a dataset of {available}")]
    SampleTooLarge { requested: usize, available: usize },
    #[error("sample size must be positive")]
    EmptySample,
    #[error("unknown feature: {0}")]
    UnknownFeature(String),
}

/// Binary ground truth. Attack is the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    Attack,
    Benign,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Attack => "Attack",
            Label::Benign => "Benign",
        }
    }

    /// Label text written back into CSV files: benign traffic keeps the
    /// CICDDoS2019 spelling, every attack family is collapsed to `Attack`.
    pub fn csv_value(self) -> &'static str {
        match self {
            Label::Attack => "Attack",
            Label::Benign => "BENIGN",
        }
    }

    pub fn parse(s: &str) -> Option<Label> {
        if s.eq_ignore_ascii_case("attack") {
            Some(Label::Attack)
        } else if s.eq_ignore_ascii_case("benign") {
            Some(Label::Benign)
        } else {
            None
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureKind {
    Numeric,
    Text,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureSchema {
    feature_names: Vec<String>,
    feature_kinds: Vec<FeatureKind>,
    label_column: String,
}

impl FeatureSchema {
    pub fn new(
        feature_names: Vec<String>,
        feature_kinds: Vec<FeatureKind>,
        label_column: impl Into<String>,
    ) -> Result<Self, DataError> {
        let label_column = label_column.into();
        if feature_names.len() != feature_kinds.len() {
            return Err(DataError::InvalidSchema(format!(
                "{} names but {} kinds",
                feature_names.len(),
                feature_kinds.len()
            )));
        }
        let mut seen = HashSet::new();
        for name in &feature_names {
            if !seen.insert(name.as_str()) {
                return Err(DataError::DuplicateColumn(name.clone()));
            }
        }
        if seen.contains(label_column.as_str()) {
            return Err(DataError::InvalidSchema(format!(
                "label column `{label_column}` is also a feature"
            )));
        }
        if !feature_kinds.contains(&FeatureKind::Numeric) {
            return Err(DataError::NoNumericFeatures);
        }
        Ok(Self {
            feature_names,
            feature_kinds,
            label_column,
        })
    }

    /// Schema whose features are all numeric.
    pub fn numeric(feature_names: Vec<String>, label_column: impl Into<String>) -> Result<Self, DataError> {
        let kinds = vec![FeatureKind::Numeric; feature_names.len()];
        Self::new(feature_names, kinds, label_column)
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn feature_kinds(&self) -> &[FeatureKind] {
        &self.feature_kinds
    }

    pub fn label_column(&self) -> &str {
        &self.label_column
    }

    pub fn len(&self) -> usize {
        self.feature_names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.feature_names.is_empty()
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.feature_names.iter().position(|n| n == name)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowRecord {
    pub index: usize,
    pub values: Vec<f64>,
    pub label: Label,
}

impl FlowRecord {
    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SampleSpec {
    pub n: usize,
    pub seed: u64,
    pub stratified: bool,
}

/// Where a dataset came from and what has been done to it.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Provenance {
    pub source: String,
    pub rows_loaded: usize,
    pub preprocessed: bool,
    pub rows_dropped: usize,
    pub features_selected: bool,
    pub sample: Option<SampleSpec>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    schema: FeatureSchema,
    records: Vec<FlowRecord>,
    provenance: Provenance,
}

impl Dataset {
    /// Builds a dataset from already-parsed records. Fails when a record does
    /// not match the schema arity or indices are not strictly increasing.
    pub fn new(schema: FeatureSchema, records: Vec<FlowRecord>, provenance: Provenance) -> Result<Self, DataError> {
        for (i, r) in records.iter().enumerate() {
            if r.values.len() != schema.len() {
                return Err(DataError::InvalidSchema(format!(
                    "record {} has {} values, schema has {} features",
                    r.index,
                    r.values.len(),
                    schema.len()
                )));
            }
            if i > 0 && records[i - 1].index >= r.index {
                return Err(DataError::InvalidSchema(format!(
                    "record indices not strictly increasing at {}",
                    r.index
                )));
            }
        }
        Ok(Self {
            schema,
            records,
            provenance,
        })
    }

    pub fn schema(&self) -> &FeatureSchema {
        &self.schema
    }

    pub fn records(&self) -> &[FlowRecord] {
        &self.records
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn label_counts(&self) -> LabelCounts {
        let attack = self.records.iter().filter(|r| r.label == Label::Attack).count();
        LabelCounts {
            attack,
            benign: self.records.len() - attack,
        }
    }

    /// Values of one feature column, in record order.
    pub fn column(&self, feature: usize) -> Vec<f64> {
        self.records.iter().map(|r| r.values[feature]).collect()
    }

    /// Writes the dataset in the same comma-separated layout it was loaded
    /// from: features in schema order, then the label column.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), DataError> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header: Vec<&str> = self.schema.feature_names.iter().map(String::as_str).collect();
        header.push(&self.schema.label_column);
        w.write_record(&header)?;
        for r in &self.records {
            let mut row: Vec<String> = r.values.iter().map(|v| format_raw(*v)).collect();
            row.push(r.label.csv_value().to_string());
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| DataError::Csv(e.into()))?;
        Ok(())
    }
}

fn format_raw(v: f64) -> String {
    if v.is_nan() {
        "NaN".to_string()
    } else if v.is_infinite() {
        if v > 0.0 { "Infinity" } else { "-Infinity" }.to_string()
    } else {
        format_number(v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct LabelCounts {
    pub attack: usize,
    pub benign: usize,
}

/// Maps raw label strings to [`Label`]. Entries match case-insensitively
/// after trimming; unmatched labels fall back to `default` when set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    entries: Vec<(String, Label)>,
    default: Option<Label>,
}

impl LabelMap {
    pub fn new(entries: Vec<(String, Label)>, default: Option<Label>) -> Self {
        Self { entries, default }
    }

    pub fn map(&self, raw: &str) -> Option<Label> {
        let raw = raw.trim();
        self.entries
            .iter()
            .find(|(k, _)| k.eq_ignore_ascii_case(raw))
            .map(|(_, l)| *l)
            .or(self.default)
    }
}

impl Default for LabelMap {
    /// `BENIGN` stays benign, every other label becomes `Attack`.
    fn default() -> Self {
        Self::new(vec![("BENIGN".to_string(), Label::Benign)], Some(Label::Attack))
    }
}

#[derive(Debug, Clone)]
pub struct LoadOptions {
    pub label_column: String,
    pub label_map: LabelMap,
    pub ignore_columns: Vec<String>,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            label_column: DEFAULT_LABEL_COLUMN.to_string(),
            label_map: LabelMap::default(),
            ignore_columns: DEFAULT_IGNORED_COLUMNS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

/// Parses one raw field. NaN/Inf spellings and unparseable text become
/// non-finite values so that [`preprocess`] can drop the row.
pub fn parse_field(raw: &str) -> f64 {
    let t = raw.trim();
    match t.to_ascii_lowercase().as_str() {
        "nan" => f64::NAN,
        "inf" | "+inf" | "infinity" | "+infinity" => f64::INFINITY,
        "-inf" | "-infinity" => f64::NEG_INFINITY,
        _ => t.parse::<f64>().unwrap_or(f64::NAN),
    }
}

pub fn load_dataset(path: &Path, options: &LoadOptions) -> Result<Dataset, DataError> {
    let file = std::fs::File::open(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    load_from_reader(file, &path.display().to_string(), options)
}

pub fn load_from_reader<R: Read>(reader: R, source: &str, options: &LoadOptions) -> Result<Dataset, DataError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut rows = rdr.records();

    let header = match rows.next() {
        Some(h) => h?,
        None => return Err(DataError::MissingHeader),
    };
    let names: Vec<String> = header.iter().map(|s| s.trim().to_string()).collect();
    let mut seen = HashSet::new();
    for n in &names {
        if !seen.insert(n.as_str()) {
            return Err(DataError::DuplicateColumn(n.clone()));
        }
    }
    let label_pos = names
        .iter()
        .position(|n| *n == options.label_column)
        .ok_or_else(|| DataError::MissingLabelColumn(options.label_column.clone()))?;
    let feature_cols: Vec<usize> = (0..names.len())
        .filter(|&i| i != label_pos && !options.ignore_columns.iter().any(|c| *c == names[i]))
        .collect();
    let schema = FeatureSchema::numeric(
        feature_cols.iter().map(|&i| names[i].clone()).collect(),
        options.label_column.clone(),
    )?;

    let mut records = Vec::new();
    for (index, row) in rows.enumerate() {
        let row = row?;
        let line = row.position().map(|p| p.line()).unwrap_or(index as u64 + 2);
        if row.len() != names.len() {
            return Err(DataError::Arity {
                row: line,
                expected: names.len(),
                got: row.len(),
            });
        }
        let raw_label = &row[label_pos];
        let label = options
            .label_map
            .map(raw_label)
            .ok_or_else(|| DataError::UnmappedLabel {
                row: line,
                label: raw_label.to_string(),
            })?;
        let values = feature_cols.iter().map(|&i| parse_field(&row[i])).collect();
        records.push(FlowRecord { index, values, label });
    }

    let provenance = Provenance {
        source: source.to_string(),
        rows_loaded: records.len(),
        ..Provenance::default()
    };
    Ok(Dataset {
        schema,
        records,
        provenance,
    })
}

/// Row accounting of one [`preprocess`] pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PreprocessSummary {
    pub rows_in: usize,
    pub rows_dropped: usize,
    pub labels: LabelCounts,
}

impl PreprocessSummary {
    /// Line-oriented `key: value` report written next to preprocessed files.
    pub fn render(&self) -> String {
        format!(
            "rows_in: {}\nrows_dropped: {}\nrows_out: {}\nlabel_attack: {}\nlabel_benign: {}\n",
            self.rows_in,
            self.rows_dropped,
            self.rows_in - self.rows_dropped,
            self.labels.attack,
            self.labels.benign
        )
    }
}

/// Drops every row holding a non-finite value.
pub fn preprocess(dataset: Dataset) -> Result<Dataset, DataError> {
    preprocess_with_summary(dataset).map(|(d, _)| d)
}

pub fn preprocess_with_summary(dataset: Dataset) -> Result<(Dataset, PreprocessSummary), DataError> {
    let Dataset {
        schema,
        records,
        mut provenance,
    } = dataset;
    let rows_in = records.len();
    let kept: Vec<FlowRecord> = records.into_iter().filter(FlowRecord::is_finite).collect();
    if kept.is_empty() {
        return Err(DataError::EmptyAfterPreprocess);
    }
    let rows_dropped = rows_in - kept.len();
    provenance.preprocessed = true;
    provenance.rows_dropped += rows_dropped;
    let out = Dataset {
        schema,
        records: kept,
        provenance,
    };
    let summary = PreprocessSummary {
        rows_in,
        rows_dropped,
        labels: out.label_counts(),
    };
    Ok((out, summary))
}

/// Deterministic subsample of `n` records, returned in original order.
///
/// With `stratified`, the Attack share of the output is the input share
/// rounded to the nearest record.
pub fn sample(dataset: &Dataset, n: usize, seed: u64, stratified: bool) -> Result<Dataset, DataError> {
    if n == 0 {
        return Err(DataError::EmptySample);
    }
    let available = dataset.records.len();
    if n > available {
        return Err(DataError::SampleTooLarge {
            requested: n,
            available,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked: Vec<usize> = if stratified {
        let attack_pos: Vec<usize> = (0..available)
            .filter(|&i| dataset.records[i].label == Label::Attack)
            .collect();
        let benign_pos: Vec<usize> = (0..available)
            .filter(|&i| dataset.records[i].label == Label::Benign)
            .collect();
        let want_attack = ((n as f64) * attack_pos.len() as f64 / available as f64).round() as usize;
        let want_attack = want_attack
            .min(attack_pos.len())
            .max(n.saturating_sub(benign_pos.len()));
        let want_benign = n - want_attack;
        let mut out: Vec<usize> = rand::seq::index::sample(&mut rng, attack_pos.len(), want_attack)
            .into_iter()
            .map(|i| attack_pos[i])
            .collect();
        out.extend(
            rand::seq::index::sample(&mut rng, benign_pos.len(), want_benign)
                .into_iter()
                .map(|i| benign_pos[i]),
        );
        out
    } else {
        rand::seq::index::sample(&mut rng, available, n).into_vec()
    };
    picked.sort_unstable();

    let mut provenance = dataset.provenance.clone();
    provenance.sample = Some(SampleSpec { n, seed, stratified });
    Ok(Dataset {
        schema: dataset.schema.clone(),
        records: picked.into_iter().map(|i| dataset.records[i].clone()).collect(),
        provenance,
    })
}

/// Projects the dataset onto `names`, in the order given.
pub fn select_features<S: AsRef<str>>(dataset: &Dataset, names: &[S]) -> Result<Dataset, DataError> {
    let positions = names
        .iter()
        .map(|n| {
            dataset
                .schema
                .position(n.as_ref())
                .ok_or_else(|| DataError::UnknownFeature(n.as_ref().to_string()))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let schema = FeatureSchema::new(
        positions
            .iter()
            .map(|&p| dataset.schema.feature_names[p].clone())
            .collect(),
        positions.iter().map(|&p| dataset.schema.feature_kinds[p]).collect(),
        dataset.schema.label_column.clone(),
    )?;
    let records = dataset
        .records
        .iter()
        .map(|r| FlowRecord {
            index: r.index,
            values: positions.iter().map(|&p| r.values[p]).collect(),
            label: r.label,
        })
        .collect();
    let mut provenance = dataset.provenance.clone();
    provenance.features_selected = true;
    Ok(Dataset {
        schema,
        records,
        provenance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn load_str(s: &str) -> Result<Dataset, DataError> {
        load_from_reader(s.as_bytes(), "inline", &LoadOptions::default())
    }

    fn values(d: &Dataset) -> Vec<Vec<f64>> {
        d.records().iter().map(|r| r.values.clone()).collect()
    }

    #[test]
    fn benign_label_maps_to_benign() {
        let d = load_str("A,B,Label\n1,2,BENIGN\n").unwrap();
        assert_eq!(d.len(), 1);
        assert_eq!(d.records()[0].label, Label::Benign);
        assert_eq!(d.records()[0].values, vec![1.0, 2.0]);
    }

    #[test]
    fn attack_family_collapses_to_attack() {
        let d = load_str("A,B,Label\n1,2,DrDoS_DNS\n3,4,benign\n").unwrap();
        assert_eq!(d.records()[0].label, Label::Attack);
        assert_eq!(d.records()[1].label, Label::Benign);
    }

    #[test]
    fn arity_error_names_row() {
        let err = load_str("A,B,Label\n1,2,BENIGN\n3,4,BENIGN\n5,6\n").unwrap_err();
        assert_eq!(err.to_string(), "row 4: expected 3 fields, got 2");
    }

    #[test]
    fn missing_label_column() {
        let err = load_str("A,B,Class\n1,2,BENIGN\n").unwrap_err();
        assert!(matches!(err, DataError::MissingLabelColumn(ref c) if c == "Label"));
    }

    #[test]
    fn duplicate_header_rejected() {
        let err = load_str("A,A,Label\n1,2,BENIGN\n").unwrap_err();
        assert!(matches!(err, DataError::DuplicateColumn(ref c) if c == "A"));
    }

    #[test]
    fn missing_file() {
        let err = load_dataset(Path::new("/nonexistent/flows.csv"), &LoadOptions::default()).unwrap_err();
        assert!(matches!(err, DataError::Io { .. }));
    }

    #[test]
    fn whitespace_and_identifier_columns() {
        let d = load_str(" Flow ID , Source IP, Flow Duration , Label\nx, 10.0.0.1, 42 , Syn\n").unwrap();
        assert_eq!(d.schema().feature_names(), &["Flow Duration".to_string()]);
        assert_eq!(d.records()[0].values, vec![42.0]);
    }

    #[test]
    fn custom_label_map_without_default() {
        let opts = LoadOptions {
            label_map: LabelMap::new(vec![("normal".into(), Label::Benign)], None),
            ..LoadOptions::default()
        };
        let err = load_from_reader("A,Label\n1,weird\n".as_bytes(), "inline", &opts).unwrap_err();
        assert!(matches!(err, DataError::UnmappedLabel { row: 2, .. }));
    }

    #[test]
    fn token_spellings() {
        for s in ["nan", "NaN", " NAN "] {
            assert!(parse_field(s).is_nan());
        }
        for s in ["inf", "Infinity", "+inf", "INF"] {
            assert_eq!(parse_field(s), f64::INFINITY);
        }
        for s in ["-inf", "-Infinity"] {
            assert_eq!(parse_field(s), f64::NEG_INFINITY);
        }
        assert!(parse_field("abc").is_nan());
        assert!(parse_field("").is_nan());
        assert_eq!(parse_field("1e3"), 1000.0);
    }

    #[test]
    fn preprocess_drops_non_finite_rows() {
        let d = load_str("A,B,Label\n1,2,BENIGN\nNaN,3,BENIGN\n4,Inf,Syn\n").unwrap();
        let (p, summary) = preprocess_with_summary(d).unwrap();
        assert_eq!(values(&p), vec![vec![1.0, 2.0]]);
        assert_eq!(summary.rows_dropped, 2);
        assert_eq!(summary.rows_in, 3);
        assert_eq!(p.provenance().rows_dropped, 2);
    }

    #[test]
    fn preprocess_noop_on_clean_data() {
        let d = load_str("A,B,Label\n1,2,BENIGN\n3,4,Syn\n").unwrap();
        let (p, summary) = preprocess_with_summary(d.clone()).unwrap();
        assert_eq!(summary.rows_dropped, 0);
        assert_eq!(p.records(), d.records());
    }

    #[test]
    fn preprocess_empty_result_is_error() {
        let d = load_str("A,B,Label\nNaN,1,BENIGN\nInf,2,Syn\n").unwrap();
        let err = preprocess(d).unwrap_err();
        assert_eq!(err.to_string(), "no rows survive preprocessing");
    }

    #[test]
    fn summary_report_lines() {
        let d = load_str("A,Label\n1,BENIGN\nx,BENIGN\n3,Syn\n").unwrap();
        let (_, s) = preprocess_with_summary(d).unwrap();
        assert_eq!(
            s.render(),
            "rows_in: 3\nrows_dropped: 1\nrows_out: 2\nlabel_attack: 1\nlabel_benign: 1\n"
        );
    }

    fn balanced(n: usize) -> Dataset {
        let schema = FeatureSchema::numeric(vec!["A".into()], "Label").unwrap();
        let records = (0..n)
            .map(|i| FlowRecord {
                index: i,
                values: vec![i as f64],
                label: if i % 2 == 0 { Label::Attack } else { Label::Benign },
            })
            .collect();
        Dataset::new(schema, records, Provenance::default()).unwrap()
    }

    #[test]
    fn full_sample_is_identity() {
        let d = balanced(20);
        let s = sample(&d, 20, 99, false).unwrap();
        assert_eq!(s.records(), d.records());
        let s = sample(&d, 20, 3, true).unwrap();
        assert_eq!(s.records(), d.records());
    }

    #[test]
    fn sample_is_deterministic() {
        let d = balanced(100);
        for stratified in [false, true] {
            let a = sample(&d, 17, 7, stratified).unwrap();
            let b = sample(&d, 17, 7, stratified).unwrap();
            assert_eq!(a, b);
        }
        assert_ne!(
            sample(&d, 17, 7, false).unwrap().records(),
            sample(&d, 17, 8, false).unwrap().records()
        );
    }

    #[test]
    fn stratified_ten_from_balanced() {
        let d = balanced(50);
        let s = sample(&d, 10, 7, true).unwrap();
        let attack = s.records().iter().filter(|r| r.label == Label::Attack).count();
        let benign = s.records().iter().filter(|r| r.label == Label::Benign).count();
        assert_eq!((attack, benign), (5, 5));
    }

    #[test]
    fn oversized_sample() {
        let d = balanced(5);
        assert!(matches!(
            sample(&d, 6, 1, false),
            Err(DataError::SampleTooLarge {
                requested: 6,
                available: 5
            })
        ));
        assert!(matches!(sample(&d, 0, 1, false), Err(DataError::EmptySample)));
    }

    #[test]
    fn select_identity_permutation_and_unknown() {
        let d = load_str("A,B,Label\n1,2,BENIGN\n3,4,Syn\n").unwrap();
        let same = select_features(&d, &["A", "B"]).unwrap();
        assert_eq!(same.records(), d.records());
        assert_eq!(same.schema().feature_names(), d.schema().feature_names());

        let swapped = select_features(&d, &["B", "A"]).unwrap();
        assert_eq!(values(&swapped), vec![vec![2.0, 1.0], vec![4.0, 3.0]]);

        let err = select_features(&d, &["A", "C"]).unwrap_err();
        assert_eq!(err.to_string(), "unknown feature: C");
    }

    #[test]
    fn csv_write_reload() {
        let d = load_str("A,B,Label\n1.5,2,BENIGN\n3,NaN,DrDoS_LDAP\n").unwrap();
        let mut buf = Vec::new();
        d.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text, "A,B,Label\n1.5,2,BENIGN\n3,NaN,Attack\n");
        let back = load_from_reader(buf.as_slice(), "buf", &LoadOptions::default()).unwrap();
        assert_eq!(back.records()[0], d.records()[0]);
    }

    fn arb_raw_rows() -> impl Strategy<Value = Vec<(Vec<f64>, bool)>> {
        let cell = prop_oneof![
            6 => -1e6f64..1e6,
            1 => Just(f64::NAN),
            1 => Just(f64::INFINITY),
            1 => Just(f64::NEG_INFINITY),
        ];
        proptest::collection::vec((proptest::collection::vec(cell, 3), any::<bool>()), 1..60)
    }

    fn raw_dataset(rows: Vec<(Vec<f64>, bool)>) -> Dataset {
        let schema = FeatureSchema::numeric(vec!["A".into(), "B".into(), "C".into()], "Label").unwrap();
        let records = rows
            .into_iter()
            .enumerate()
            .map(|(i, (values, attack))| FlowRecord {
                index: i * 2,
                values,
                label: if attack { Label::Attack } else { Label::Benign },
            })
            .collect();
        Dataset::new(schema, records, Provenance::default()).unwrap()
    }

    proptest! {
        #[test]
        fn preprocess_properties(rows in arb_raw_rows()) {
            let d = raw_dataset(rows);
            if let Ok(once) = preprocess(d.clone()) {
                prop_assert!(once.len() <= d.len());
                prop_assert!(once.records().iter().all(FlowRecord::is_finite));
                prop_assert!(once.records().windows(2).all(|w| w[0].index < w[1].index));
                let twice = preprocess(once.clone()).unwrap();
                prop_assert_eq!(twice, once);
            } else {
                prop_assert!(d.records().iter().all(|r| !r.is_finite()));
            }
        }

        #[test]
        fn stratified_share_within_one(n_attack in 0usize..80, n_benign in 0usize..80, frac in 0.0f64..1.0, seed: u64) {
            prop_assume!(n_attack + n_benign > 0);
            let schema = FeatureSchema::numeric(vec!["A".into()], "Label").unwrap();
            let records: Vec<FlowRecord> = (0..n_attack + n_benign)
                .map(|i| FlowRecord { index: i, values: vec![0.0], label: if i < n_attack { Label::Attack } else { Label::Benign } })
                .collect();
            let d = Dataset::new(schema, records, Provenance::default()).unwrap();
            let n = ((frac * d.len() as f64).ceil() as usize).clamp(1, d.len());
            let s = sample(&d, n, seed, true).unwrap();
            prop_assert_eq!(s.len(), n);
            let got = s.label_counts().attack as f64;
            let ideal = n as f64 * n_attack as f64 / d.len() as f64;
            prop_assert!((got - ideal).abs() <= 1.0);
            prop_assert!(s.records().windows(2).all(|w| w[0].index < w[1].index));
        }
    }
}
