//! End-to-end runs: data preparation, dispatch over a bounded worker pool,
//! response caching, and the files written to the output directory.
//!
//! Output directory layout:
//!
//! * `trace.log`: one JSON object per (backend, template, record)
//! * `outcomes.csv`: the parsed outcome of every record
//! * `report.md`, `report.csv`: metric and anomaly tables
//! * `run_manifest`: the configuration (TOML, loadable with `--config`)
//!   plus a content hash of the input rows
//! * `mock_sidecar_<backend>.jsonl`: ground truth of each mock backend

mod cache;
mod config;
mod trace;

use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backend::{BackendConfig, BackendError, BackendKind, ChatBackend, GroundTruth, HttpBackend, MockBackend};
use crate::evaluation::{emit_reports, AblationReport, AnomalyMode, CellReport, EvalError, ReportFormat};
use crate::flow_data::{
    load_from_reader, preprocess_with_summary, sample, select_features, DataError, Dataset, Label, LoadOptions,
    PreprocessSummary,
};
use crate::flow_data::{synthetic_dataset, SyntheticSpec};
use crate::knowledge::{compute_profile, render_knowledge_text, KnowledgeError, KnowledgeProfile};
use crate::prompts::{compose, render_token_text, PromptError, TemplateId, BLOCK_TEXT_VERSION};
use crate::reasoning::{run_role_reasoning, ContinuationMode, InferenceOutcome, OutcomeParser, ReasoningTrace};

pub use cache::{CachedBackend, CallStats, ResponseCache};
pub use config::{
    apply_env, http_preset, load_config_file, parse_config, parse_continuation, resolve_backend, ConfigError,
    LoadedConfig, ProfileScope, RunConfig, DEFAULT_CONCURRENCY, DEFAULT_ERROR_CEILING, DEFAULT_RECORDS, DEFAULT_SEED,
};
pub use trace::{read_trace, write_outcomes_csv, write_trace, OutcomeRecord, TraceError, TraceLine, TraceOutcome};

pub const TRACE_FILE: &str = "trace.log";
pub const OUTCOMES_FILE: &str = "outcomes.csv";
pub const MANIFEST_FILE: &str = "run_manifest";

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Knowledge(#[from] KnowledgeError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("backend `{backend}`: {source}")]
    Backend {
        backend: String,
        #[source]
        source: BackendError,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(
        "aborted: {failed} of {total} record pipelines failed, above the {ceiling_pct}% error ceiling; see {trace}"
    )]
    ErrorCeiling {
        failed: usize,
        total: usize,
        ceiling_pct: f64,
        trace: PathBuf,
    },
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Trace(#[from] TraceError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RunError + '_ {
    move |source| RunError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// SHA-256 with git's blob framing: `blob <len>\0` then the bytes.
pub fn content_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex::encode(h.finalize())
}

/// The records to classify and everything derived from them.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub source: String,
    /// [`content_hash`] of the input bytes (the generated CSV for synthetic
    /// data).
    pub input_hash: String,
    pub preprocess: PreprocessSummary,
    /// Preprocessed, feature-selected rows before sampling.
    pub full: Dataset,
    pub sample: Dataset,
    pub profile: KnowledgeProfile,
    pub knowledge_text: String,
    /// Token text of each sampled record, in sample order.
    pub token_texts: Vec<String>,
}

pub fn prepare_data(config: &RunConfig) -> Result<PreparedData, RunError> {
    let options = LoadOptions {
        label_column: config.label_column.clone(),
        ..LoadOptions::default()
    };
    let (raw, source, input_hash) = match &config.dataset {
        Some(path) => {
            let bytes = fs::read(path).map_err(io_err(path))?;
            let source = path.display().to_string();
            let hash = content_hash(&bytes);
            (load_from_reader(bytes.as_slice(), &source, &options)?, source, hash)
        }
        None => {
            let spec = SyntheticSpec::new(config.records.unwrap_or(DEFAULT_RECORDS), config.seed);
            let data = synthetic_dataset(&spec);
            let mut bytes = Vec::new();
            data.write_csv(&mut bytes)?;
            let source = format!("synthetic(records={}, seed={})", spec.records, spec.seed);
            (data, source, content_hash(&bytes))
        }
    };
    let (cleaned, summary) = preprocess_with_summary(raw)?;
    let full = if config.features.is_empty() {
        cleaned
    } else {
        select_features(&cleaned, &config.features)?
    };
    let sampled = match config.records {
        Some(n) if n < full.len() => sample(&full, n, config.seed, config.stratified)?,
        _ => full.clone(),
    };
    let profile = match config.profile_scope {
        ProfileScope::Sample => compute_profile(&sampled)?,
        ProfileScope::Dataset => compute_profile(&full)?,
    };
    let knowledge_text = render_knowledge_text(&profile, sampled.schema())?;
    let token_texts = sampled
        .records()
        .iter()
        .map(|r| render_token_text(r, sampled.schema()))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(PreparedData {
        source,
        input_hash,
        preprocess: summary,
        full,
        sample: sampled,
        profile,
        knowledge_text,
        token_texts,
    })
}

enum Built {
    Mock(MockBackend),
    Http(HttpBackend),
}

impl Built {
    fn as_dyn(&self) -> &dyn ChatBackend {
        match self {
            Built::Mock(m) => m,
            Built::Http(h) => h,
        }
    }
}

fn build(config: &BackendConfig, truth: &GroundTruth) -> Result<Built, RunError> {
    let wrap = |source| RunError::Backend {
        backend: config.id.clone(),
        source,
    };
    config.validate().map_err(wrap)?;
    Ok(match &config.kind {
        BackendKind::Mock(params) => Built::Mock(
            MockBackend::new(config.id.clone(), config.model_name.clone(), *params, truth.clone()).map_err(wrap)?,
        ),
        BackendKind::Http(_) => Built::Http(HttpBackend::new(config.clone()).map_err(wrap)?),
    })
}

/// Request counters of one backend over a run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackendStats {
    pub backend: String,
    /// Requests issued by the pipelines.
    pub requests: u64,
    pub cache_hits: u64,
    /// Requests that reached the backend.
    pub backend_calls: u64,
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub output_dir: PathBuf,
    /// Sorted by (backend order, template order, record index).
    pub records: Vec<OutcomeRecord>,
    pub report: AblationReport,
    pub stats: Vec<BackendStats>,
    pub failed: usize,
    /// Cells left out of the report because every pipeline in them failed.
    pub empty_cells: Vec<(String, TemplateId)>,
}

struct Job {
    backend: usize,
    template: TemplateId,
    record: usize,
}

fn run_job(
    backend: &dyn ChatBackend,
    template: TemplateId,
    record_index: usize,
    token_text: &str,
    knowledge: &str,
    mode: ContinuationMode,
    parser: &OutcomeParser,
) -> (Option<ReasoningTrace>, Result<InferenceOutcome, String>) {
    let prompt = match compose(
        template,
        record_index,
        template.uses_knowledge().then_some(knowledge),
        token_text,
    ) {
        Ok(p) => p,
        Err(e) => return (None, Err(e.to_string())),
    };
    match run_role_reasoning(backend, &prompt, mode) {
        Ok(trace) => {
            let outcome = parser.extract(&trace.r2_text);
            (Some(trace), Ok(outcome))
        }
        Err(e) => (None, Err(e.to_string())),
    }
}

/// Builds the report grid from sorted records, skipping failed pipelines.
fn build_report(
    records: &[OutcomeRecord],
    backends: &[String],
    templates: &[TemplateId],
    mode: AnomalyMode,
) -> Result<(AblationReport, Vec<(String, TemplateId)>), EvalError> {
    let mut report = AblationReport::new();
    let mut empty = Vec::new();
    for backend in backends {
        for &template in TemplateId::ALL.iter().filter(|t| templates.contains(t)) {
            let items: Vec<(&InferenceOutcome, Label)> = records
                .iter()
                .filter(|r| &r.backend == backend && r.template == template)
                .filter_map(|r| r.result.as_ref().ok().map(|o| (o, r.true_label)))
                .collect();
            if items.is_empty() {
                empty.push((backend.clone(), template));
                continue;
            }
            report.insert(CellReport::from_outcomes(backend.clone(), template, &items, mode)?);
        }
    }
    Ok((report, empty))
}

fn manifest_text(config: &RunConfig, data: &PreparedData) -> String {
    #[derive(serde::Serialize)]
    struct Inputs<'a> {
        tool_version: &'a str,
        block_text_version: &'a str,
        source: &'a str,
        input_sha256: &'a str,
        rows_in: usize,
        rows_dropped: usize,
        records: usize,
    }
    let inputs = Inputs {
        tool_version: env!("CARGO_PKG_VERSION"),
        block_text_version: BLOCK_TEXT_VERSION,
        source: &data.source,
        input_sha256: &data.input_hash,
        rows_in: data.preprocess.rows_in,
        rows_dropped: data.preprocess.rows_dropped,
        records: data.sample.len(),
    };
    let mut text = String::from("# drllm run manifest\n");
    text.push_str(&config.to_toml());
    text.push_str("\n[inputs]\n");
    text.push_str(&toml::to_string(&inputs).expect("inputs serialize"));
    text
}

fn write_file(path: &Path, write: impl FnOnce(BufWriter<File>) -> std::io::Result<()>) -> Result<(), RunError> {
    let file = File::create(path).map_err(io_err(path))?;
    write(BufWriter::new(file)).map_err(io_err(path))
}

/// Mock ground truth for the sampled records.
pub fn ground_truth(data: &PreparedData) -> GroundTruth {
    let pairs = data
        .token_texts
        .iter()
        .cloned()
        .zip(data.sample.records().iter().map(|r| r.label));
    GroundTruth::from_pairs(pairs).0
}

/// Runs every (backend, template, record) pipeline and writes the output
/// directory. Cached responses are reused, so an interrupted run can simply
/// be restarted.
pub fn run_experiment(config: &RunConfig) -> Result<RunSummary, RunError> {
    config.validate()?;
    let data = prepare_data(config)?;
    let truth = ground_truth(&data);
    let built: Vec<Built> = config
        .backends
        .iter()
        .map(|b| build(b, &truth))
        .collect::<Result<_, _>>()?;
    let views: Vec<&dyn ChatBackend> = built.iter().map(Built::as_dyn).collect();
    let result = run_prepared(config, &data, &views);
    // Sidecars are written even when the run aborts; the run's own error
    // takes precedence over a sidecar write failure.
    let sidecars = (|| {
        let out = &config.output_dir;
        fs::create_dir_all(out).map_err(io_err(out))?;
        for (b, backend) in built.iter().enumerate() {
            if let Built::Mock(m) = backend {
                let path = out.join(format!("mock_sidecar_{}.jsonl", config.backends[b].id));
                write_file(&path, |w| m.write_sidecar(w))?;
            }
        }
        Ok::<_, RunError>(())
    })();
    let summary = result?;
    sidecars?;
    Ok(summary)
}

/// [`run_experiment`] over already prepared data and instantiated
/// backends, one per entry of `config.backends`.
pub fn run_prepared(
    config: &RunConfig,
    data: &PreparedData,
    backends: &[&dyn ChatBackend],
) -> Result<RunSummary, RunError> {
    config.validate()?;
    if backends.len() != config.backends.len() {
        return Err(ConfigError::Invalid(format!(
            "{} backends configured but {} supplied",
            config.backends.len(),
            backends.len()
        ))
        .into());
    }
    let parser = OutcomeParser::new(config.epsilon_sum).map_err(|e| ConfigError::Invalid(e.to_string()))?;
    let cache = match &config.cache_path {
        Some(path) => Some(ResponseCache::open(path).map_err(io_err(path))?),
        None => None,
    };
    let stats: Vec<CallStats> = backends.iter().map(|_| CallStats::default()).collect();
    let views: Vec<CachedBackend<'_>> = backends
        .iter()
        .zip(&stats)
        .map(|(b, s)| CachedBackend::new(*b, cache.as_ref(), s))
        .collect();

    let templates: Vec<TemplateId> = TemplateId::ALL
        .into_iter()
        .filter(|t| config.templates.contains(t))
        .collect();
    let mut jobs = Vec::new();
    for backend in 0..backends.len() {
        for &template in &templates {
            for record in 0..data.sample.len() {
                jobs.push(Job {
                    backend,
                    template,
                    record,
                });
            }
        }
    }

    let budget = (config.error_ceiling * jobs.len() as f64).floor() as usize;
    let next = AtomicUsize::new(0);
    let failed = AtomicUsize::new(0);
    let abort = AtomicBool::new(false);
    let slots: Mutex<Vec<Option<OutcomeRecord>>> = Mutex::new((0..jobs.len()).map(|_| None).collect());
    let workers = config.concurrency_limit.min(jobs.len()).max(1);

    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| {
                while !abort.load(Ordering::SeqCst) {
                    let j = next.fetch_add(1, Ordering::SeqCst);
                    let Some(job) = jobs.get(j) else { break };
                    let record = &data.sample.records()[job.record];
                    let token_text = &data.token_texts[job.record];
                    let (trace, result) = run_job(
                        &views[job.backend],
                        job.template,
                        record.index,
                        token_text,
                        &data.knowledge_text,
                        config.continuation,
                        &parser,
                    );
                    if result.is_err() && failed.fetch_add(1, Ordering::SeqCst) + 1 > budget {
                        abort.store(true, Ordering::SeqCst);
                    }
                    slots.lock().expect("result slots poisoned")[j] = Some(OutcomeRecord {
                        backend: config.backends[job.backend].id.clone(),
                        template: job.template,
                        record_index: record.index,
                        true_label: record.label,
                        token_text: token_text.clone(),
                        trace,
                        result,
                    });
                }
            });
        }
    });

    let records: Vec<OutcomeRecord> = slots
        .into_inner()
        .expect("result slots poisoned")
        .into_iter()
        .flatten()
        .collect();
    let failed = failed.into_inner();

    let out = &config.output_dir;
    fs::create_dir_all(out).map_err(io_err(out))?;
    let trace_path = out.join(TRACE_FILE);
    write_file(&trace_path, |w| write_trace(&records, w))?;
    if abort.into_inner() {
        return Err(RunError::ErrorCeiling {
            failed,
            total: jobs.len(),
            ceiling_pct: config.error_ceiling * 100.0,
            trace: trace_path,
        });
    }

    write_file(&out.join(OUTCOMES_FILE), |w| write_outcomes_csv(&records, w))?;
    let backend_ids: Vec<String> = config.backends.iter().map(|b| b.id.clone()).collect();
    let (report, empty_cells) = build_report(&records, &backend_ids, &templates, config.anomaly_mode)?;
    emit_reports(&report, &[ReportFormat::Markdown, ReportFormat::Csv], out).map_err(io_err(out))?;
    let manifest = out.join(MANIFEST_FILE);
    fs::write(&manifest, manifest_text(config, data)).map_err(io_err(&manifest))?;

    let stats = config
        .backends
        .iter()
        .zip(&stats)
        .map(|(b, s)| {
            let (requests, cache_hits, backend_calls) = s.snapshot();
            BackendStats {
                backend: b.id.clone(),
                requests,
                cache_hits,
                backend_calls,
            }
        })
        .collect();
    Ok(RunSummary {
        output_dir: out.clone(),
        records,
        report,
        stats,
        failed,
        empty_cells,
    })
}

/// Runs the backends × templates grid and returns the report. Templates
/// come from `config`; [`RunConfig::ablation`] selects all five.
pub fn run_ablation(config: &RunConfig) -> Result<RunSummary, RunError> {
    run_experiment(config)
}

impl RunConfig {
    /// The same configuration over every template.
    pub fn ablation(mut self) -> Self {
        self.templates = TemplateId::ALL.to_vec();
        self
    }
}

/// Rebuilds the report from a trace log without contacting any backend.
pub fn report_from_trace(
    path: &Path,
    mode: AnomalyMode,
) -> Result<(AblationReport, Vec<(String, TemplateId)>), RunError> {
    let file = File::open(path).map_err(io_err(path))?;
    let lines = read_trace(BufReader::new(file))?;
    let mut backends: Vec<String> = Vec::new();
    let mut templates: Vec<TemplateId> = Vec::new();
    let mut records = Vec::with_capacity(lines.len());
    for (i, line) in lines.iter().enumerate() {
        let (template, truth, outcome) = line.decode(i + 1)?;
        if !backends.contains(&line.backend) {
            backends.push(line.backend.clone());
        }
        if !templates.contains(&template) {
            templates.push(template);
        }
        records.push(OutcomeRecord {
            backend: line.backend.clone(),
            template,
            record_index: line.record_index,
            true_label: truth,
            token_text: line.token_text.clone(),
            trace: None,
            result: outcome.ok_or_else(|| line.error.clone().unwrap_or_default()),
        });
    }
    Ok(build_report(&records, &backends, &templates, mode)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn git_blob_hash() {
        // sha256 of b"blob 5\0hello", computed outside this crate.
        assert_eq!(
            content_hash(b"hello"),
            "8aec4e4876f854f688d0ebfc8f37598f38e5fd6903cccc850ca36591175aeb60"
        );
    }

    #[test]
    fn prepares_synthetic_data() {
        let config = RunConfig {
            records: Some(40),
            ..RunConfig::default()
        };
        let data = prepare_data(&config).unwrap();
        assert_eq!(data.sample.len(), 40);
        assert_eq!(data.token_texts.len(), 40);
        assert!(data.knowledge_text.starts_with("Protocol -> Max: "));
        assert!(data.source.starts_with("synthetic"));
    }
}
