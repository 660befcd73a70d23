//! Run configuration.
//!
//! Values come from a TOML file, then `DRLLM_*` environment variables, then
//! command-line flags (applied by the caller). A file looks like:
//!
//! ```toml
//! dataset = "data/DrDoS_DNS.csv"   # omit for the built-in synthetic flows
//! records = 1000
//! seed = 7
//! templates = ["P0", "P1", "P2", "P3prime", "P3"]
//! backends = ["mock", "deepseek"]
//! concurrency = 4
//! cache = "cache/responses.log"
//! output = "out"
//!
//! [backend.deepseek]
//! kind = "http"
//! model = "deepseek-chat"
//! endpoint = "https://api.deepseek.com/chat/completions"
//! temperature = 0.0
//! ```
//!
//! API keys are never read from the file; each http backend names the
//! environment variable holding its key (`DRLLM_API_KEY_<ID>` by default).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{default_auth_env, BackendConfig, BackendKind, HttpSettings, MockParams};
use crate::evaluation::AnomalyMode;
use crate::flow_data::DEFAULT_LABEL_COLUMN;
use crate::prompts::TemplateId;
use crate::reasoning::{ContinuationMode, OutcomeParser, DEFAULT_EPSILON_SUM};

pub const DEFAULT_RECORDS: usize = 1000;
pub const DEFAULT_SEED: u64 = 7;
pub const DEFAULT_ERROR_CEILING: f64 = 0.2;
pub const DEFAULT_CONCURRENCY: usize = 4;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config syntax: {0}")]
    Parse(String),
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("unknown backend `{0}` (use mock, mock:<id>, http:<preset> or a [backend.<id>] section)")]
    UnknownBackend(String),
    #[error("environment variable {var} has an invalid value `{value}`")]
    Env { var: String, value: String },
}

/// Which rows the knowledge profile is computed over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ProfileScope {
    /// The sampled records that are classified.
    #[default]
    Sample,
    /// Every preprocessed row before sampling.
    Dataset,
}

impl ProfileScope {
    pub fn as_str(self) -> &'static str {
        match self {
            ProfileScope::Sample => "sample",
            ProfileScope::Dataset => "dataset",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "sample" => Some(ProfileScope::Sample),
            "dataset" => Some(ProfileScope::Dataset),
            _ => None,
        }
    }
}

fn continuation_name(mode: ContinuationMode) -> &'static str {
    match mode {
        ContinuationMode::AssistantTurn => "assistant",
        ContinuationMode::Concatenate => "concatenate",
    }
}

pub fn parse_continuation(s: &str) -> Option<ContinuationMode> {
    match s {
        "assistant" => Some(ContinuationMode::AssistantTurn),
        "concatenate" => Some(ContinuationMode::Concatenate),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// CSV export to classify; `None` uses the synthetic generator.
    pub dataset: Option<PathBuf>,
    /// Feature subset in prompt order; empty keeps every numeric column.
    pub features: Vec<String>,
    /// Sample size; `None` classifies every preprocessed row.
    pub records: Option<usize>,
    pub seed: u64,
    pub stratified: bool,
    pub templates: Vec<TemplateId>,
    pub backends: Vec<BackendConfig>,
    pub concurrency_limit: usize,
    pub cache_path: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub anomaly_mode: AnomalyMode,
    pub epsilon_sum: f64,
    pub continuation: ContinuationMode,
    /// Largest tolerated share of failed records before the run aborts.
    pub error_ceiling: f64,
    pub profile_scope: ProfileScope,
    pub label_column: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            features: Vec::new(),
            records: Some(DEFAULT_RECORDS),
            seed: DEFAULT_SEED,
            stratified: true,
            templates: vec![TemplateId::P3],
            backends: vec![BackendConfig::mock("mock", MockParams::default())],
            concurrency_limit: DEFAULT_CONCURRENCY,
            cache_path: None,
            output_dir: PathBuf::from("drllm-out"),
            anomaly_mode: AnomalyMode::Exclude,
            epsilon_sum: DEFAULT_EPSILON_SUM,
            continuation: ContinuationMode::AssistantTurn,
            error_ceiling: DEFAULT_ERROR_CEILING,
            profile_scope: ProfileScope::Sample,
            label_column: DEFAULT_LABEL_COLUMN.to_string(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: String| Err(ConfigError::Invalid(m));
        if self.concurrency_limit == 0 {
            return invalid("concurrency must be at least 1".into());
        }
        if self.templates.is_empty() {
            return invalid("no templates selected".into());
        }
        if self.backends.is_empty() {
            return invalid("no backends selected".into());
        }
        if self.records == Some(0) {
            return invalid("records must be at least 1".into());
        }
        for (i, b) in self.backends.iter().enumerate() {
            if self.backends[..i].iter().any(|o| o.id == b.id) {
                return invalid(format!("backend `{}` listed twice", b.id));
            }
            b.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        }
        for (i, t) in self.templates.iter().enumerate() {
            if self.templates[..i].contains(t) {
                return invalid(format!("template {t} listed twice"));
            }
        }
        OutcomeParser::new(self.epsilon_sum).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if !(0.0..=1.0).contains(&self.error_ceiling) {
            return invalid(format!("error_ceiling {} outside [0, 1]", self.error_ceiling));
        }
        Ok(())
    }

    /// TOML rendering that [`parse_config`] reads back to the same value.
    pub fn to_toml(&self) -> String {
        let file = FileConfig {
            dataset: self.dataset.as_ref().map(|p| p.display().to_string()),
            features: (!self.features.is_empty()).then(|| self.features.clone()),
            records: self.records,
            all_records: self.records.is_none().then_some(true),
            seed: Some(self.seed),
            stratified: Some(self.stratified),
            templates: Some(self.templates.iter().map(|t| t.as_str().to_string()).collect()),
            backends: Some(self.backends.iter().map(|b| b.id.clone()).collect()),
            concurrency: Some(self.concurrency_limit),
            cache: self.cache_path.as_ref().map(|p| p.display().to_string()),
            output: Some(self.output_dir.display().to_string()),
            anomaly_mode: Some(self.anomaly_mode.as_str().to_string()),
            epsilon_sum: Some(self.epsilon_sum),
            continuation: Some(continuation_name(self.continuation).to_string()),
            error_ceiling: Some(self.error_ceiling),
            profile_scope: Some(self.profile_scope.as_str().to_string()),
            label_column: Some(self.label_column.clone()),
            backend: self
                .backends
                .iter()
                .map(|b| (b.id.clone(), BackendSection::from_config(b)))
                .collect(),
            inputs: None,
        };
        toml::to_string(&file).expect("config serializes")
    }
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    dataset: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    features: Option<Vec<String>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    records: Option<usize>,
    /// Classify every row instead of sampling.
    #[serde(skip_serializing_if = "Option::is_none")]
    all_records: Option<bool>,
    seed: Option<u64>,
    stratified: Option<bool>,
    templates: Option<Vec<String>>,
    backends: Option<Vec<String>>,
    concurrency: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    cache: Option<String>,
    output: Option<String>,
    anomaly_mode: Option<String>,
    epsilon_sum: Option<f64>,
    continuation: Option<String>,
    error_ceiling: Option<f64>,
    profile_scope: Option<String>,
    label_column: Option<String>,
    #[serde(default)]
    backend: BTreeMap<String, BackendSection>,
    /// Written by run manifests; ignored on load.
    #[serde(default, skip_serializing)]
    #[allow(dead_code)]
    inputs: Option<toml::Table>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BackendSection {
    kind: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    model: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    temperature: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    max_output_tokens: Option<u32>,
    // http
    #[serde(skip_serializing_if = "Option::is_none")]
    endpoint: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    auth_env: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    timeout_secs: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    max_retries: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    retry_base_delay_ms: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    requests_per_second: Option<f64>,
    // mock
    #[serde(skip_serializing_if = "Option::is_none")]
    accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    l1_rate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    l2_rate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
}

impl BackendSection {
    fn from_config(c: &BackendConfig) -> Self {
        let mut s = Self {
            model: Some(c.model_name.clone()),
            temperature: c.temperature,
            max_output_tokens: c.max_output_tokens,
            ..Self::default()
        };
        match &c.kind {
            BackendKind::Http(h) => {
                s.kind = "http".into();
                s.endpoint = Some(h.endpoint_url.clone());
                s.auth_env = Some(h.auth_env.clone());
                s.timeout_secs = Some(h.timeout.as_secs_f64());
                s.max_retries = Some(h.max_retries);
                s.retry_base_delay_ms = Some(h.retry_base_delay.as_millis() as u64);
                s.requests_per_second = Some(h.requests_per_second);
            }
            BackendKind::Mock(m) => {
                s.kind = "mock".into();
                s.accuracy = Some(m.accuracy);
                s.l1_rate = Some(m.l1_rate);
                s.l2_rate = Some(m.l2_rate);
                s.seed = Some(m.seed);
            }
        }
        s
    }

    fn into_config(self, id: &str) -> Result<BackendConfig, ConfigError> {
        let mut config = match self.kind.as_str() {
            "mock" => {
                let d = MockParams::default();
                let params = MockParams {
                    accuracy: self.accuracy.unwrap_or(d.accuracy),
                    l1_rate: self.l1_rate.unwrap_or(d.l1_rate),
                    l2_rate: self.l2_rate.unwrap_or(d.l2_rate),
                    seed: self.seed.unwrap_or(d.seed),
                };
                BackendConfig::mock(id, params)
            }
            "http" => {
                let preset = http_preset(id);
                let endpoint = self
                    .endpoint
                    .or_else(|| preset.as_ref().and_then(http_endpoint))
                    .ok_or_else(|| ConfigError::Invalid(format!("backend `{id}` needs an endpoint")))?;
                let mut settings = HttpSettings::new(endpoint, self.auth_env.unwrap_or_else(|| default_auth_env(id)));
                if let Some(t) = self.timeout_secs {
                    settings.timeout = Duration::try_from_secs_f64(t)
                        .map_err(|_| ConfigError::Invalid(format!("backend `{id}`: bad timeout_secs {t}")))?;
                }
                if let Some(r) = self.max_retries {
                    settings.max_retries = r;
                }
                if let Some(ms) = self.retry_base_delay_ms {
                    settings.retry_base_delay = Duration::from_millis(ms);
                }
                if let Some(rps) = self.requests_per_second {
                    settings.requests_per_second = rps;
                }
                let model = self
                    .model
                    .clone()
                    .or_else(|| preset.map(|p| p.model_name))
                    .ok_or_else(|| ConfigError::Invalid(format!("backend `{id}` needs a model")))?;
                BackendConfig {
                    id: id.to_string(),
                    model_name: model,
                    temperature: None,
                    max_output_tokens: None,
                    kind: BackendKind::Http(settings),
                }
            }
            other => {
                return Err(ConfigError::Invalid(format!(
                    "backend `{id}` has kind `{other}` (expected mock or http)"
                )))
            }
        };
        if let Some(m) = self.model {
            config.model_name = m;
        }
        config.temperature = self.temperature;
        config.max_output_tokens = self.max_output_tokens;
        config.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(config)
    }
}

fn http_endpoint(c: &BackendConfig) -> Option<String> {
    match &c.kind {
        BackendKind::Http(h) => Some(h.endpoint_url.clone()),
        BackendKind::Mock(_) => None,
    }
}

/// Built-in OpenAI-compatible providers, usable as `http:<name>`.
pub fn http_preset(name: &str) -> Option<BackendConfig> {
    let (endpoint, model) = match name {
        "deepseek" => ("https://api.deepseek.com/chat/completions", "deepseek-chat"),
        "openai" | "gpt" => ("https://api.openai.com/v1/chat/completions", "gpt-4o-mini"),
        "qwen" => (
            "https://dashscope.aliyuncs.com/compatible-mode/v1/chat/completions",
            "qwen2-57b-a14b-instruct",
        ),
        "llama" => ("https://api.groq.com/openai/v1/chat/completions", "llama3-70b-8192"),
        _ => return None,
    };
    Some(BackendConfig {
        id: name.to_string(),
        model_name: model.to_string(),
        temperature: None,
        max_output_tokens: None,
        kind: BackendKind::Http(HttpSettings::new(endpoint, default_auth_env(name))),
    })
}

/// A parsed config file: the run settings plus every `[backend.<id>]`
/// section, selected or not.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub run: RunConfig,
    pub sections: BTreeMap<String, BackendConfig>,
}

/// Resolves `mock`, `mock:<id>`, `http:<name>` or a section id.
pub fn resolve_backend(spec: &str, sections: &BTreeMap<String, BackendConfig>) -> Result<BackendConfig, ConfigError> {
    let unknown = || ConfigError::UnknownBackend(spec.to_string());
    if let Some(found) = sections.get(spec) {
        return Ok(found.clone());
    }
    match spec.split_once(':') {
        None if spec == "mock" => Ok(BackendConfig::mock("mock", MockParams::default())),
        Some(("mock", id)) if !id.is_empty() => Ok(BackendConfig::mock(id, MockParams::default())),
        Some(("http", name)) => match sections.get(name) {
            Some(c) if matches!(c.kind, BackendKind::Http(_)) => Ok(c.clone()),
            _ => http_preset(name).ok_or_else(unknown),
        },
        _ => Err(unknown()),
    }
}

fn parse_templates(names: &[String]) -> Result<Vec<TemplateId>, ConfigError> {
    names
        .iter()
        .map(|n| {
            n.parse()
                .map_err(|e: crate::prompts::PromptError| ConfigError::Invalid(e.to_string()))
        })
        .collect()
}

pub fn parse_config(text: &str) -> Result<LoadedConfig, ConfigError> {
    let file: FileConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
    let mut sections = BTreeMap::new();
    for (id, section) in file.backend {
        let config = section.into_config(&id)?;
        sections.insert(id, config);
    }
    let mut run = RunConfig::default();
    if let Some(d) = file.dataset {
        run.dataset = Some(PathBuf::from(d));
    }
    if let Some(f) = file.features {
        run.features = f;
    }
    if let Some(r) = file.records {
        run.records = Some(r);
    }
    if file.all_records == Some(true) {
        run.records = None;
    }
    if let Some(s) = file.seed {
        run.seed = s;
    }
    if let Some(s) = file.stratified {
        run.stratified = s;
    }
    if let Some(t) = file.templates {
        run.templates = parse_templates(&t)?;
    }
    run.backends = match file.backends {
        Some(specs) => specs
            .iter()
            .map(|s| resolve_backend(s, &sections))
            .collect::<Result<_, _>>()?,
        None if !sections.is_empty() => sections.values().cloned().collect(),
        None => run.backends,
    };
    if let Some(c) = file.concurrency {
        run.concurrency_limit = c;
    }
    if let Some(c) = file.cache {
        run.cache_path = Some(PathBuf::from(c));
    }
    if let Some(o) = file.output {
        run.output_dir = PathBuf::from(o);
    }
    if let Some(m) = file.anomaly_mode {
        run.anomaly_mode =
            AnomalyMode::parse(&m).ok_or_else(|| ConfigError::Invalid(format!("unknown anomaly_mode `{m}`")))?;
    }
    if let Some(e) = file.epsilon_sum {
        run.epsilon_sum = e;
    }
    if let Some(c) = file.continuation {
        run.continuation =
            parse_continuation(&c).ok_or_else(|| ConfigError::Invalid(format!("unknown continuation `{c}`")))?;
    }
    if let Some(e) = file.error_ceiling {
        run.error_ceiling = e;
    }
    if let Some(p) = file.profile_scope {
        run.profile_scope =
            ProfileScope::parse(&p).ok_or_else(|| ConfigError::Invalid(format!("unknown profile_scope `{p}`")))?;
    }
    if let Some(l) = file.label_column {
        run.label_column = l;
    }
    run.validate()?;
    Ok(LoadedConfig { run, sections })
}

pub fn load_config_file(path: &Path) -> Result<LoadedConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_config(&text)
}

/// Applies `DRLLM_DATASET`, `DRLLM_RECORDS`, `DRLLM_SEED`,
/// `DRLLM_CONCURRENCY`, `DRLLM_CACHE` and `DRLLM_OUTPUT`.
pub fn apply_env(run: &mut RunConfig, lookup: impl Fn(&str) -> Option<String>) -> Result<(), ConfigError> {
    fn number<T: std::str::FromStr>(var: &str, value: &str) -> Result<T, ConfigError> {
        value.trim().parse().map_err(|_| ConfigError::Env {
            var: var.to_string(),
            value: value.to_string(),
        })
    }
    if let Some(v) = lookup("DRLLM_DATASET") {
        run.dataset = Some(PathBuf::from(v));
    }
    if let Some(v) = lookup("DRLLM_RECORDS") {
        run.records = Some(number("DRLLM_RECORDS", &v)?);
    }
    if let Some(v) = lookup("DRLLM_SEED") {
        run.seed = number("DRLLM_SEED", &v)?;
    }
    if let Some(v) = lookup("DRLLM_CONCURRENCY") {
        run.concurrency_limit = number("DRLLM_CONCURRENCY", &v)?;
    }
    if let Some(v) = lookup("DRLLM_CACHE") {
        run.cache_path = Some(PathBuf::from(v));
    }
    if let Some(v) = lookup("DRLLM_OUTPUT") {
        run.output_dir = PathBuf::from(v);
    }
    Ok(())
}
