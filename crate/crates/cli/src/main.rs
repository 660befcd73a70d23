//! `drllm` command-line front end.
//!
//! Settings are layered: built-in defaults, then `--config`, then
//! `DRLLM_*` environment variables, then flags. API keys are only ever read
//! from `DRLLM_API_KEY_<NAME>`.
//!
//! Exit codes: 0 success, 1 failure, 2 usage error, 3 when a report cell
//! could not be computed because every pipeline in it failed.

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use drllm_core::evaluation::{emit_reports, render_markdown, AnomalyMode, ReportFormat};
use drllm_core::flow_data::{
    load_dataset, preprocess_with_summary, select_features, synthetic_dataset, LoadOptions, SyntheticSpec,
};
use drllm_core::knowledge::render_profile_csv;
use drllm_core::orchestrator::{
    apply_env, load_config_file, parse_continuation, prepare_data, report_from_trace, resolve_backend, run_experiment,
    LoadedConfig, ProfileScope, RunConfig, RunSummary,
};
use drllm_core::prompts::{compose, TemplateId};

const EXIT_INCOMPLETE: u8 = 3;
const DEFAULT_CACHE_FILE: &str = "responses.cache";

#[derive(Parser)]
#[command(
    name = "drllm",
    version,
    about = "Zero-shot DDoS flow classification with LLM prompting"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Drop rows with non-finite values and write the cleaned table.
    Preprocess(PreprocessArgs),
    /// Print the per-feature statistics used as domain knowledge.
    Profile(ProfileArgs),
    /// Print the prompt a template produces for one record.
    Render(RenderArgs),
    /// Classify records with the selected templates (P3 by default).
    Run(RunArgs),
    /// Classify records with all five templates and report deltas against P3.
    Ablate(RunArgs),
    /// Rebuild the reports from a trace log without contacting any backend.
    Report(ReportArgs),
    /// Write a synthetic labelled flow table.
    Synth(SynthArgs),
}

#[derive(Args)]
struct DataArgs {
    /// TOML configuration file (a previous run's `run_manifest` works too).
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Flow CSV; omitted means synthetic data.
    #[arg(long, value_name = "CSV")]
    dataset: Option<PathBuf>,
    /// Comma-separated feature subset, in prompt order.
    #[arg(long, value_delimiter = ',')]
    features: Vec<String>,
    /// Number of records to sample.
    #[arg(long, conflicts_with = "all_records")]
    records: Option<usize>,
    /// Classify every row instead of sampling.
    #[arg(long)]
    all_records: bool,
    #[arg(long)]
    seed: Option<u64>,
    /// Sample uniformly instead of preserving the class balance.
    #[arg(long)]
    no_stratify: bool,
    #[arg(long)]
    label_column: Option<String>,
    /// Rows the knowledge statistics are computed over.
    #[arg(long, value_enum)]
    profile_scope: Option<Scope>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Scope {
    Sample,
    Dataset,
}

#[derive(Clone, Copy, ValueEnum)]
enum Anomaly {
    Exclude,
    Misclassify,
}

impl From<Anomaly> for AnomalyMode {
    fn from(a: Anomaly) -> Self {
        match a {
            Anomaly::Exclude => AnomalyMode::Exclude,
            Anomaly::Misclassify => AnomalyMode::Misclassify,
        }
    }
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Backend: `mock`, `mock:<id>`, `http:<preset>` or a config section id.
    /// Repeatable.
    #[arg(long = "backend", value_name = "SPEC")]
    backends: Vec<String>,
    /// Template (P0, P1, P2, P3prime, P3). Repeatable; ignored by `ablate`.
    #[arg(long = "template", value_name = "ID")]
    templates: Vec<String>,
    #[arg(long)]
    concurrency: Option<usize>,
    /// Response cache file; defaults to `<output>/responses.cache`.
    #[arg(long, value_name = "FILE", conflicts_with = "no_cache")]
    cache: Option<PathBuf>,
    #[arg(long)]
    no_cache: bool,
    #[arg(long, value_name = "DIR")]
    output: Option<PathBuf>,
    /// How L1/L2 outputs enter the metrics.
    #[arg(long, value_enum)]
    anomaly_mode: Option<Anomaly>,
    /// Tolerance on |p_attack + p_benign - 1|.
    #[arg(long)]
    epsilon_sum: Option<f64>,
    /// How the stage-1 answer is fed into stage 2: `assistant` or `concatenate`.
    #[arg(long)]
    continuation: Option<String>,
    /// Largest tolerated share of failed pipelines before aborting.
    #[arg(long)]
    error_ceiling: Option<f64>,
}

#[derive(Args)]
struct PreprocessArgs {
    #[arg(long, value_name = "CSV")]
    input: PathBuf,
    #[arg(long, value_name = "CSV")]
    output: PathBuf,
    #[arg(long, value_delimiter = ',')]
    features: Vec<String>,
    #[arg(long)]
    label_column: Option<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProfileFormat {
    Text,
    Csv,
}

#[derive(Args)]
struct ProfileArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_enum, default_value = "text")]
    format: ProfileFormat,
}

#[derive(Args)]
struct RenderArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value = "P3")]
    template: String,
    /// Position of the record in the sample.
    #[arg(long, default_value_t = 0)]
    record: usize,
}

#[derive(Args)]
struct ReportArgs {
    /// `trace.log` of a previous run.
    #[arg(long, value_name = "FILE")]
    from_trace: PathBuf,
    /// Directory for report.md and report.csv; defaults to the trace's.
    #[arg(long, value_name = "DIR")]
    output: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "exclude")]
    anomaly_mode: Anomaly,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = drllm_core::orchestrator::DEFAULT_RECORDS)]
    records: usize,
    #[arg(long, default_value_t = drllm_core::orchestrator::DEFAULT_SEED)]
    seed: u64,
    /// Output CSV; stdout when omitted.
    #[arg(long, value_name = "CSV")]
    output: Option<PathBuf>,
}

fn load_base(config: Option<&Path>) -> Result<LoadedConfig> {
    let mut loaded = match config {
        Some(path) => load_config_file(path)?,
        None => LoadedConfig {
            run: RunConfig::default(),
            sections: Default::default(),
        },
    };
    apply_env(&mut loaded.run, |k| std::env::var(k).ok())?;
    Ok(loaded)
}

fn apply_data(args: &DataArgs, run: &mut RunConfig) {
    if let Some(d) = &args.dataset {
        run.dataset = Some(d.clone());
    }
    if !args.features.is_empty() {
        run.features = args.features.clone();
    }
    if let Some(n) = args.records {
        run.records = Some(n);
    }
    if args.all_records {
        run.records = None;
    }
    if let Some(s) = args.seed {
        run.seed = s;
    }
    if args.no_stratify {
        run.stratified = false;
    }
    if let Some(l) = &args.label_column {
        run.label_column = l.clone();
    }
    if let Some(s) = args.profile_scope {
        run.profile_scope = match s {
            Scope::Sample => ProfileScope::Sample,
            Scope::Dataset => ProfileScope::Dataset,
        };
    }
}

fn data_config(args: &DataArgs) -> Result<RunConfig> {
    let mut run = load_base(args.config.as_deref())?.run;
    apply_data(args, &mut run);
    Ok(run)
}

fn run_config(args: &RunArgs, ablate: bool) -> Result<RunConfig> {
    let loaded = load_base(args.data.config.as_deref())?;
    let had_cache = loaded.run.cache_path.is_some();
    let mut run = loaded.run;
    apply_data(&args.data, &mut run);
    if !args.backends.is_empty() {
        run.backends = args
            .backends
            .iter()
            .map(|s| resolve_backend(s, &loaded.sections))
            .collect::<Result<_, _>>()?;
    }
    if ablate {
        run = run.ablation();
    } else if !args.templates.is_empty() {
        run.templates = args
            .templates
            .iter()
            .map(|t| t.parse::<TemplateId>())
            .collect::<Result<_, _>>()?;
    }
    if let Some(c) = args.concurrency {
        run.concurrency_limit = c;
    }
    if let Some(o) = &args.output {
        run.output_dir = o.clone();
    }
    if args.no_cache {
        run.cache_path = None;
    } else if let Some(c) = &args.cache {
        run.cache_path = Some(c.clone());
    } else if !had_cache && std::env::var_os("DRLLM_CACHE").is_none() {
        run.cache_path = Some(run.output_dir.join(DEFAULT_CACHE_FILE));
    }
    if let Some(m) = args.anomaly_mode {
        run.anomaly_mode = m.into();
    }
    if let Some(e) = args.epsilon_sum {
        run.epsilon_sum = e;
    }
    if let Some(c) = &args.continuation {
        run.continuation = parse_continuation(c).with_context(|| format!("unknown continuation `{c}`"))?;
    }
    if let Some(e) = args.error_ceiling {
        run.error_ceiling = e;
    }
    run.validate()?;
    Ok(run)
}

fn finish_run(summary: &RunSummary) -> ExitCode {
    print!("{}", render_markdown(&summary.report));
    for s in &summary.stats {
        eprintln!(
            "{}: {} requests, {} cache hits, {} backend calls",
            s.backend, s.requests, s.cache_hits, s.backend_calls
        );
    }
    if summary.failed > 0 {
        eprintln!("{} pipelines failed; see the trace log", summary.failed);
    }
    eprintln!("outputs written to {}", summary.output_dir.display());
    incomplete(&summary.empty_cells)
}

fn incomplete(empty: &[(String, TemplateId)]) -> ExitCode {
    if empty.is_empty() {
        return ExitCode::SUCCESS;
    }
    for (backend, template) in empty {
        eprintln!("not applicable: {backend} / {template} has no completed records");
    }
    ExitCode::from(EXIT_INCOMPLETE)
}

fn cmd_run(args: &RunArgs, ablate: bool) -> Result<ExitCode> {
    let config = run_config(args, ablate)?;
    let summary = run_experiment(&config)?;
    Ok(finish_run(&summary))
}

fn cmd_preprocess(args: &PreprocessArgs) -> Result<ExitCode> {
    let mut options = LoadOptions::default();
    if let Some(l) = &args.label_column {
        options.label_column = l.clone();
    }
    let raw = load_dataset(&args.input, &options)?;
    let (clean, summary) = preprocess_with_summary(raw)?;
    let clean = if args.features.is_empty() {
        clean
    } else {
        select_features(&clean, &args.features)?
    };
    let file = File::create(&args.output).with_context(|| args.output.display().to_string())?;
    clean.write_csv(BufWriter::new(file))?;
    print!("{}", summary.render());
    Ok(ExitCode::SUCCESS)
}

fn cmd_profile(args: &ProfileArgs) -> Result<ExitCode> {
    let data = prepare_data(&data_config(&args.data)?)?;
    match args.format {
        ProfileFormat::Text => println!("{}", data.knowledge_text),
        ProfileFormat::Csv => print!("{}", render_profile_csv(&data.profile, data.sample.schema())?),
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_render(args: &RenderArgs) -> Result<ExitCode> {
    let template: TemplateId = args.template.parse()?;
    let data = prepare_data(&data_config(&args.data)?)?;
    let Some(token) = data.token_texts.get(args.record) else {
        bail!(
            "record {} out of range: the sample has {} records",
            args.record,
            data.token_texts.len()
        );
    };
    let knowledge = template.uses_knowledge().then_some(data.knowledge_text.as_str());
    print!("{}", compose(template, args.record, knowledge, token)?.render_debug());
    Ok(ExitCode::SUCCESS)
}

fn cmd_report(args: &ReportArgs) -> Result<ExitCode> {
    let (report, empty) = report_from_trace(&args.from_trace, args.anomaly_mode.into())?;
    let dir = match &args.output {
        Some(d) => d.clone(),
        None => args.from_trace.parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    fs::create_dir_all(&dir).with_context(|| dir.display().to_string())?;
    emit_reports(&report, &[ReportFormat::Markdown, ReportFormat::Csv], &dir)
        .with_context(|| dir.display().to_string())?;
    print!("{}", render_markdown(&report));
    Ok(incomplete(&empty))
}

fn cmd_synth(args: &SynthArgs) -> Result<ExitCode> {
    let data = synthetic_dataset(&SyntheticSpec::new(args.records, args.seed));
    match &args.output {
        Some(path) => {
            let file = File::create(path).with_context(|| path.display().to_string())?;
            data.write_csv(BufWriter::new(file))?;
        }
        None => {
            let stdout = io::stdout();
            let mut lock = stdout.lock();
            data.write_csv(&mut lock)?;
            lock.flush()?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Preprocess(a) => cmd_preprocess(a),
        Command::Profile(a) => cmd_profile(a),
        Command::Render(a) => cmd_render(a),
        Command::Run(a) => cmd_run(a, false),
        Command::Ablate(a) => cmd_run(a, true),
        Command::Report(a) => cmd_report(a),
        Command::Synth(a) => cmd_synth(a),
    };
    result.unwrap_or_else(|e| {
        eprintln!("error: {e:#}");
        ExitCode::FAILURE
    })
}
