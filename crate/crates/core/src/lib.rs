//! Zero-shot DDoS flow classification with large language models.
//!
//! The pipeline loads and cleans CICDDoS2019-style flow tables
//! ([`flow_data`]), summarises every feature column ([`knowledge`]), turns
//! records and statistics into prompts ([`prompts`]), runs a two-stage
//! conversation against a chat backend ([`backend`], [`reasoning`]) and
//! scores the parsed answers ([`evaluation`]). [`orchestrator`] wires the
//! stages together with caching and bounded concurrency.

pub mod backend;
pub mod evaluation;
pub mod flow_data;
pub mod knowledge;
pub mod numfmt;
pub mod orchestrator;
pub mod prompts;
pub mod reasoning;
