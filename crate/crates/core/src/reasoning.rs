//! Two-stage role reasoning and completion parsing.
//!
//! Stage 1 sends the knowledge prompt and keeps the reply. Stage 2 continues
//! the same conversation with the data prompt. The final reply is scanned
//! for the `Attack: x, Benign: y` grammar and mapped to an
//! [`InferenceOutcome`]:
//!
//! * a pair summing to 1 within `epsilon_sum` is `Valid` (renormalised),
//! * any other pair is `AnomalyL1` (confidence bias),
//! * no pair plus a refusal phrase is `AnomalyL2` (confidence lost),
//! * anything else is `ParseFailure`.
//!
//! The sum check runs on the decimal literals exactly, so a pair that misses
//! 1 by exactly `epsilon_sum` in its written form is accepted regardless of
//! binary rounding.

use std::fmt;
use std::sync::OnceLock;
use std::time::Duration;

use num_bigint::BigUint;
use regex::Regex;
use thiserror::Error;

use crate::backend::{BackendError, ChatBackend, ChatMessage, Role};
use crate::flow_data::Label;
use crate::numfmt::format_number;
use crate::prompts::{ComposedPrompt, TemplateId};

pub const DEFAULT_EPSILON_SUM: f64 = 0.01;

pub const DEFAULT_REFUSAL_LEXICON: &[&str] = &[
    "cannot",
    "unable to",
    "impossible to determine",
    "insufficient information",
    "lack of confidence",
];

/// How the stage-1 reply is carried into stage 2.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ContinuationMode {
    /// `[stage1..., assistant: R1, stage2...]`
    #[default]
    AssistantTurn,
    /// `[stage1..., user: R1 + stage2 text]`
    Concatenate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Knowledge,
    Data,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Knowledge => "stage1",
            Stage::Data => "stage2",
        })
    }
}

#[derive(Debug, Error)]
#[error("{stage} failed: {source}")]
pub struct ReasoningError {
    pub stage: Stage,
    #[source]
    pub source: BackendError,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReasoningTrace {
    pub record_index: usize,
    pub template: TemplateId,
    pub r1_text: Option<String>,
    pub r2_text: String,
    pub stage1_latency: Option<Duration>,
    pub stage2_latency: Duration,
}

/// Messages of the stage-2 request given the stage-1 reply.
pub fn stage2_conversation(prompt: &ComposedPrompt, r1_text: Option<&str>, mode: ContinuationMode) -> Vec<ChatMessage> {
    let (Some(stage1), Some(r1)) = (&prompt.stage1, r1_text) else {
        return prompt.stage2.clone();
    };
    let mut messages = stage1.clone();
    match mode {
        ContinuationMode::AssistantTurn => {
            messages.push(ChatMessage::new(Role::Assistant, r1));
            messages.extend(prompt.stage2.iter().cloned());
        }
        ContinuationMode::Concatenate => {
            let mut rest = prompt.stage2.iter().cloned();
            if let Some(first) = rest.next() {
                messages.push(ChatMessage::new(first.role, format!("{r1}\n\n{}", first.content)));
            }
            messages.extend(rest);
        }
    }
    messages
}

pub fn run_role_reasoning(
    backend: &dyn ChatBackend,
    prompt: &ComposedPrompt,
    mode: ContinuationMode,
) -> Result<ReasoningTrace, ReasoningError> {
    let (r1_text, stage1_latency) = match &prompt.stage1 {
        Some(stage1) => {
            let r1 = backend.complete(stage1).map_err(|source| ReasoningError {
                stage: Stage::Knowledge,
                source,
            })?;
            (Some(r1.text), Some(r1.latency))
        }
        None => (None, None),
    };
    let messages = stage2_conversation(prompt, r1_text.as_deref(), mode);
    let r2 = backend.complete(&messages).map_err(|source| ReasoningError {
        stage: Stage::Data,
        source,
    })?;
    Ok(ReasoningTrace {
        record_index: prompt.record_index,
        template: prompt.template,
        r1_text,
        r2_text: r2.text,
        stage1_latency,
        stage2_latency: r2.latency,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParsedClassification {
    pub p_attack: f64,
    pub p_benign: f64,
    pub predicted: Label,
    pub raw: String,
}

#[derive(Debug, Clone, PartialEq)]
pub enum InferenceOutcome {
    Valid(ParsedClassification),
    AnomalyL1 {
        p_attack: f64,
        p_benign: f64,
        sum_deviation: f64,
        raw: String,
    },
    AnomalyL2 {
        raw: String,
    },
    ParseFailure {
        raw: String,
    },
}

impl InferenceOutcome {
    pub fn variant_name(&self) -> &'static str {
        match self {
            InferenceOutcome::Valid(_) => "valid",
            InferenceOutcome::AnomalyL1 { .. } => "l1",
            InferenceOutcome::AnomalyL2 { .. } => "l2",
            InferenceOutcome::ParseFailure { .. } => "parse_failure",
        }
    }

    pub fn as_valid(&self) -> Option<&ParsedClassification> {
        match self {
            InferenceOutcome::Valid(p) => Some(p),
            _ => None,
        }
    }

    pub fn raw(&self) -> &str {
        match self {
            InferenceOutcome::Valid(p) => &p.raw,
            InferenceOutcome::AnomalyL1 { raw, .. }
            | InferenceOutcome::AnomalyL2 { raw }
            | InferenceOutcome::ParseFailure { raw } => raw,
        }
    }
}

/// Attack iff `p_attack >= 0.5`.
pub fn decide(parsed: &ParsedClassification) -> Label {
    decide_probability(parsed.p_attack)
}

pub fn decide_probability(p_attack: f64) -> Label {
    if p_attack >= 0.5 {
        Label::Attack
    } else {
        Label::Benign
    }
}

/// Canonical grammar line for a probability pair.
pub fn format_pair(p_attack: f64, p_benign: f64) -> String {
    format!(
        "Attack: {}, Benign: {}",
        format_number(p_attack),
        format_number(p_benign)
    )
}

fn grammar() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(
            r"(?i)\battack\s*[:=]\s*(\d+(?:\.\d*)?|\.\d+)\s*(%?)\s*,?\s*benign\s*[:=]\s*(\d+(?:\.\d*)?|\.\d+)\s*(%?)",
        )
        .expect("grammar regex compiles")
    })
}

/// Exact decimal `mantissa / 10^scale`.
#[derive(Debug, Clone, PartialEq, Eq)]
struct Decimal {
    mantissa: BigUint,
    scale: u32,
}

impl Decimal {
    fn parse(literal: &str) -> Option<Self> {
        let (int, frac) = literal.split_once('.').unwrap_or((literal, ""));
        let digits = format!("{int}{frac}");
        let digits = if digits.is_empty() { "0" } else { digits.as_str() };
        Some(Self {
            mantissa: BigUint::parse_bytes(digits.as_bytes(), 10)?,
            scale: u32::try_from(frac.len()).ok()?,
        })
    }

    fn with_extra_scale(mut self, extra: u32) -> Self {
        self.scale += extra;
        self
    }

    fn rescaled(&self, scale: u32) -> BigUint {
        &self.mantissa * BigUint::from(10u8).pow(scale - self.scale)
    }

    fn at_most_one(&self) -> bool {
        self.mantissa <= BigUint::from(10u8).pow(self.scale)
    }

    fn to_f64(&self) -> f64 {
        decimal_string(&self.mantissa, self.scale)
            .parse()
            .expect("decimal string parses")
    }
}

fn decimal_string(mantissa: &BigUint, scale: u32) -> String {
    let digits = mantissa.to_string();
    let scale = scale as usize;
    if scale == 0 {
        return digits;
    }
    let padded = format!("{digits:0>width$}", width = scale + 1);
    let (int, frac) = padded.split_at(padded.len() - scale);
    format!("{int}.{frac}")
}

struct PairMatch {
    attack: Decimal,
    benign: Decimal,
}

/// Completion parser with a configurable sum tolerance and refusal lexicon.
#[derive(Debug, Clone)]
pub struct OutcomeParser {
    epsilon_sum: f64,
    epsilon_exact: Decimal,
    refusal_lexicon: Vec<String>,
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("epsilon_sum must be finite and in [0, 1), got {0}")]
pub struct InvalidEpsilon(pub String);

impl Default for OutcomeParser {
    fn default() -> Self {
        Self::new(DEFAULT_EPSILON_SUM).expect("default epsilon is valid")
    }
}

impl OutcomeParser {
    pub fn new(epsilon_sum: f64) -> Result<Self, InvalidEpsilon> {
        if !(epsilon_sum.is_finite() && (0.0..1.0).contains(&epsilon_sum)) {
            return Err(InvalidEpsilon(epsilon_sum.to_string()));
        }
        // Display never uses exponent notation for f64, so this is a plain
        // decimal literal equal to the binary value's shortest form.
        let epsilon_exact = Decimal::parse(&format!("{epsilon_sum}")).expect("epsilon literal");
        Ok(Self {
            epsilon_sum,
            epsilon_exact,
            refusal_lexicon: DEFAULT_REFUSAL_LEXICON.iter().map(|s| s.to_string()).collect(),
        })
    }

    pub fn with_refusal_lexicon(mut self, phrases: Vec<String>) -> Self {
        self.refusal_lexicon = phrases.into_iter().map(|p| p.to_lowercase()).collect();
        self
    }

    pub fn epsilon_sum(&self) -> f64 {
        self.epsilon_sum
    }

    fn last_pair(&self, raw: &str) -> Option<PairMatch> {
        grammar()
            .captures_iter(raw)
            .filter_map(|c| {
                let pct_a = !c[2].is_empty();
                let pct_b = !c[4].is_empty();
                if pct_a != pct_b {
                    return None;
                }
                let extra = if pct_a { 2 } else { 0 };
                let attack = Decimal::parse(&c[1])?.with_extra_scale(extra);
                let benign = Decimal::parse(&c[3])?.with_extra_scale(extra);
                (attack.at_most_one() && benign.at_most_one()).then_some(PairMatch { attack, benign })
            })
            .last()
    }

    pub fn extract(&self, raw: &str) -> InferenceOutcome {
        let Some(pair) = self.last_pair(raw) else {
            let lower = raw.to_lowercase();
            return if self.refusal_lexicon.iter().any(|p| lower.contains(p.as_str())) {
                InferenceOutcome::AnomalyL2 { raw: raw.to_string() }
            } else {
                InferenceOutcome::ParseFailure { raw: raw.to_string() }
            };
        };

        let scale = pair.attack.scale.max(pair.benign.scale).max(self.epsilon_exact.scale);
        let sum = pair.attack.rescaled(scale) + pair.benign.rescaled(scale);
        let one = BigUint::from(10u8).pow(scale);
        let deviation = if sum >= one { &sum - &one } else { &one - &sum };
        let within = deviation <= self.epsilon_exact.rescaled(scale);

        let x = pair.attack.to_f64();
        let y = pair.benign.to_f64();
        let total = x + y;
        if !within || total == 0.0 {
            return InferenceOutcome::AnomalyL1 {
                p_attack: x,
                p_benign: y,
                sum_deviation: decimal_string(&deviation, scale).parse().expect("deviation parses"),
                raw: raw.to_string(),
            };
        }
        let (p_attack, p_benign) = if total == 1.0 {
            (x, y)
        } else {
            let p = x / total;
            (p, 1.0 - p)
        };
        InferenceOutcome::Valid(ParsedClassification {
            p_attack,
            p_benign,
            predicted: decide_probability(p_attack),
            raw: raw.to_string(),
        })
    }
}

/// [`OutcomeParser::extract`] with the default tolerance and lexicon.
pub fn extract_outcome(raw: &str) -> InferenceOutcome {
    static PARSER: OnceLock<OutcomeParser> = OnceLock::new();
    PARSER.get_or_init(OutcomeParser::default).extract(raw)
}
