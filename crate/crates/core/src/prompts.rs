//! Prompt blocks, token serialization of flow records, and template assembly.
//!
//! Five blocks make up every template: the knowledge prompt (KP), the basic
//! task prompt (BP), the output constraint (CoD), the zero-shot reasoning
//! trigger (CoT) and the token prompt (TP) carrying one serialized record.
//! Each block text holds a `[[NAME]]` sentinel exactly once so composed
//! prompts can be checked structurally without depending on the wording.
//!
//! Block texts are versioned by [`BLOCK_TEXT_VERSION`]; changing any of them
//! changes every request fingerprint and therefore invalidates caches.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::backend::{ChatMessage, Role};
use crate::flow_data::{FeatureSchema, FlowRecord};
use crate::numfmt::format_number;

pub const BLOCK_TEXT_VERSION: &str = "1";

/// Prefix of the line that carries the serialized record.
pub const DATA_PREFIX: &str = "Data: ";

/// Output grammar line required by the CoD block. The reasoning parser
/// accepts exactly this shape with numbers in place of the placeholders.
pub const OUTPUT_GRAMMAR_LINE: &str = "Attack: <probability>, Benign: <probability>";

/// Zero-shot chain-of-thought trigger sentence.
pub const COT_TRIGGER: &str = "Let's think step by step.";

const EXPERT_PREAMBLE: &str = "You are a senior network security analyst specialised in detecting \
distributed denial-of-service (DDoS) attacks from network flow statistics. You will be asked to \
decide whether individual network traffic flows are DDoS attack traffic or benign traffic.";

const KNOWLEDGE_PLACEHOLDER: &str = "{knowledge}";

const KP_TEXT: &str = "[[KP]]
Before any flow is shown to you, study the global statistics of the dataset the flows are drawn \
from. For every feature the maximum, minimum, median, mean and variance over the whole dataset \
are listed below.

{knowledge}

Keep this distribution in mind as prior knowledge when you judge individual flows later. Do not \
analyse the statistics now: reply with the single word OK and nothing else.";

const BP_TEXT: &str = "[[BP]]
Below is one network traffic flow taken from a dataset that mixes DDoS attack traffic with benign \
traffic. Each feature is given as `name: value`. Judge whether this flow is a DDoS attack or \
benign traffic, and express your judgment as two probabilities: the probability that the flow is \
an attack and the probability that it is benign.";

const COD_TEXT: &str = "[[CoD]]
Your answer must end with exactly one line in the following format, where both values are decimal \
numbers between 0 and 1 that add up to 1:
Attack: <probability>, Benign: <probability>
Do not write anything after that line.";

const COT_TEXT: &str = "[[CoT]]
Examine the feature values one at a time, compare each with what benign and attack traffic usually \
look like, and only then give your final answer. Let's think step by step.";

const TP_TEXT: &str = "[[TP]]
Flow record:";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PromptBlockKind {
    Kp,
    Bp,
    CoD,
    CoT,
    Tp,
}

impl PromptBlockKind {
    /// Canonical order of blocks inside a composed prompt.
    pub const ALL: [PromptBlockKind; 5] = [Self::Kp, Self::Bp, Self::CoD, Self::CoT, Self::Tp];

    pub fn sentinel(self) -> &'static str {
        match self {
            Self::Kp => "[[KP]]",
            Self::Bp => "[[BP]]",
            Self::CoD => "[[CoD]]",
            Self::CoT => "[[CoT]]",
            Self::Tp => "[[TP]]",
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Kp => "KP",
            Self::Bp => "BP",
            Self::CoD => "CoD",
            Self::CoT => "CoT",
            Self::Tp => "TP",
        }
    }
}

/// Fixed text of a block. The KP text still contains its `{knowledge}`
/// placeholder.
pub fn canonical_block_text(kind: PromptBlockKind) -> &'static str {
    match kind {
        PromptBlockKind::Kp => KP_TEXT,
        PromptBlockKind::Bp => BP_TEXT,
        PromptBlockKind::CoD => COD_TEXT,
        PromptBlockKind::CoT => COT_TEXT,
        PromptBlockKind::Tp => TP_TEXT,
    }
}

/// System message opening the knowledge stage.
pub fn expert_preamble() -> &'static str {
    EXPERT_PREAMBLE
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TemplateId {
    P0,
    P1,
    P2,
    P3Prime,
    P3,
}

impl TemplateId {
    /// Column order used in every report.
    pub const ALL: [TemplateId; 5] = [Self::P0, Self::P1, Self::P2, Self::P3Prime, Self::P3];

    pub fn blocks(self) -> &'static [PromptBlockKind] {
        use PromptBlockKind::*;
        match self {
            Self::P0 => &[Bp, Tp],
            Self::P1 => &[Bp, CoD, Tp],
            Self::P2 => &[Bp, CoD, CoT, Tp],
            Self::P3Prime => &[Kp, Bp, CoD, Tp],
            Self::P3 => &[Kp, Bp, CoD, CoT, Tp],
        }
    }

    pub fn includes(self, kind: PromptBlockKind) -> bool {
        self.blocks().contains(&kind)
    }

    pub fn uses_knowledge(self) -> bool {
        self.includes(PromptBlockKind::Kp)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::P0 => "P0",
            Self::P1 => "P1",
            Self::P2 => "P2",
            Self::P3Prime => "P3prime",
            Self::P3 => "P3",
        }
    }
}

impl fmt::Display for TemplateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PromptError {
    #[error("unknown template `{0}` (expected P0, P1, P2, P3prime or P3)")]
    UnknownTemplate(String),
    #[error("template {0} needs knowledge text")]
    MissingKnowledge(TemplateId),
    #[error("template {0} takes no knowledge text")]
    UnexpectedKnowledge(TemplateId),
    #[error("record has {values} values but schema has {features} features")]
    SchemaMismatch { values: usize, features: usize },
}

impl FromStr for TemplateId {
    type Err = PromptError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "P0" | "p0" => Ok(Self::P0),
            "P1" | "p1" => Ok(Self::P1),
            "P2" | "p2" => Ok(Self::P2),
            "P3prime" | "P3'" | "P3′" | "p3prime" | "P3Prime" => Ok(Self::P3Prime),
            "P3" | "p3" => Ok(Self::P3),
            other => Err(PromptError::UnknownTemplate(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ComposedPrompt {
    pub template: TemplateId,
    pub record_index: usize,
    /// Knowledge stage, present iff the template includes KP.
    pub stage1: Option<Vec<ChatMessage>>,
    pub stage2: Vec<ChatMessage>,
}

impl ComposedPrompt {
    /// Every message of both stages, stage 1 first.
    pub fn all_messages(&self) -> impl Iterator<Item = &ChatMessage> {
        self.stage1.iter().flatten().chain(self.stage2.iter())
    }

    /// Human-readable dump with message contents reproduced byte for byte.
    pub fn render_debug(&self) -> String {
        let mut out = String::new();
        let mut stage = |title: &str, msgs: &[ChatMessage]| {
            out.push_str(&format!("=== {title} ===\n"));
            for m in msgs {
                out.push_str(&format!("--- {} ---\n{}\n", m.role.as_str(), m.content));
            }
        };
        if let Some(s1) = &self.stage1 {
            stage("stage1", s1);
        }
        stage("stage2", &self.stage2);
        out
    }
}

/// `A: 1, B: 2.5` in schema order.
pub fn render_token_text(record: &FlowRecord, schema: &FeatureSchema) -> Result<String, PromptError> {
    if record.values.len() != schema.len() {
        return Err(PromptError::SchemaMismatch {
            values: record.values.len(),
            features: schema.len(),
        });
    }
    Ok(schema
        .feature_names()
        .iter()
        .zip(&record.values)
        .map(|(name, v)| format!("{name}: {}", format_number(*v)))
        .collect::<Vec<_>>()
        .join(", "))
}

/// Inverse of [`render_token_text`], used to read records back from the
/// `Data:` line. Returns `None` when a pair is malformed.
pub fn parse_token_text(text: &str) -> Option<Vec<(String, f64)>> {
    text.split(", ")
        .map(|pair| {
            let (name, value) = pair.rsplit_once(": ")?;
            Some((name.to_string(), value.parse().ok()?))
        })
        .collect()
}

/// Finds the last `Data:` line among `messages` and returns the token text.
pub fn find_token_text<'a>(messages: impl IntoIterator<Item = &'a str>) -> Option<&'a str> {
    messages
        .into_iter()
        .filter_map(|content| content.lines().rev().find_map(|l| l.strip_prefix(DATA_PREFIX)))
        .last()
}

pub fn compose(
    template: TemplateId,
    record_index: usize,
    knowledge_text: Option<&str>,
    token_text: &str,
) -> Result<ComposedPrompt, PromptError> {
    let stage1 = match (template.uses_knowledge(), knowledge_text) {
        (true, Some(k)) => Some(vec![
            ChatMessage::new(Role::System, EXPERT_PREAMBLE),
            ChatMessage::new(Role::User, KP_TEXT.replace(KNOWLEDGE_PLACEHOLDER, k)),
        ]),
        (true, None) => return Err(PromptError::MissingKnowledge(template)),
        (false, Some(_)) => return Err(PromptError::UnexpectedKnowledge(template)),
        (false, None) => None,
    };

    let sections: Vec<String> = template
        .blocks()
        .iter()
        .filter(|b| **b != PromptBlockKind::Kp)
        .map(|b| match b {
            PromptBlockKind::Tp => format!("{TP_TEXT}\n{DATA_PREFIX}{token_text}"),
            other => canonical_block_text(*other).to_string(),
        })
        .collect();

    Ok(ComposedPrompt {
        template,
        record_index,
        stage1,
        stage2: vec![ChatMessage::new(Role::User, sections.join("\n\n"))],
    })
}

/// Blocks whose sentinels occur in `text`, ordered by first occurrence, with
/// occurrence counts. Used to check composition structurally.
pub fn scan_sentinels(text: &str) -> Vec<(PromptBlockKind, usize)> {
    let mut found: Vec<(usize, PromptBlockKind, usize)> = PromptBlockKind::ALL
        .iter()
        .filter_map(|k| {
            let count = text.matches(k.sentinel()).count();
            text.find(k.sentinel()).map(|pos| (pos, *k, count))
        })
        .collect();
    found.sort();
    found.into_iter().map(|(_, k, c)| (k, c)).collect()
}
