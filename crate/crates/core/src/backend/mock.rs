use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use super::{validate_messages, BackendError, BackendResponse, ChatBackend, ChatMessage};
use crate::flow_data::Label;
use crate::numfmt::format_number;
use crate::prompts::{find_token_text, PromptBlockKind};

/// Reply to a request without a `Data:` line (the knowledge stage).
pub const MOCK_STAGE1_REPLY: &str = "OK";
pub const MOCK_REFUSAL: &str = "I cannot determine a probability from this data.";
const MOCK_COT_PREFIX: &str = "Checking the flow features one by one against typical attack and benign traffic.\n";

/// (winner, loser) probabilities for a correct answer, a wrong answer, and
/// an L1 pair that overshoots 1 by 0.2.
const CONFIDENT: (f64, f64) = (0.9, 0.1);
const UNSURE: (f64, f64) = (0.6, 0.4);
const BIASED: (f64, f64) = (0.9, 0.3);

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MockParams {
    /// Probability that a well-formed answer lands on the true class.
    pub accuracy: f64,
    /// Probability of a pair whose sum is off by at least 0.1.
    pub l1_rate: f64,
    /// Probability of a refusal.
    pub l2_rate: f64,
    pub seed: u64,
}

impl Default for MockParams {
    fn default() -> Self {
        Self {
            accuracy: 0.85,
            l1_rate: 0.05,
            l2_rate: 0.02,
            seed: 7,
        }
    }
}

impl MockParams {
    pub fn validate(&self) -> Result<(), BackendError> {
        for (name, v) in [
            ("accuracy", self.accuracy),
            ("l1_rate", self.l1_rate),
            ("l2_rate", self.l2_rate),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(BackendError::InvalidConfig(format!("mock {name} {v} outside [0, 1]")));
            }
        }
        if self.l1_rate + self.l2_rate > 1.0 {
            return Err(BackendError::InvalidConfig("mock l1_rate + l2_rate exceeds 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MockEmission {
    Valid,
    /// Probability pair that does not sum to one.
    BiasedPair,
    Refusal,
}

impl MockEmission {
    pub fn as_str(self) -> &'static str {
        match self {
            MockEmission::Valid => "valid",
            MockEmission::BiasedPair => "l1",
            MockEmission::Refusal => "l2",
        }
    }
}

/// What the mock decided for one record, before rendering to text.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MockDecision {
    pub emission: MockEmission,
    pub true_label: Label,
    /// Side the emitted pair favours; `None` for refusals.
    pub favoured: Option<Label>,
    pub p_attack: Option<f64>,
    pub p_benign: Option<f64>,
}

impl MockDecision {
    pub fn render(&self) -> String {
        match (self.p_attack, self.p_benign) {
            (Some(a), Some(b)) => format!("Attack: {}, Benign: {}", format_number(a), format_number(b)),
            _ => MOCK_REFUSAL.to_string(),
        }
    }
}

fn fnv1a64(text: &str) -> u64 {
    text.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// SplitMix64 stream.
struct SplitMix64(u64);

impl SplitMix64 {
    fn next_u64(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }

    /// Uniform in [0, 1).
    fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }
}

/// Draws the decision for one record. Depends only on `(params, token_text,
/// true_label)`, never on call order.
pub fn mock_draw(params: &MockParams, token_text: &str, true_label: Label) -> MockDecision {
    let mut stream = SplitMix64(params.seed ^ fnv1a64(token_text));
    let u_kind = stream.next_f64();
    let u_correct = stream.next_f64();

    let emission = if u_kind < params.l2_rate {
        MockEmission::Refusal
    } else if u_kind < params.l2_rate + params.l1_rate {
        MockEmission::BiasedPair
    } else {
        MockEmission::Valid
    };
    if emission == MockEmission::Refusal {
        return MockDecision {
            emission,
            true_label,
            favoured: None,
            p_attack: None,
            p_benign: None,
        };
    }

    let correct = u_correct < params.accuracy;
    let favoured = match (correct, true_label) {
        (true, l) => l,
        (false, Label::Attack) => Label::Benign,
        (false, Label::Benign) => Label::Attack,
    };
    let (win, lose) = match emission {
        MockEmission::BiasedPair => BIASED,
        _ if correct => CONFIDENT,
        _ => UNSURE,
    };
    let (p_attack, p_benign) = match favoured {
        Label::Attack => (win, lose),
        Label::Benign => (lose, win),
    };
    MockDecision {
        emission,
        true_label,
        favoured: Some(favoured),
        p_attack: Some(p_attack),
        p_benign: Some(p_benign),
    }
}

/// Completion text the mock returns for a record.
pub fn mock_decide(params: &MockParams, token_text: &str, true_label: Label) -> String {
    mock_draw(params, token_text, true_label).render()
}

/// Token text → true label lookup the mock answers from.
#[derive(Debug, Clone, Default)]
pub struct GroundTruth {
    labels: Arc<HashMap<String, Label>>,
}

impl GroundTruth {
    /// Builds the lookup; the first label wins when the same token text
    /// appears twice. Returns the number of conflicting duplicates.
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, Label)>) -> (Self, usize) {
        let mut labels = HashMap::new();
        let mut conflicts = 0;
        for (text, label) in pairs {
            match labels.get(&text) {
                Some(existing) if *existing != label => conflicts += 1,
                Some(_) => {}
                None => {
                    labels.insert(text, label);
                }
            }
        }
        (
            Self {
                labels: Arc::new(labels),
            },
            conflicts,
        )
    }

    pub fn get(&self, token_text: &str) -> Option<Label> {
        self.labels.get(token_text).copied()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// One line of the mock's ground-truth log.
#[derive(Debug, Clone, PartialEq)]
pub struct SidecarEntry {
    pub token_text: String,
    pub decision: MockDecision,
}

impl SidecarEntry {
    pub fn to_json(&self) -> serde_json::Value {
        let d = &self.decision;
        serde_json::json!({
            "token_text": self.token_text,
            "true_label": d.true_label.as_str(),
            "emission": d.emission.as_str(),
            "favoured": d.favoured.map(Label::as_str),
            "p_attack": d.p_attack,
            "p_benign": d.p_benign,
        })
    }
}

/// Offline backend. Thread-safe; counts calls and concurrent calls.
#[derive(Debug)]
pub struct MockBackend {
    id: String,
    model_name: String,
    params: MockParams,
    truth: GroundTruth,
    latency: Option<Duration>,
    sidecar: Mutex<BTreeMap<String, MockDecision>>,
    calls: AtomicUsize,
    in_flight: AtomicUsize,
    max_in_flight: AtomicUsize,
}

impl MockBackend {
    pub fn new(
        id: impl Into<String>,
        model_name: impl Into<String>,
        params: MockParams,
        truth: GroundTruth,
    ) -> Result<Self, BackendError> {
        params.validate()?;
        Ok(Self {
            id: id.into(),
            model_name: model_name.into(),
            params,
            truth,
            latency: None,
            sidecar: Mutex::new(BTreeMap::new()),
            calls: AtomicUsize::new(0),
            in_flight: AtomicUsize::new(0),
            max_in_flight: AtomicUsize::new(0),
        })
    }

    /// Makes every call sleep for `latency`, so concurrency is observable.
    pub fn with_latency(mut self, latency: Duration) -> Self {
        self.latency = Some(latency);
        self
    }

    pub fn params(&self) -> &MockParams {
        &self.params
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn max_in_flight(&self) -> usize {
        self.max_in_flight.load(Ordering::SeqCst)
    }

    /// Decisions echoed so far, ordered by token text.
    pub fn sidecar(&self) -> Vec<SidecarEntry> {
        self.sidecar
            .lock()
            .expect("sidecar poisoned")
            .iter()
            .map(|(k, d)| SidecarEntry {
                token_text: k.clone(),
                decision: *d,
            })
            .collect()
    }

    /// Writes the sidecar as JSON lines.
    pub fn write_sidecar<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for entry in self.sidecar() {
            writeln!(out, "{}", entry.to_json())?;
        }
        Ok(())
    }

    fn respond(&self, messages: &[ChatMessage]) -> Result<String, BackendError> {
        let Some(token_text) = find_token_text(messages.iter().map(|m| m.content.as_str())) else {
            return Ok(MOCK_STAGE1_REPLY.to_string());
        };
        let label = self.truth.get(token_text).ok_or(BackendError::UnknownRecord)?;
        let decision = mock_draw(&self.params, token_text, label);
        self.sidecar
            .lock()
            .expect("sidecar poisoned")
            .insert(token_text.to_string(), decision);
        let cot = messages
            .iter()
            .any(|m| m.content.contains(PromptBlockKind::CoT.sentinel()));
        let body = decision.render();
        Ok(if cot { format!("{MOCK_COT_PREFIX}{body}") } else { body })
    }
}

impl ChatBackend for MockBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn model_name(&self) -> &str {
        &self.model_name
    }

    fn temperature(&self) -> Option<f64> {
        None
    }

    fn complete(&self, messages: &[ChatMessage]) -> Result<BackendResponse, BackendError> {
        validate_messages(messages)?;
        let start = Instant::now();
        self.calls.fetch_add(1, Ordering::SeqCst);
        let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        self.max_in_flight.fetch_max(now, Ordering::SeqCst);
        if let Some(d) = self.latency {
            std::thread::sleep(d);
        }
        let result = self.respond(messages);
        self.in_flight.fetch_sub(1, Ordering::SeqCst);
        Ok(BackendResponse {
            text: result?,
            latency: start.elapsed(),
            request_fingerprint: self.fingerprint(messages),
        })
    }
}
