//! Language-model agents behind a record/replay transcript cassette.
//!
//! The engine never talks to a model directly. It asks an [`LlmDecider`]
//! for a decision; [`TranscriptDecider`] answers from the branch's
//! transcript store when a response was recorded for `(tick, agent)` and
//! otherwise calls the configured [`CompletionClient`] and records the raw
//! response so the branch replays bit-for-bit later.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{AgentProfile, Decision, Observation, PostDraft};
use crate::canonical::FORMAT_VERSION;
use crate::fixed::Fixed;
use crate::model::{AdapterFault, AdapterFaultKind, AgentId, CommodityId, Order, Side, Tick};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationParams {
    pub model: String,
    pub temperature: Fixed,
    pub max_tokens: u32,
}

impl Default for GenerationParams {
    fn default() -> Self {
        GenerationParams {
            model: "gpt-4o-mini".into(),
            temperature: Fixed::from_units(7_000),
            max_tokens: 300,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("completion request failed: {0}")]
pub struct CompletionError(pub String);

/// External text-completion service.
pub trait CompletionClient: Send + Sync {
    fn complete(&self, prompt: &str, params: &GenerationParams) -> Result<String, CompletionError>;
}

/// OpenAI-compatible chat completion endpoint.
pub struct HttpCompletionClient {
    endpoint: String,
    api_key: Option<String>,
    agent: ureq::Agent,
}

impl HttpCompletionClient {
    pub fn new(endpoint: impl Into<String>, api_key: Option<String>) -> Self {
        HttpCompletionClient {
            endpoint: endpoint.into(),
            api_key,
            agent: ureq::AgentBuilder::new()
                .timeout(std::time::Duration::from_secs(60))
                .build(),
        }
    }

    /// Reads `TIMEFORK_COMPLETION_URL` and optional `TIMEFORK_COMPLETION_KEY`.
    pub fn from_env() -> Option<Self> {
        let endpoint = std::env::var("TIMEFORK_COMPLETION_URL").ok()?;
        let key = std::env::var("TIMEFORK_COMPLETION_KEY").ok();
        Some(Self::new(endpoint, key))
    }
}

impl CompletionClient for HttpCompletionClient {
    fn complete(&self, prompt: &str, params: &GenerationParams) -> Result<String, CompletionError> {
        let body = serde_json::json!({
            "model": params.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": params.temperature.to_string().parse::<f64>().unwrap_or(0.7),
            "max_tokens": params.max_tokens,
        });
        let mut request = self.agent.post(&self.endpoint);
        if let Some(key) = &self.api_key {
            request = request.set("Authorization", &format!("Bearer {key}"));
        }
        let response: Value = request
            .send_json(body)
            .map_err(|e| CompletionError(e.to_string()))?
            .into_json()
            .map_err(|e| CompletionError(e.to_string()))?;
        response["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| CompletionError("response has no message content".into()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LlmMode {
    /// Use recorded responses when present, otherwise call the client and record.
    #[default]
    Record,
    /// Recorded responses only; a missing one is an error.
    Replay,
}

impl std::str::FromStr for LlmMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "record" => Ok(LlmMode::Record),
            "replay" => Ok(LlmMode::Replay),
            other => Err(format!("unknown llm mode {other:?}; expected record or replay")),
        }
    }
}

pub type TranscriptKey = (Tick, AgentId);

/// One recorded model exchange. `response` is `None` when no client was
/// reachable; replaying it reproduces the same fallback.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transcript {
    pub format_version: u32,
    pub seed: u64,
    pub tick: Tick,
    pub agent_id: AgentId,
    pub prompt_version: String,
    pub prompt: String,
    pub response: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TranscriptStore {
    entries: BTreeMap<TranscriptKey, Transcript>,
}

impl TranscriptStore {
    pub fn get(&self, tick: Tick, agent: &AgentId) -> Option<&Transcript> {
        self.entries.get(&(tick, agent.clone()))
    }

    pub fn insert(&mut self, transcript: Transcript) {
        self.entries
            .insert((transcript.tick, transcript.agent_id.clone()), transcript);
    }

    pub fn remove(&mut self, tick: Tick, agent: &AgentId) -> Option<Transcript> {
        self.entries.remove(&(tick, agent.clone()))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transcript> {
        self.entries.values()
    }

    /// Transcripts for decisions taken strictly before `tick`.
    pub fn before(&self, tick: Tick) -> TranscriptStore {
        TranscriptStore {
            entries: self
                .entries
                .iter()
                .filter(|((t, _), _)| *t < tick)
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TranscriptError {
    #[error("no transcript recorded for agent {agent} at tick {tick}")]
    Missing { tick: Tick, agent: AgentId },
    #[error("transcript for agent {agent} at tick {tick} was recorded with prompt version {recorded:?}, current is {current:?}")]
    PromptVersionMismatch {
        tick: Tick,
        agent: AgentId,
        recorded: String,
        current: String,
    },
}

pub struct LlmVerdict {
    pub decision: Decision,
    pub fault: Option<AdapterFault>,
}

/// Source of decisions for language-model profiles.
pub trait LlmDecider {
    fn decide(&mut self, profile: &AgentProfile, obs: &Observation) -> Result<LlmVerdict, TranscriptError>;
}

fn fallback(profile: &AgentProfile, obs: &Observation, kind: AdapterFaultKind, detail: String, raw: Option<String>) -> LlmVerdict {
    let commodity = obs
        .prices
        .keys()
        .next()
        .cloned()
        .unwrap_or_else(|| CommodityId::new("NONE").expect("static symbol"));
    let reasoning = match kind {
        AdapterFaultKind::AdapterUnavailable => "adapter unavailable".to_string(),
        AdapterFaultKind::ParseFailure => format!("unparseable model response: {detail}"),
    };
    LlmVerdict {
        decision: Decision {
            order: Order::hold(profile.agent_id.clone(), commodity, reasoning),
            post: None,
        },
        fault: Some(AdapterFault {
            agent_id: profile.agent_id.clone(),
            kind,
            detail,
            raw_response: raw,
        }),
    }
}

/// Decider for rosters without language-model agents, or when no adapter
/// is configured at all: every request degrades to HOLD.
pub struct NoLanguageModel;

impl LlmDecider for NoLanguageModel {
    fn decide(&mut self, profile: &AgentProfile, obs: &Observation) -> Result<LlmVerdict, TranscriptError> {
        Ok(fallback(
            profile,
            obs,
            AdapterFaultKind::AdapterUnavailable,
            "no completion client configured".into(),
            None,
        ))
    }
}

/// Record/replay decider over one branch's transcript store.
pub struct TranscriptDecider<'a> {
    store: &'a mut TranscriptStore,
    client: Option<&'a dyn CompletionClient>,
    mode: LlmMode,
    seed: u64,
    prompt_version: &'a str,
    params: GenerationParams,
    recorded: Vec<TranscriptKey>,
}

impl<'a> TranscriptDecider<'a> {
    pub fn new(
        store: &'a mut TranscriptStore,
        client: Option<&'a dyn CompletionClient>,
        mode: LlmMode,
        seed: u64,
        prompt_version: &'a str,
    ) -> Self {
        TranscriptDecider {
            store,
            client,
            mode,
            seed,
            prompt_version,
            params: GenerationParams::default(),
            recorded: Vec::new(),
        }
    }

    /// Keys recorded since the last call.
    pub fn take_recorded(&mut self) -> Vec<TranscriptKey> {
        std::mem::take(&mut self.recorded)
    }
}

impl LlmDecider for TranscriptDecider<'_> {
    fn decide(&mut self, profile: &AgentProfile, obs: &Observation) -> Result<LlmVerdict, TranscriptError> {
        let agent = &profile.agent_id;
        let response = match self.store.get(obs.tick, agent) {
            Some(t) if t.prompt_version != self.prompt_version => {
                return Err(TranscriptError::PromptVersionMismatch {
                    tick: obs.tick,
                    agent: agent.clone(),
                    recorded: t.prompt_version.clone(),
                    current: self.prompt_version.to_string(),
                })
            }
            Some(t) => t.response.clone(),
            None if self.mode == LlmMode::Replay => {
                return Err(TranscriptError::Missing {
                    tick: obs.tick,
                    agent: agent.clone(),
                })
            }
            None => {
                let prompt = build_prompt(profile, obs);
                let response = self
                    .client
                    .and_then(|client| match client.complete(&prompt, &self.params) {
                        Ok(text) => Some(text),
                        Err(err) => {
                            tracing::warn!(agent = %agent, tick = %obs.tick, "{err}");
                            None
                        }
                    });
                self.store.insert(Transcript {
                    format_version: FORMAT_VERSION,
                    seed: self.seed,
                    tick: obs.tick,
                    agent_id: agent.clone(),
                    prompt_version: self.prompt_version.to_string(),
                    prompt,
                    response: response.clone(),
                });
                self.recorded.push((obs.tick, agent.clone()));
                response
            }
        };
        Ok(match response {
            None => fallback(
                profile,
                obs,
                AdapterFaultKind::AdapterUnavailable,
                "no completion client response".into(),
                None,
            ),
            Some(raw) => match parse_response(&raw, profile, obs) {
                Ok(decision) => LlmVerdict { decision, fault: None },
                Err(err) => fallback(profile, obs, AdapterFaultKind::ParseFailure, err.to_string(), Some(raw)),
            },
        })
    }
}

/// Renders the observation as a prompt requesting a structured reply.
pub fn build_prompt(profile: &AgentProfile, obs: &Observation) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "You are {}, a trader in a simulated commodity market.", profile.display_name);
    let _ = writeln!(out, "Tick: {}", obs.tick);
    let prices: Vec<String> = obs.prices.iter().map(|(c, p)| format!("{c}={p}")).collect();
    let _ = writeln!(out, "Prices: {}", prices.join(", "));
    let holdings: Vec<String> = obs.portfolio.holdings.iter().map(|(c, n)| format!("{c}={n}")).collect();
    let _ = writeln!(out, "Your cash: {}; holdings: {}", obs.portfolio.cash, holdings.join(", "));
    let sentiment: Vec<String> = obs.sentiment.iter().map(|(c, s)| format!("{c}={s}")).collect();
    let _ = writeln!(out, "Market sentiment: {}", sentiment.join(", "));
    if obs.events.is_empty() {
        let _ = writeln!(out, "Active events: none");
    } else {
        let _ = writeln!(out, "Active events:");
        for e in &obs.events {
            let impacts: Vec<String> = e.impacts.iter().map(|(c, v)| format!("{c} {v}")).collect();
            let _ = writeln!(out, "- {}: {} (impacts: {})", e.title, e.body, impacts.join(", "));
        }
    }
    if !obs.recent_feed.is_empty() {
        let _ = writeln!(out, "Recent posts:");
        for p in &obs.recent_feed {
            let _ = writeln!(out, "- [tick {}] {}: {}", p.tick, p.author_id, p.title);
        }
    }
    out.push_str(
        "Reply with one JSON object: {\"action\": \"BUY\"|\"SELL\"|\"HOLD\", \"commodity\": <symbol>, \
         \"quantity\": <integer>, \"reasoning\": <text>, \"post\": {\"title\": <text>, \"body\": <text>} or null}\n",
    );
    out
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ParseError {
    #[error("no BUY, SELL or HOLD action found")]
    NoAction,
    #[error("no known commodity named")]
    NoCommodity,
    #[error("no positive quantity given")]
    NoQuantity,
}

struct Parsed {
    side: Side,
    commodity: Option<CommodityId>,
    quantity: Option<u64>,
    reasoning: String,
    post: Option<(String, String)>,
}

fn parse_side(text: &str) -> Option<Side> {
    match text.trim().to_ascii_uppercase().as_str() {
        "BUY" => Some(Side::Buy),
        "SELL" => Some(Side::Sell),
        "HOLD" => Some(Side::Hold),
        _ => None,
    }
}

fn parse_json(raw: &str, obs: &Observation) -> Option<Parsed> {
    let start = raw.find('{')?;
    let end = raw.rfind('}')?;
    let value: Value = serde_json::from_str(raw.get(start..=end)?).ok()?;
    let side = parse_side(value.get("action")?.as_str()?)?;
    let commodity = value
        .get("commodity")
        .and_then(Value::as_str)
        .and_then(|s| CommodityId::new(s.trim().to_ascii_uppercase()).ok())
        .filter(|c| obs.prices.contains_key(c));
    let quantity = value.get("quantity").and_then(|q| {
        q.as_u64()
            .or_else(|| q.as_f64().filter(|f| *f >= 0.0).map(|f| f as u64))
            .or_else(|| q.as_str().and_then(|s| s.trim().parse().ok()))
    });
    let reasoning = value
        .get("reasoning")
        .and_then(Value::as_str)
        .unwrap_or("")
        .to_string();
    let post = value.get("post").and_then(|p| {
        let title = p.get("title")?.as_str()?.trim().to_string();
        let body = p.get("body").and_then(Value::as_str).unwrap_or("").to_string();
        (!title.is_empty()).then_some((title, body))
    });
    Some(Parsed {
        side,
        commodity,
        quantity,
        reasoning,
        post,
    })
}

/// Free-text fallback: the first action word, the first known commodity
/// symbol and the first integer, in any order after the action.
fn parse_text(raw: &str, obs: &Observation) -> Option<Parsed> {
    let words: Vec<&str> = raw
        .split(|ch: char| ch.is_whitespace() || ",.;:()\"'".contains(ch))
        .filter(|w| !w.is_empty())
        .collect();
    let at = words.iter().position(|w| parse_side(w).is_some())?;
    let side = parse_side(words[at])?;
    let rest = &words[at + 1..];
    let commodity = rest
        .iter()
        .filter_map(|w| CommodityId::new(w.to_ascii_uppercase()).ok())
        .find(|c| obs.prices.contains_key(c));
    let quantity = rest.iter().find_map(|w| w.parse::<u64>().ok());
    Some(Parsed {
        side,
        commodity,
        quantity,
        reasoning: raw.trim().to_string(),
        post: None,
    })
}

/// Parses a model reply into a decision, clamping quantities to what the
/// observed portfolio allows.
pub fn parse_response(raw: &str, profile: &AgentProfile, obs: &Observation) -> Result<Decision, ParseError> {
    let parsed = parse_json(raw, obs)
        .or_else(|| parse_text(raw, obs))
        .ok_or(ParseError::NoAction)?;
    let reasoning = if parsed.reasoning.trim().is_empty() {
        raw.trim().to_string()
    } else {
        parsed.reasoning.clone()
    };
    let agent_id = profile.agent_id.clone();
    let order = match parsed.side {
        Side::Hold => {
            let commodity = parsed
                .commodity
                .clone()
                .or_else(|| obs.prices.keys().next().cloned())
                .ok_or(ParseError::NoCommodity)?;
            Order::hold(agent_id, commodity, reasoning)
        }
        side => {
            let commodity = parsed.commodity.clone().ok_or(ParseError::NoCommodity)?;
            let wanted = parsed.quantity.filter(|q| *q > 0).ok_or(ParseError::NoQuantity)?;
            let capacity = match side {
                Side::Buy => obs.affordable(&commodity),
                _ => obs.portfolio.holding(&commodity),
            };
            let quantity = wanted.min(capacity);
            if quantity == 0 {
                Order::hold(agent_id, commodity, format!("HOLD (no capacity for {side}): {reasoning}"))
            } else {
                Order {
                    agent_id,
                    commodity,
                    side,
                    quantity,
                    reasoning,
                }
            }
        }
    };
    let post = parsed.post.map(|(title, body)| {
        let sentiment = match order.side {
            Side::Buy => Fixed::one(),
            Side::Sell => -Fixed::one(),
            Side::Hold => Fixed::ZERO,
        };
        PostDraft {
            title,
            body,
            sentiment,
            referenced_event_ids: obs.events.iter().map(|e| e.event_id.clone()).collect(),
        }
    });
    Ok(Decision { order, post })
}
