//! Domain types shared by the engine, the agents and the branch store.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Deserializer, Serialize};

use crate::canonical::{Digest32, FORMAT_VERSION};
use crate::fixed::{Fixed, Price};

/// Discrete simulation time. Tick 0 is the initial state.
#[derive(Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Tick(pub u64);

impl Tick {
    pub const ZERO: Tick = Tick(0);

    pub fn value(self) -> u64 {
        self.0
    }

    pub fn next(self) -> Tick {
        Tick(self.0 + 1)
    }

    pub fn saturating_sub(self, n: u64) -> Tick {
        Tick(self.0.saturating_sub(n))
    }
}

impl fmt::Display for Tick {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

impl fmt::Debug for Tick {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "t{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum IdError {
    #[error("commodity symbol {0:?} must be 1-12 characters of A-Z, 0-9 or '_'")]
    BadCommodity(String),
    #[error("agent id {0:?} must be 1-64 characters of A-Z, a-z, 0-9, '_', '-' or '.' and not the market maker id")]
    BadAgent(String),
}

/// Commodity symbol such as `OIL`.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(transparent)]
pub struct CommodityId(String);

impl CommodityId {
    pub fn new(symbol: impl Into<String>) -> Result<Self, IdError> {
        let symbol = symbol.into();
        let ok = !symbol.is_empty()
            && symbol.len() <= 12
            && symbol
                .bytes()
                .all(|b| b.is_ascii_uppercase() || b.is_ascii_digit() || b == b'_');
        if ok {
            Ok(CommodityId(symbol))
        } else {
            Err(IdError::BadCommodity(symbol))
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for CommodityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl fmt::Debug for CommodityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl<'de> Deserialize<'de> for CommodityId {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        CommodityId::new(String::deserialize(deserializer)?).map_err(serde::de::Error::custom)
    }
}

/// Identifier for a trading agent, or the market-maker counterparty.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AgentId(String);

impl AgentId {
    pub const MARKET_MAKER: &'static str = "MARKET_MAKER";

    pub fn new(id: impl Into<String>) -> Result<Self, IdError> {
        let id = id.into();
        let ok = !id.is_empty()
            && id.len() <= 64
            && id.bytes().all(|b| b.is_ascii_alphanumeric() || b"_-.".contains(&b))
            && !id.starts_with('.');
        if !ok || id == Self::MARKET_MAKER {
            Err(IdError::BadAgent(id))
        } else {
            Ok(AgentId(id))
        }
    }

    pub fn market_maker() -> Self {
        AgentId(Self::MARKET_MAKER.to_string())
    }

    pub fn is_market_maker(&self) -> bool {
        self.0 == Self::MARKET_MAKER
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for AgentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl fmt::Debug for AgentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum EventError {
    #[error("event id must be nonempty")]
    EmptyId,
    #[error("event {0} has no impacts")]
    NoImpacts(String),
    #[error("event {event}: impact {value} on {commodity} outside [-1, 1]")]
    ImpactOutOfRange {
        event: String,
        commodity: CommodityId,
        value: Fixed,
    },
    #[error("event {0}: duration_ticks and half_life_ticks must be at least 1")]
    BadWindow(String),
    #[error("event {event}: unknown commodity {commodity}")]
    UnknownCommodity { event: String, commodity: CommodityId },
}

/// An injectable external event.
///
/// The event drives the transitions out of ticks `t` with
/// `start_tick <= t < start_tick + duration_ticks`; its elapsed age during
/// such a transition is `t - start_tick`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorldEvent {
    pub event_id: String,
    pub title: String,
    #[serde(default)]
    pub body: String,
    pub impacts: BTreeMap<CommodityId, Fixed>,
    pub start_tick: Tick,
    pub duration_ticks: u64,
    pub half_life_ticks: u64,
}

impl WorldEvent {
    pub fn validate(&self) -> Result<(), EventError> {
        if self.event_id.trim().is_empty() {
            return Err(EventError::EmptyId);
        }
        if self.impacts.is_empty() {
            return Err(EventError::NoImpacts(self.event_id.clone()));
        }
        let one = Fixed::one();
        for (commodity, value) in &self.impacts {
            if value.abs() > one {
                return Err(EventError::ImpactOutOfRange {
                    event: self.event_id.clone(),
                    commodity: commodity.clone(),
                    value: *value,
                });
            }
        }
        if self.duration_ticks == 0 || self.half_life_ticks == 0 {
            return Err(EventError::BadWindow(self.event_id.clone()));
        }
        Ok(())
    }

    pub fn is_active_at(&self, tick: Tick) -> bool {
        tick >= self.start_tick && tick.0 < self.start_tick.0.saturating_add(self.duration_ticks)
    }

    pub fn impact_on(&self, commodity: &CommodityId) -> Fixed {
        self.impacts.get(commodity).copied().unwrap_or(Fixed::ZERO)
    }
}

/// A world event together with its age at the transition it drove.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventInstance {
    pub event: WorldEvent,
    pub elapsed_ticks: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Side {
    Buy,
    Sell,
    Hold,
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Side::Buy => "BUY",
            Side::Sell => "SELL",
            Side::Hold => "HOLD",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Order {
    pub agent_id: AgentId,
    pub commodity: CommodityId,
    pub side: Side,
    pub quantity: u64,
    pub reasoning: String,
}

impl Order {
    pub fn hold(agent_id: AgentId, commodity: CommodityId, reasoning: impl Into<String>) -> Self {
        Order {
            agent_id,
            commodity,
            side: Side::Hold,
            quantity: 0,
            reasoning: reasoning.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trade {
    pub trade_id: String,
    pub tick: Tick,
    pub commodity: CommodityId,
    pub buyer_id: AgentId,
    pub seller_id: AgentId,
    pub price: Price,
    pub quantity: u64,
    pub buyer_reasoning: String,
    pub seller_reasoning: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Post {
    pub post_id: String,
    pub tick: Tick,
    pub author_id: AgentId,
    pub title: String,
    pub body: String,
    pub sentiment: Fixed,
    pub referenced_event_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Portfolio {
    pub agent_id: AgentId,
    pub cash: Fixed,
    pub holdings: BTreeMap<CommodityId, u64>,
}

impl Portfolio {
    pub fn holding(&self, commodity: &CommodityId) -> u64 {
        self.holdings.get(commodity).copied().unwrap_or(0)
    }
}

/// Signed position of the residual counterparty.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MarketMakerBook {
    pub cash: Fixed,
    pub inventory: BTreeMap<CommodityId, i64>,
}

/// Complete simulation state at a tick.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorldState {
    pub tick: Tick,
    pub prices: BTreeMap<CommodityId, Price>,
    pub portfolios: BTreeMap<AgentId, Portfolio>,
    /// Ordered by `(tick, post_id)`.
    pub feed: Vec<Post>,
    pub pending_orders: Vec<Order>,
    /// Events that drove the transition into this tick.
    pub active_events: Vec<EventInstance>,
    /// Most recent prices per commodity, oldest first, ending with the current price.
    pub price_history: BTreeMap<CommodityId, Vec<Price>>,
    pub market_maker: MarketMakerBook,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RejectedOrder {
    pub order: Order,
    pub reason: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum AdapterFaultKind {
    AdapterUnavailable,
    ParseFailure,
}

/// A language-model decision that degraded to HOLD.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdapterFault {
    pub agent_id: AgentId,
    pub kind: AdapterFaultKind,
    pub detail: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_response: Option<String>,
}

/// Per-tick ledger used by timelines and comparisons.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TickRecord {
    pub format_version: u32,
    pub tick: Tick,
    pub prices: BTreeMap<CommodityId, Price>,
    pub trades: Vec<Trade>,
    pub posts: Vec<Post>,
    pub active_event_ids: Vec<String>,
    pub post_count: u64,
    pub trade_count: u64,
    #[serde(default)]
    pub rejected_orders: Vec<RejectedOrder>,
    #[serde(default)]
    pub adapter_faults: Vec<AdapterFault>,
    pub state_hash: Digest32,
}

impl TickRecord {
    /// The record describing an initial state: no activity, only prices.
    pub fn initial(state: &WorldState, state_hash: Digest32) -> Self {
        TickRecord {
            format_version: FORMAT_VERSION,
            tick: state.tick,
            prices: state.prices.clone(),
            trades: Vec::new(),
            posts: Vec::new(),
            active_event_ids: state.active_events.iter().map(|e| e.event.event_id.clone()).collect(),
            post_count: 0,
            trade_count: 0,
            rejected_orders: Vec::new(),
            adapter_faults: Vec::new(),
            state_hash,
        }
    }

    pub fn price(&self, commodity: &CommodityId) -> Option<Price> {
        self.prices.get(commodity).copied()
    }
}
