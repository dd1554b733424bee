//! Agent roster, observations and decision policies.

mod llm;
mod roster;
mod strategy;

pub use llm::{
    build_prompt, parse_response, CompletionClient, CompletionError, GenerationParams,
    HttpCompletionClient, LlmDecider, LlmMode, LlmVerdict, NoLanguageModel, ParseError,
    Transcript, TranscriptDecider, TranscriptError, TranscriptKey, TranscriptStore,
};
pub use roster::{default_roster, AgentProfile, AgentRoster, InitialPortfolio, RosterError, Strategy, StrategyParams};
pub use strategy::decide;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::engine::MarketConfig;
use crate::fixed::{Fixed, Price};
use crate::model::{CommodityId, EventInstance, Order, Portfolio, Post, Tick, WorldState};

/// What an agent sees at the start of a tick.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Observation {
    pub tick: Tick,
    pub prices: BTreeMap<CommodityId, Price>,
    pub price_history: BTreeMap<CommodityId, Vec<Price>>,
    pub portfolio: Portfolio,
    pub sentiment: BTreeMap<CommodityId, Fixed>,
    pub events: Vec<EventSummary>,
    pub recent_feed: Vec<Post>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventSummary {
    pub event_id: String,
    pub title: String,
    pub body: String,
    pub impacts: BTreeMap<CommodityId, Fixed>,
}

impl Observation {
    /// Builds the view for `portfolio` from the pre-step state only.
    pub fn new(
        state: &WorldState,
        portfolio: &Portfolio,
        sentiment: &BTreeMap<CommodityId, Fixed>,
        active_events: &[EventInstance],
        config: &MarketConfig,
    ) -> Self {
        let now = state.tick.0;
        let mut recent_feed: Vec<Post> = state
            .feed
            .iter()
            .rev()
            .take_while(|p| p.tick.0 + config.feed_window > now)
            .cloned()
            .collect();
        recent_feed.reverse();
        Observation {
            tick: state.tick,
            prices: state.prices.clone(),
            price_history: state.price_history.clone(),
            portfolio: portfolio.clone(),
            sentiment: sentiment.clone(),
            events: active_events
                .iter()
                .map(|inst| EventSummary {
                    event_id: inst.event.event_id.clone(),
                    title: inst.event.title.clone(),
                    body: inst.event.body.clone(),
                    impacts: inst.event.impacts.clone(),
                })
                .collect(),
            recent_feed,
        }
    }

    pub fn sentiment_of(&self, commodity: &CommodityId) -> Fixed {
        self.sentiment.get(commodity).copied().unwrap_or(Fixed::ZERO)
    }

    /// Largest whole number of contracts the agent can buy at the current price.
    pub fn affordable(&self, commodity: &CommodityId) -> u64 {
        match self.prices.get(commodity) {
            Some(price) => {
                let n = self.portfolio.cash.to_decimal() / price.to_decimal();
                n.floor().try_into().unwrap_or(0)
            }
            None => 0,
        }
    }

    /// Titles of the active events, or `None` when nothing is active.
    pub fn event_titles(&self) -> Option<String> {
        if self.events.is_empty() {
            None
        } else {
            Some(self.events.iter().map(|e| e.title.as_str()).collect::<Vec<_>>().join("; "))
        }
    }
}

/// A post before the engine assigns its id and tick.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PostDraft {
    pub title: String,
    pub body: String,
    pub sentiment: Fixed,
    pub referenced_event_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Decision {
    pub order: Order,
    pub post: Option<PostDraft>,
}
