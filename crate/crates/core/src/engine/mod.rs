//! Deterministic tick engine.
//!
//! [`step`] is a pure function of the pre-step state, the roster, the event
//! log, the branch seed and the config. One call runs the fixed pipeline:
//! activate/expire events, compute sentiment, collect decisions, clear the
//! market, update prices, append posts, hash.

mod config;
mod events;
mod market;

pub use config::{ConfigError, MarketConfig};
pub use events::{apply_event_impacts, compute_sentiment};
pub use market::{clear_market, settle, update_prices, Clearing};

use std::collections::BTreeMap;

use crate::agents::{self, AgentRoster, LlmDecider, Observation, Strategy, TranscriptError};
use crate::canonical::{Digest32, FORMAT_VERSION};
use crate::fixed::{Fixed, Price};
use crate::model::{
    CommodityId, EventInstance, MarketMakerBook, Post, Tick, TickRecord, WorldEvent, WorldState,
};
use crate::rng::SeededStream;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum EngineError {
    #[error("invariant violated at tick {tick}: {detail}")]
    InvariantViolation { tick: Tick, detail: String },
    #[error(transparent)]
    Transcript(#[from] TranscriptError),
}

/// Canonical digest of a world state.
pub fn state_hash(state: &WorldState) -> Digest32 {
    Digest32::of_canonical(state)
}

/// Tick-0 state for a roster and a set of opening prices.
pub fn initial_state(prices: &BTreeMap<CommodityId, Price>, roster: &AgentRoster) -> WorldState {
    WorldState {
        tick: Tick::ZERO,
        prices: prices.clone(),
        portfolios: roster
            .profiles()
            .iter()
            .map(|p| (p.agent_id.clone(), p.portfolio()))
            .collect(),
        feed: Vec::new(),
        pending_orders: Vec::new(),
        active_events: Vec::new(),
        price_history: prices.iter().map(|(c, p)| (c.clone(), vec![*p])).collect(),
        market_maker: MarketMakerBook::default(),
    }
}

/// Events from `log` that drive the transition out of `tick`, ordered by
/// `(start_tick, event_id)`.
pub fn events_active_at(log: &[WorldEvent], tick: Tick) -> Vec<EventInstance> {
    let mut active: Vec<EventInstance> = log
        .iter()
        .filter(|e| e.is_active_at(tick))
        .map(|e| EventInstance {
            event: e.clone(),
            elapsed_ticks: tick.0 - e.start_tick.0,
        })
        .collect();
    active.sort_by(|a, b| {
        (a.event.start_tick, &a.event.event_id).cmp(&(b.event.start_tick, &b.event.event_id))
    });
    active
}

/// Everything besides the state that a step reads.
pub struct StepInputs<'a> {
    pub roster: &'a AgentRoster,
    pub events: &'a [WorldEvent],
    pub stream: SeededStream,
    pub config: &'a MarketConfig,
    pub llm: &'a mut dyn LlmDecider,
}

/// Advances `state` by one tick.
pub fn step(state: &WorldState, inputs: &mut StepInputs<'_>) -> Result<(WorldState, TickRecord), EngineError> {
    let now = state.tick;
    let next_tick = now.next();
    let config = inputs.config;

    // 1. activate / expire
    let active = events_active_at(inputs.events, now);
    // 2. sentiment
    let sentiment = compute_sentiment(state.prices.keys(), &active, &state.feed, now, config);

    // 3. decisions
    let mut orders = Vec::with_capacity(inputs.roster.len());
    let mut drafts = Vec::new();
    let mut faults = Vec::new();
    for profile in inputs.roster.profiles() {
        let Some(portfolio) = state.portfolios.get(&profile.agent_id) else {
            return Err(EngineError::InvariantViolation {
                tick: now,
                detail: format!("no portfolio for agent {}", profile.agent_id),
            });
        };
        let obs = Observation::new(state, portfolio, &sentiment, &active, config);
        let decision = if profile.strategy == Strategy::Llm {
            let verdict = inputs.llm.decide(profile, &obs)?;
            faults.extend(verdict.fault);
            verdict.decision
        } else {
            let mut rng = inputs.stream.substream(now, &profile.agent_id);
            agents::decide(profile, &obs, &mut rng)
        };
        orders.push(decision.order);
        if let Some(draft) = decision.post {
            drafts.push((profile.agent_id.clone(), draft));
        }
    }

    // 4. clearing
    let clearing = clear_market(next_tick, &orders, &state.portfolios, &state.prices);
    let mut portfolios = state.portfolios.clone();
    let mut market_maker = state.market_maker.clone();
    settle(&clearing.trades, &mut portfolios, &mut market_maker);

    // 5. prices
    let drift = apply_event_impacts(&state.prices, &active, config);
    let prices = update_prices(&state.prices, &clearing.net_demand, &drift, config);
    let keep = config.history_window as usize;
    let price_history = state
        .price_history
        .iter()
        .map(|(c, history)| {
            let mut h = history.clone();
            h.push(prices[c]);
            if h.len() > keep {
                h.drain(..h.len() - keep);
            }
            (c.clone(), h)
        })
        .collect();

    // 6. feed
    let posts: Vec<Post> = drafts
        .into_iter()
        .map(|(author, draft)| Post {
            post_id: format!("P{}-{}", next_tick.0, author),
            tick: next_tick,
            author_id: author,
            title: draft.title,
            body: draft.body,
            sentiment: draft.sentiment.clamp(-Fixed::one(), Fixed::one()),
            referenced_event_ids: draft.referenced_event_ids,
        })
        .collect();
    let mut feed = state.feed.clone();
    feed.extend(posts.iter().cloned());

    let next = WorldState {
        tick: next_tick,
        prices,
        portfolios,
        feed,
        pending_orders: Vec::new(),
        active_events: active,
        price_history,
        market_maker,
    };
    check_invariants(state, &next)?;

    // 7. hash
    let hash = state_hash(&next);
    let record = TickRecord {
        format_version: FORMAT_VERSION,
        tick: next_tick,
        prices: next.prices.clone(),
        trade_count: clearing.trades.len() as u64,
        post_count: posts.len() as u64,
        trades: clearing.trades,
        posts,
        active_event_ids: next.active_events.iter().map(|e| e.event.event_id.clone()).collect(),
        rejected_orders: clearing.rejected,
        adapter_faults: faults,
        state_hash: hash,
    };
    Ok((next, record))
}

fn check_invariants(prev: &WorldState, next: &WorldState) -> Result<(), EngineError> {
    let fail = |detail: String| {
        Err(EngineError::InvariantViolation {
            tick: next.tick,
            detail,
        })
    };
    for portfolio in next.portfolios.values() {
        if portfolio.cash.is_negative() {
            return fail(format!("agent {} overdrawn", portfolio.agent_id));
        }
        if let Some(c) = portfolio.holdings.keys().find(|c| !next.prices.contains_key(*c)) {
            return fail(format!("agent {} holds unknown commodity {c}", portfolio.agent_id));
        }
    }
    if next
        .feed
        .windows(2)
        .any(|w| (w[0].tick, &w[0].post_id) >= (w[1].tick, &w[1].post_id))
    {
        return fail("feed not ordered by (tick, post_id)".into());
    }
    if let Some(inst) = next.active_events.iter().find(|e| !e.event.is_active_at(prev.tick)) {
        return fail(format!("event {} outside its window", inst.event.event_id));
    }
    for commodity in next.prices.keys() {
        let held = |s: &WorldState| -> i128 {
            s.portfolios.values().map(|p| p.holding(commodity) as i128).sum::<i128>()
                + s.market_maker.inventory.get(commodity).copied().unwrap_or(0) as i128
        };
        if held(prev) != held(next) {
            return fail(format!("{commodity} contracts not conserved"));
        }
    }
    let cash = |s: &WorldState| -> Fixed { s.portfolios.values().map(|p| p.cash).sum::<Fixed>() + s.market_maker.cash };
    if cash(prev) != cash(next) {
        return fail("cash not conserved".into());
    }
    Ok(())
}
