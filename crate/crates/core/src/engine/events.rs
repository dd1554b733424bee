use std::collections::BTreeMap;

use rust_decimal::Decimal;

use crate::engine::MarketConfig;
use crate::fixed::{half_life_decay, Fixed};
use crate::model::{CommodityId, EventInstance, Post, Tick};

/// Decayed impact sum per commodity, before scaling by `event_gain`.
fn decayed_impacts<'a>(
    commodities: impl Iterator<Item = &'a CommodityId>,
    active_events: &[EventInstance],
) -> BTreeMap<CommodityId, Decimal> {
    commodities
        .map(|c| {
            let total = active_events
                .iter()
                .map(|inst| {
                    inst.event.impact_on(c).to_decimal()
                        * half_life_decay(inst.elapsed_ticks, inst.event.half_life_ticks)
                })
                .sum();
            (c.clone(), total)
        })
        .collect()
}

/// Per-commodity multiplicative drift contributed by the active events:
/// `Σ impact · event_gain · 2^(-elapsed / half_life)`.
pub fn apply_event_impacts<V>(
    prices: &BTreeMap<CommodityId, V>,
    active_events: &[EventInstance],
    config: &MarketConfig,
) -> BTreeMap<CommodityId, Decimal> {
    let gain = config.event_gain.to_decimal();
    decayed_impacts(prices.keys(), active_events)
        .into_iter()
        .map(|(c, sum)| (c, sum * gain))
        .collect()
}

/// Blends the event term with recent feed mood.
///
/// `event_term(c)` is the decayed impact sum (drift normalized by the gain);
/// `feed_term(c)` is the mean sentiment of posts from the last `feed_window`
/// ticks that reference an active event touching `c`.
pub fn compute_sentiment<'a>(
    commodities: impl IntoIterator<Item = &'a CommodityId>,
    active_events: &[EventInstance],
    feed: &[Post],
    now: Tick,
    config: &MarketConfig,
) -> BTreeMap<CommodityId, Fixed> {
    let beta = config.contagion.to_decimal();
    // Feed is ordered by tick; keep posts with tick in (now - feed_window, now].
    let recent: Vec<&Post> = feed
        .iter()
        .rev()
        .take_while(|p| p.tick.0 + config.feed_window > now.0)
        .collect();
    let commodities: Vec<&CommodityId> = commodities.into_iter().collect();
    let event_terms = decayed_impacts(commodities.iter().copied(), active_events);
    let one = Decimal::ONE;

    commodities
        .into_iter()
        .map(|c| {
            let touching: Vec<&str> = active_events
                .iter()
                .filter(|inst| !inst.event.impact_on(c).is_zero())
                .map(|inst| inst.event.event_id.as_str())
                .collect();
            let relevant: Vec<Decimal> = recent
                .iter()
                .filter(|p| p.referenced_event_ids.iter().any(|id| touching.contains(&id.as_str())))
                .map(|p| p.sentiment.to_decimal())
                .collect();
            let feed_term = if relevant.is_empty() {
                Decimal::ZERO
            } else {
                relevant.iter().sum::<Decimal>() / Decimal::from(relevant.len())
            };
            let event_term = event_terms[c];
            let blended = (one - beta) * event_term + beta * feed_term;
            (c.clone(), Fixed::from_decimal(blended.clamp(-one, one)))
        })
        .collect()
}
