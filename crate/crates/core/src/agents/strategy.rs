use rust_decimal::Decimal;

use super::{AgentProfile, Decision, Observation, PostDraft, Strategy};
use crate::fixed::Fixed;
use crate::model::{CommodityId, Order, Side};
use crate::rng::Substream;

/// A candidate trade signal: positive strength means buy.
struct Signal {
    commodity: CommodityId,
    strength: Decimal,
    why: String,
}

fn pct(x: Decimal) -> String {
    format!("{:+}%", (x * Decimal::ONE_HUNDRED).round_dp(2))
}

/// Return over the lookback window, using the oldest available price when
/// the history is shorter than the window.
fn lookback_return(obs: &Observation, commodity: &CommodityId, lookback: u64) -> Option<Decimal> {
    let history = obs.price_history.get(commodity)?;
    if history.len() < 2 {
        return None;
    }
    let last = history.len() - 1;
    let base = history[last.saturating_sub(lookback as usize)];
    Some(history[last].to_decimal() / base.to_decimal() - Decimal::ONE)
}

/// Strongest signal whose magnitude exceeds the threshold; ties keep the
/// first commodity in symbol order.
fn strongest(signals: Vec<Signal>, threshold: Decimal) -> Option<Signal> {
    signals
        .into_iter()
        .filter(|s| s.strength.abs() > threshold)
        .fold(None, |best: Option<Signal>, s| match best {
            Some(b) if b.strength.abs() >= s.strength.abs() => Some(b),
            _ => Some(s),
        })
}

fn signals(profile: &AgentProfile, obs: &Observation, rng: &mut Substream) -> Option<Signal> {
    let params = &profile.params;
    let threshold = params.threshold.unwrap_or(Fixed::ZERO).to_decimal();
    match profile.strategy {
        Strategy::Momentum | Strategy::Contrarian => {
            let lookback = params.lookback.unwrap_or(1);
            let contrarian = profile.strategy == Strategy::Contrarian;
            let all = obs
                .prices
                .keys()
                .filter_map(|c| {
                    let ret = lookback_return(obs, c, lookback)?;
                    let why = if contrarian {
                        format!("fading a {} {lookback}-tick move (threshold {})", pct(ret), pct(threshold))
                    } else {
                        format!("{lookback}-tick return {} beyond momentum threshold {}", pct(ret), pct(threshold))
                    };
                    Some(Signal {
                        commodity: c.clone(),
                        strength: if contrarian { -ret } else { ret },
                        why,
                    })
                })
                .collect();
            strongest(all, threshold)
        }
        Strategy::Fundamentalist => {
            let all = params
                .anchors
                .iter()
                .filter_map(|(c, anchor)| {
                    let price = obs.prices.get(c)?;
                    let gap = (anchor.to_decimal() - price.to_decimal()) / anchor.to_decimal();
                    let relation = if gap.is_sign_positive() { "below" } else { "above" };
                    Some(Signal {
                        commodity: c.clone(),
                        strength: gap,
                        why: format!(
                            "price {price} is {} {relation} anchor {anchor}",
                            pct(gap.abs())
                        ),
                    })
                })
                .collect();
            strongest(all, threshold)
        }
        Strategy::EventFollower => {
            let all = obs
                .prices
                .keys()
                .map(|c| {
                    let s = obs.sentiment_of(c).to_decimal();
                    Signal {
                        commodity: c.clone(),
                        strength: s,
                        why: format!("sentiment {s} past threshold ±{threshold}"),
                    }
                })
                .collect();
            strongest(all, threshold)
        }
        Strategy::Noise => {
            let probability = params.trade_probability.unwrap_or(Fixed::ZERO);
            if !rng.chance(probability) || obs.prices.is_empty() {
                return None;
            }
            let commodity = obs.prices.keys().nth(rng.pick(obs.prices.len()))?.clone();
            let buy = rng.pick(2) == 0;
            Some(Signal {
                commodity,
                strength: if buy { Decimal::ONE } else { Decimal::NEGATIVE_ONE },
                why: "discretionary noise trade".into(),
            })
        }
        Strategy::Llm => None,
    }
}

fn with_events(obs: &Observation, text: String) -> String {
    match obs.event_titles() {
        Some(titles) => format!("{text}; active events: {titles}"),
        None => format!("{text}; no active events"),
    }
}

/// Sizes an order as `ceil(aggressiveness · capacity)`; `None` when there is
/// no capacity on that side.
fn sized(obs: &Observation, commodity: &CommodityId, side: Side, aggressiveness: Fixed) -> Option<u64> {
    let capacity = match side {
        Side::Buy => obs.affordable(commodity),
        Side::Sell => obs.portfolio.holding(commodity),
        Side::Hold => 0,
    };
    if capacity == 0 {
        return None;
    }
    let qty = (aggressiveness.to_decimal() * Decimal::from(capacity)).ceil();
    let qty: u64 = qty.try_into().unwrap_or(capacity);
    Some(qty.clamp(1, capacity))
}

/// Picks a post for the commodity the agent feels most strongly about, with
/// probability `post_propensity · |sentiment|`.
fn maybe_post(profile: &AgentProfile, obs: &Observation, order: &Order, rng: &mut Substream) -> Option<PostDraft> {
    let (commodity, sentiment) = obs
        .sentiment
        .iter()
        .fold(None, |best: Option<(&CommodityId, Fixed)>, (c, s)| match best {
            Some((_, b)) if b.abs() >= s.abs() => best,
            _ => Some((c, *s)),
        })?;
    let probability = Fixed::from_decimal(profile.params.post_propensity.to_decimal() * sentiment.abs().to_decimal());
    let fires = rng.chance(probability);
    let referenced: Vec<&super::EventSummary> = obs
        .events
        .iter()
        .filter(|e| e.impacts.get(commodity).is_some_and(|v| !v.is_zero()))
        .collect();
    if !fires || referenced.is_empty() || sentiment.is_zero() {
        return None;
    }
    let view_up = if &order.commodity == commodity && order.side != Side::Hold {
        order.side == Side::Buy
    } else {
        sentiment.is_positive()
    };
    let (mood, sign) = if view_up { ("Bullish", 1) } else { ("Bearish", -1) };
    let action = match (&order.commodity == commodity, order.side) {
        (true, Side::Buy) => "buying",
        (true, Side::Sell) => "selling",
        _ => "watching",
    };
    Some(PostDraft {
        title: format!("{mood} on {commodity}: {}", referenced[0].title),
        body: format!(
            "{} ({} trader) is {action} {commodity}; market sentiment {sentiment}.",
            profile.display_name, profile.strategy
        ),
        sentiment: Fixed::from_int(sign),
        referenced_event_ids: referenced.iter().map(|e| e.event_id.clone()).collect(),
    })
}

/// Deterministic policy decision for non-language-model strategies.
///
/// Language-model profiles are routed through [`super::LlmDecider`] by the
/// engine; called directly they hold.
pub fn decide(profile: &AgentProfile, obs: &Observation, rng: &mut Substream) -> Decision {
    let agent_id = profile.agent_id.clone();
    let fallback_commodity = obs
        .prices
        .keys()
        .next()
        .cloned()
        .unwrap_or_else(|| CommodityId::new("NONE").expect("static symbol"));

    let order = match signals(profile, obs, rng) {
        Some(signal) => {
            let side = if signal.strength.is_sign_positive() { Side::Buy } else { Side::Sell };
            match sized(obs, &signal.commodity, side, profile.params.aggressiveness) {
                Some(quantity) => Order {
                    agent_id,
                    commodity: signal.commodity.clone(),
                    side,
                    quantity,
                    reasoning: with_events(obs, format!("{side} {}: {}", signal.commodity, signal.why)),
                },
                None => Order::hold(
                    agent_id,
                    signal.commodity.clone(),
                    with_events(
                        obs,
                        format!("HOLD {}: wanted to {side} ({}) but lacks capacity", signal.commodity, signal.why),
                    ),
                ),
            }
        }
        None if profile.strategy == Strategy::Llm => {
            Order::hold(agent_id, fallback_commodity, "HOLD: adapter unavailable")
        }
        None => Order::hold(
            agent_id,
            fallback_commodity,
            with_events(obs, "HOLD: no signal beyond thresholds".into()),
        ),
    };
    let post = maybe_post(profile, obs, &order, rng);
    Decision { order, post }
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use super::*;
    use crate::agents::{default_roster, EventSummary};
    use crate::fixed::Price;
    use crate::model::{AgentId, Tick};
    use crate::rng::SeededStream;

    fn c(s: &str) -> CommodityId {
        CommodityId::new(s).unwrap()
    }

    fn px(s: &str) -> Price {
        Price::new(s.parse().unwrap()).unwrap()
    }

    fn profile(id: &str) -> AgentProfile {
        default_roster()
            .profiles()
            .iter()
            .find(|p| p.agent_id.as_str() == id)
            .unwrap()
            .clone()
    }

    fn observation(p: &AgentProfile, oil_history: &[&str]) -> Observation {
        let history: Vec<Price> = oil_history.iter().map(|s| px(s)).collect();
        Observation {
            tick: Tick(7),
            prices: [(c("OIL"), *history.last().unwrap()), (c("GOLD"), px("1900")), (c("WHEAT"), px("6.5"))].into(),
            price_history: [
                (c("OIL"), history),
                (c("GOLD"), vec![px("1900"); 3]),
                (c("WHEAT"), vec![px("6.5"); 3]),
            ]
            .into(),
            portfolio: p.portfolio(),
            sentiment: BTreeMap::new(),
            events: Vec::new(),
            recent_feed: Vec::new(),
        }
    }

    fn rng(agent: &str) -> Substream {
        SeededStream::new(42).substream(Tick(7), &AgentId::new(agent).unwrap())
    }

    #[test]
    fn event_follower_buys_on_positive_sentiment() {
        let p = profile("evt-01");
        let mut obs = observation(&p, &["80", "80"]);
        obs.sentiment = [(c("OIL"), "0.8".parse().unwrap()), (c("GOLD"), Fixed::ZERO), (c("WHEAT"), Fixed::ZERO)].into();
        obs.events.push(EventSummary {
            event_id: "pipeline".into(),
            title: "Major Oil Pipeline Explosion in Middle East".into(),
            body: String::new(),
            impacts: [(c("OIL"), "0.5".parse().unwrap())].into(),
        });
        let d = decide(&p, &obs, &mut rng("evt-01"));
        assert_eq!(d.order.side, Side::Buy);
        assert_eq!(d.order.commodity, c("OIL"));
        assert!(d.order.quantity > 0);
        assert!(d.order.reasoning.contains("Major Oil Pipeline Explosion in Middle East"));
    }

    #[test]
    fn momentum_holds_on_flat_history() {
        let p = profile("mom-01");
        let obs = observation(&p, &["80", "80", "80", "80", "80", "80"]);
        let d = decide(&p, &obs, &mut rng("mom-01"));
        assert_eq!(d.order.side, Side::Hold);
        assert_eq!(d.order.quantity, 0);
    }

    #[test]
    fn momentum_and_contrarian_disagree_on_a_rally() {
        let rally = ["80", "81", "82", "83", "84", "86"];
        let m = profile("mom-01");
        let k = profile("con-01");
        let dm = decide(&m, &observation(&m, &rally), &mut rng("mom-01"));
        let dk = decide(&k, &observation(&k, &rally), &mut rng("con-01"));
        assert_eq!((dm.order.side, dk.order.side), (Side::Buy, Side::Sell));
        assert_eq!(dm.order.commodity, c("OIL"));
    }

    #[test]
    fn fundamentalist_buys_below_anchor() {
        let p = profile("fun-01");
        let d = decide(&p, &observation(&p, &["70"]), &mut rng("fun-01"));
        assert_eq!((d.order.side, d.order.commodity.as_str()), (Side::Buy, "OIL"));
        assert!(d.order.reasoning.contains("below anchor"));
    }

    #[test]
    fn quantity_is_ceil_of_aggressiveness_times_capacity() {
        let p = profile("fun-01");
        let obs = observation(&p, &["70"]);
        let d = decide(&p, &obs, &mut rng("fun-01"));
        let affordable = obs.affordable(&c("OIL"));
        let expected = (p.params.aggressiveness.to_decimal() * Decimal::from(affordable)).ceil();
        assert_eq!(Decimal::from(d.order.quantity), expected);
    }

    #[test]
    fn noise_decision_replays_from_substream() {
        let p = profile("noi-01");
        let obs = observation(&p, &["80", "80"]);
        let first: Vec<Decision> = (0..5).map(|_| decide(&p, &obs, &mut rng("noi-01"))).collect();
        assert!(first.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn no_capacity_degrades_to_hold() {
        let mut p = profile("fun-01");
        p.initial_portfolio.cash = Fixed::ZERO;
        let d = decide(&p, &observation(&p, &["70"]), &mut rng("fun-01"));
        assert_eq!(d.order.side, Side::Hold);
        assert!(d.order.reasoning.contains("lacks capacity"));
    }
}
