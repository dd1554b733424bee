use std::collections::BTreeMap;

use proptest::prelude::*;
use rust_decimal::Decimal;

use timefork_core::agents::default_roster;
use timefork_core::branchstore::{BranchStore, LlmSettings};
use timefork_core::engine::{clear_market, settle, state_hash};
use timefork_core::scenario::ScenarioConfig;
use timefork_core::{
    AgentId, CommodityId, Fixed, MarketMakerBook, Order, Portfolio, Price, Side, Tick, WorldEvent, WorldState,
};

fn c(s: &str) -> CommodityId {
    CommodityId::new(s).unwrap()
}

fn store(seed: u64) -> (BranchStore, timefork_core::branchstore::BranchId) {
    let scenario = ScenarioConfig::default14(seed).resolve().unwrap();
    BranchStore::create("sim1", scenario, None, LlmSettings::default()).unwrap()
}

fn event(id: &str, commodity: &str, impact: i64, start: u64, duration: u64, half_life: u64) -> WorldEvent {
    WorldEvent {
        event_id: id.into(),
        title: format!("event {id}"),
        body: String::new(),
        impacts: [(c(commodity), Fixed::from_decimal(Decimal::new(impact, 2)))].into(),
        start_tick: Tick(start),
        duration_ticks: duration,
        half_life_ticks: half_life,
    }
}

/// Sums cash and holdings across agents plus the market maker's book.
fn totals(state: &WorldState) -> (Decimal, BTreeMap<CommodityId, i128>) {
    let mut cash = state.market_maker.cash.to_decimal();
    let mut held: BTreeMap<CommodityId, i128> = BTreeMap::new();
    for p in state.portfolios.values() {
        cash += p.cash.to_decimal();
        for (k, q) in &p.holdings {
            *held.entry(k.clone()).or_default() += *q as i128;
        }
    }
    for (k, q) in &state.market_maker.inventory {
        *held.entry(k.clone()).or_default() += *q as i128;
    }
    held.retain(|_, v| *v != 0);
    (cash, held)
}

fn arb_event() -> impl Strategy<Value = (String, i64, u64, u64, u64)> {
    (
        prop::sample::select(vec!["OIL", "GOLD", "WHEAT"]).prop_map(str::to_string),
        -100i64..=100,
        0u64..15,
        1u64..12,
        1u64..8,
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn trajectories_conserve_cash_and_contracts(seed in any::<u64>(), events in prop::collection::vec(arb_event(), 0..4)) {
        let (s, root) = store(seed);
        for (i, (commodity, impact, start, dur, hl)) in events.iter().enumerate() {
            s.inject(&root, event(&format!("e{i}"), commodity, *impact, *start, *dur, *hl), false, None).unwrap();
        }
        let initial = totals(&s.head_state(&root).unwrap());
        for _ in 0..20 {
            s.advance(&root, 1).unwrap();
            let state = s.head_state(&root).unwrap();
            prop_assert_eq!(&totals(&state), &initial);
            for p in state.portfolios.values() {
                prop_assert!(!p.cash.is_negative());
            }
            for price in state.prices.values() {
                prop_assert!(price.value().is_positive());
            }
        }
    }

    #[test]
    fn same_inputs_same_hashes(seed in any::<u64>(), events in prop::collection::vec(arb_event(), 0..3)) {
        let run = || {
            let (s, root) = store(seed);
            for (i, (commodity, impact, start, dur, hl)) in events.iter().enumerate() {
                s.inject(&root, event(&format!("e{i}"), commodity, *impact, *start, *dur, *hl), false, None).unwrap();
            }
            s.advance(&root, 15).unwrap();
            s.prefix_history(&root, Tick(0), Tick(15)).unwrap()
        };
        prop_assert_eq!(run(), run());
    }

    #[test]
    fn state_round_trips_through_json(seed in any::<u64>(), ticks in 0u64..12) {
        let (s, root) = store(seed);
        if ticks > 0 {
            s.advance(&root, ticks).unwrap();
        }
        let state = s.head_state(&root).unwrap();
        let text = serde_json::to_string(&state).unwrap();
        let back: WorldState = serde_json::from_str(&text).unwrap();
        prop_assert_eq!(state_hash(&back), state_hash(&state));
        prop_assert_eq!(back, state);
    }

    /// An event starting at `s` can't influence anything at or before `s`.
    #[test]
    fn no_lookahead(seed in any::<u64>(), start in 1u64..12, impact in prop::sample::select(vec![-90i64, -40, 40, 90])) {
        let (s, root) = store(seed);
        s.advance(&root, start).unwrap();
        let plain = s.fork(&root, Tick(start), None).unwrap().branch_id;
        let shocked = s.fork(&root, Tick(start), None).unwrap().branch_id;
        s.inject(&shocked, event("shock", "OIL", impact, start, 10, 5), false, None).unwrap();
        s.advance(&plain, 6).unwrap();
        s.advance(&shocked, 6).unwrap();
        let a = s.prefix_history(&plain, Tick(0), Tick(start + 6)).unwrap();
        let b = s.prefix_history(&shocked, Tick(0), Tick(start + 6)).unwrap();
        for t in 0..=start as usize {
            prop_assert_eq!(&a[t], &b[t]);
        }
        prop_assert_ne!(a[start as usize + 1].state_hash, b[start as usize + 1].state_hash);
    }

    #[test]
    fn clearing_rounds_conserve(
        orders in prop::collection::vec((0usize..14, 0usize..3, 0u8..3, 0u64..400), 0..40),
        price_cents in prop::collection::vec(1i64..500_000, 3),
    ) {
        let roster = default_roster();
        let mut portfolios: BTreeMap<AgentId, Portfolio> =
            roster.profiles().iter().map(|p| (p.agent_id.clone(), p.portfolio())).collect();
        let names = ["GOLD", "OIL", "WHEAT"];
        let prices: BTreeMap<CommodityId, Price> = names
            .iter()
            .zip(&price_cents)
            .map(|(n, p)| (c(n), Price::new(Fixed::from_decimal(Decimal::new(*p, 2))).unwrap()))
            .collect();
        let ids: Vec<AgentId> = portfolios.keys().cloned().collect();
        let orders: Vec<Order> = orders
            .into_iter()
            .map(|(a, k, side, qty)| Order {
                agent_id: ids[a].clone(),
                commodity: c(names[k]),
                side: [Side::Buy, Side::Sell, Side::Hold][side as usize],
                quantity: qty,
                reasoning: String::new(),
            })
            .collect();
        let mut mm = MarketMakerBook::default();
        let before_cash: Decimal = portfolios.values().map(|p| p.cash.to_decimal()).sum();
        let before_held: BTreeMap<&str, i128> = names
            .iter()
            .map(|n| (*n, portfolios.values().map(|p| p.holding(&c(n)) as i128).sum()))
            .collect();

        let clearing = clear_market(Tick(1), &orders, &portfolios, &prices);
        settle(&clearing.trades, &mut portfolios, &mut mm);

        let after_cash: Decimal = portfolios.values().map(|p| p.cash.to_decimal()).sum::<Decimal>() + mm.cash.to_decimal();
        prop_assert_eq!(after_cash, before_cash);
        for n in names {
            let agents: i128 = portfolios.values().map(|p| p.holding(&c(n)) as i128).sum();
            let mm_inv = mm.inventory.get(&c(n)).copied().unwrap_or(0) as i128;
            prop_assert_eq!(agents + mm_inv, before_held[n]);
            prop_assert_eq!(clearing.net_demand[&c(n)] as i128, -mm_inv);
        }
        for p in portfolios.values() {
            prop_assert!(!p.cash.is_negative());
        }
    }
}
