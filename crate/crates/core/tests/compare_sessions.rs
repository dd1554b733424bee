use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rust_decimal::Decimal;

use timefork_core::branchstore::{BranchId, BranchStore, LlmSettings};
use timefork_core::compare::{commodity_divergence, common_ancestor, ControlAction, Pane, PaneState, Session};
use timefork_core::scenario::ScenarioConfig;
use timefork_core::{CommodityId, Digest32, Fixed, Price, Tick, TickRecord, WorldEvent};

fn c(s: &str) -> CommodityId {
    CommodityId::new(s).unwrap()
}

fn store() -> (BranchStore, BranchId) {
    let scenario = ScenarioConfig::default14(42).resolve().unwrap();
    BranchStore::create("sim1", scenario, None, LlmSettings::default()).unwrap()
}

fn oil(id: &str, start: u64, impact: &str) -> WorldEvent {
    WorldEvent {
        event_id: id.into(),
        title: id.into(),
        body: String::new(),
        impacts: [(c("OIL"), impact.parse::<Fixed>().unwrap())].into(),
        start_tick: Tick(start),
        duration_ticks: 20,
        half_life_ticks: 10,
    }
}

fn record(tick: u64, oil_price: &str) -> TickRecord {
    TickRecord {
        format_version: 1,
        tick: Tick(tick),
        prices: [(c("OIL"), Price::new(oil_price.parse().unwrap()).unwrap())].into(),
        trades: vec![],
        posts: vec![],
        active_event_ids: vec![],
        post_count: 0,
        trade_count: 0,
        rejected_orders: vec![],
        adapter_faults: vec![],
        state_hash: Digest32([tick as u8; 32]),
    }
}

#[test]
fn hand_built_gap() {
    let mut left: Vec<_> = (0..=30).map(|t| record(t, "80")).collect();
    let mut right = left.clone();
    left.push(record(31, "82"));
    right.push(record(31, "78"));
    let d = commodity_divergence(&left, &right, Tick(30), &c("OIL")).unwrap();
    assert_eq!(d.series.len(), 2);
    assert_eq!(d.series[0].gap.value(), Decimal::ZERO);
    assert_eq!(d.series[1].gap.to_string(), "0.05000000");
    assert_eq!(d.first_divergence_tick, Some(Tick(31)));
    assert_eq!(d.mean_signed_gap.to_string(), "0.05000000");
}

#[test]
fn noop_fork_pair_never_diverges() {
    let (s, root) = store();
    s.advance(&root, 10).unwrap();
    let twin = s.fork(&root, Tick(10), None).unwrap().branch_id;
    let session = Session::open(&s, "s", root.clone(), twin).unwrap();
    session.control(&s, Pane::Left, ControlAction::Run { n_ticks: 15 }).unwrap();
    session.control(&s, Pane::Right, ControlAction::Run { n_ticks: 15 }).unwrap();
    assert_eq!(session.first_divergence_tick(&s, Decimal::ZERO).unwrap(), None);
    let report = session.report(&s).unwrap();
    assert_eq!(report.first_divergence_tick, None);
    assert!(report.commodities.values().all(|d| d.series.iter().all(|p| p.gap.is_zero())));
    assert_eq!((report.cumulative_trade_count_delta, report.cumulative_post_count_delta), (0, 0));
}

#[test]
fn contrasting_shocks_diverge_one_tick_after_injection() {
    let (s, root) = store();
    s.advance(&root, 30).unwrap();
    let up = s.fork(&root, Tick(30), None).unwrap().branch_id;
    let down = s.fork(&root, Tick(30), None).unwrap().branch_id;
    s.inject(&up, oil("up", 30, "0.5"), false, None).unwrap();
    s.inject(&down, oil("down", 30, "-0.5"), false, None).unwrap();
    let session = Session::open(&s, "s", up.clone(), down.clone()).unwrap();
    assert_eq!(session.view().common_ancestor_tick, Tick(30));
    session.control(&s, Pane::Left, ControlAction::Run { n_ticks: 20 }).unwrap();
    session.control(&s, Pane::Right, ControlAction::Run { n_ticks: 20 }).unwrap();

    // Oracle: first index where the per-tick hash scan differs.
    let l = s.prefix_history(&up, Tick(0), Tick(50)).unwrap();
    let r = s.prefix_history(&down, Tick(0), Tick(50)).unwrap();
    let scan = l.iter().zip(&r).position(|(a, b)| a.state_hash != b.state_hash).map(|i| Tick(i as u64));
    assert_eq!(scan, Some(Tick(31)));
    assert_eq!(session.first_divergence_tick(&s, Decimal::ZERO).unwrap(), scan);

    let report = session.report(&s).unwrap();
    assert_eq!(report.first_divergence_tick, Some(Tick(31)));
    assert!(report.commodities[&c("OIL")].mean_signed_gap.value() > Decimal::ZERO);
    for (a, b) in l.iter().zip(&r).take(31) {
        assert_eq!(a.state_hash, b.state_hash);
    }
    let naive_trades: u64 = l.iter().zip(&r).skip(30).map(|(a, b)| a.trades.len().abs_diff(b.trades.len()) as u64).sum();
    let naive_posts: u64 = l.iter().zip(&r).skip(30).map(|(a, b)| a.posts.len().abs_diff(b.posts.len()) as u64).sum();
    assert_eq!(report.cumulative_trade_count_delta, naive_trades);
    assert_eq!(report.cumulative_post_count_delta, naive_posts);

    let big = Decimal::new(10, 0);
    assert_eq!(session.first_divergence_tick(&s, big).unwrap(), None);
    let small = session.first_divergence_tick(&s, Decimal::new(1, 3)).unwrap().unwrap();
    assert!(small >= Tick(31));

    // Reports are pure functions of the stored history.
    assert_eq!(report.to_canonical(), session.report(&s).unwrap().to_canonical());
}

#[test]
fn panes_are_independent() {
    let (s, root) = store();
    s.advance(&root, 5).unwrap();
    let child = s.fork(&root, Tick(5), None).unwrap().branch_id;
    let session = Session::open(&s, "s", root.clone(), child.clone()).unwrap();
    let (view, _) = session.control(&s, Pane::Left, ControlAction::Pause).unwrap();
    assert_eq!((view.left_state, view.right_state), (PaneState::Paused, PaneState::Paused));
    session.control(&s, Pane::Right, ControlAction::Run { n_ticks: 10 }).unwrap();
    assert_eq!(s.branch(&root).unwrap().head_tick, Tick(5));
    assert_eq!(s.branch(&child).unwrap().head_tick, Tick(15));
    session.control(&s, Pane::Left, ControlAction::Pause).unwrap();

    // Same trajectory as advancing outside any session.
    let (solo, sroot) = store();
    solo.advance(&sroot, 15).unwrap();
    assert_eq!(
        solo.prefix_history(&sroot, Tick(0), Tick(15)).unwrap(),
        s.prefix_history(&child, Tick(0), Tick(15)).unwrap()
    );
}

#[test]
fn shared_prefix_has_zero_gap() {
    let (s, root) = store();
    s.advance(&root, 12).unwrap();
    let a = s.fork(&root, Tick(8), None).unwrap().branch_id;
    s.inject(&a, oil("x", 8, "0.9"), false, None).unwrap();
    s.advance(&a, 10).unwrap();
    let session = Session::open(&s, "s", root, a).unwrap();
    let series = session.divergence_series(&s, &c("OIL")).unwrap();
    assert_eq!(series[0].tick, Tick(8));
    assert!(series[0].gap.is_zero());
    assert_eq!(series.last().unwrap().tick, Tick(12));
    assert!(session.divergence_series(&s, &c("COPPER")).is_err());
}

/// Ancestor ticks agree with a brute-force scan of shared ancestor sets.
#[test]
fn ancestor_tick_matches_brute_force() {
    let (s, root) = store();
    s.advance(&root, 30).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut ids = vec![root];
    while ids.len() < 5 {
        let parent = ids[rng.gen_range(0..ids.len())].clone();
        let head = s.branch(&parent).unwrap().head_tick.0;
        let child = s.fork(&parent, Tick(rng.gen_range(0..=head)), None).unwrap().branch_id;
        s.advance(&child, rng.gen_range(1..10)).unwrap();
        ids.push(child);
    }
    let tree = s.tree();
    // For each branch: the set of (ancestor, tick through which it is shared).
    let path = |id: &BranchId| -> Vec<(BranchId, u64)> {
        let mut out = Vec::new();
        let mut limit = u64::MAX;
        let mut cur = tree.nodes.get(id);
        while let Some(b) = cur {
            out.push((b.branch_id.clone(), limit));
            limit = limit.min(b.fork_tick.0);
            cur = b.parent_id.as_ref().and_then(|p| tree.nodes.get(p));
        }
        out
    };
    for a in &ids {
        for b in &ids {
            if a == b {
                continue;
            }
            let pa = path(a);
            let pb = path(b);
            let shared: BTreeSet<_> = pa.iter().map(|(id, _)| id.clone()).filter(|id| pb.iter().any(|(j, _)| j == id)).collect();
            let (lca, la) = pa.iter().find(|(id, _)| shared.contains(id)).unwrap();
            let lb = pb.iter().find(|(id, _)| id == lca).unwrap().1;
            let (got_lca, got_tick) = common_ancestor(&tree, a, b).unwrap();
            assert_eq!(&got_lca, lca);
            assert_eq!(got_tick.0, (*la).min(lb));
        }
    }
}
