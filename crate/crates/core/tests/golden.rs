//! Frozen fixtures. Regenerate with `UPDATE_GOLDEN=1 cargo test -p timefork-core --test golden`
//! after an intentional change, and review the diff.

use std::path::PathBuf;

use timefork_core::agents::default_roster;
use timefork_core::branchstore::{BranchStore, LlmSettings};
use timefork_core::canonical::to_canonical_string;
use timefork_core::scenario::ScenarioConfig;
use timefork_core::Tick;

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn check(name: &str, actual: String) {
    let path = fixture(name);
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        std::fs::write(&path, &actual).unwrap();
        return;
    }
    let expected = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    assert_eq!(actual, expected, "{name} drifted from its fixture");
}

#[test]
fn default_roster_fixture() {
    let roster = default_roster();
    assert_eq!(roster.len(), 14);
    let mut text = String::new();
    for profile in roster.profiles() {
        text.push_str(&to_canonical_string(profile).unwrap());
        text.push('\n');
    }
    check("default_roster.jsonl", text);
}

#[test]
fn seed_42_first_ten_hashes() {
    let scenario = ScenarioConfig::default14(42).resolve().unwrap();
    let (store, root) = BranchStore::create("sim1", scenario, None, LlmSettings::default()).unwrap();
    store.advance(&root, 10).unwrap();
    let mut text = String::new();
    for r in store.prefix_history(&root, Tick(0), Tick(10)).unwrap() {
        text.push_str(&format!("{} {}\n", r.tick.0, r.state_hash));
    }
    check("seed42_hashes.txt", text);
}

#[test]
fn default_scenario_fixture() {
    check(
        "default_scenario.json",
        format!("{}\n", to_canonical_string(&ScenarioConfig::default14(42)).unwrap()),
    );
}
