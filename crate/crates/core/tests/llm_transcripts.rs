use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use timefork_core::agents::{default_roster, CompletionClient, CompletionError, GenerationParams, LlmMode, Strategy, Transcript};
use timefork_core::branchstore::{BranchStore, LlmSettings, StoreError};
use timefork_core::scenario::{RosterSpec, ScenarioConfig};
use timefork_core::Tick;

/// Answers every prompt with a small OIL buy and counts calls.
#[derive(Default)]
struct Stub {
    calls: AtomicUsize,
}

impl CompletionClient for Stub {
    fn complete(&self, prompt: &str, _: &GenerationParams) -> Result<String, CompletionError> {
        let n = self.calls.fetch_add(1, Ordering::SeqCst);
        let side = if prompt.len().is_multiple_of(2) { "BUY" } else { "SELL" };
        Ok(format!(
            r#"{{"action": "{side}", "commodity": "OIL", "quantity": {}, "reasoning": "call {n}", "post": null}}"#,
            1 + n % 4
        ))
    }
}

fn scenario() -> ScenarioConfig {
    let mut profiles = default_roster().profiles().to_vec();
    for p in profiles.iter_mut().take(3) {
        p.strategy = Strategy::Llm;
    }
    let mut config = ScenarioConfig::default14(11);
    config.roster = RosterSpec::Profiles(profiles);
    config
}

fn settings(mode: LlmMode, client: Option<Arc<Stub>>) -> LlmSettings {
    LlmSettings {
        mode,
        client: client.map(|c| c as Arc<dyn CompletionClient>),
    }
}

fn transcript_files(dir: &std::path::Path) -> Vec<std::path::PathBuf> {
    let mut out: Vec<_> = walk(dir).into_iter().filter(|p| p.components().any(|c| c.as_os_str() == "transcripts")).collect();
    out.sort();
    out
}

fn walk(dir: &std::path::Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.is_dir() {
            out.extend(walk(&path));
        } else {
            out.push(path);
        }
    }
    out
}

#[test]
fn recorded_run_replays_without_a_client() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("sim1");
    let stub = Arc::new(Stub::default());
    let resolved = scenario().resolve().unwrap();
    let (store, root) = BranchStore::create("sim1", resolved, Some(&dir), settings(LlmMode::Record, Some(stub.clone()))).unwrap();
    let recorded = store.advance(&root, 20).unwrap();
    assert_eq!(stub.calls.load(Ordering::SeqCst), 60);
    assert_eq!(store.transcripts(&root).unwrap().len(), 60);
    assert!(recorded.iter().all(|r| r.adapter_faults.is_empty()));
    let head = store.branch(&root).unwrap().head_hash;
    drop(store);

    let store = BranchStore::open(&dir, settings(LlmMode::Replay, None)).unwrap();
    assert_eq!(store.transcripts(&root).unwrap().len(), 60);
    assert_eq!(store.replay(&root).unwrap(), head);
    assert_eq!(store.prefix_history(&root, Tick(0), Tick(20)).unwrap(), recorded_with_initial(&store, &root, &recorded));

    // Nothing recorded past the head: strict mode refuses to invent.
    match store.advance(&root, 1) {
        Err(StoreError::TranscriptMissing(_)) => {}
        other => panic!("expected TranscriptMissing, got {other:?}"),
    }
    assert_eq!(store.branch(&root).unwrap().head_tick, Tick(20));
}

fn recorded_with_initial(store: &BranchStore, root: &timefork_core::branchstore::BranchId, recorded: &[timefork_core::TickRecord]) -> Vec<timefork_core::TickRecord> {
    let mut all = store.prefix_history(root, Tick(0), Tick(0)).unwrap();
    all.extend_from_slice(recorded);
    all
}

#[test]
fn record_mode_reuses_existing_transcripts() {
    let stub = Arc::new(Stub::default());
    let resolved = scenario().resolve().unwrap();
    let (store, root) = BranchStore::create("sim1", resolved, None, settings(LlmMode::Record, Some(stub.clone()))).unwrap();
    store.advance(&root, 10).unwrap();
    let child = store.fork(&root, Tick(5), None).unwrap().branch_id;
    assert_eq!(store.transcripts(&child).unwrap().len(), 15);
    let before = stub.calls.load(Ordering::SeqCst);
    store.advance(&child, 5).unwrap();
    // The child diverges from nothing, so the client sees identical prompts
    // and the fresh records reproduce the parent's trajectory.
    assert_eq!(stub.calls.load(Ordering::SeqCst), before + 15);
    assert_eq!(store.replay(&child).unwrap(), store.branch(&child).unwrap().head_hash);
}

#[test]
fn prompt_version_change_is_detected() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("sim1");
    let resolved = scenario().resolve().unwrap();
    let (store, root) =
        BranchStore::create("sim1", resolved, Some(&dir), settings(LlmMode::Record, Some(Arc::new(Stub::default())))).unwrap();
    store.advance(&root, 4).unwrap();
    drop(store);

    let path = transcript_files(&dir).into_iter().next().unwrap();
    let mut t: Transcript = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    t.prompt_version = "v0".into();
    std::fs::write(&path, serde_json::to_string(&t).unwrap()).unwrap();

    // Reopening rebuilds the head from tick 0, which already trips the check.
    match BranchStore::open(&dir, settings(LlmMode::Replay, None)).and_then(|s| s.replay(&s.root_id())) {
        Err(StoreError::PromptVersionMismatch(_)) => {}
        other => panic!("expected PromptVersionMismatch, got {other:?}"),
    }
}

#[test]
fn tampered_response_fails_replay() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("sim1");
    let resolved = scenario().resolve().unwrap();
    let (store, root) =
        BranchStore::create("sim1", resolved, Some(&dir), settings(LlmMode::Record, Some(Arc::new(Stub::default())))).unwrap();
    store.advance(&root, 6).unwrap();
    drop(store);

    for path in transcript_files(&dir) {
        let mut t: Transcript = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        t.response = Some(r#"{"action": "HOLD", "commodity": "OIL", "quantity": 0, "reasoning": "edited"}"#.into());
        std::fs::write(&path, serde_json::to_string(&t).unwrap()).unwrap();
    }
    match BranchStore::open(&dir, settings(LlmMode::Replay, None)).and_then(|s| s.replay(&s.root_id())) {
        Err(StoreError::HashMismatch { .. }) => {}
        other => panic!("expected HashMismatch, got {other:?}"),
    }
}

#[test]
fn missing_client_degrades_to_hold() {
    let resolved = scenario().resolve().unwrap();
    let (store, root) = BranchStore::create("sim1", resolved, None, LlmSettings::default()).unwrap();
    let records = store.advance(&root, 3).unwrap();
    assert!(records.iter().all(|r| r.adapter_faults.len() == 3));
    // Recorded as unanswered, so replay still closes.
    assert_eq!(store.replay(&root).unwrap(), store.branch(&root).unwrap().head_hash);
}
