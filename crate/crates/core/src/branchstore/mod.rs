//! Branch tree, snapshots, event logs and replay.
//!
//! A simulation is a tree of branches sharing one scenario. Each branch owns
//! a copy of its trajectory from tick 0, its event log, its LLM transcripts
//! and periodic snapshots. Forking copies the prefix up to the fork tick;
//! parents are never rewritten after the fact, so every past state stays
//! reproducible from the seed, the event log and the transcripts.

mod persist;

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex, MutexGuard, RwLock};

use serde::{Deserialize, Serialize};
use tokio::sync::broadcast;

use crate::agents::{CompletionClient, LlmMode, Transcript, TranscriptDecider, TranscriptError, TranscriptStore};
use crate::canonical::{Digest32, FORMAT_VERSION};
use crate::engine::{self, state_hash, EngineError, StepInputs};
use crate::model::{EventError, Tick, TickRecord, WorldEvent, WorldState};
use crate::rng::SeededStream;
use crate::scenario::{Scenario, ScenarioConfig};

use persist::{Layout, Manifest, StoreMeta};

const STREAM_CAPACITY: usize = 1024;

/// Opaque branch identifier.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BranchId(String);

impl BranchId {
    pub fn new(id: impl Into<String>) -> Self {
        BranchId(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for BranchId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl fmt::Debug for BranchId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum BranchStatus {
    Running,
    Paused,
    Idle,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoggedEvent {
    pub event: WorldEvent,
    pub injected_at_tick: Tick,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct EventRecord {
    format_version: u32,
    #[serde(flatten)]
    logged: LoggedEvent,
}

/// Seed in effect from `from_tick` onward.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedEpoch {
    pub from_tick: Tick,
    pub seed: u64,
}

fn seed_at(epochs: &[SeedEpoch], tick: Tick) -> u64 {
    epochs
        .iter()
        .rev()
        .find(|e| e.from_tick <= tick)
        .or(epochs.first())
        .map(|e| e.seed)
        .unwrap_or_default()
}

/// Branch metadata as exposed to callers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Branch {
    pub branch_id: BranchId,
    pub parent_id: Option<BranchId>,
    pub fork_tick: Tick,
    /// Seed currently driving this branch.
    pub seed: u64,
    pub seed_epochs: Vec<SeedEpoch>,
    /// Sorted by `(start_tick, event_id)`.
    pub event_log: Vec<LoggedEvent>,
    pub head_tick: Tick,
    pub head_hash: Digest32,
    pub status: BranchStatus,
    pub label: String,
    pub prompt_version: String,
}

impl Branch {
    fn events(&self) -> Vec<WorldEvent> {
        self.event_log.iter().map(|l| l.event.clone()).collect()
    }

    fn manifest(&self) -> Manifest {
        Manifest {
            format_version: FORMAT_VERSION,
            branch_id: self.branch_id.clone(),
            parent_id: self.parent_id.clone(),
            fork_tick: self.fork_tick,
            seed: self.seed,
            seed_epochs: self.seed_epochs.clone(),
            label: self.label.clone(),
            prompt_version: self.prompt_version.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SnapshotOrigin {
    Fork,
    Checkpoint,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Snapshot {
    pub format_version: u32,
    pub branch_id: BranchId,
    pub tick: Tick,
    pub state_hash: Digest32,
    pub created_from: SnapshotOrigin,
    pub world_state: WorldState,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum InjectionOutcome {
    Scheduled { branch_id: BranchId },
    ForkedInto { branch_id: BranchId, parent_id: BranchId, fork_tick: Tick },
}

impl InjectionOutcome {
    pub fn branch_id(&self) -> &BranchId {
        match self {
            InjectionOutcome::Scheduled { branch_id } | InjectionOutcome::ForkedInto { branch_id, .. } => branch_id,
        }
    }
}

/// All branches of one simulation, keyed by id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BranchTree {
    pub nodes: BTreeMap<BranchId, Branch>,
}

impl BranchTree {
    pub fn root(&self) -> Option<&Branch> {
        self.nodes.values().find(|b| b.parent_id.is_none())
    }

    pub fn children<'a>(&'a self, id: &'a BranchId) -> impl Iterator<Item = &'a Branch> + 'a {
        self.nodes.values().filter(move |b| b.parent_id.as_ref() == Some(id))
    }

    /// `id` followed by its ancestors up to the root.
    pub fn lineage(&self, id: &BranchId) -> Vec<&Branch> {
        let mut out = Vec::new();
        let mut cursor = self.nodes.get(id);
        while let Some(branch) = cursor {
            if out.len() > self.nodes.len() {
                break;
            }
            out.push(branch);
            cursor = branch.parent_id.as_ref().and_then(|p| self.nodes.get(p));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum StoreError {
    #[error("unknown branch {0}")]
    UnknownBranch(BranchId),
    #[error("tick {tick} is beyond head {head} of branch {branch}")]
    TickBeyondHead { branch: BranchId, tick: Tick, head: Tick },
    #[error("branch {0} is busy")]
    BranchBusy(BranchId),
    #[error("event {event} starts at {start}, before head {head} of branch {branch}; retroactive injection requires a fork")]
    RetroactiveRequiresFork { branch: BranchId, event: String, start: Tick, head: Tick },
    #[error("event id {event} already logged on branch {branch}")]
    DuplicateEventId { branch: BranchId, event: String },
    #[error("invalid event: {0}")]
    InvalidEvent(#[from] EventError),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("range [{from}, {to}] out of bounds for branch {branch} with head {head}")]
    RangeOutOfBounds { branch: BranchId, from: Tick, to: Tick, head: Tick },
    #[error("branch {0} has children and cannot be deleted")]
    HasChildren(BranchId),
    #[error("transcript missing: {0}")]
    TranscriptMissing(TranscriptError),
    #[error("prompt version mismatch: {0}")]
    PromptVersionMismatch(TranscriptError),
    #[error("hash mismatch on branch {branch} at tick {tick}: {detail}")]
    HashMismatch { branch: BranchId, tick: Tick, detail: String },
    #[error("engine invariant violated: {0}")]
    InvariantViolation(String),
    #[error("storage failure: {0}")]
    Io(String),
}

impl From<std::io::Error> for StoreError {
    fn from(e: std::io::Error) -> Self {
        StoreError::Io(e.to_string())
    }
}

impl From<EngineError> for StoreError {
    fn from(e: EngineError) -> Self {
        match e {
            EngineError::InvariantViolation { .. } => StoreError::InvariantViolation(e.to_string()),
            EngineError::Transcript(t) => t.into(),
        }
    }
}

impl From<TranscriptError> for StoreError {
    fn from(e: TranscriptError) -> Self {
        match e {
            TranscriptError::Missing { .. } => StoreError::TranscriptMissing(e),
            TranscriptError::PromptVersionMismatch { .. } => StoreError::PromptVersionMismatch(e),
        }
    }
}

/// How language-model agents are served during live advancement.
#[derive(Clone, Default)]
pub struct LlmSettings {
    pub mode: LlmMode,
    pub client: Option<Arc<dyn CompletionClient>>,
}

impl fmt::Debug for LlmSettings {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("LlmSettings")
            .field("mode", &self.mode)
            .field("client", &self.client.is_some())
            .finish()
    }
}

struct BranchData {
    meta: Branch,
    trajectory: Vec<TickRecord>,
    snapshots: BTreeMap<Tick, Snapshot>,
    head: WorldState,
    transcripts: TranscriptStore,
}

struct BranchSlot {
    parent: Option<BranchId>,
    busy: AtomicBool,
    pause: AtomicBool,
    data: Mutex<BranchData>,
    stream: broadcast::Sender<TickRecord>,
}

impl BranchSlot {
    fn new(data: BranchData) -> Self {
        BranchSlot {
            parent: data.meta.parent_id.clone(),
            busy: AtomicBool::new(false),
            pause: AtomicBool::new(false),
            data: Mutex::new(data),
            stream: broadcast::channel(STREAM_CAPACITY).0,
        }
    }

    fn lock(&self) -> MutexGuard<'_, BranchData> {
        self.data.lock().unwrap_or_else(|poisoned| poisoned.into_inner())
    }

    fn try_claim(&self, id: &BranchId) -> Result<BusyGuard<'_>, StoreError> {
        self.busy
            .compare_exchange(false, true, Ordering::AcqRel, Ordering::Acquire)
            .map(|_| BusyGuard(&self.busy))
            .map_err(|_| StoreError::BranchBusy(id.clone()))
    }
}

struct BusyGuard<'a>(&'a AtomicBool);

impl Drop for BusyGuard<'_> {
    fn drop(&mut self) {
        self.0.store(false, Ordering::Release);
    }
}

/// The branch tree of one simulation.
pub struct BranchStore {
    simulation_id: String,
    scenario: Scenario,
    initial: WorldState,
    initial_hash: Digest32,
    layout: Option<Layout>,
    llm: LlmSettings,
    next_branch: AtomicU64,
    branches: RwLock<BTreeMap<BranchId, Arc<BranchSlot>>>,
    // Serializes branch creation and deletion (and the store.json counter).
    structure: Mutex<()>,
}

impl fmt::Debug for BranchStore {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BranchStore")
            .field("simulation_id", &self.simulation_id)
            .field("dir", &self.layout.as_ref().map(|l| l.root().to_path_buf()))
            .finish()
    }
}

impl BranchStore {
    /// Builds the tick-0 state and the root branch. With `dir`, the
    /// simulation is persisted there (the directory must not exist yet or be
    /// empty).
    pub fn create(
        simulation_id: impl Into<String>,
        scenario: Scenario,
        dir: Option<&Path>,
        llm: LlmSettings,
    ) -> Result<(Self, BranchId), StoreError> {
        let simulation_id = simulation_id.into();
        let initial = engine::initial_state(&scenario.prices, &scenario.roster);
        let initial_hash = state_hash(&initial);
        let layout = match dir {
            Some(dir) => {
                if dir.join("scenario.json").exists() {
                    return Err(StoreError::InvalidArgument(format!(
                        "{} already holds a simulation",
                        dir.display()
                    )));
                }
                std::fs::create_dir_all(dir)?;
                let layout = Layout::new(dir);
                std::fs::create_dir_all(layout.branches())?;
                persist::write_json(&layout.scenario(), &scenario.config)?;
                Some(layout)
            }
            None => None,
        };
        let store = BranchStore {
            simulation_id,
            initial: initial.clone(),
            initial_hash,
            layout,
            llm,
            next_branch: AtomicU64::new(1),
            branches: RwLock::new(BTreeMap::new()),
            structure: Mutex::new(()),
            scenario,
        };

        let _structure = store.structure.lock().unwrap_or_else(|p| p.into_inner());
        let root_id = store.allocate_id()?;
        let seed = store.scenario.config.seed;
        let mut event_log: Vec<LoggedEvent> = store
            .scenario
            .config
            .events
            .iter()
            .map(|e| LoggedEvent {
                event: e.clone(),
                injected_at_tick: Tick::ZERO,
            })
            .collect();
        sort_log(&mut event_log);
        let snapshot = Snapshot {
            format_version: FORMAT_VERSION,
            branch_id: root_id.clone(),
            tick: Tick::ZERO,
            state_hash: initial_hash,
            created_from: SnapshotOrigin::Checkpoint,
            world_state: initial.clone(),
        };
        let data = BranchData {
            meta: Branch {
                branch_id: root_id.clone(),
                parent_id: None,
                fork_tick: Tick::ZERO,
                seed,
                seed_epochs: vec![SeedEpoch {
                    from_tick: Tick::ZERO,
                    seed,
                }],
                event_log,
                head_tick: Tick::ZERO,
                head_hash: initial_hash,
                status: BranchStatus::Idle,
                label: "root".into(),
                prompt_version: store.scenario.config.prompt_version.clone(),
            },
            trajectory: vec![TickRecord::initial(&initial, initial_hash)],
            snapshots: [(Tick::ZERO, snapshot)].into(),
            head: initial,
            transcripts: TranscriptStore::default(),
        };
        store.persist_new_branch(&data)?;
        store.insert_slot(data);
        drop(_structure);
        Ok((store, root_id))
    }

    /// Reopens a persisted simulation, dropping any torn log tails and
    /// rebuilding every head by replay from the latest snapshot.
    pub fn open(dir: &Path, llm: LlmSettings) -> Result<Self, StoreError> {
        let layout = Layout::new(dir);
        let config: ScenarioConfig = persist::read_json(&layout.scenario())?;
        let scenario = config
            .resolve()
            .map_err(|e| StoreError::Io(format!("stored scenario no longer validates: {e}")))?;
        let meta: StoreMeta = persist::read_json(&layout.store_meta())?;
        let initial = engine::initial_state(&scenario.prices, &scenario.roster);
        let initial_hash = state_hash(&initial);
        let store = BranchStore {
            simulation_id: meta.simulation_id,
            scenario,
            initial,
            initial_hash,
            layout: Some(layout.clone()),
            llm,
            next_branch: AtomicU64::new(meta.next_branch),
            branches: RwLock::new(BTreeMap::new()),
            structure: Mutex::new(()),
        };

        let mut dirs: Vec<PathBuf> = std::fs::read_dir(layout.branches())?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir())
            .collect();
        dirs.sort();
        for dir in dirs {
            let manifest: Manifest = persist::read_json(&dir.join("manifest.json"))?;
            let data = store.load_branch(&layout, manifest)?;
            store.insert_slot(data);
        }
        Ok(store)
    }

    fn load_branch(&self, layout: &Layout, manifest: Manifest) -> Result<BranchData, StoreError> {
        let id = manifest.branch_id.clone();
        let trajectory: Vec<TickRecord> = persist::read_log(&layout.trajectory(&id))?;
        let Some(last) = trajectory.last() else {
            return Err(StoreError::Io(format!("branch {id} has an empty trajectory")));
        };
        let head_tick = last.tick;
        for (i, r) in trajectory.iter().enumerate() {
            if r.tick.0 != i as u64 {
                return Err(StoreError::HashMismatch {
                    branch: id,
                    tick: r.tick,
                    detail: format!("trajectory line {i} holds tick {}", r.tick),
                });
            }
        }
        let mut event_log: Vec<LoggedEvent> = persist::read_log::<EventRecord>(&layout.events(&id))?
            .into_iter()
            .map(|r| r.logged)
            .collect();
        sort_log(&mut event_log);

        let mut snapshots = BTreeMap::new();
        for path in persist::list_files(&layout.snapshots(&id))? {
            if persist::tick_of(&path).is_none_or(|t| t > head_tick) {
                // Written after a trajectory line that did not survive.
                std::fs::remove_file(&path)?;
                continue;
            }
            let snap: Snapshot = persist::read_json(&path)?;
            let actual = state_hash(&snap.world_state);
            if actual != snap.state_hash || actual != trajectory[snap.tick.0 as usize].state_hash {
                return Err(StoreError::HashMismatch {
                    branch: id,
                    tick: snap.tick,
                    detail: "snapshot does not match its recorded hash".into(),
                });
            }
            snapshots.insert(snap.tick, snap);
        }
        let mut transcripts = TranscriptStore::default();
        for path in persist::list_files(&layout.transcripts(&id))? {
            transcripts.insert(persist::read_json::<Transcript>(&path)?);
        }

        let mut data = BranchData {
            meta: Branch {
                branch_id: id.clone(),
                parent_id: manifest.parent_id,
                fork_tick: manifest.fork_tick,
                seed: manifest.seed,
                seed_epochs: manifest.seed_epochs,
                event_log,
                head_tick,
                head_hash: last.state_hash,
                status: BranchStatus::Idle,
                label: manifest.label,
                prompt_version: manifest.prompt_version,
            },
            trajectory,
            snapshots,
            head: self.initial.clone(),
            transcripts,
        };
        data.head = self.materialize(&data, head_tick)?;
        Ok(data)
    }

    pub fn simulation_id(&self) -> &str {
        &self.simulation_id
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    pub fn dir(&self) -> Option<&Path> {
        self.layout.as_ref().map(Layout::root)
    }

    pub fn initial_hash(&self) -> Digest32 {
        self.initial_hash
    }

    fn allocate_id(&self) -> Result<BranchId, StoreError> {
        let n = self.next_branch.fetch_add(1, Ordering::SeqCst);
        if let Some(layout) = &self.layout {
            persist::write_json(
                &layout.store_meta(),
                &StoreMeta {
                    format_version: FORMAT_VERSION,
                    simulation_id: self.simulation_id.clone(),
                    next_branch: n + 1,
                },
            )?;
        }
        Ok(BranchId(format!("{}-b{}", self.simulation_id, n)))
    }

    fn insert_slot(&self, data: BranchData) {
        let id = data.meta.branch_id.clone();
        self.branches
            .write()
            .unwrap_or_else(|p| p.into_inner())
            .insert(id, Arc::new(BranchSlot::new(data)));
    }

    fn slot(&self, id: &BranchId) -> Result<Arc<BranchSlot>, StoreError> {
        self.branches
            .read()
            .unwrap_or_else(|p| p.into_inner())
            .get(id)
            .cloned()
            .ok_or_else(|| StoreError::UnknownBranch(id.clone()))
    }

    fn persist_new_branch(&self, data: &BranchData) -> Result<(), StoreError> {
        let Some(layout) = &self.layout else {
            return Ok(());
        };
        let id = &data.meta.branch_id;
        layout.create_branch_dirs(id)?;
        persist::write_json(&layout.manifest(id), &data.meta.manifest())?;
        let mut events = String::new();
        for logged in &data.meta.event_log {
            events.push_str(&crate::canonical::to_canonical_string(&EventRecord {
                format_version: FORMAT_VERSION,
                logged: logged.clone(),
            }).map_err(|e| StoreError::Io(e.to_string()))?);
            events.push('\n');
        }
        std::fs::write(layout.events(id), events)?;
        let mut trajectory = String::new();
        for record in &data.trajectory {
            trajectory.push_str(&crate::canonical::to_canonical_string(record).map_err(|e| StoreError::Io(e.to_string()))?);
            trajectory.push('\n');
        }
        std::fs::write(layout.trajectory(id), trajectory)?;
        for snap in data.snapshots.values() {
            persist::write_json(&layout.snapshot(id, snap.tick), snap)?;
        }
        for t in data.transcripts.iter() {
            persist::write_json(&layout.transcript(id, t.tick, &t.agent_id), t)?;
        }
        Ok(())
    }

    fn view(data: &BranchData) -> Branch {
        data.meta.clone()
    }

    pub fn branch(&self, id: &BranchId) -> Result<Branch, StoreError> {
        Ok(Self::view(&self.slot(id)?.lock()))
    }

    pub fn tree(&self) -> BranchTree {
        let slots: Vec<Arc<BranchSlot>> = self
            .branches
            .read()
            .unwrap_or_else(|p| p.into_inner())
            .values()
            .cloned()
            .collect();
        BranchTree {
            nodes: slots
                .iter()
                .map(|s| {
                    let b = Self::view(&s.lock());
                    (b.branch_id.clone(), b)
                })
                .collect(),
        }
    }

    pub fn root_id(&self) -> BranchId {
        self.tree()
            .root()
            .map(|b| b.branch_id.clone())
            .expect("a store always has a root branch")
    }

    /// Current head state of a branch.
    pub fn head_state(&self, id: &BranchId) -> Result<WorldState, StoreError> {
        Ok(self.slot(id)?.lock().head.clone())
    }

    pub fn transcripts(&self, id: &BranchId) -> Result<TranscriptStore, StoreError> {
        Ok(self.slot(id)?.lock().transcripts.clone())
    }

    pub fn snapshot_ticks(&self, id: &BranchId) -> Result<Vec<Tick>, StoreError> {
        Ok(self.slot(id)?.lock().snapshots.keys().copied().collect())
    }

    /// Receives every TickRecord this branch produces from now on.
    pub fn subscribe(&self, id: &BranchId) -> Result<broadcast::Receiver<TickRecord>, StoreError> {
        Ok(self.slot(id)?.stream.subscribe())
    }

    /// Inclusive range of records, `0 <= from <= to <= head`.
    pub fn prefix_history(&self, id: &BranchId, from: Tick, to: Tick) -> Result<Vec<TickRecord>, StoreError> {
        let slot = self.slot(id)?;
        let data = slot.lock();
        let head = data.meta.head_tick;
        if from > to || to > head {
            return Err(StoreError::RangeOutOfBounds {
                branch: id.clone(),
                from,
                to,
                head,
            });
        }
        Ok(data.trajectory[from.0 as usize..=to.0 as usize].to_vec())
    }

    /// State of `id` at `tick`, rebuilt from the nearest earlier snapshot.
    pub fn state_at(&self, id: &BranchId, tick: Tick) -> Result<WorldState, StoreError> {
        let slot = self.slot(id)?;
        let data = slot.lock();
        if tick > data.meta.head_tick {
            return Err(StoreError::TickBeyondHead {
                branch: id.clone(),
                tick,
                head: data.meta.head_tick,
            });
        }
        if tick == data.meta.head_tick {
            return Ok(data.head.clone());
        }
        self.materialize(&data, tick)
    }

    /// Full replay from tick 0 in strict transcript mode: every regenerated
    /// record must equal the stored one, and the final hash the head hash.
    pub fn replay(&self, id: &BranchId) -> Result<Digest32, StoreError> {
        let slot = self.slot(id)?;
        let (meta, trajectory, transcripts) = {
            let data = slot.lock();
            (data.meta.clone(), data.trajectory.clone(), data.transcripts.clone())
        };
        let first = &trajectory[0];
        if first.state_hash != self.initial_hash {
            return Err(StoreError::HashMismatch {
                branch: id.clone(),
                tick: Tick::ZERO,
                detail: "initial record does not match the scenario".into(),
            });
        }
        let state = self.replay_span(self.initial.clone(), meta.head_tick, &meta, &transcripts, &trajectory, true)?;
        let hash = state_hash(&state);
        if hash != meta.head_hash {
            return Err(StoreError::HashMismatch {
                branch: id.clone(),
                tick: meta.head_tick,
                detail: "replayed head differs from stored head".into(),
            });
        }
        Ok(hash)
    }

    /// Replays from the latest snapshot at or before `tick`.
    fn materialize(&self, data: &BranchData, tick: Tick) -> Result<WorldState, StoreError> {
        let (start, from_snapshot) = match data.snapshots.range(..=tick).next_back() {
            Some((_, snap)) => (snap.world_state.clone(), true),
            None => (self.initial.clone(), false),
        };
        debug_assert!(from_snapshot || tick.0 < data.meta.head_tick.0 + 1);
        self.replay_span(start, tick, &data.meta, &data.transcripts, &data.trajectory, false)
    }

    fn replay_span(
        &self,
        mut state: WorldState,
        until: Tick,
        meta: &Branch,
        transcripts: &TranscriptStore,
        trajectory: &[TickRecord],
        compare_records: bool,
    ) -> Result<WorldState, StoreError> {
        let events = meta.events();
        let mut transcripts = transcripts.clone();
        while state.tick < until {
            let now = state.tick;
            let seed = seed_at(&meta.seed_epochs, now);
            let mut decider = TranscriptDecider::new(&mut transcripts, None, LlmMode::Replay, seed, &meta.prompt_version);
            let mut inputs = StepInputs {
                roster: &self.scenario.roster,
                events: &events,
                stream: SeededStream::new(seed),
                config: self.scenario.market(),
                llm: &mut decider,
            };
            let (next, record) = engine::step(&state, &mut inputs)?;
            let stored = trajectory.get(record.tick.0 as usize);
            let matches = match stored {
                Some(s) if compare_records => *s == record,
                Some(s) => s.state_hash == record.state_hash,
                None => false,
            };
            if !matches {
                return Err(StoreError::HashMismatch {
                    branch: meta.branch_id.clone(),
                    tick: record.tick,
                    detail: if compare_records {
                        "replayed record differs from the stored record".into()
                    } else {
                        "replayed state hash differs from the stored hash".into()
                    },
                });
            }
            state = next;
        }
        Ok(state)
    }

    /// Clones `id` at `tick` into a new child branch.
    pub fn fork(&self, id: &BranchId, tick: Tick, label: Option<String>) -> Result<Branch, StoreError> {
        self.fork_with_seed(id, tick, label, None)
    }

    /// Like [`fork`](Self::fork); `reseed` starts a new seed epoch at the fork tick.
    pub fn fork_with_seed(
        &self,
        id: &BranchId,
        tick: Tick,
        label: Option<String>,
        reseed: Option<u64>,
    ) -> Result<Branch, StoreError> {
        let source = self.slot(id)?;
        let _busy = source.try_claim(id)?;
        let _structure = self.structure.lock().unwrap_or_else(|p| p.into_inner());
        let child = {
            let data = source.lock();
            let head = data.meta.head_tick;
            if tick > head {
                return Err(StoreError::TickBeyondHead {
                    branch: id.clone(),
                    tick,
                    head,
                });
            }
            let state = if tick == head {
                data.head.clone()
            } else {
                self.materialize(&data, tick)?
            };
            let child_id = self.allocate_id()?;
            let mut seed_epochs: Vec<SeedEpoch> = data
                .meta
                .seed_epochs
                .iter()
                .filter(|e| e.from_tick <= tick)
                .copied()
                .collect();
            if let Some(seed) = reseed {
                seed_epochs.retain(|e| e.from_tick < tick);
                seed_epochs.push(SeedEpoch { from_tick: tick, seed });
            }
            let seed = seed_epochs.last().map(|e| e.seed).unwrap_or(data.meta.seed);
            let hash = data.trajectory[tick.0 as usize].state_hash;
            let mut snapshots: BTreeMap<Tick, Snapshot> = data
                .snapshots
                .range(..tick)
                .map(|(t, s)| {
                    let mut s = s.clone();
                    s.branch_id = child_id.clone();
                    (*t, s)
                })
                .collect();
            snapshots.insert(
                tick,
                Snapshot {
                    format_version: FORMAT_VERSION,
                    branch_id: child_id.clone(),
                    tick,
                    state_hash: hash,
                    created_from: SnapshotOrigin::Fork,
                    world_state: state.clone(),
                },
            );
            BranchData {
                meta: Branch {
                    branch_id: child_id.clone(),
                    parent_id: Some(id.clone()),
                    fork_tick: tick,
                    seed,
                    seed_epochs,
                    event_log: data
                        .meta
                        .event_log
                        .iter()
                        .filter(|l| l.injected_at_tick <= tick)
                        .cloned()
                        .collect(),
                    head_tick: tick,
                    head_hash: hash,
                    status: BranchStatus::Idle,
                    label: label.unwrap_or_else(|| format!("fork of {} at tick {}", data.meta.label, tick)),
                    prompt_version: data.meta.prompt_version.clone(),
                },
                trajectory: data.trajectory[..=tick.0 as usize].to_vec(),
                snapshots,
                head: state,
                transcripts: data.transcripts.before(tick),
            }
        };
        self.persist_new_branch(&child)?;
        let view = Self::view(&child);
        self.insert_slot(child);
        Ok(view)
    }

    /// Schedules `event` on `id`, or forks at its start tick when it lies in
    /// the past and `auto_fork` is set. The original branch is never rewritten.
    pub fn inject(
        &self,
        id: &BranchId,
        event: WorldEvent,
        auto_fork: bool,
        label: Option<String>,
    ) -> Result<InjectionOutcome, StoreError> {
        event.validate()?;
        if let Some(c) = event.impacts.keys().find(|c| !self.scenario.prices.contains_key(*c)) {
            return Err(EventError::UnknownCommodity {
                event: event.event_id.clone(),
                commodity: c.clone(),
            }
            .into());
        }
        let slot = self.slot(id)?;
        let head = {
            let data = slot.lock();
            if data.meta.event_log.iter().any(|l| l.event.event_id == event.event_id) {
                return Err(StoreError::DuplicateEventId {
                    branch: id.clone(),
                    event: event.event_id.clone(),
                });
            }
            data.meta.head_tick
        };
        if event.start_tick >= head {
            self.schedule(id, &slot, event)?;
            return Ok(InjectionOutcome::Scheduled { branch_id: id.clone() });
        }
        if !auto_fork {
            return Err(StoreError::RetroactiveRequiresFork {
                branch: id.clone(),
                event: event.event_id.clone(),
                start: event.start_tick,
                head,
            });
        }
        let fork_tick = event.start_tick;
        let child = self.fork(id, fork_tick, Some(label.unwrap_or_else(|| event.title.clone())))?;
        let child_slot = self.slot(&child.branch_id)?;
        self.schedule(&child.branch_id, &child_slot, event)?;
        Ok(InjectionOutcome::ForkedInto {
            branch_id: child.branch_id,
            parent_id: id.clone(),
            fork_tick,
        })
    }

    fn schedule(&self, id: &BranchId, slot: &BranchSlot, event: WorldEvent) -> Result<(), StoreError> {
        let _busy = slot.try_claim(id)?;
        let mut data = slot.lock();
        if event.start_tick < data.meta.head_tick {
            return Err(StoreError::RetroactiveRequiresFork {
                branch: id.clone(),
                event: event.event_id.clone(),
                start: event.start_tick,
                head: data.meta.head_tick,
            });
        }
        if data.meta.event_log.iter().any(|l| l.event.event_id == event.event_id) {
            return Err(StoreError::DuplicateEventId {
                branch: id.clone(),
                event: event.event_id,
            });
        }
        let logged = LoggedEvent {
            event,
            injected_at_tick: data.meta.head_tick,
        };
        if let Some(layout) = &self.layout {
            persist::append_line(
                &layout.events(id),
                &EventRecord {
                    format_version: FORMAT_VERSION,
                    logged: logged.clone(),
                },
            )?;
        }
        data.meta.event_log.push(logged);
        sort_log(&mut data.meta.event_log);
        Ok(())
    }

    /// Runs `n_ticks` engine steps, stopping early at a tick boundary when a
    /// pause is requested.
    pub fn advance(&self, id: &BranchId, n_ticks: u64) -> Result<Vec<TickRecord>, StoreError> {
        if n_ticks == 0 {
            return Err(StoreError::InvalidArgument("n_ticks must be at least 1".into()));
        }
        let slot = self.slot(id)?;
        let _busy = slot.try_claim(id)?;
        slot.pause.store(false, Ordering::SeqCst);
        slot.lock().meta.status = BranchStatus::Running;

        let mut produced = Vec::new();
        let mut paused = false;
        let mut outcome = Ok(());
        for _ in 0..n_ticks {
            if slot.pause.load(Ordering::SeqCst) {
                paused = true;
                break;
            }
            let mut data = slot.lock();
            match self.advance_one(&mut data) {
                Ok(record) => {
                    drop(data);
                    // No receivers is fine.
                    let _ = slot.stream.send(record.clone());
                    produced.push(record);
                }
                Err(e) => {
                    outcome = Err(e);
                    break;
                }
            }
        }
        slot.pause.store(false, Ordering::SeqCst);
        slot.lock().meta.status = if paused { BranchStatus::Paused } else { BranchStatus::Idle };
        outcome.map(|_| produced)
    }

    fn advance_one(&self, data: &mut BranchData) -> Result<TickRecord, StoreError> {
        let id = data.meta.branch_id.clone();
        let events = data.meta.events();
        let now = data.head.tick;
        let seed = seed_at(&data.meta.seed_epochs, now);
        let client = self.llm.client.as_deref();
        let (next, record, recorded) = {
            let mut decider =
                TranscriptDecider::new(&mut data.transcripts, client, self.llm.mode, seed, &data.meta.prompt_version);
            let mut inputs = StepInputs {
                roster: &self.scenario.roster,
                events: &events,
                stream: SeededStream::new(seed),
                config: self.scenario.market(),
                llm: &mut decider,
            };
            let (next, record) = engine::step(&data.head, &mut inputs)?;
            (next, record, decider.take_recorded())
        };

        let checkpoint = next.tick.0 % self.scenario.market().checkpoint_interval == 0;
        let snapshot = checkpoint.then(|| Snapshot {
            format_version: FORMAT_VERSION,
            branch_id: id.clone(),
            tick: next.tick,
            state_hash: record.state_hash,
            created_from: SnapshotOrigin::Checkpoint,
            world_state: next.clone(),
        });
        if let Some(layout) = &self.layout {
            for (tick, agent) in &recorded {
                if let Some(t) = data.transcripts.get(*tick, agent) {
                    persist::write_json(&layout.transcript(&id, *tick, agent), t)?;
                }
            }
            persist::append_line(&layout.trajectory(&id), &record)?;
            if let Some(snap) = &snapshot {
                persist::write_json(&layout.snapshot(&id, snap.tick), snap)?;
            }
        }
        if let Some(snap) = snapshot {
            data.snapshots.insert(snap.tick, snap);
        }
        data.meta.head_tick = next.tick;
        data.meta.head_hash = record.state_hash;
        data.head = next;
        data.trajectory.push(record.clone());
        Ok(record)
    }

    /// Asks a running advance to stop after its in-flight tick. Pausing an
    /// idle or already paused branch is a no-op.
    pub fn pause(&self, id: &BranchId) -> Result<BranchStatus, StoreError> {
        let slot = self.slot(id)?;
        if slot.busy.load(Ordering::SeqCst) {
            slot.pause.store(true, Ordering::SeqCst);
        }
        let status = slot.lock().meta.status;
        Ok(status)
    }

    pub fn relabel(&self, id: &BranchId, label: impl Into<String>) -> Result<Branch, StoreError> {
        let slot = self.slot(id)?;
        let mut data = slot.lock();
        data.meta.label = label.into();
        if let Some(layout) = &self.layout {
            persist::write_json(&layout.manifest(id), &data.meta.manifest())?;
        }
        Ok(Self::view(&data))
    }

    /// Removes a leaf branch and its directory. The root cannot be deleted.
    pub fn delete(&self, id: &BranchId) -> Result<(), StoreError> {
        let _structure = self.structure.lock().unwrap_or_else(|p| p.into_inner());
        let slot = self.slot(id)?;
        if slot.parent.is_none() {
            return Err(StoreError::InvalidArgument("the root branch cannot be deleted".into()));
        }
        let has_children = self
            .branches
            .read()
            .unwrap_or_else(|p| p.into_inner())
            .values()
            .any(|s| s.parent.as_ref() == Some(id));
        if has_children {
            return Err(StoreError::HasChildren(id.clone()));
        }
        let _busy = slot.try_claim(id)?;
        if let Some(layout) = &self.layout {
            std::fs::remove_dir_all(layout.branch_dir(id))?;
        }
        self.branches
            .write()
            .unwrap_or_else(|p| p.into_inner())
            .remove(id);
        Ok(())
    }
}

fn sort_log(log: &mut [LoggedEvent]) {
    log.sort_by(|a, b| (a.event.start_tick, &a.event.event_id).cmp(&(b.event.start_tick, &b.event.event_id)));
}
