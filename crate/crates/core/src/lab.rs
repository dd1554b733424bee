//! Service layer: simulations, comparison sessions and the error vocabulary
//! shared by the HTTP server and the command-line driver.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock};

use rust_decimal::Decimal;
use serde::{Deserialize, Serialize};
use tokio::sync::broadcast;

use crate::branchstore::{Branch, BranchId, BranchStatus, BranchStore, BranchTree, InjectionOutcome, LlmSettings, StoreError};
use crate::canonical::{Digest32, FORMAT_VERSION};
use crate::compare::{CompareError, ComparisonSession, ControlAction, DivergenceReport, GapPoint, Pane, Session};
use crate::model::{CommodityId, Tick, TickRecord, WorldEvent};
use crate::scenario::{FieldIssue, ScenarioConfig, ScenarioError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ErrorCode {
    InvalidConfig,
    InvalidRequest,
    InvalidEvent,
    NotFound,
    UnknownSimulation,
    UnknownBranch,
    UnknownSession,
    UnknownCommodity,
    TickBeyondHead,
    RangeOutOfBounds,
    RetroactiveRequiresFork,
    DuplicateEventId,
    BranchBusy,
    HasChildren,
    NoCommonAncestor,
    TranscriptMissing,
    PromptVersionMismatch,
    HashMismatch,
    InvariantViolation,
    IoFailure,
    Internal,
}

/// Broad status class; the server maps these onto response codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Client,
    NotFound,
    Conflict,
    Server,
}

impl ErrorCode {
    pub fn class(self) -> ErrorClass {
        use ErrorCode::*;
        match self {
            InvalidConfig | InvalidRequest | InvalidEvent | UnknownCommodity | TickBeyondHead | RangeOutOfBounds
            | NoCommonAncestor => ErrorClass::Client,
            NotFound | UnknownSimulation | UnknownBranch | UnknownSession => ErrorClass::NotFound,
            RetroactiveRequiresFork | DuplicateEventId | BranchBusy | HasChildren | TranscriptMissing
            | PromptVersionMismatch => ErrorClass::Conflict,
            HashMismatch | InvariantViolation | IoFailure | Internal => ErrorClass::Server,
        }
    }

    pub fn as_str(self) -> &'static str {
        use ErrorCode::*;
        match self {
            InvalidConfig => "INVALID_CONFIG",
            InvalidRequest => "INVALID_REQUEST",
            InvalidEvent => "INVALID_EVENT",
            NotFound => "NOT_FOUND",
            UnknownSimulation => "UNKNOWN_SIMULATION",
            UnknownBranch => "UNKNOWN_BRANCH",
            UnknownSession => "UNKNOWN_SESSION",
            UnknownCommodity => "UNKNOWN_COMMODITY",
            TickBeyondHead => "TICK_BEYOND_HEAD",
            RangeOutOfBounds => "RANGE_OUT_OF_BOUNDS",
            RetroactiveRequiresFork => "RETROACTIVE_REQUIRES_FORK",
            DuplicateEventId => "DUPLICATE_EVENT_ID",
            BranchBusy => "BRANCH_BUSY",
            HasChildren => "HAS_CHILDREN",
            NoCommonAncestor => "NO_COMMON_ANCESTOR",
            TranscriptMissing => "TRANSCRIPT_MISSING",
            PromptVersionMismatch => "PROMPT_VERSION_MISMATCH",
            HashMismatch => "HASH_MISMATCH",
            InvariantViolation => "INVARIANT_VIOLATION",
            IoFailure => "IO_FAILURE",
            Internal => "INTERNAL",
        }
    }
}

impl fmt::Display for ErrorCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, thiserror::Error)]
#[error("{code}: {message}")]
pub struct ApiError {
    pub code: ErrorCode,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub branch_id: Option<BranchId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub session_id: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub issues: Vec<FieldIssue>,
}

impl ApiError {
    pub fn new(code: ErrorCode, message: impl Into<String>) -> Self {
        ApiError {
            code,
            message: message.into(),
            branch_id: None,
            session_id: None,
            issues: Vec::new(),
        }
    }

    pub fn with_branch(mut self, id: &BranchId) -> Self {
        self.branch_id = Some(id.clone());
        self
    }

    pub fn with_session(mut self, id: &str) -> Self {
        self.session_id = Some(id.to_string());
        self
    }

    pub fn class(&self) -> ErrorClass {
        self.code.class()
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        let message = e.to_string();
        let (code, branch) = match &e {
            StoreError::UnknownBranch(b) => (ErrorCode::UnknownBranch, Some(b)),
            StoreError::TickBeyondHead { branch, .. } => (ErrorCode::TickBeyondHead, Some(branch)),
            StoreError::BranchBusy(b) => (ErrorCode::BranchBusy, Some(b)),
            StoreError::RetroactiveRequiresFork { branch, .. } => (ErrorCode::RetroactiveRequiresFork, Some(branch)),
            StoreError::DuplicateEventId { branch, .. } => (ErrorCode::DuplicateEventId, Some(branch)),
            StoreError::InvalidEvent(_) => (ErrorCode::InvalidEvent, None),
            StoreError::InvalidArgument(_) => (ErrorCode::InvalidRequest, None),
            StoreError::RangeOutOfBounds { branch, .. } => (ErrorCode::RangeOutOfBounds, Some(branch)),
            StoreError::HasChildren(b) => (ErrorCode::HasChildren, Some(b)),
            StoreError::TranscriptMissing(_) => (ErrorCode::TranscriptMissing, None),
            StoreError::PromptVersionMismatch(_) => (ErrorCode::PromptVersionMismatch, None),
            StoreError::HashMismatch { branch, .. } => (ErrorCode::HashMismatch, Some(branch)),
            StoreError::InvariantViolation(_) => (ErrorCode::InvariantViolation, None),
            StoreError::Io(_) => (ErrorCode::IoFailure, None),
        };
        ApiError {
            branch_id: branch.cloned(),
            ..ApiError::new(code, message)
        }
    }
}

impl From<CompareError> for ApiError {
    fn from(e: CompareError) -> Self {
        match e {
            CompareError::Store(s) => s.into(),
            CompareError::SameBranch(ref b) => ApiError::new(ErrorCode::InvalidRequest, e.to_string()).with_branch(b),
            CompareError::NoCommonAncestor(..) => ApiError::new(ErrorCode::NoCommonAncestor, e.to_string()),
            CompareError::UnknownCommodity(_) => ApiError::new(ErrorCode::UnknownCommodity, e.to_string()),
        }
    }
}

impl From<ScenarioError> for ApiError {
    fn from(e: ScenarioError) -> Self {
        ApiError {
            issues: e.issues.clone(),
            ..ApiError::new(ErrorCode::InvalidConfig, e.to_string())
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimulationCreated {
    pub simulation_id: String,
    pub root_branch_id: BranchId,
    pub state_hash: Digest32,
}

/// Request body for injection.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InjectRequest {
    pub event: WorldEvent,
    #[serde(default)]
    pub auto_fork: bool,
    #[serde(default)]
    pub label: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdvanceRequest {
    pub n_ticks: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForkRequest {
    pub tick: Tick,
    #[serde(default)]
    pub label: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionRequest {
    pub left: BranchId,
    pub right: BranchId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ControlRequest {
    pub pane: Pane,
    #[serde(flatten)]
    pub action: ControlAction,
}

/// Owns every simulation opened in this process and the comparison
/// sessions over them.
pub struct Lab {
    data_dir: Option<PathBuf>,
    llm: LlmSettings,
    simulations: RwLock<BTreeMap<String, Arc<BranchStore>>>,
    sessions: RwLock<BTreeMap<String, Arc<Session>>>,
    next_simulation: AtomicU64,
    next_session: AtomicU64,
}

impl fmt::Debug for Lab {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Lab").field("data_dir", &self.data_dir).finish()
    }
}

impl Lab {
    /// In-memory lab; nothing touches disk.
    pub fn in_memory(llm: LlmSettings) -> Self {
        Lab {
            data_dir: None,
            llm,
            simulations: RwLock::new(BTreeMap::new()),
            sessions: RwLock::new(BTreeMap::new()),
            next_simulation: AtomicU64::new(1),
            next_session: AtomicU64::new(1),
        }
    }

    /// Lab persisted under `data_dir`; reopens any simulations found there.
    pub fn open(data_dir: &Path, llm: LlmSettings) -> Result<Self, ApiError> {
        std::fs::create_dir_all(data_dir).map_err(|e| ApiError::new(ErrorCode::IoFailure, e.to_string()))?;
        let mut lab = Lab::in_memory(llm);
        lab.data_dir = Some(data_dir.to_path_buf());
        let mut highest = 0;
        let entries = std::fs::read_dir(data_dir).map_err(|e| ApiError::new(ErrorCode::IoFailure, e.to_string()))?;
        let mut dirs: Vec<PathBuf> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join("scenario.json").is_file())
            .collect();
        dirs.sort();
        for dir in dirs {
            let store = BranchStore::open(&dir, lab.llm.clone())?;
            if let Some(n) = store.simulation_id().strip_prefix("sim").and_then(|n| n.parse::<u64>().ok()) {
                highest = highest.max(n);
            }
            lab.simulations
                .write()
                .unwrap_or_else(|p| p.into_inner())
                .insert(store.simulation_id().to_string(), Arc::new(store));
        }
        lab.next_simulation = AtomicU64::new(highest + 1);
        Ok(lab)
    }

    pub fn data_dir(&self) -> Option<&Path> {
        self.data_dir.as_deref()
    }

    pub fn create_simulation(&self, config: &ScenarioConfig) -> Result<SimulationCreated, ApiError> {
        let scenario = config.resolve()?;
        let simulation_id = format!("sim{}", self.next_simulation.fetch_add(1, Ordering::SeqCst));
        let dir = self.data_dir.as_ref().map(|d| d.join(&simulation_id));
        let (store, root) = BranchStore::create(&simulation_id, scenario, dir.as_deref(), self.llm.clone())?;
        let created = SimulationCreated {
            simulation_id: simulation_id.clone(),
            root_branch_id: root,
            state_hash: store.initial_hash(),
        };
        self.simulations
            .write()
            .unwrap_or_else(|p| p.into_inner())
            .insert(simulation_id, Arc::new(store));
        Ok(created)
    }

    pub fn simulation_ids(&self) -> Vec<String> {
        self.simulations.read().unwrap_or_else(|p| p.into_inner()).keys().cloned().collect()
    }

    pub fn simulation(&self, id: &str) -> Result<Arc<BranchStore>, ApiError> {
        self.simulations
            .read()
            .unwrap_or_else(|p| p.into_inner())
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::new(ErrorCode::UnknownSimulation, format!("unknown simulation {id}")))
    }

    /// The store owning `branch`, found from the id's simulation prefix.
    pub fn store_of(&self, branch: &BranchId) -> Result<Arc<BranchStore>, ApiError> {
        let unknown = || ApiError::from(StoreError::UnknownBranch(branch.clone()));
        let (sim, _) = branch.as_str().rsplit_once("-b").ok_or_else(unknown)?;
        self.simulation(sim).map_err(|_| unknown())
    }

    pub fn tree(&self, simulation: &str) -> Result<BranchTree, ApiError> {
        Ok(self.simulation(simulation)?.tree())
    }

    pub fn branch(&self, id: &BranchId) -> Result<Branch, ApiError> {
        Ok(self.store_of(id)?.branch(id)?)
    }

    pub fn advance(&self, id: &BranchId, n_ticks: u64) -> Result<Vec<TickRecord>, ApiError> {
        Ok(self.store_of(id)?.advance(id, n_ticks)?)
    }

    pub fn pause(&self, id: &BranchId) -> Result<BranchStatus, ApiError> {
        Ok(self.store_of(id)?.pause(id)?)
    }

    pub fn inject(&self, id: &BranchId, request: InjectRequest) -> Result<InjectionOutcome, ApiError> {
        Ok(self.store_of(id)?.inject(id, request.event, request.auto_fork, request.label)?)
    }

    pub fn fork(&self, id: &BranchId, tick: Tick, label: Option<String>) -> Result<Branch, ApiError> {
        Ok(self.store_of(id)?.fork(id, tick, label)?)
    }

    pub fn timeline(&self, id: &BranchId, from: Tick, to: Option<Tick>) -> Result<Vec<TickRecord>, ApiError> {
        let store = self.store_of(id)?;
        let to = match to {
            Some(t) => t,
            None => store.branch(id)?.head_tick,
        };
        Ok(store.prefix_history(id, from, to)?)
    }

    pub fn replay(&self, id: &BranchId) -> Result<Digest32, ApiError> {
        Ok(self.store_of(id)?.replay(id)?)
    }

    /// Deletes a leaf branch and closes the sessions that referenced it.
    pub fn delete_branch(&self, id: &BranchId) -> Result<(), ApiError> {
        self.store_of(id)?.delete(id)?;
        self.sessions
            .write()
            .unwrap_or_else(|p| p.into_inner())
            .retain(|_, s| s.branch(Pane::Left) != id && s.branch(Pane::Right) != id);
        Ok(())
    }

    pub fn subscribe(&self, id: &BranchId) -> Result<broadcast::Receiver<TickRecord>, ApiError> {
        Ok(self.store_of(id)?.subscribe(id)?)
    }

    pub fn open_session(&self, left: &BranchId, right: &BranchId) -> Result<ComparisonSession, ApiError> {
        let store = self.store_of(left)?;
        let other = self.store_of(right)?;
        if !Arc::ptr_eq(&store, &other) {
            return Err(CompareError::NoCommonAncestor(left.clone(), right.clone()).into());
        }
        let id = format!("session{}", self.next_session.fetch_add(1, Ordering::SeqCst));
        let session = Session::open(&store, id.clone(), left.clone(), right.clone())?;
        let view = session.view();
        self.sessions
            .write()
            .unwrap_or_else(|p| p.into_inner())
            .insert(id, Arc::new(session));
        Ok(view)
    }

    fn session_and_store(&self, id: &str) -> Result<(Arc<Session>, Arc<BranchStore>), ApiError> {
        let session = self
            .sessions
            .read()
            .unwrap_or_else(|p| p.into_inner())
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::new(ErrorCode::UnknownSession, format!("unknown session {id}")).with_session(id))?;
        let store = self.store_of(session.branch(Pane::Left))?;
        Ok((session, store))
    }

    pub fn session(&self, id: &str) -> Result<ComparisonSession, ApiError> {
        Ok(self.session_and_store(id)?.0.view())
    }

    pub fn control(
        &self,
        session: &str,
        pane: Pane,
        action: ControlAction,
    ) -> Result<(ComparisonSession, Vec<TickRecord>), ApiError> {
        let (s, store) = self.session_and_store(session)?;
        s.control(&store, pane, action).map_err(|e| ApiError::from(e).with_session(session))
    }

    pub fn divergence_series(&self, session: &str, commodity: &CommodityId) -> Result<Vec<GapPoint>, ApiError> {
        let (s, store) = self.session_and_store(session)?;
        Ok(s.divergence_series(&store, commodity)?)
    }

    pub fn first_divergence_tick(&self, session: &str, epsilon: Decimal) -> Result<Option<Tick>, ApiError> {
        let (s, store) = self.session_and_store(session)?;
        Ok(s.first_divergence_tick(&store, epsilon)?)
    }

    pub fn report(&self, session: &str) -> Result<DivergenceReport, ApiError> {
        let (s, store) = self.session_and_store(session)?;
        Ok(s.report(&store)?)
    }
}

/// Wraps a response body with the format version every payload carries.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Versioned<T> {
    pub format_version: u32,
    #[serde(flatten)]
    pub body: T,
}

impl<T> Versioned<T> {
    pub fn new(body: T) -> Self {
        Versioned {
            format_version: FORMAT_VERSION,
            body,
        }
    }
}
