//! Where script commands go: an in-process [`Lab`] or a running service.

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use timefork_core::branchstore::{Branch, BranchId, InjectionOutcome};
use timefork_core::compare::{ComparisonSession, ControlAction, DivergenceReport, Pane};
use timefork_core::lab::{
    AdvanceRequest, ApiError, ControlRequest, ErrorCode, ForkRequest, InjectRequest, Lab, SessionRequest,
    SimulationCreated,
};
use timefork_core::scenario::ScenarioConfig;
use timefork_core::{Tick, TickRecord};

pub trait Backend {
    fn create(&self, config: &ScenarioConfig) -> Result<SimulationCreated, ApiError>;
    fn branch(&self, id: &BranchId) -> Result<Branch, ApiError>;
    fn advance(&self, id: &BranchId, n_ticks: u64) -> Result<Vec<TickRecord>, ApiError>;
    fn inject(&self, id: &BranchId, request: InjectRequest) -> Result<InjectionOutcome, ApiError>;
    fn fork(&self, id: &BranchId, tick: Tick, label: Option<String>) -> Result<Branch, ApiError>;
    fn timeline(&self, id: &BranchId, from: Tick, to: Option<Tick>) -> Result<Vec<TickRecord>, ApiError>;
    fn open_session(&self, left: &BranchId, right: &BranchId) -> Result<ComparisonSession, ApiError>;
    fn control(&self, session: &str, pane: Pane, action: ControlAction) -> Result<ComparisonSession, ApiError>;
    fn report(&self, session: &str) -> Result<DivergenceReport, ApiError>;
}

impl Backend for Lab {
    fn create(&self, config: &ScenarioConfig) -> Result<SimulationCreated, ApiError> {
        self.create_simulation(config)
    }

    fn branch(&self, id: &BranchId) -> Result<Branch, ApiError> {
        Lab::branch(self, id)
    }

    fn advance(&self, id: &BranchId, n_ticks: u64) -> Result<Vec<TickRecord>, ApiError> {
        Lab::advance(self, id, n_ticks)
    }

    fn inject(&self, id: &BranchId, request: InjectRequest) -> Result<InjectionOutcome, ApiError> {
        Lab::inject(self, id, request)
    }

    fn fork(&self, id: &BranchId, tick: Tick, label: Option<String>) -> Result<Branch, ApiError> {
        Lab::fork(self, id, tick, label)
    }

    fn timeline(&self, id: &BranchId, from: Tick, to: Option<Tick>) -> Result<Vec<TickRecord>, ApiError> {
        Lab::timeline(self, id, from, to)
    }

    fn open_session(&self, left: &BranchId, right: &BranchId) -> Result<ComparisonSession, ApiError> {
        Lab::open_session(self, left, right)
    }

    fn control(&self, session: &str, pane: Pane, action: ControlAction) -> Result<ComparisonSession, ApiError> {
        Lab::control(self, session, pane, action).map(|(s, _)| s)
    }

    fn report(&self, session: &str) -> Result<DivergenceReport, ApiError> {
        Lab::report(self, session)
    }
}

/// Blocking JSON client for the HTTP service.
pub struct HttpBackend {
    base: String,
    agent: ureq::Agent,
}

#[derive(Deserialize)]
struct Records {
    records: Vec<TickRecord>,
}

#[derive(Deserialize)]
struct Controlled {
    session: ComparisonSession,
}

impl HttpBackend {
    pub fn new(base: impl Into<String>) -> Self {
        HttpBackend {
            base: base.into().trim_end_matches('/').to_string(),
            agent: ureq::AgentBuilder::new().build(),
        }
    }

    fn url(&self, path: &str) -> String {
        format!("{}{}", self.base, path)
    }

    fn finish<T: DeserializeOwned>(result: Result<ureq::Response, ureq::Error>) -> Result<T, ApiError> {
        match result {
            Ok(response) => response
                .into_json()
                .map_err(|e| ApiError::new(ErrorCode::IoFailure, format!("unreadable response: {e}"))),
            Err(ureq::Error::Status(status, response)) => {
                let text = response.into_string().unwrap_or_default();
                Err(serde_json::from_str::<ApiError>(&text)
                    .unwrap_or_else(|_| ApiError::new(ErrorCode::Internal, format!("HTTP {status}: {text}"))))
            }
            Err(e) => Err(ApiError::new(ErrorCode::IoFailure, e.to_string())),
        }
    }

    fn get<T: DeserializeOwned>(&self, path: &str) -> Result<T, ApiError> {
        Self::finish(self.agent.get(&self.url(path)).call())
    }

    fn post<T: DeserializeOwned>(&self, path: &str, body: &impl Serialize) -> Result<T, ApiError> {
        Self::finish(self.agent.post(&self.url(path)).send_json(body))
    }
}

impl Backend for HttpBackend {
    fn create(&self, config: &ScenarioConfig) -> Result<SimulationCreated, ApiError> {
        self.post("/simulations", config)
    }

    fn branch(&self, id: &BranchId) -> Result<Branch, ApiError> {
        self.get(&format!("/branches/{id}"))
    }

    fn advance(&self, id: &BranchId, n_ticks: u64) -> Result<Vec<TickRecord>, ApiError> {
        self.post::<Records>(&format!("/branches/{id}/advance"), &AdvanceRequest { n_ticks })
            .map(|r| r.records)
    }

    fn inject(&self, id: &BranchId, request: InjectRequest) -> Result<InjectionOutcome, ApiError> {
        self.post(&format!("/branches/{id}/inject"), &request)
    }

    fn fork(&self, id: &BranchId, tick: Tick, label: Option<String>) -> Result<Branch, ApiError> {
        self.post(&format!("/branches/{id}/fork"), &ForkRequest { tick, label })
    }

    fn timeline(&self, id: &BranchId, from: Tick, to: Option<Tick>) -> Result<Vec<TickRecord>, ApiError> {
        let mut path = format!("/branches/{id}/timeline?from={}", from.0);
        if let Some(to) = to {
            path.push_str(&format!("&to={}", to.0));
        }
        self.get::<Records>(&path).map(|r| r.records)
    }

    fn open_session(&self, left: &BranchId, right: &BranchId) -> Result<ComparisonSession, ApiError> {
        self.post(
            "/sessions",
            &SessionRequest {
                left: left.clone(),
                right: right.clone(),
            },
        )
    }

    fn control(&self, session: &str, pane: Pane, action: ControlAction) -> Result<ComparisonSession, ApiError> {
        self.post::<Controlled>(&format!("/sessions/{session}/control"), &ControlRequest { pane, action })
            .map(|c| c.session)
    }

    fn report(&self, session: &str) -> Result<DivergenceReport, ApiError> {
        self.get(&format!("/sessions/{session}/report"))
    }
}

