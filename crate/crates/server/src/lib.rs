//! HTTP control service: JSON endpoints over a [`Lab`] plus a per-branch
//! server-sent event stream of TickRecords.

use std::collections::VecDeque;
use std::convert::Infallible;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use axum::extract::rejection::QueryRejection;
use axum::extract::{FromRequest, Path, Query, Request, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::Stream;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::sync::broadcast::error::RecvError;

use timefork_core::agents::{CompletionClient, HttpCompletionClient, LlmMode};
use timefork_core::branchstore::{BranchId, InjectionOutcome, LlmSettings};
use timefork_core::canonical::{to_canonical_string, FORMAT_VERSION};
use timefork_core::lab::{
    AdvanceRequest, ApiError, ControlRequest, ErrorClass, ErrorCode, ForkRequest, InjectRequest, Lab, SessionRequest,
};
use timefork_core::scenario::ScenarioConfig;
use timefork_core::{CommodityId, Tick, TickRecord};

pub const HEARTBEAT: Duration = Duration::from_secs(15);

/// Environment-driven settings.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ServerConfig {
    pub listen: SocketAddr,
    /// `None` keeps everything in memory.
    pub data_dir: Option<PathBuf>,
    pub llm_mode: LlmMode,
    pub completion_url: Option<String>,
    pub completion_key: Option<String>,
}

impl Default for ServerConfig {
    fn default() -> Self {
        ServerConfig {
            listen: SocketAddr::from(([127, 0, 0, 1], 8080)),
            data_dir: Some(PathBuf::from("timefork-data")),
            llm_mode: LlmMode::Record,
            completion_url: None,
            completion_key: None,
        }
    }
}

impl ServerConfig {
    /// Reads `TIMEFORK_LISTEN`, `TIMEFORK_DATA_DIR` (`:memory:` for none),
    /// `TIMEFORK_LLM_MODE`, `TIMEFORK_COMPLETION_URL` and
    /// `TIMEFORK_COMPLETION_KEY`.
    pub fn from_env() -> Result<Self, String> {
        Self::from_lookup(|k| std::env::var(k).ok())
    }

    pub fn from_lookup(var: impl Fn(&str) -> Option<String>) -> Result<Self, String> {
        let mut config = ServerConfig::default();
        if let Some(listen) = var("TIMEFORK_LISTEN") {
            config.listen = listen.parse().map_err(|e| format!("TIMEFORK_LISTEN={listen}: {e}"))?;
        }
        if let Some(dir) = var("TIMEFORK_DATA_DIR") {
            config.data_dir = (dir != ":memory:").then(|| PathBuf::from(dir));
        }
        if let Some(mode) = var("TIMEFORK_LLM_MODE") {
            config.llm_mode = mode.parse()?;
        }
        config.completion_url = var("TIMEFORK_COMPLETION_URL");
        config.completion_key = var("TIMEFORK_COMPLETION_KEY");
        Ok(config)
    }

    pub fn llm_settings(&self) -> LlmSettings {
        let client = self.completion_url.as_ref().map(|url| {
            Arc::new(HttpCompletionClient::new(url.clone(), self.completion_key.clone())) as Arc<dyn CompletionClient>
        });
        LlmSettings {
            mode: self.llm_mode,
            client,
        }
    }

    pub fn build_lab(&self) -> Result<Lab, ApiError> {
        match &self.data_dir {
            Some(dir) => Lab::open(dir, self.llm_settings()),
            None => Ok(Lab::in_memory(self.llm_settings())),
        }
    }
}

/// Serves `router(lab)` on an already-bound listener until the future is dropped.
pub async fn serve(listener: tokio::net::TcpListener, lab: Arc<Lab>) -> std::io::Result<()> {
    axum::serve(listener, router(lab)).await
}

/// Binds `addr` and serves from a dedicated runtime thread for the rest of
/// the process. Returns the bound address (useful with port 0).
pub fn spawn_background(addr: SocketAddr, lab: Arc<Lab>) -> std::io::Result<SocketAddr> {
    let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    let listener = runtime.block_on(tokio::net::TcpListener::bind(addr))?;
    let bound = listener.local_addr()?;
    std::thread::spawn(move || {
        if let Err(e) = runtime.block_on(serve(listener, lab)) {
            tracing::error!("server stopped: {e}");
        }
    });
    Ok(bound)
}

pub fn router(lab: Arc<Lab>) -> Router {
    Router::new()
        .route("/simulations", post(create_simulation).get(list_simulations))
        .route("/simulations/{sim}/branches", get(branch_tree))
        .route("/branches/{id}", get(get_branch).delete(delete_branch))
        .route("/branches/{id}/advance", post(advance))
        .route("/branches/{id}/pause", post(pause))
        .route("/branches/{id}/inject", post(inject))
        .route("/branches/{id}/fork", post(fork))
        .route("/branches/{id}/timeline", get(timeline))
        .route("/branches/{id}/replay", post(replay))
        .route("/branches/{id}/stream", get(stream))
        .route("/sessions", post(open_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/control", post(control))
        .route("/sessions/{id}/report", get(report))
        .route("/sessions/{id}/series", get(series))
        .fallback(|| async { Failure(ApiError::new(ErrorCode::NotFound, "no such resource")) })
        .with_state(lab)
}

type Shared = State<Arc<Lab>>;

/// An [`ApiError`] on its way out.
#[derive(Debug)]
pub struct Failure(pub ApiError);

impl From<ApiError> for Failure {
    fn from(e: ApiError) -> Self {
        Failure(e)
    }
}

pub fn status_of(class: ErrorClass) -> StatusCode {
    match class {
        ErrorClass::Client => StatusCode::BAD_REQUEST,
        ErrorClass::NotFound => StatusCode::NOT_FOUND,
        ErrorClass::Conflict => StatusCode::CONFLICT,
        ErrorClass::Server => StatusCode::INTERNAL_SERVER_ERROR,
    }
}

impl IntoResponse for Failure {
    fn into_response(self) -> Response {
        reply(status_of(self.0.class()), &self.0)
    }
}

/// JSON body stamped with `format_version`.
fn reply(status: StatusCode, body: &impl Serialize) -> Response {
    let mut value = serde_json::to_value(body).unwrap_or_else(|e| json!({ "message": e.to_string() }));
    if let Value::Object(map) = &mut value {
        map.entry("format_version").or_insert(json!(FORMAT_VERSION));
    }
    (status, Json(value)).into_response()
}

/// JSON request body whose rejections become `INVALID_REQUEST`.
pub struct Body<T>(pub T);

impl<S: Send + Sync, T: DeserializeOwned> FromRequest<S> for Body<T> {
    type Rejection = Failure;

    async fn from_request(req: Request, state: &S) -> Result<Self, Self::Rejection> {
        Json::<T>::from_request(req, state)
            .await
            .map(|Json(v)| Body(v))
            .map_err(|e| Failure(ApiError::new(ErrorCode::InvalidRequest, e.body_text())))
    }
}

fn query<T>(q: Result<Query<T>, QueryRejection>) -> Result<T, Failure> {
    q.map(|Query(v)| v)
        .map_err(|e| Failure(ApiError::new(ErrorCode::InvalidRequest, e.body_text())))
}

/// Store operations block on file IO and the engine; keep them off the
/// async workers.
async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ApiError> + Send + 'static) -> Result<T, Failure> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| Failure(ApiError::new(ErrorCode::Internal, format!("worker failed: {e}"))))?
        .map_err(Failure)
}

#[derive(Serialize)]
struct Records {
    records: Vec<TickRecord>,
}

async fn create_simulation(State(lab): Shared, Body(config): Body<ScenarioConfig>) -> Result<Response, Failure> {
    let created = blocking(move || lab.create_simulation(&config)).await?;
    Ok(reply(StatusCode::CREATED, &created))
}

async fn list_simulations(State(lab): Shared) -> Response {
    reply(StatusCode::OK, &json!({ "simulations": lab.simulation_ids() }))
}

async fn branch_tree(State(lab): Shared, Path(sim): Path<String>) -> Result<Response, Failure> {
    let tree = blocking(move || lab.tree(&sim)).await?;
    Ok(reply(StatusCode::OK, &tree))
}

async fn get_branch(State(lab): Shared, Path(id): Path<BranchId>) -> Result<Response, Failure> {
    let branch = blocking(move || lab.branch(&id)).await?;
    Ok(reply(StatusCode::OK, &branch))
}

async fn delete_branch(State(lab): Shared, Path(id): Path<BranchId>) -> Result<Response, Failure> {
    let deleted = id.clone();
    blocking(move || lab.delete_branch(&id)).await?;
    Ok(reply(StatusCode::OK, &json!({ "deleted": deleted })))
}

async fn advance(State(lab): Shared, Path(id): Path<BranchId>, Body(req): Body<AdvanceRequest>) -> Result<Response, Failure> {
    let records = blocking(move || lab.advance(&id, req.n_ticks)).await?;
    Ok(reply(StatusCode::OK, &Records { records }))
}

async fn pause(State(lab): Shared, Path(id): Path<BranchId>) -> Result<Response, Failure> {
    let branch_id = id.clone();
    let status = blocking(move || lab.pause(&id)).await?;
    Ok(reply(StatusCode::OK, &json!({ "branch_id": branch_id, "status": status })))
}

async fn inject(State(lab): Shared, Path(id): Path<BranchId>, Body(req): Body<InjectRequest>) -> Result<Response, Failure> {
    let outcome = blocking(move || lab.inject(&id, req)).await?;
    let status = match outcome {
        InjectionOutcome::ForkedInto { .. } => StatusCode::CREATED,
        InjectionOutcome::Scheduled { .. } => StatusCode::OK,
    };
    Ok(reply(status, &outcome))
}

async fn fork(State(lab): Shared, Path(id): Path<BranchId>, Body(req): Body<ForkRequest>) -> Result<Response, Failure> {
    let branch = blocking(move || lab.fork(&id, req.tick, req.label)).await?;
    Ok(reply(StatusCode::CREATED, &branch))
}

#[derive(Debug, Deserialize)]
struct Range {
    #[serde(default)]
    from: u64,
    to: Option<u64>,
}

async fn timeline(
    State(lab): Shared,
    Path(id): Path<BranchId>,
    q: Result<Query<Range>, QueryRejection>,
) -> Result<Response, Failure> {
    let range = query(q)?;
    let records = blocking(move || lab.timeline(&id, Tick(range.from), range.to.map(Tick))).await?;
    Ok(reply(StatusCode::OK, &Records { records }))
}

async fn replay(State(lab): Shared, Path(id): Path<BranchId>) -> Result<Response, Failure> {
    let branch_id = id.clone();
    let hash = blocking(move || lab.replay(&id)).await?;
    Ok(reply(StatusCode::OK, &json!({ "branch_id": branch_id, "state_hash": hash })))
}

async fn open_session(State(lab): Shared, Body(req): Body<SessionRequest>) -> Result<Response, Failure> {
    let session = blocking(move || lab.open_session(&req.left, &req.right)).await?;
    Ok(reply(StatusCode::CREATED, &session))
}

async fn get_session(State(lab): Shared, Path(id): Path<String>) -> Result<Response, Failure> {
    let session = blocking(move || lab.session(&id)).await?;
    Ok(reply(StatusCode::OK, &session))
}

async fn control(State(lab): Shared, Path(id): Path<String>, Body(req): Body<ControlRequest>) -> Result<Response, Failure> {
    let (session, records) = blocking(move || lab.control(&id, req.pane, req.action)).await?;
    Ok(reply(StatusCode::OK, &json!({ "session": session, "records": records })))
}

async fn report(State(lab): Shared, Path(id): Path<String>) -> Result<Response, Failure> {
    let report = blocking(move || lab.report(&id)).await?;
    Ok(reply(StatusCode::OK, &report))
}

#[derive(Debug, Deserialize)]
struct SeriesQuery {
    commodity: CommodityId,
}

async fn series(
    State(lab): Shared,
    Path(id): Path<String>,
    q: Result<Query<SeriesQuery>, QueryRejection>,
) -> Result<Response, Failure> {
    let commodity = query(q)?.commodity;
    let c = commodity.clone();
    let series = blocking(move || lab.divergence_series(&id, &c)).await?;
    Ok(reply(StatusCode::OK, &json!({ "commodity": commodity, "series": series })))
}

#[derive(Debug, Deserialize)]
struct StreamQuery {
    from: Option<u64>,
}

/// Live TickRecords for one branch. Resumes after `Last-Event-ID` (a tick)
/// or from `?from=`, replaying stored records first. A subscriber that
/// falls too far behind is disconnected and can resume the same way.
async fn stream(
    State(lab): Shared,
    Path(id): Path<BranchId>,
    headers: HeaderMap,
    q: Result<Query<StreamQuery>, QueryRejection>,
) -> Result<Sse<impl Stream<Item = Result<Event, Infallible>>>, Failure> {
    let q = query(q)?;
    let resume = headers
        .get("last-event-id")
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.trim().parse::<u64>().ok())
        .map(|last| last + 1)
        .or(q.from);
    // Subscribe before reading the backlog so nothing falls in between.
    let rx = lab.subscribe(&id)?;
    let backlog: VecDeque<TickRecord> = match resume {
        Some(start) => {
            let head = {
                let (lab, id) = (lab.clone(), id.clone());
                blocking(move || lab.branch(&id)).await?.head_tick
            };
            if Tick(start) <= head {
                blocking(move || lab.timeline(&id, Tick(start), Some(head))).await?.into()
            } else {
                VecDeque::new()
            }
        }
        None => VecDeque::new(),
    };
    let last_sent = backlog.back().map(|r| r.tick).or(resume.and_then(|s| s.checked_sub(1)).map(Tick));

    let events = futures::stream::unfold((backlog, rx, last_sent), |(mut backlog, mut rx, mut last)| async move {
        let record = match backlog.pop_front() {
            Some(r) => r,
            None => loop {
                match rx.recv().await {
                    Ok(r) if last.is_some_and(|l| r.tick <= l) => continue,
                    Ok(r) => break r,
                    Err(RecvError::Lagged(n)) => {
                        tracing::info!(skipped = n, "disconnecting lagging stream subscriber");
                        return None;
                    }
                    Err(RecvError::Closed) => return None,
                }
            },
        };
        last = Some(record.tick);
        Some((Ok(tick_event(&record)), (backlog, rx, last)))
    });
    Ok(Sse::new(events).keep_alive(KeepAlive::new().interval(HEARTBEAT)))
}

fn tick_event(record: &TickRecord) -> Event {
    Event::default()
        .id(record.tick.0.to_string())
        .event("tick")
        .data(to_canonical_string(record).expect("records serialize"))
}
