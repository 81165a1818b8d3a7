//! HTTP front for a live episode: a pull snapshot, a push event stream and the
//! human decision endpoint.
//!
//! Routes:
//! - `GET /state` — current [`StateSnapshot`] as JSON; 404 before the first step.
//! - `POST /decision` — a [`HumanCommand`] JSON body, e.g. `{"kind":"choose_node","node":3}`.
//! - `GET /events` — server-sent events, one JSON [`EpisodeEvent`] per message, named by its `kind`.

use std::convert::Infallible;
use std::net::SocketAddr;
use std::sync::Arc;
use std::thread::JoinHandle;

use axum::extract::State;
use axum::http::StatusCode;
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures_util::stream::{self, Stream};
use serde_json::json;

use semnav_core::apiserve::{ApiError, Hub, HumanCommand, ServeMode, StateSnapshot};
use semnav_core::harness::{build_stack, run_episode_with, EpisodeEvent, EpisodeOutcome, HarnessError, RunConfig};
use semnav_core::planner::Planner;
use semnav_core::world::{EpisodeSpec, GridScene};

struct ApiFailure(ApiError);

impl IntoResponse for ApiFailure {
    fn into_response(self) -> Response {
        let status = match self.0 {
            ApiError::NoEpisode => StatusCode::NOT_FOUND,
            ApiError::NoPendingDecision => StatusCode::CONFLICT,
            ApiError::InvalidNode(_) => StatusCode::UNPROCESSABLE_ENTITY,
            ApiError::Closed => StatusCode::SERVICE_UNAVAILABLE,
        };
        (status, Json(json!({ "error": self.0.to_string() }))).into_response()
    }
}

async fn state(State(hub): State<Arc<Hub>>) -> Result<Json<StateSnapshot>, ApiFailure> {
    hub.get_state().map(Json).map_err(ApiFailure)
}

async fn decision(State(hub): State<Arc<Hub>>, Json(cmd): Json<HumanCommand>) -> Result<StatusCode, ApiFailure> {
    hub.submit_decision(cmd).map_err(ApiFailure)?;
    Ok(StatusCode::ACCEPTED)
}

fn event_kind(ev: &EpisodeEvent) -> &'static str {
    match ev {
        EpisodeEvent::StepComplete { .. } => "step_complete",
        EpisodeEvent::NodeCreated { .. } => "node_created",
        EpisodeEvent::DecisionRequested { .. } => "decision_requested",
        EpisodeEvent::EpisodeFinished { .. } => "episode_finished",
        EpisodeEvent::Gap { .. } => "gap",
    }
}

/// SSE messages for one subscription; ends when the hub is dropped.
pub fn event_stream(hub: &Hub) -> impl Stream<Item = Result<Event, Infallible>> + Send + 'static {
    stream::unfold(hub.subscribe(), |mut sub| async move {
        let ev = sub.next().await?;
        let msg = Event::default()
            .event(event_kind(&ev))
            .id(ev.step().to_string())
            .data(serde_json::to_string(&ev).expect("event serializes"));
        Some((Ok(msg), sub))
    })
}

async fn events(State(hub): State<Arc<Hub>>) -> Sse<impl Stream<Item = Result<Event, Infallible>>> {
    Sse::new(event_stream(&hub)).keep_alive(KeepAlive::default())
}

pub fn router(hub: Arc<Hub>) -> Router {
    Router::new()
        .route("/state", get(state))
        .route("/decision", post(decision))
        .route("/events", get(events))
        .with_state(hub)
}

/// Serves the hub until the process exits.
pub async fn serve(hub: Arc<Hub>, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("serving episode state on http://{}", listener.local_addr()?);
    axum::serve(listener, router(hub)).await
}

/// Runs one episode on its own thread, publishing into `hub`. In human mode the
/// planner waits for `/decision`; otherwise the planner configured in `cfg` decides.
pub fn spawn_episode(
    hub: Arc<Hub>,
    spec: EpisodeSpec,
    scene: Arc<GridScene>,
    cfg: RunConfig,
) -> JoinHandle<Result<EpisodeOutcome, HarnessError>> {
    let (planner, backends) = build_stack(&cfg);
    let mut planner: Box<dyn Planner> = match hub.mode() {
        ServeMode::Human => Box::new(hub.human_planner()),
        ServeMode::Auto => planner,
    };
    std::thread::spawn(move || {
        let mut observer = hub.observer();
        run_episode_with(&spec, scene, &cfg, planner.as_mut(), &backends, Some(&mut observer))
    })
}
