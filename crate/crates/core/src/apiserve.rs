//! Live episode state for external clients and the human decision channel.
//!
//! The agent loop is the only writer: it publishes a fresh snapshot and an
//! event after each step. Readers take snapshots without blocking the loop;
//! human decisions travel through a single-consumer command channel.

use std::sync::mpsc;
use std::sync::{Arc, Mutex, RwLock};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::sync::broadcast;

use crate::geom::Cell;
use crate::harness::{EpisodeEvent, EpisodeMetrics, LiveState, Observer};
use crate::navexec::CellState;
use crate::planner::{open_nodes, Action, DoneReason, Phase, PlanContext, Planner, PlannerDecision};
use crate::scenegraph::{GraphSnapshot, NodeId};
use crate::world::Pose;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ApiError {
    #[error("no episode is running")]
    NoEpisode,
    #[error("no decision is pending")]
    NoPendingDecision,
    #[error("node {0} is not among the pending candidates")]
    InvalidNode(NodeId),
    #[error("the agent loop is gone")]
    Closed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ServeMode {
    Human,
    Auto,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PendingDecision {
    pub step: u32,
    pub target: String,
    pub candidates: Vec<NodeId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapDocument {
    pub width: i32,
    pub height: i32,
    /// Row-major runs from the southwest corner.
    pub runs: Vec<(CellState, u32)>,
    pub frontiers: Vec<Cell>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSoFar {
    pub steps_taken: u32,
    pub budget: u32,
    pub path_length: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateSnapshot {
    pub episode: String,
    pub target: String,
    pub step: u32,
    pub pose: Pose,
    pub phase: Phase,
    pub map: MapDocument,
    pub graph: GraphSnapshot,
    pub pending: Option<PendingDecision>,
    pub metrics: MetricsSoFar,
    pub finished: Option<EpisodeMetrics>,
}

impl StateSnapshot {
    fn from_live(s: &LiveState) -> Self {
        Self {
            episode: s.episode.clone(),
            target: s.target.clone(),
            step: s.step,
            pose: s.pose,
            phase: s.phase,
            map: MapDocument {
                width: s.map.width,
                height: s.map.height,
                runs: s.map.rle(),
                frontiers: s.map.frontiers().into_iter().collect(),
            },
            graph: s.graph.clone(),
            pending: None,
            metrics: MetricsSoFar {
                steps_taken: s.step,
                budget: s.budget,
                path_length: s.path_length,
            },
            finished: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum HumanCommand {
    ChooseExploreScene,
    ChooseNode { node: NodeId },
    DeclareStop,
}

impl HumanCommand {
    pub fn decision(self) -> PlannerDecision {
        let action = match self {
            HumanCommand::ChooseExploreScene => Action::ExploreScene,
            HumanCommand::ChooseNode { node } => Action::ExploreObj(node),
            HumanCommand::DeclareStop => Action::Done(DoneReason::Found),
        };
        PlannerDecision {
            action,
            rationale: "human operator".into(),
        }
    }
}

/// Shared state between one agent loop and any number of readers.
#[derive(Debug)]
pub struct Hub {
    mode: ServeMode,
    state: RwLock<Option<StateSnapshot>>,
    pending: Mutex<Option<PendingDecision>>,
    commands: Mutex<Option<mpsc::Sender<HumanCommand>>>,
    events: broadcast::Sender<EpisodeEvent>,
}

impl Hub {
    pub fn new(mode: ServeMode, event_capacity: usize) -> Arc<Self> {
        let (events, _) = broadcast::channel(event_capacity.max(1));
        Arc::new(Self {
            mode,
            state: RwLock::new(None),
            pending: Mutex::new(None),
            commands: Mutex::new(None),
            events,
        })
    }

    pub fn mode(&self) -> ServeMode {
        self.mode
    }

    pub fn get_state(&self) -> Result<StateSnapshot, ApiError> {
        let mut s = self.state.read().expect("state lock").clone().ok_or(ApiError::NoEpisode)?;
        s.pending = self.pending.lock().expect("pending lock").clone();
        Ok(s)
    }

    pub fn pending(&self) -> Option<PendingDecision> {
        self.pending.lock().expect("pending lock").clone()
    }

    /// Validates a human command against the pending request and hands it to the loop.
    pub fn submit_decision(&self, cmd: HumanCommand) -> Result<(), ApiError> {
        let mut pending = self.pending.lock().expect("pending lock");
        let req = pending.as_ref().ok_or(ApiError::NoPendingDecision)?;
        if let HumanCommand::ChooseNode { node } = cmd {
            if !req.candidates.contains(&node) {
                return Err(ApiError::InvalidNode(node));
            }
        }
        let tx = self.commands.lock().expect("command lock").clone().ok_or(ApiError::Closed)?;
        tx.send(cmd).map_err(|_| ApiError::Closed)?;
        *pending = None;
        Ok(())
    }

    pub fn subscribe(&self) -> EventSubscription {
        EventSubscription {
            rx: self.events.subscribe(),
            last_step: 0,
        }
    }

    /// Planner that waits for commands submitted through this hub.
    pub fn human_planner(self: &Arc<Self>) -> HumanPlanner {
        let (tx, rx) = mpsc::channel();
        *self.commands.lock().expect("command lock") = Some(tx);
        HumanPlanner { rx }
    }

    pub fn observer(self: &Arc<Self>) -> HubObserver {
        HubObserver(self.clone())
    }

    fn publish(&self, state: &LiveState, event: EpisodeEvent) {
        {
            let mut guard = self.state.write().expect("state lock");
            let finished = guard.as_ref().and_then(|s| s.finished.clone());
            let mut snap = StateSnapshot::from_live(state);
            snap.finished = match &event {
                EpisodeEvent::EpisodeFinished { metrics, .. } => Some(metrics.clone()),
                _ => finished.filter(|m| m.episode == state.episode),
            };
            *guard = Some(snap);
        }
        match (self.mode, &event) {
            (ServeMode::Human, EpisodeEvent::DecisionRequested { step }) => {
                *self.pending.lock().expect("pending lock") = Some(PendingDecision {
                    step: *step,
                    target: state.target.clone(),
                    candidates: open_nodes(&state.graph).into_iter().collect(),
                });
            }
            (_, EpisodeEvent::EpisodeFinished { .. }) => {
                *self.pending.lock().expect("pending lock") = None;
            }
            _ => {}
        }
        // No subscribers is fine.
        let _ = self.events.send(event);
    }
}

/// Forwards loop events into a hub.
pub struct HubObserver(Arc<Hub>);

impl Observer for HubObserver {
    fn publish(&mut self, state: &LiveState, event: EpisodeEvent) {
        self.0.publish(state, event);
    }
}

/// Ordered event feed; a lagging reader gets a gap marker instead of the dropped events.
pub struct EventSubscription {
    rx: broadcast::Receiver<EpisodeEvent>,
    last_step: u32,
}

impl EventSubscription {
    pub async fn next(&mut self) -> Option<EpisodeEvent> {
        let ev = match self.rx.recv().await {
            Ok(ev) => ev,
            Err(broadcast::error::RecvError::Lagged(missed)) => EpisodeEvent::Gap {
                step: self.last_step,
                missed,
            },
            Err(broadcast::error::RecvError::Closed) => return None,
        };
        self.last_step = ev.step();
        Some(ev)
    }

    /// Non-blocking variant; `None` when nothing is queued.
    pub fn try_next(&mut self) -> Option<EpisodeEvent> {
        let ev = match self.rx.try_recv() {
            Ok(ev) => ev,
            Err(broadcast::error::TryRecvError::Lagged(missed)) => EpisodeEvent::Gap {
                step: self.last_step,
                missed,
            },
            Err(_) => return None,
        };
        self.last_step = ev.step();
        Some(ev)
    }
}

/// Blocks the agent loop until a human command arrives.
pub struct HumanPlanner {
    rx: mpsc::Receiver<HumanCommand>,
}

impl Planner for HumanPlanner {
    fn decide(&mut self, _ctx: &PlanContext<'_>) -> PlannerDecision {
        match self.rx.recv() {
            Ok(cmd) => cmd.decision(),
            Err(_) => PlannerDecision {
                action: Action::Done(DoneReason::Exhausted),
                rationale: "operator disconnected".into(),
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::navexec::EpisodicMap;
    use crate::scenegraph::NodeRecord;

    fn live(step: u32, nodes: &[u32]) -> LiveState {
        LiveState {
            episode: "e".into(),
            target: "pillow".into(),
            step,
            budget: 500,
            pose: Pose::new(1, 1, crate::geom::Heading::N),
            phase: Phase::ExploreScene,
            map: EpisodicMap::new(3, 3),
            graph: GraphSnapshot {
                nodes: nodes
                    .iter()
                    .map(|&i| NodeRecord {
                        id: NodeId(i),
                        label: "couch".into(),
                        centroid: [0.0; 3],
                        caption: None,
                        explored: false,
                        target_candidate: false,
                        frame_count: 1,
                    })
                    .collect(),
            },
            path_length: 0,
        }
    }

    #[test]
    fn no_episode_then_snapshot() {
        let hub = Hub::new(ServeMode::Auto, 16);
        assert_eq!(hub.get_state(), Err(ApiError::NoEpisode));
        hub.observer().publish(&live(0, &[]), EpisodeEvent::StepComplete { step: 0 });
        let s = hub.get_state().unwrap();
        assert_eq!(s.step, 0);
        assert!(s.graph.is_empty());
        assert_eq!(s.map.runs, vec![(CellState::Unknown, 9)]);
    }

    #[test]
    fn decisions_are_validated() {
        let hub = Hub::new(ServeMode::Human, 16);
        let mut planner = hub.human_planner();
        assert_eq!(hub.submit_decision(HumanCommand::ChooseExploreScene), Err(ApiError::NoPendingDecision));
        hub.observer().publish(&live(3, &[0, 2]), EpisodeEvent::DecisionRequested { step: 3 });
        assert_eq!(hub.get_state().unwrap().pending.unwrap().candidates, vec![NodeId(0), NodeId(2)]);
        assert_eq!(
            hub.submit_decision(HumanCommand::ChooseNode { node: NodeId(1) }),
            Err(ApiError::InvalidNode(NodeId(1)))
        );
        hub.submit_decision(HumanCommand::ChooseNode { node: NodeId(2) }).unwrap();
        assert!(hub.pending().is_none());
        let map = EpisodicMap::new(1, 1);
        let snap = GraphSnapshot::default();
        let ctx = PlanContext {
            snapshot: &snap,
            target: "pillow",
            history: &[],
            map: &map,
            agent: Cell::new(0, 0),
            r_goal: 2.0,
            step: 3,
        };
        assert_eq!(planner.decide(&ctx).action, Action::ExploreObj(NodeId(2)));
    }

    #[test]
    fn lagging_subscriber_sees_gap() {
        let hub = Hub::new(ServeMode::Auto, 2);
        let mut sub = hub.subscribe();
        for step in 0..5 {
            hub.observer().publish(&live(step, &[]), EpisodeEvent::StepComplete { step });
        }
        assert!(matches!(sub.try_next(), Some(EpisodeEvent::Gap { missed: 3, .. })));
        assert_eq!(sub.try_next(), Some(EpisodeEvent::StepComplete { step: 3 }));
        assert_eq!(sub.try_next(), Some(EpisodeEvent::StepComplete { step: 4 }));
        assert_eq!(sub.try_next(), None);
    }

    #[test]
    fn command_json_shape() {
        let c: HumanCommand = serde_json::from_str(r#"{"kind":"choose_node","node":4}"#).unwrap();
        assert_eq!(c, HumanCommand::ChooseNode { node: NodeId(4) });
        let c: HumanCommand = serde_json::from_str(r#"{"kind":"declare_stop"}"#).unwrap();
        assert_eq!(c.decision().action, Action::Done(DoneReason::Found));
    }
}
