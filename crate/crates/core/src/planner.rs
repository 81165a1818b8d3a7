//! High-level decisions: keep exploring frontiers or head for a promising node.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::geom::Cell;
use crate::llmgw::{bindings, parse, Gateway, NodeRef, Parsed, ParsedAction, PromptRole, PromptTemplate};
use crate::navexec::EpisodicMap;
use crate::scenegraph::{GraphSnapshot, NodeId, NodeRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    ExploreScene,
    ExploreObj,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DoneReason {
    Found,
    Exhausted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    ExploreScene,
    ExploreObj(NodeId),
    Done(DoneReason),
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Action::ExploreScene => write!(f, "<explore_scene>"),
            Action::ExploreObj(id) => write!(f, "<explore_obj> {id}"),
            Action::Done(DoneReason::Found) => write!(f, "<done> found"),
            Action::Done(DoneReason::Exhausted) => write!(f, "<done> exhausted"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannerDecision {
    pub action: Action,
    pub rationale: String,
}

impl PlannerDecision {
    pub fn explore_scene(rationale: impl Into<String>) -> Self {
        Self {
            action: Action::ExploreScene,
            rationale: rationale.into(),
        }
    }
}

/// Everything a planner may look at when deciding.
#[derive(Debug, Clone, Copy)]
pub struct PlanContext<'a> {
    pub snapshot: &'a GraphSnapshot,
    pub target: &'a str,
    pub history: &'a [PlannerDecision],
    pub map: &'a EpisodicMap,
    pub agent: Cell,
    pub r_goal: f64,
    pub step: u32,
}

pub trait Planner: Send {
    fn decide(&mut self, ctx: &PlanContext<'_>) -> PlannerDecision;
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TargetAffinity {
    /// Room where the target is usually found; captions placing a node "in the {room}" earn the bonus.
    #[serde(default)]
    pub room: Option<String>,
    #[serde(default)]
    pub scores: BTreeMap<String, f64>,
}

/// Co-location scores between a target and the labels of scene nodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffinityTable {
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    #[serde(default = "default_bonus")]
    pub caption_bonus: f64,
    /// Score of a node carrying the target label itself.
    #[serde(default = "default_self_score")]
    pub self_score: f64,
    #[serde(default)]
    pub synonyms: BTreeMap<String, String>,
    pub targets: BTreeMap<String, TargetAffinity>,
}

fn default_threshold() -> f64 {
    0.5
}
fn default_bonus() -> f64 {
    0.1
}
fn default_self_score() -> f64 {
    1.0
}

impl AffinityTable {
    pub fn bundled() -> Self {
        Self::from_toml_str(include_str!("../data/affinity.toml")).expect("bundled affinity table parses")
    }

    pub fn from_toml_str(text: &str) -> Result<Self, String> {
        let t: AffinityTable = toml::from_str(text).map_err(|e| e.to_string())?;
        for (target, aff) in &t.targets {
            if let Some((l, s)) = aff.scores.iter().find(|(_, s)| !(0.0..=1.0).contains(*s)) {
                return Err(format!("score {s} for ({target}, {l}) is outside [0, 1]"));
            }
        }
        Ok(t)
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        Self::from_toml_str(&std::fs::read_to_string(path).map_err(|e| e.to_string())?)
    }

    fn canonical<'a>(&'a self, label: &'a str) -> &'a str {
        self.synonyms.get(label).map(String::as_str).unwrap_or(label)
    }

    pub fn affinity(&self, target: &str, label: &str) -> f64 {
        let label = self.canonical(label);
        if label == self.canonical(target) {
            return self.self_score;
        }
        self.targets
            .get(target)
            .and_then(|t| t.scores.get(label))
            .copied()
            .unwrap_or(0.0)
    }

    /// Affinity plus the caption bonus when the caption names the target's room.
    pub fn score(&self, target: &str, node: &NodeRecord, captions: bool) -> f64 {
        let mut s = self.affinity(target, &node.label);
        if captions {
            let room = self.targets.get(target).and_then(|t| t.room.as_deref());
            if let (Some(room), Some(caption)) = (room, node.caption.as_deref()) {
                if caption.contains(&format!("in the {room}")) {
                    s += self.caption_bonus;
                }
            }
        }
        s
    }

    /// Every score, the threshold and the bonus multiplied by `c`.
    pub fn scaled(&self, c: f64) -> Self {
        let mut t = self.clone();
        t.threshold *= c;
        t.caption_bonus *= c;
        t.self_score *= c;
        for aff in t.targets.values_mut() {
            for s in aff.scores.values_mut() {
                *s *= c;
            }
        }
        t
    }
}

/// Table-driven planner standing in for the language model.
#[derive(Debug, Clone)]
pub struct OraclePlanner {
    pub table: AffinityTable,
    pub captions: bool,
}

impl OraclePlanner {
    pub fn new(table: AffinityTable, captions: bool) -> Self {
        Self { table, captions }
    }
}

impl Default for OraclePlanner {
    fn default() -> Self {
        Self::new(AffinityTable::bundled(), true)
    }
}

fn travel_distance(ctx: &PlanContext<'_>, node: &NodeRecord) -> u32 {
    let [x, y, _] = node.centroid;
    let goals = ctx.map.cells_near(x, y, ctx.r_goal);
    ctx.map.path_length(ctx.agent, &goals).unwrap_or(u32::MAX)
}

impl Planner for OraclePlanner {
    fn decide(&mut self, ctx: &PlanContext<'_>) -> PlannerDecision {
        let eps = 1e-12;
        let scored: Vec<(f64, &NodeRecord)> = ctx
            .snapshot
            .nodes
            .iter()
            .filter(|n| !n.explored)
            .map(|n| (self.table.score(ctx.target, n, self.captions), n))
            .filter(|(s, _)| *s >= self.table.threshold - eps)
            .collect();
        let Some(top) = scored.iter().map(|(s, _)| *s).reduce(f64::max) else {
            return PlannerDecision::explore_scene("no node reaches the affinity threshold");
        };
        let best = scored
            .iter()
            .filter(|(s, _)| *s >= top - eps)
            .map(|(_, n)| (travel_distance(ctx, n), n.id, *n))
            .min_by_key(|(d, id, _)| (*d, *id))
            .expect("at least one top-scoring node");
        PlannerDecision {
            action: Action::ExploreObj(best.1),
            rationale: format!("{} scores {top:.2} for {}", best.2.label, ctx.target),
        }
    }
}

/// Planner backed by a chat-completion model.
#[derive(Debug, Clone)]
pub struct LlmPlanner {
    pub gateway: Gateway,
    pub template: PromptTemplate,
    pub captions: bool,
}

impl LlmPlanner {
    pub fn new(gateway: Gateway, captions: bool) -> Self {
        Self {
            gateway,
            template: PromptTemplate::bundled(PromptRole::Planner),
            captions,
        }
    }

    pub fn render(&self, ctx: &PlanContext<'_>) -> Result<String, crate::llmgw::GatewayError> {
        let nodes = render_nodes(ctx.snapshot, self.captions);
        let history = if ctx.history.is_empty() {
            "none".to_string()
        } else {
            ctx.history
                .iter()
                .rev()
                .take(5)
                .rev()
                .map(|d| d.action.to_string())
                .collect::<Vec<_>>()
                .join(", ")
        };
        self.template.render(&bindings([
            ("target", ctx.target.to_string()),
            ("nodes", nodes),
            ("history", history),
        ]))
    }

    fn attempt(&self, prompt: &str, snapshot: &GraphSnapshot) -> Result<Action, String> {
        let reply = self
            .gateway
            .complete(PromptRole::Planner, prompt)
            .and_then(|r| parse(PromptRole::Planner, &r))
            .map_err(|e| e.to_string())?;
        let open: Vec<&NodeRecord> = snapshot.nodes.iter().filter(|n| !n.explored).collect();
        match reply {
            Parsed::Action(ParsedAction::ExploreScene) => Ok(Action::ExploreScene),
            Parsed::Action(ParsedAction::Done) => Ok(Action::Done(DoneReason::Exhausted)),
            Parsed::Action(ParsedAction::ExploreObj(NodeRef::Id(id))) => open
                .iter()
                .find(|n| n.id == NodeId(id))
                .map(|n| Action::ExploreObj(n.id))
                .ok_or_else(|| format!("node {id} is not an unexplored node")),
            Parsed::Action(ParsedAction::ExploreObj(NodeRef::Label(l))) => open
                .iter()
                .find(|n| n.label.eq_ignore_ascii_case(&l))
                .map(|n| Action::ExploreObj(n.id))
                .ok_or_else(|| format!("no unexplored node labelled '{l}'")),
            other => Err(format!("unexpected reply {other:?}")),
        }
    }
}

/// One line per unexplored node: `id: label - caption`.
pub fn render_nodes(snapshot: &GraphSnapshot, captions: bool) -> String {
    let lines: Vec<String> = snapshot
        .nodes
        .iter()
        .filter(|n| !n.explored)
        .map(|n| match (&n.caption, captions) {
            (Some(c), true) => format!("{}: {} - {}", n.id, n.label, c),
            _ => format!("{}: {}", n.id, n.label),
        })
        .collect();
    if lines.is_empty() {
        "(none)".into()
    } else {
        lines.join("\n")
    }
}

impl Planner for LlmPlanner {
    fn decide(&mut self, ctx: &PlanContext<'_>) -> PlannerDecision {
        let prompt = match self.render(ctx) {
            Ok(p) => p,
            Err(e) => return PlannerDecision::explore_scene(format!("prompt error: {e}")),
        };
        let mut last = String::new();
        for _ in 0..2 {
            match self.attempt(&prompt, ctx.snapshot) {
                Ok(action) => {
                    return PlannerDecision {
                        action,
                        rationale: "model reply".into(),
                    }
                }
                Err(e) => {
                    log::warn!("planner reply rejected: {e}");
                    last = e;
                }
            }
        }
        PlannerDecision::explore_scene(format!("fallback after malformed replies: {last}"))
    }
}

/// Plays back recorded decisions; explores once they run out.
#[derive(Debug, Clone, Default)]
pub struct ReplayPlanner {
    queue: VecDeque<PlannerDecision>,
}

impl ReplayPlanner {
    pub fn new(decisions: impl IntoIterator<Item = PlannerDecision>) -> Self {
        Self {
            queue: decisions.into_iter().collect(),
        }
    }
}

impl Planner for ReplayPlanner {
    fn decide(&mut self, _ctx: &PlanContext<'_>) -> PlannerDecision {
        self.queue
            .pop_front()
            .unwrap_or_else(|| PlannerDecision::explore_scene("replay exhausted"))
    }
}

/// Unexplored node ids; a decision may only point at one of these.
pub fn open_nodes(snapshot: &GraphSnapshot) -> BTreeSet<NodeId> {
    snapshot.nodes.iter().filter(|n| !n.explored).map(|n| n.id).collect()
}
