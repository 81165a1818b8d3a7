//! Episode runner, metrics and ablation tables.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::io::Write;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::caption::{CaptionQueue, Captioner};
use crate::geom::{Cell, Heading};
use crate::llmgw::{Gateway, ModelEndpoint, Transcript};
use crate::navexec::{build_goal_map, fmm, next_primitive, turn_toward, CellState, EpisodicMap, GoalMode};
use crate::perception::{detect, splitmix, Detection, DetectorConfig};
use crate::planner::{
    Action, AffinityTable, DoneReason, LlmPlanner, OraclePlanner, Phase, PlanContext, Planner, PlannerDecision,
};
use crate::pruner::{should_bypass, AnchorConfig, DensityContext, PruneRequest, Pruner};
use crate::scenegraph::{GraphSnapshot, Integration, LabelResolver, NodeId, SceneGraph};
use crate::stm::{conclude, PhaseOutcome, ShortTermMemory, StmFrame, VerificationResult, Verifier};
use crate::world::{EpisodeSpec, EpisodeSuite, GridScene, MovePrimitive, Observation, Pose, SensorConfig, Simulator};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("cannot aggregate an empty metric list")]
    Empty,
    #[error(transparent)]
    World(#[from] crate::world::WorldError),
    #[error("results output: {0}")]
    Output(String),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablations {
    pub no_stm: bool,
    pub no_pruner: bool,
    pub no_captions: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum PlannerKind {
    Oracle,
    Remote(ModelEndpoint),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub planner: PlannerKind,
    pub ablations: Ablations,
    /// Noise settings; the seed is replaced by a per-episode seed.
    pub detector: DetectorConfig,
    pub seed: u64,
    pub sensor: SensorConfig,
    pub tau_geo: f64,
    pub tau_stm: f64,
    pub theta_v: f64,
    pub verify_error_rate: f64,
    pub r_dense: f64,
    pub r_goal: f64,
    pub decide_every: u32,
    pub initial_pan: bool,
    /// Overrides every episode's step budget when set.
    pub step_budget: Option<u32>,
    #[serde(skip)]
    pub affinity: Option<AffinityTable>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            planner: PlannerKind::Oracle,
            ablations: Ablations::default(),
            detector: DetectorConfig::noise_free(),
            seed: 0,
            sensor: SensorConfig::default(),
            tau_geo: 0.25,
            tau_stm: crate::stm::DEFAULT_TAU_STM,
            theta_v: crate::stm::DEFAULT_THETA_V,
            verify_error_rate: 0.0,
            r_dense: 6.0,
            r_goal: crate::navexec::DEFAULT_GOAL_RADIUS,
            decide_every: 10,
            initial_pan: true,
            step_budget: None,
            affinity: None,
        }
    }
}

impl RunConfig {
    pub fn noisy(fp: f64, fn_: f64) -> Self {
        Self {
            detector: DetectorConfig {
                false_positive_rate: fp,
                miss_rate: fn_,
                ..DetectorConfig::default()
            },
            ..Self::default()
        }
    }

    pub fn with_ablations(&self, ablations: Ablations) -> Self {
        Self {
            ablations,
            ..self.clone()
        }
    }

    /// Seed used for everything random inside one episode.
    pub fn episode_seed(&self, episode: &str) -> u64 {
        let h = episode
            .bytes()
            .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ u64::from(b)).wrapping_mul(0x1000_0000_01b3));
        splitmix(self.seed ^ h)
    }
}

/// Model-backed services other than the planner.
#[derive(Debug, Clone)]
pub struct Backends {
    pub pruner: Pruner,
    pub captioner: Captioner,
    pub resolver: LabelResolver,
    /// `None` verifies with the ground-truth oracle.
    pub verifier: Option<Gateway>,
}

impl Backends {
    pub fn oracle() -> Self {
        Self {
            pruner: Pruner::oracle(),
            captioner: Captioner::Oracle,
            resolver: LabelResolver::Plurality,
            verifier: None,
        }
    }

    /// Every language role served by one gateway.
    pub fn remote(gateway: &Gateway) -> Self {
        Self {
            pruner: Pruner::remote(gateway.clone()),
            captioner: Captioner::lvlm(gateway.clone()),
            resolver: LabelResolver::lvlm(gateway.clone()),
            verifier: Some(gateway.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub episode: String,
    pub success: bool,
    pub steps_taken: u32,
    pub path_length: u32,
    pub shortest_length: u32,
    pub spl: f64,
}

/// `l / max(p, l)` on success, zero otherwise.
pub fn spl(success: bool, shortest: u32, path: u32) -> f64 {
    if !success {
        return 0.0;
    }
    let denom = path.max(shortest);
    if denom == 0 {
        1.0
    } else {
        f64::from(shortest) / f64::from(denom)
    }
}

impl EpisodeMetrics {
    pub fn new(episode: impl Into<String>, success: bool, steps_taken: u32, path_length: u32, shortest_length: u32) -> Self {
        Self {
            episode: episode.into(),
            success,
            steps_taken,
            path_length,
            shortest_length,
            spl: spl(success, shortest_length, path_length),
        }
    }
}

/// Mean success and mean SPL.
pub fn aggregate(metrics: &[EpisodeMetrics]) -> Result<(f64, f64), HarnessError> {
    if metrics.is_empty() {
        return Err(HarnessError::Empty);
    }
    let n = metrics.len() as f64;
    let sr = metrics.iter().filter(|m| m.success).count() as f64 / n;
    let spl = metrics.iter().map(|m| m.spl).sum::<f64>() / n;
    Ok((sr, spl))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u32,
    pub pose: Pose,
    pub action: MovePrimitive,
    pub phase: Phase,
    pub detections: Vec<String>,
    pub pruned: Vec<String>,
    pub created: Vec<NodeId>,
    pub node_count: usize,
    pub goal: Option<GoalMode>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionRecord {
    pub step: u32,
    pub decision: PlannerDecision,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseRecord {
    pub step: u32,
    pub node: NodeId,
    pub stm_frames: usize,
    pub candidates: usize,
    pub verifications: Vec<VerificationResult>,
    pub found: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub step: u32,
    pub node: NodeId,
    pub phase: Phase,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EpisodeTrace {
    pub episode: String,
    pub steps: Vec<StepRecord>,
    pub decisions: Vec<DecisionRecord>,
    pub phases: Vec<PhaseRecord>,
    pub captions: Vec<CaptionRecord>,
    pub end_reason: String,
}

impl EpisodeTrace {
    pub fn decisions(&self) -> Vec<PlannerDecision> {
        self.decisions.iter().map(|d| d.decision.clone()).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("trace serializes")
    }
}

#[derive(Debug, Clone)]
pub struct EpisodeOutcome {
    pub metrics: EpisodeMetrics,
    pub trace: EpisodeTrace,
    pub graph: GraphSnapshot,
    pub transcript: Option<Transcript>,
}

/// State published to observers after every step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LiveState {
    pub episode: String,
    pub target: String,
    pub step: u32,
    pub budget: u32,
    pub pose: Pose,
    pub phase: Phase,
    pub map: EpisodicMap,
    pub graph: GraphSnapshot,
    pub path_length: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EpisodeEvent {
    StepComplete { step: u32 },
    NodeCreated { step: u32, node: NodeId },
    DecisionRequested { step: u32 },
    EpisodeFinished { step: u32, metrics: EpisodeMetrics },
    /// Events were dropped for a slow subscriber.
    Gap { step: u32, missed: u64 },
}

impl EpisodeEvent {
    pub fn step(&self) -> u32 {
        match self {
            EpisodeEvent::StepComplete { step }
            | EpisodeEvent::NodeCreated { step, .. }
            | EpisodeEvent::DecisionRequested { step }
            | EpisodeEvent::EpisodeFinished { step, .. }
            | EpisodeEvent::Gap { step, .. } => *step,
        }
    }
}

pub trait Observer: Send {
    fn publish(&mut self, state: &LiveState, event: EpisodeEvent);
}

/// Discards everything.
pub struct NoObserver;

impl Observer for NoObserver {
    fn publish(&mut self, _: &LiveState, _: EpisodeEvent) {}
}

struct Episode<'a> {
    spec: &'a EpisodeSpec,
    scene: Arc<GridScene>,
    cfg: &'a RunConfig,
    backends: &'a Backends,
    sim: Simulator,
    map: EpisodicMap,
    graph: SceneGraph,
    captions: CaptionQueue,
    stm: ShortTermMemory,
    detector: DetectorConfig,
    verifier: Verifier,
    prune_cache: BTreeMap<Vec<String>, Vec<String>>,
    phase: Phase,
    trace: EpisodeTrace,
    created_since_decide: bool,
    observer: Option<&'a mut dyn Observer>,
}

impl<'a> Episode<'a> {
    fn live_state(&self) -> LiveState {
        LiveState {
            episode: self.spec.name.clone(),
            target: self.spec.target_label.clone(),
            step: self.sim.steps_taken(),
            budget: self.sim.budget(),
            pose: self.sim.pose(),
            phase: self.phase,
            map: self.map.clone(),
            graph: self.graph.snapshot(),
            path_length: self.sim.path_length(),
        }
    }

    fn emit(&mut self, events: Vec<EpisodeEvent>) {
        if self.observer.is_none() || events.is_empty() {
            return;
        }
        let state = self.live_state();
        if let Some(o) = self.observer.as_mut() {
            for e in events {
                o.publish(&state, e);
            }
        }
    }

    fn prune(&mut self, labels: Vec<String>) -> Vec<String> {
        if let Some(hit) = self.prune_cache.get(&labels) {
            return hit.clone();
        }
        let out = self.backends_pruner().prune(&PruneRequest {
            input_labels: labels.clone(),
            exemplars: crate::pruner::bundled_exemplars(),
        });
        self.prune_cache.insert(labels, out.labels.clone());
        out.labels
    }

    fn backends_pruner(&self) -> Pruner {
        if self.cfg.ablations.no_pruner {
            Pruner::identity()
        } else {
            self.backends.pruner.clone()
        }
    }

    /// Perception → pruning → fusion → captions for one observation.
    fn process(&mut self, obs: &Observation) -> (Vec<String>, Vec<String>, Vec<NodeId>) {
        self.map.update(obs);
        let dets = detect(obs, &self.detector);
        let mut ctx = DensityContext::new(self.spec.target_label.clone(), self.cfg.r_dense);
        ctx.candidates = self.graph.target_candidates();
        let bypass: Vec<bool> = dets.iter().map(|d| should_bypass(d, &ctx)).collect();
        let mut to_prune: Vec<String> = dets
            .iter()
            .zip(&bypass)
            .filter(|(_, b)| !**b)
            .map(|(d, _)| d.label.clone())
            .collect();
        to_prune.sort();
        to_prune.dedup();
        let kept: BTreeSet<String> = if to_prune.is_empty() {
            BTreeSet::new()
        } else {
            self.prune(to_prune).into_iter().collect()
        };
        let fused_idx: Vec<usize> = (0..dets.len())
            .filter(|&i| bypass[i] || kept.contains(&dets[i].label))
            .collect();
        let fused: Vec<Detection> = fused_idx.iter().map(|&i| dets[i].clone()).collect();
        let results = self.graph.integrate(fused, obs.step);
        let created: Vec<NodeId> = results
            .iter()
            .filter(|(_, k)| *k == Integration::Created)
            .map(|(id, _)| self.graph.live_id(*id))
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        if self.phase == Phase::ExploreObj {
            let attribution = fused_idx.iter().zip(&results).map(|(&i, (id, _))| (i, *id)).collect();
            let frame = StmFrame {
                step: obs.step,
                pose: obs.pose,
                detections: dets.clone(),
                node_attribution: attribution,
            };
            self.stm
                .record(frame, self.phase)
                .expect("recording happens only in object phase");
        }
        if !created.is_empty() {
            self.created_since_decide = true;
            if !self.cfg.ablations.no_captions {
                let before: BTreeSet<NodeId> = self.captioned();
                self.captions
                    .on_new_nodes(&mut self.graph, &created, &self.scene, &self.backends.captioner);
                self.record_captions(before, obs.step);
            }
        }
        let labels = dets.iter().map(|d| d.label.clone()).collect();
        let pruned = fused_idx.iter().map(|&i| dets[i].label.clone()).collect();
        (labels, pruned, created)
    }

    fn captioned(&self) -> BTreeSet<NodeId> {
        self.graph.nodes().filter(|n| n.caption.is_some()).map(|n| n.id).collect()
    }

    fn record_captions(&mut self, before: BTreeSet<NodeId>, step: u32) {
        let after = self.captioned();
        for id in after.difference(&before) {
            self.trace.captions.push(CaptionRecord {
                step,
                node: *id,
                phase: self.phase,
            });
        }
    }

    /// Executes one primitive and processes the resulting observation.
    fn act(&mut self, action: MovePrimitive, goal: Option<GoalMode>) -> Option<Observation> {
        let pose = self.sim.pose();
        let obs = self.sim.step(action).ok()?;
        let (detections, pruned, created) = self.process(&obs);
        self.trace.steps.push(StepRecord {
            step: obs.step,
            pose,
            action,
            phase: self.phase,
            detections,
            pruned,
            created: created.clone(),
            node_count: self.graph.len(),
            goal,
        });
        let mut events: Vec<EpisodeEvent> = created
            .into_iter()
            .map(|node| EpisodeEvent::NodeCreated { step: obs.step, node })
            .collect();
        events.push(EpisodeEvent::StepComplete { step: obs.step });
        self.emit(events);
        Some(obs)
    }

    fn set_phase(&mut self, phase: Phase) {
        self.phase = phase;
        self.captions.set_phase(phase);
    }

    fn end_object_phase(&mut self) {
        self.set_phase(Phase::ExploreScene);
        self.stm.clear();
        if !self.cfg.ablations.no_captions {
            let before = self.captioned();
            self.captions
                .flush_on_phase_end(&mut self.graph, &self.scene, &self.backends.captioner);
            self.record_captions(before, self.sim.steps_taken());
        }
        self.created_since_decide = true;
    }

    /// Pan, look for primed target segments and verify them. Returns true when found.
    fn arrive(&mut self, node: NodeId) -> bool {
        let mut pan = Vec::new();
        if self.sim.remaining() >= 4 {
            for _ in 0..4 {
                match self.act(MovePrimitive::TurnLeft, Some(GoalMode::Object(node))) {
                    Some(o) => pan.push(o),
                    None => break,
                }
            }
        }
        let primed = self.detector.primed(&self.spec.target_label);
        let target = self.graph.canonical(&self.spec.target_label).to_string();
        let candidates: Vec<Detection> = pan
            .iter()
            .flat_map(|o| detect(o, &primed))
            .filter(|d| self.graph.canonical(&d.label) == target)
            .collect();
        let node_label = self.graph.node(node).map(|n| n.resolved_label.clone());
        let stm_frames = self.stm.len();

        if self.cfg.ablations.no_stm {
            let found = !candidates.is_empty()
                || node_label.is_some_and(|l| self.graph.canonical(&l) == target);
            if !found {
                let _ = self.graph.mark_explored(node);
            }
            self.trace.phases.push(PhaseRecord {
                step: self.sim.steps_taken(),
                node,
                stm_frames,
                candidates: candidates.len(),
                verifications: Vec::new(),
                found,
            });
            return found;
        }

        let mut results: Vec<VerificationResult> = Vec::new();
        for c in &candidates {
            let seen = results.iter().any(|r| {
                crate::scenegraph::overlap(&r.candidate.mask, &c.mask).is_ok_and(|o| o >= self.cfg.tau_stm)
            });
            if seen {
                continue;
            }
            let views = self.stm.retrieve_views(c, self.cfg.tau_stm);
            results.push(self.verifier.verify(c, &views, &self.spec.target_label));
        }
        let outcome = conclude(&results, node, &mut self.graph, &mut self.stm);
        let found = matches!(outcome, PhaseOutcome::Found(_));
        self.trace.phases.push(PhaseRecord {
            step: self.sim.steps_taken(),
            node,
            stm_frames,
            candidates: candidates.len(),
            verifications: results,
            found,
        });
        found
    }

    fn unknown_neighbor(&self, cell: Cell) -> Option<Heading> {
        Heading::ALL
            .into_iter()
            .find(|&h| self.map.in_bounds(cell.step(h)) && self.map.get(cell.step(h)) == CellState::Unknown)
    }
}

/// Runs one episode with an explicit planner and backends.
pub fn run_episode_with<'a>(
    spec: &'a EpisodeSpec,
    scene: Arc<GridScene>,
    cfg: &'a RunConfig,
    planner: &mut dyn Planner,
    backends: &'a Backends,
    observer: Option<&'a mut dyn Observer>,
) -> Result<EpisodeOutcome, HarnessError> {
    let budget = cfg.step_budget.unwrap_or(spec.step_budget);
    let seed = cfg.episode_seed(&spec.name);
    let sim = Simulator::new(scene.clone(), spec.start, budget, cfg.sensor)?;
    let synonyms = AnchorConfig::bundled().synonyms;
    let graph = SceneGraph::new(cfg.tau_geo)
        .with_synonyms(synonyms)
        .with_target(spec.target_label.clone())
        .with_resolver(backends.resolver.clone());
    let mut verifier = match &backends.verifier {
        Some(gw) => Verifier::lvlm(gw.clone()),
        None => Verifier::oracle(scene.clone(), cfg.verify_error_rate, seed),
    };
    verifier.theta_v = cfg.theta_v;
    let mut ep = Episode {
        spec,
        scene: scene.clone(),
        cfg,
        backends,
        map: EpisodicMap::new(scene.width, scene.height),
        graph,
        captions: CaptionQueue::default(),
        stm: ShortTermMemory::new(),
        detector: DetectorConfig {
            seed,
            ..cfg.detector.clone()
        },
        verifier,
        prune_cache: BTreeMap::new(),
        phase: Phase::ExploreScene,
        trace: EpisodeTrace {
            episode: spec.name.clone(),
            ..EpisodeTrace::default()
        },
        created_since_decide: true,
        observer,
        sim,
    };

    let first = ep.sim.observe();
    ep.process(&first);
    let mut forced: VecDeque<MovePrimitive> = VecDeque::new();
    if cfg.initial_pan {
        forced.extend([MovePrimitive::TurnLeft; 4]);
    }
    let mut action = Action::ExploreScene;
    let mut last_decide: Option<u32> = None;
    let mut history: Vec<PlannerDecision> = Vec::new();
    let mut found = false;
    let end_reason;

    loop {
        if ep.sim.remaining() == 0 {
            end_reason = "budget exhausted".to_string();
            break;
        }
        if let Some(p) = forced.pop_front() {
            ep.act(p, None);
            continue;
        }
        let step = ep.sim.steps_taken();
        if ep.phase == Phase::ExploreScene {
            let due = ep.created_since_decide || last_decide.is_none_or(|t| step >= t + cfg.decide_every);
            if due {
                let snapshot = if cfg.ablations.no_captions {
                    ep.graph.snapshot().without_captions()
                } else {
                    ep.graph.snapshot()
                };
                ep.emit(vec![EpisodeEvent::DecisionRequested { step }]);
                let decision = planner.decide(&PlanContext {
                    snapshot: &snapshot,
                    target: &spec.target_label,
                    history: &history,
                    map: &ep.map,
                    agent: ep.sim.pose().cell,
                    r_goal: cfg.r_goal,
                    step,
                });
                ep.trace.decisions.push(DecisionRecord {
                    step,
                    decision: decision.clone(),
                });
                history.push(decision.clone());
                last_decide = Some(step);
                ep.created_since_decide = false;
                action = decision.action;
                match action {
                    Action::ExploreObj(id) if snapshot.get(id).is_some_and(|n| !n.explored) => {
                        ep.set_phase(Phase::ExploreObj);
                        ep.stm.clear();
                    }
                    Action::ExploreObj(id) => {
                        log::warn!("planner chose unusable node {id}; exploring instead");
                        action = Action::ExploreScene;
                    }
                    Action::Done(DoneReason::Found) => {
                        ep.act(MovePrimitive::Stop, None);
                        found = true;
                        end_reason = "declared found by planner".to_string();
                        break;
                    }
                    Action::Done(DoneReason::Exhausted) => {
                        end_reason = "planner gave up".to_string();
                        break;
                    }
                    Action::ExploreScene => {}
                }
            }
        }
        if let Action::ExploreObj(id) = action {
            action = Action::ExploreObj(ep.graph.live_id(id));
        }
        let pose = ep.sim.pose();
        let goal = build_goal_map(&action, &ep.graph.snapshot(), &ep.map, pose.cell, cfg.r_goal);
        let primitive = goal.and_then(|g| {
            let field = fmm(&ep.map, &g);
            next_primitive(&field, pose).map(|p| (p, g.mode))
        });
        match primitive {
            Err(e) => {
                if let Action::ExploreObj(id) = action {
                    log::debug!("{}: node {id} unreachable ({e}); rejecting it", spec.name);
                    let _ = ep.graph.mark_explored(id);
                    ep.end_object_phase();
                    action = Action::ExploreScene;
                    continue;
                }
                end_reason = format!("exploration exhausted: {e}");
                break;
            }
            Ok((MovePrimitive::Stop, GoalMode::Object(id))) => {
                if ep.arrive(id) {
                    if ep.sim.remaining() > 0 {
                        ep.act(MovePrimitive::Stop, Some(GoalMode::Object(id)));
                        found = true;
                        end_reason = "target verified".to_string();
                    } else {
                        end_reason = "found without budget to stop".to_string();
                    }
                    break;
                }
                ep.end_object_phase();
                action = Action::ExploreScene;
            }
            Ok((MovePrimitive::Stop, mode)) => {
                let cell = ep.sim.pose().cell;
                match ep.unknown_neighbor(cell) {
                    Some(h) => {
                        ep.act(turn_toward(ep.sim.pose().heading, h), Some(mode));
                    }
                    None => {
                        // Frontier went stale between map updates; turning reveals more.
                        ep.act(MovePrimitive::TurnLeft, Some(mode));
                    }
                }
            }
            Ok((p, mode)) => {
                ep.act(p, Some(mode));
            }
        }
    }

    let pose = ep.sim.pose();
    let success = found
        && ep.sim.stopped()
        && scene.within_success(pose.cell, &spec.target_label, spec.success_radius);
    let region = scene.success_region(&spec.target_label, spec.success_radius);
    let shortest = scene.shortest_path_length(spec.start.cell, &region).unwrap_or(0);
    let metrics = EpisodeMetrics::new(
        spec.name.clone(),
        success,
        ep.sim.steps_taken(),
        ep.sim.path_length(),
        shortest,
    );
    ep.trace.end_reason = end_reason;
    let step = ep.sim.steps_taken();
    ep.emit(vec![EpisodeEvent::EpisodeFinished {
        step,
        metrics: metrics.clone(),
    }]);
    let transcript = backends.verifier.as_ref().map(|g| g.transcript().clone());
    Ok(EpisodeOutcome {
        metrics,
        graph: ep.graph.snapshot(),
        trace: ep.trace,
        transcript,
    })
}

/// Planner and model backends selected by `cfg.planner`.
pub fn build_stack(cfg: &RunConfig) -> (Box<dyn Planner>, Backends) {
    let captions = !cfg.ablations.no_captions;
    match &cfg.planner {
        PlannerKind::Oracle => {
            let table = cfg.affinity.clone().unwrap_or_else(AffinityTable::bundled);
            (Box::new(OraclePlanner::new(table, captions)), Backends::oracle())
        }
        PlannerKind::Remote(endpoint) => {
            let gateway = Gateway::http(endpoint.clone());
            (Box::new(LlmPlanner::new(gateway.clone(), captions)), Backends::remote(&gateway))
        }
    }
}

/// Builds the configured planner and backends, then runs the episode.
pub fn run_episode(spec: &EpisodeSpec, scene: Arc<GridScene>, cfg: &RunConfig) -> Result<EpisodeOutcome, HarnessError> {
    let (mut planner, backends) = build_stack(cfg);
    run_episode_with(spec, scene, cfg, planner.as_mut(), &backends, None)
}

/// Frames gathered by replaying an episode's fixed primitive script in the object phase.
#[derive(Debug, Clone)]
pub struct ScriptedViews {
    pub frames: Vec<StmFrame>,
    /// Target segment from the last frame that shows the target.
    pub candidate: Option<Detection>,
    /// Steps of the views `retrieve_views` returns for the candidate.
    pub retrieved: Vec<u32>,
}

/// Drives the script from the episode start, recording every observation (start included) into
/// short-term memory, then retrieves the views that overlap the final target segment.
pub fn scripted_views(spec: &EpisodeSpec, scene: Arc<GridScene>, cfg: &RunConfig) -> Result<ScriptedViews, HarnessError> {
    let script = spec
        .script
        .as_deref()
        .ok_or_else(|| crate::world::WorldError::Invalid(format!("episode '{}' has no script", spec.name)))?;
    let moves = MovePrimitive::parse_script(script)?;
    let budget = cfg.step_budget.unwrap_or(spec.step_budget);
    let mut sim = Simulator::new(scene, spec.start, budget, cfg.sensor)?;
    let detector = DetectorConfig {
        seed: cfg.episode_seed(&spec.name),
        ..cfg.detector.clone()
    };
    let primed = detector.primed(&spec.target_label);
    let mut stm = ShortTermMemory::new();
    let mut candidate = None;
    let mut obs = sim.observe();
    for mv in moves.into_iter().map(Some).chain([None]) {
        let frame = StmFrame {
            step: obs.step,
            pose: obs.pose,
            detections: detect(&obs, &detector),
            node_attribution: BTreeMap::new(),
        };
        stm.record(frame, Phase::ExploreObj).expect("object phase");
        if let Some(d) = detect(&obs, &primed).into_iter().find(|d| d.label == spec.target_label) {
            candidate = Some(d);
        }
        match mv {
            Some(mv) => obs = sim.step(mv)?,
            None => break,
        }
    }
    let retrieved = candidate
        .as_ref()
        .map(|c| stm.retrieve_views(c, cfg.tau_stm).iter().map(|f| f.step).collect())
        .unwrap_or_default();
    Ok(ScriptedViews {
        frames: stm.frames().to_vec(),
        candidate,
        retrieved,
    })
}

/// Runs every episode of a suite in parallel, preserving suite order.
pub fn run_suite(suite: &EpisodeSuite, cfg: &RunConfig) -> Result<Vec<EpisodeOutcome>, HarnessError> {
    suite
        .episodes
        .par_iter()
        .map(|(spec, scene)| run_episode(spec, scene.clone(), cfg))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub sr: f64,
    pub spl: f64,
    pub episodes: usize,
}

pub const ABLATION_ROWS: [&str; 4] = ["full", "no_stm", "no_pruner", "no_captions"];

fn ablation_flags(name: &str) -> Ablations {
    Ablations {
        no_stm: name == "no_stm",
        no_pruner: name == "no_pruner",
        no_captions: name == "no_captions",
    }
}

/// Full stack and the three single-module ablations over identical episodes and seeds.
pub fn run_ablation_suite(suite: &EpisodeSuite, cfg: &RunConfig, seeds: &[u64]) -> Result<Vec<AblationRow>, HarnessError> {
    ABLATION_ROWS
        .iter()
        .map(|&name| {
            let runs: Vec<EpisodeMetrics> = seeds
                .par_iter()
                .map(|&seed| {
                    let c = RunConfig {
                        seed,
                        ..cfg.with_ablations(ablation_flags(name))
                    };
                    run_suite(suite, &c).map(|outs| outs.into_iter().map(|o| o.metrics).collect::<Vec<_>>())
                })
                .collect::<Result<Vec<_>, _>>()?
                .into_iter()
                .flatten()
                .collect();
            let (sr, spl) = aggregate(&runs)?;
            Ok(AblationRow {
                name: name.to_string(),
                sr,
                spl,
                episodes: runs.len(),
            })
        })
        .collect()
}

#[derive(Debug, Serialize)]
struct CsvRow<'a> {
    episode: &'a str,
    success: u8,
    steps: u32,
    p: u32,
    l: u32,
    spl: String,
}

/// Results CSV with columns `episode, success, steps, p, l, spl`.
pub fn write_results_csv<W: Write>(out: W, metrics: &[EpisodeMetrics]) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_writer(out);
    for m in metrics {
        w.serialize(CsvRow {
            episode: &m.episode,
            success: u8::from(m.success),
            steps: m.steps_taken,
            p: m.path_length,
            l: m.shortest_length,
            spl: format!("{:.6}", m.spl),
        })
        .map_err(|e| HarnessError::Output(e.to_string()))?;
    }
    w.flush().map_err(|e| HarnessError::Output(e.to_string()))
}

pub fn results_csv_string(metrics: &[EpisodeMetrics]) -> String {
    let mut buf = Vec::new();
    write_results_csv(&mut buf, metrics).expect("writing to memory succeeds");
    String::from_utf8(buf).expect("csv is utf-8")
}

pub fn save_results_csv(path: &Path, metrics: &[EpisodeMetrics]) -> Result<(), HarnessError> {
    let f = std::fs::File::create(path).map_err(|e| HarnessError::Output(format!("{}: {e}", path.display())))?;
    write_results_csv(f, metrics)
}

/// Two-column SR/SPL table.
pub fn format_table(rows: &[(String, f64, f64)]) -> String {
    let width = rows.iter().map(|r| r.0.len()).max().unwrap_or(6).max(6);
    let mut s = format!("{:<width$} | {:>6} | {:>6}\n", "Method", "SR", "SPL");
    s.push_str(&format!("{}-+-{}-+-{}\n", "-".repeat(width), "-".repeat(6), "-".repeat(6)));
    for (name, sr, spl) in rows {
        s.push_str(&format!("{name:<width$} | {sr:>6.4} | {spl:>6.4}\n"));
    }
    s
}

/// Wall-clock helper for suite timing.
pub fn timed<T>(f: impl FnOnce() -> T) -> (T, std::time::Duration) {
    let t = Instant::now();
    let out = f();
    (out, t.elapsed())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::EpisodeSpec;
    use std::path::PathBuf;

    fn spec(budget: u32, start: Pose) -> EpisodeSpec {
        EpisodeSpec {
            name: "tiny".into(),
            scene: PathBuf::from("tiny.toml"),
            start,
            target_label: "apple".into(),
            step_budget: budget,
            success_radius: 2,
            script: None,
        }
    }

    fn tiny() -> Arc<GridScene> {
        Arc::new(
            GridScene::from_toml_str(
                r#"
name = "tiny"
map = """
.......
.......
.......
.......
"""
[[rooms]]
name = "kitchen"
rect = [0, 0, 6, 3]
[[objects]]
id = 1
label = "kitchen table"
rect = [3, 2, 4, 3]
z = [0, 2]
[[objects]]
id = 2
label = "apple"
cells = [[3, 3]]
z = [3, 3]
attributes = ["small", "red"]
on = 1
"#,
            )
            .unwrap(),
        )
    }

    #[test]
    fn spl_hand_cases() {
        assert_eq!(spl(true, 4, 8), 0.5);
        assert_eq!(spl(true, 4, 4), 1.0);
        assert_eq!(spl(true, 0, 0), 1.0);
        assert_eq!(spl(false, 4, 4), 0.0);
        assert_eq!(spl(true, 5, 3), 1.0);
    }

    #[test]
    fn aggregate_rules() {
        assert!(aggregate(&[]).is_err());
        let ms = vec![EpisodeMetrics::new("a", true, 10, 8, 4), EpisodeMetrics::new("b", false, 500, 30, 6)];
        assert_eq!(aggregate(&ms).unwrap(), (0.5, 0.25));
        let fails = vec![EpisodeMetrics::new("a", false, 1, 1, 1); 3];
        assert_eq!(aggregate(&fails).unwrap(), (0.0, 0.0));
    }

    #[test]
    fn target_next_to_start_is_found() {
        let s = spec(500, Pose::new(3, 0, Heading::N));
        let out = run_episode(&s, tiny(), &RunConfig::default()).unwrap();
        assert!(out.metrics.success, "{:?}", out.trace.end_reason);
        assert_eq!(out.metrics.path_length, out.metrics.shortest_length);
        assert_eq!(out.metrics.spl, 1.0);
    }

    #[test]
    fn zero_budget_fails() {
        let s = spec(0, Pose::new(3, 0, Heading::N));
        let out = run_episode(&s, tiny(), &RunConfig::default()).unwrap();
        assert!(!out.metrics.success);
        assert_eq!(out.metrics.spl, 0.0);
        assert_eq!(out.metrics.steps_taken, 0);
    }

    #[test]
    fn csv_layout() {
        let csv = results_csv_string(&[EpisodeMetrics::new("a", true, 10, 8, 4)]);
        assert_eq!(csv, "episode,success,steps,p,l,spl\na,1,10,8,4,0.500000\n");
    }

    #[test]
    fn table_format() {
        let t = format_table(&[("Human".into(), 15.0 / 16.0, 0.759)]);
        assert!(t.contains("0.9375"));
        assert!(t.contains("0.7590"));
    }
}
