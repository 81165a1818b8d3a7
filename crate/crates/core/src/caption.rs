//! Node captions and the timing policy that decides when they are produced.
//!
//! While the agent explores the scene every node is captioned as soon as it
//! appears. During object-directed travel new nodes are queued and captioned
//! in one batch when the phase ends.

use serde::{Deserialize, Serialize};

use crate::geom::Cell;
use crate::llmgw::{bindings, parse, Gateway, Parsed, PromptRole, PromptTemplate};
use crate::planner::Phase;
use crate::scenegraph::{NodeId, SceneGraph};
use crate::world::GridScene;

pub const DEFAULT_NEIGHBOR_RADIUS: f64 = 4.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionJob {
    pub node: NodeId,
    pub label: String,
    /// Step of the frame holding the largest mask.
    pub best_view_step: u32,
    pub view: String,
    pub attributes: Vec<String>,
    pub neighbors: Vec<String>,
    pub room: Option<String>,
}

impl CaptionJob {
    /// Collects the context for `node`; `None` when the node is gone.
    pub fn build(graph: &SceneGraph, node: NodeId, scene: &GridScene, r_nbr: f64) -> Option<Self> {
        let n = graph.node(node)?;
        let (step, det) = n.best_view()?;
        let (cx, cy) = n.centroid_xy();
        let mut neighbors: Vec<String> = graph
            .nodes()
            .filter(|m| m.id != node)
            .filter(|m| {
                let (mx, my) = m.centroid_xy();
                (mx - cx).hypot(my - cy) <= r_nbr + 1e-9
            })
            .map(|m| m.resolved_label.clone())
            .filter(|l| *l != n.resolved_label)
            .collect();
        neighbors.sort();
        neighbors.dedup();
        let attributes = det
            .source_object
            .and_then(|id| scene.object(id))
            .map(|o| o.appearance())
            .unwrap_or_default();
        let room = scene
            .room_at(Cell::new(cx.round() as i32, cy.round() as i32))
            .map(|r| r.name.clone());
        Some(Self {
            node,
            label: n.resolved_label.clone(),
            best_view_step: step,
            view: format!("frame {step}, bbox {:?}, {} voxels", det.bbox, det.mask.len()),
            attributes,
            neighbors,
            room,
        })
    }
}

/// Fixed-template caption: "a {attributes} {label} near {neighbors} in the {room}".
pub fn template_caption(job: &CaptionJob) -> String {
    let mut s = String::from("a ");
    for a in &job.attributes {
        s.push_str(a);
        s.push(' ');
    }
    s.push_str(&job.label);
    if !job.neighbors.is_empty() {
        s.push_str(" near ");
        s.push_str(&job.neighbors.join(", "));
    }
    if let Some(room) = &job.room {
        s.push_str(" in the ");
        s.push_str(room);
    }
    s
}

#[derive(Debug, Clone, Default)]
pub enum Captioner {
    #[default]
    Oracle,
    Lvlm { gateway: Gateway, template: PromptTemplate },
}

impl Captioner {
    pub fn lvlm(gateway: Gateway) -> Self {
        Captioner::Lvlm {
            gateway,
            template: PromptTemplate::bundled(PromptRole::Caption),
        }
    }

    /// Returns the caption and whether the oracle fallback was used.
    pub fn caption_node(&self, job: &CaptionJob) -> (String, bool) {
        match self {
            Captioner::Oracle => (template_caption(job), false),
            Captioner::Lvlm { gateway, template } => {
                let b = bindings([
                    ("label", job.label.clone()),
                    ("view", job.view.clone()),
                    ("neighbors", job.neighbors.join(", ")),
                    ("room", job.room.clone().unwrap_or_else(|| "unknown".into())),
                ]);
                let reply = template
                    .render(&b)
                    .and_then(|p| gateway.complete(PromptRole::Caption, &p))
                    .and_then(|r| parse(PromptRole::Caption, &r));
                match reply {
                    Ok(Parsed::Text(t)) if !t.is_empty() => (t, false),
                    other => {
                        log::warn!("caption-degraded for node {}: {other:?}", job.node);
                        (template_caption(job), true)
                    }
                }
            }
        }
    }
}

/// Deferred caption jobs plus the phase that governs them.
#[derive(Debug, Clone)]
pub struct CaptionQueue {
    pending: Vec<NodeId>,
    phase: Phase,
    pub r_nbr: f64,
}

impl Default for CaptionQueue {
    fn default() -> Self {
        Self {
            pending: Vec::new(),
            phase: Phase::ExploreScene,
            r_nbr: DEFAULT_NEIGHBOR_RADIUS,
        }
    }
}

impl CaptionQueue {
    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn pending(&self) -> &[NodeId] {
        &self.pending
    }

    pub fn set_phase(&mut self, phase: Phase) {
        self.phase = phase;
    }

    fn caption(&self, graph: &mut SceneGraph, id: NodeId, scene: &GridScene, captioner: &Captioner) -> bool {
        let Some(job) = CaptionJob::build(graph, id, scene, self.r_nbr) else {
            return false;
        };
        let (text, degraded) = captioner.caption_node(&job);
        graph.set_caption(id, text, degraded).is_ok()
    }

    /// Applies the timing policy to newly created nodes. Returns how many were captioned now.
    pub fn on_new_nodes(
        &mut self,
        graph: &mut SceneGraph,
        created: &[NodeId],
        scene: &GridScene,
        captioner: &Captioner,
    ) -> usize {
        match self.phase {
            Phase::ExploreObj => {
                self.pending.extend(created.iter().copied());
                0
            }
            Phase::ExploreScene => self.caption_uncaptioned(graph, scene, captioner),
        }
    }

    /// Captions every live node still lacking a caption.
    fn caption_uncaptioned(&self, graph: &mut SceneGraph, scene: &GridScene, captioner: &Captioner) -> usize {
        let todo: Vec<NodeId> = graph.nodes().filter(|n| n.caption.is_none()).map(|n| n.id).collect();
        todo.into_iter()
            .filter(|&id| self.caption(graph, id, scene, captioner))
            .count()
    }

    /// Captions all deferred nodes (and any merge survivors left without one).
    pub fn flush_on_phase_end(&mut self, graph: &mut SceneGraph, scene: &GridScene, captioner: &Captioner) -> usize {
        self.pending.clear();
        self.caption_uncaptioned(graph, scene, captioner)
    }
}
