//! Object-centric scene representation.
//!
//! Detections are fused into object nodes when their voxel masks overlap a
//! node cloud by at least `tau_geo` (normalised by the smaller set) and their
//! labels agree. After every merge the graph is re-closed so that no two nodes
//! still satisfy the merge predicate; the survivor of a merge keeps the lower id.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::VoxelSet;
use crate::llmgw::{bindings, parse, Gateway, Parsed, PromptRole, PromptTemplate};
use crate::perception::Detection;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u32);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("overlap of an empty voxel set")]
    EmptyInput,
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
}

/// Min-normalised overlap `|a ∩ b| / min(|a|, |b|)`.
pub fn overlap(a: &VoxelSet, b: &VoxelSet) -> Result<f64, GraphError> {
    if a.is_empty() || b.is_empty() {
        return Err(GraphError::EmptyInput);
    }
    Ok(a.intersection_count(b) as f64 / a.len().min(b.len()) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeFrame {
    pub step: u32,
    pub detections: Vec<Detection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectNode {
    pub id: NodeId,
    /// Label votes in arrival order, tagged with their step.
    pub votes: Vec<(u32, String)>,
    pub resolved_label: String,
    pub cloud: VoxelSet,
    pub centroid: [f64; 3],
    /// Contributing detections grouped by step, strictly increasing.
    pub frames: Vec<NodeFrame>,
    pub caption: Option<String>,
    pub caption_degraded: bool,
    pub explored: bool,
    pub target_candidate: bool,
}

impl ObjectNode {
    pub fn vote_counts(&self) -> BTreeMap<&str, usize> {
        let mut counts = BTreeMap::new();
        for (_, l) in &self.votes {
            *counts.entry(l.as_str()).or_insert(0) += 1;
        }
        counts
    }

    /// Largest-mask detection among the node's frames.
    pub fn best_view(&self) -> Option<(u32, &Detection)> {
        self.frames
            .iter()
            .flat_map(|f| f.detections.iter().map(move |d| (f.step, d)))
            .max_by(|a, b| a.1.mask.len().cmp(&b.1.mask.len()).then(b.0.cmp(&a.0)))
    }

    pub fn centroid_xy(&self) -> (f64, f64) {
        (self.centroid[0], self.centroid[1])
    }

    pub fn frame_count(&self) -> usize {
        self.frames.len()
    }

    fn add_detection(&mut self, step: u32, det: Detection) {
        self.votes.push((step, det.label.clone()));
        self.cloud.union_with(&det.mask);
        match self.frames.binary_search_by_key(&step, |f| f.step) {
            Ok(i) => self.frames[i].detections.push(det),
            Err(i) => self.frames.insert(
                i,
                NodeFrame {
                    step,
                    detections: vec![det],
                },
            ),
        }
        self.centroid = self.cloud.centroid().expect("cloud is non-empty");
    }

    fn absorb(&mut self, other: ObjectNode) {
        self.votes.extend(other.votes);
        self.votes.sort_by_key(|(t, _)| *t);
        self.cloud.union_with(&other.cloud);
        for f in other.frames {
            match self.frames.binary_search_by_key(&f.step, |g| g.step) {
                Ok(i) => self.frames[i].detections.extend(f.detections),
                Err(i) => self.frames.insert(i, f),
            }
        }
        if self.caption.is_none() {
            self.caption = other.caption;
            self.caption_degraded = other.caption_degraded;
        }
        self.explored |= other.explored;
        self.centroid = self.cloud.centroid().expect("cloud is non-empty");
    }
}

/// Plurality vote; ties go to the label voted most recently.
pub fn plurality_label(votes: &[(u32, String)]) -> Option<String> {
    let mut tally: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for (i, (_, l)) in votes.iter().enumerate() {
        let e = tally.entry(l.as_str()).or_insert((0, 0));
        e.0 += 1;
        e.1 = i;
    }
    tally
        .into_iter()
        .max_by(|a, b| a.1 .0.cmp(&b.1 .0).then(a.1 .1.cmp(&b.1 .1)))
        .map(|(l, _)| l.to_string())
}

#[derive(Debug, Clone, Default)]
pub enum LabelResolver {
    #[default]
    Plurality,
    /// Asks a vision-language model to choose among conflicting labels.
    Lvlm { gateway: Gateway, template: PromptTemplate },
}

impl LabelResolver {
    pub fn lvlm(gateway: Gateway) -> Self {
        LabelResolver::Lvlm {
            gateway,
            template: PromptTemplate::bundled(PromptRole::LabelResolve),
        }
    }

    pub fn resolve(&self, node: &ObjectNode) -> String {
        let fallback = || plurality_label(&node.votes).unwrap_or_default();
        let distinct: BTreeSet<&str> = node.votes.iter().map(|(_, l)| l.as_str()).collect();
        if distinct.len() <= 1 {
            return fallback();
        }
        match self {
            LabelResolver::Plurality => fallback(),
            LabelResolver::Lvlm { gateway, template } => {
                let view = node
                    .best_view()
                    .map(|(t, d)| format!("frame {t}, bbox {:?}, {} voxels", d.bbox, d.mask.len()))
                    .unwrap_or_default();
                let labels = distinct.iter().copied().collect::<Vec<_>>().join(", ");
                let answer = template
                    .render(&bindings([("labels", labels), ("view", view)]))
                    .and_then(|p| gateway.complete(PromptRole::LabelResolve, &p))
                    .and_then(|r| parse(PromptRole::LabelResolve, &r));
                match answer {
                    Ok(Parsed::Text(l)) if distinct.contains(l.as_str()) => l,
                    _ => fallback(),
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Integration {
    Created,
    Merged,
}

/// Immutable record of one node for planners, loggers and the UI.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeRecord {
    pub id: NodeId,
    pub label: String,
    pub centroid: [f64; 3],
    pub caption: Option<String>,
    pub explored: bool,
    pub target_candidate: bool,
    pub frame_count: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GraphSnapshot {
    pub nodes: Vec<NodeRecord>,
}

impl GraphSnapshot {
    pub fn get(&self, id: NodeId) -> Option<&NodeRecord> {
        self.nodes.iter().find(|n| n.id == id)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Copy with every caption removed.
    pub fn without_captions(&self) -> Self {
        Self {
            nodes: self
                .nodes
                .iter()
                .map(|n| NodeRecord {
                    caption: None,
                    ..n.clone()
                })
                .collect(),
        }
    }

    /// One JSON record per node.
    pub fn to_jsonl(&self) -> String {
        self.nodes
            .iter()
            .map(|n| serde_json::to_string(n).expect("node record serializes"))
            .collect::<Vec<_>>()
            .join("\n")
    }

    pub fn write_dump(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, self.to_jsonl() + "\n")
    }
}

#[derive(Debug, Clone)]
pub struct SceneGraph {
    nodes: BTreeMap<NodeId, ObjectNode>,
    pub tau_geo: f64,
    synonyms: BTreeMap<String, String>,
    target_label: Option<String>,
    resolver: LabelResolver,
    next_id: u32,
    /// Absorbed node → the node it was merged into.
    aliases: BTreeMap<NodeId, NodeId>,
}

impl Default for SceneGraph {
    fn default() -> Self {
        Self::new(0.25)
    }
}

impl SceneGraph {
    pub fn new(tau_geo: f64) -> Self {
        Self {
            nodes: BTreeMap::new(),
            tau_geo,
            synonyms: BTreeMap::new(),
            target_label: None,
            resolver: LabelResolver::Plurality,
            next_id: 0,
            aliases: BTreeMap::new(),
        }
    }

    pub fn with_synonyms(mut self, synonyms: BTreeMap<String, String>) -> Self {
        self.synonyms = synonyms;
        self
    }

    pub fn with_target(mut self, target: impl Into<String>) -> Self {
        self.target_label = Some(target.into());
        self
    }

    pub fn with_resolver(mut self, resolver: LabelResolver) -> Self {
        self.resolver = resolver;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: NodeId) -> Option<&ObjectNode> {
        self.nodes.get(&id)
    }

    pub fn nodes(&self) -> impl Iterator<Item = &ObjectNode> + '_ {
        self.nodes.values()
    }

    pub fn canonical<'a>(&'a self, label: &'a str) -> &'a str {
        self.synonyms.get(label).map(String::as_str).unwrap_or(label)
    }

    fn labels_match(&self, resolved_a: &str, votes_a: &[(u32, String)], resolved_b: &str, votes_b: &[(u32, String)]) -> bool {
        let ca = self.canonical(resolved_a);
        let cb = self.canonical(resolved_b);
        ca == cb
            || votes_a.iter().any(|(_, v)| self.canonical(v) == cb)
            || votes_b.iter().any(|(_, v)| self.canonical(v) == ca)
    }

    fn nodes_match(&self, a: &ObjectNode, b: &ObjectNode) -> bool {
        self.labels_match(&a.resolved_label, &a.votes, &b.resolved_label, &b.votes)
            && overlap(&a.cloud, &b.cloud).unwrap_or(0.0) >= self.tau_geo
    }

    /// Fuses a batch of detections observed at step `t`.
    pub fn integrate(&mut self, detections: Vec<Detection>, t: u32) -> Vec<(NodeId, Integration)> {
        let mut results = Vec::with_capacity(detections.len());
        for det in detections {
            if det.mask.is_empty() {
                continue;
            }
            let votes = vec![(t, det.label.clone())];
            let best = self
                .nodes
                .values()
                .filter(|n| self.labels_match(&det.label, &votes, &n.resolved_label, &n.votes))
                .filter_map(|n| {
                    let o = overlap(&det.mask, &n.cloud).ok()?;
                    (o >= self.tau_geo).then_some((o, n.id))
                })
                .max_by(|a, b| a.0.total_cmp(&b.0).then(b.1.cmp(&a.1)))
                .map(|(_, id)| id);
            match best {
                Some(id) => {
                    let node = self.nodes.get_mut(&id).expect("best node exists");
                    node.add_detection(t, det);
                    self.refresh(id);
                    let survivor = self.close_from(id);
                    results.push((survivor, Integration::Merged));
                }
                None => {
                    let id = NodeId(self.next_id);
                    self.next_id += 1;
                    let centroid = det.mask.centroid().expect("mask is non-empty");
                    let node = ObjectNode {
                        id,
                        votes: Vec::new(),
                        resolved_label: det.label.clone(),
                        cloud: VoxelSet::new(),
                        centroid,
                        frames: Vec::new(),
                        caption: None,
                        caption_degraded: false,
                        explored: false,
                        target_candidate: false,
                    };
                    self.nodes.insert(id, node);
                    self.nodes.get_mut(&id).expect("just inserted").add_detection(t, det);
                    self.refresh(id);
                    results.push((id, Integration::Created));
                }
            }
        }
        for (id, _) in results.iter_mut() {
            *id = self.live_id(*id);
        }
        results
    }

    /// Merges `start` with any node it matches until none remain.
    fn close_from(&mut self, start: NodeId) -> NodeId {
        let mut current = start;
        loop {
            let cur = &self.nodes[&current];
            let partner = self
                .nodes
                .values()
                .filter(|n| n.id != current)
                .find(|n| self.nodes_match(cur, n))
                .map(|n| n.id);
            let Some(other) = partner else {
                return current;
            };
            let (keep, gone) = if other < current { (other, current) } else { (current, other) };
            let removed = self.nodes.remove(&gone).expect("merge partner exists");
            self.nodes.get_mut(&keep).expect("survivor exists").absorb(removed);
            self.aliases.insert(gone, keep);
            self.refresh(keep);
            current = keep;
        }
    }

    fn refresh(&mut self, id: NodeId) {
        let resolved = {
            let node = &self.nodes[&id];
            self.resolver.resolve(node)
        };
        let candidate = self
            .target_label
            .as_deref()
            .is_some_and(|t| self.canonical(&resolved) == self.canonical(t));
        let node = self.nodes.get_mut(&id).expect("refreshed node exists");
        node.resolved_label = resolved;
        node.target_candidate = candidate;
    }

    /// Follows merges from a possibly absorbed id to the node that holds it now.
    pub fn live_id(&self, mut id: NodeId) -> NodeId {
        while let Some(next) = self.aliases.get(&id) {
            id = *next;
        }
        id
    }

    /// Label for a node under the configured resolver.
    pub fn resolve_label(&self, id: NodeId) -> Result<String, GraphError> {
        let node = self.nodes.get(&id).ok_or(GraphError::UnknownNode(id))?;
        Ok(self.resolver.resolve(node))
    }

    pub fn mark_explored(&mut self, id: NodeId) -> Result<(), GraphError> {
        let node = self.nodes.get_mut(&id).ok_or(GraphError::UnknownNode(id))?;
        node.explored = true;
        Ok(())
    }

    pub fn set_caption(&mut self, id: NodeId, caption: String, degraded: bool) -> Result<(), GraphError> {
        let node = self.nodes.get_mut(&id).ok_or(GraphError::UnknownNode(id))?;
        node.caption = Some(caption);
        node.caption_degraded = degraded;
        Ok(())
    }

    /// Floor-plane centroids of nodes resolved to the target label.
    pub fn target_candidates(&self) -> Vec<(f64, f64)> {
        self.nodes
            .values()
            .filter(|n| n.target_candidate)
            .map(ObjectNode::centroid_xy)
            .collect()
    }

    pub fn snapshot(&self) -> GraphSnapshot {
        GraphSnapshot {
            nodes: self
                .nodes
                .values()
                .map(|n| NodeRecord {
                    id: n.id,
                    label: n.resolved_label.clone(),
                    centroid: n.centroid,
                    caption: n.caption.clone(),
                    explored: n.explored,
                    target_candidate: n.target_candidate,
                    frame_count: n.frames.len(),
                })
                .collect(),
        }
    }

    /// True when no pair of nodes still satisfies the merge predicate.
    pub fn is_closed(&self) -> bool {
        let nodes: Vec<&ObjectNode> = self.nodes.values().collect();
        nodes
            .iter()
            .enumerate()
            .all(|(i, a)| nodes[i + 1..].iter().all(|b| !self.nodes_match(a, b)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::Voxel;
    use crate::llmgw::{FnTransport, ModelEndpoint};
    use std::sync::Arc;

    fn mask(range: std::ops::Range<i32>) -> VoxelSet {
        range.map(|x| Voxel::new(x, 0, 0)).collect()
    }

    fn det(label: &str, m: VoxelSet, t: u32) -> Detection {
        Detection::from_mask(label, 0.9, m, t, None)
    }

    #[test]
    fn overlap_cases() {
        let a = mask(0..10);
        assert_eq!(overlap(&a, &a).unwrap(), 1.0);
        assert_eq!(overlap(&a, &mask(20..30)).unwrap(), 0.0);
        // |a| = 10, |b| = 20, |a ∩ b| = 5
        assert_eq!(overlap(&a, &mask(5..25)).unwrap(), 0.5);
        assert_eq!(overlap(&a, &VoxelSet::new()), Err(GraphError::EmptyInput));
    }

    #[test]
    fn first_detection_creates_node() {
        let mut g = SceneGraph::default();
        let r = g.integrate(vec![det("chair", mask(0..4), 1)], 1);
        assert_eq!(r, vec![(NodeId(0), Integration::Created)]);
        assert_eq!(g.len(), 1);
    }

    #[test]
    fn repeated_detection_merges() {
        let mut g = SceneGraph::default();
        g.integrate(vec![det("chair", mask(0..4), 1)], 1);
        let r = g.integrate(vec![det("chair", mask(0..4), 2)], 2);
        assert_eq!(r, vec![(NodeId(0), Integration::Merged)]);
        assert_eq!(g.len(), 1);
        assert_eq!(g.node(NodeId(0)).unwrap().votes.len(), 2);
        assert_eq!(g.node(NodeId(0)).unwrap().frames.len(), 2);
    }

    #[test]
    fn different_labels_stay_apart() {
        let mut g = SceneGraph::default();
        g.integrate(vec![det("chair", mask(0..4), 1), det("bed", mask(0..4), 1)], 1);
        assert_eq!(g.len(), 2);
    }

    #[test]
    fn synonyms_merge() {
        let syn = BTreeMap::from([("sofa".to_string(), "couch".to_string())]);
        let mut g = SceneGraph::default().with_synonyms(syn);
        g.integrate(vec![det("couch", mask(0..4), 1)], 1);
        g.integrate(vec![det("sofa", mask(0..4), 2)], 2);
        assert_eq!(g.len(), 1);
        let n = g.node(NodeId(0)).unwrap();
        assert_eq!(g.canonical(&n.resolved_label), "couch");
    }

    #[test]
    fn bridging_view_closes_graph_and_keeps_lower_id() {
        let mut g = SceneGraph::default();
        g.integrate(vec![det("couch", mask(0..4), 1)], 1);
        g.integrate(vec![det("couch", mask(10..14), 2)], 2);
        assert_eq!(g.len(), 2);
        let r = g.integrate(vec![det("couch", mask(2..12), 3)], 3);
        assert_eq!(g.len(), 1);
        assert_eq!(r[0].0, NodeId(0));
        assert!(g.is_closed());
        assert_eq!(g.node(NodeId(0)).unwrap().cloud.len(), 14);
    }

    #[test]
    fn centroid_is_cloud_mean() {
        let mut g = SceneGraph::default();
        g.integrate(vec![det("bed", mask(0..3), 1)], 1);
        g.integrate(vec![det("bed", mask(1..5), 2)], 2);
        let n = g.node(NodeId(0)).unwrap();
        assert_eq!(n.centroid, [2.0, 0.0, 0.0]);
    }

    #[test]
    fn plurality_and_tie_rules() {
        let v = |ls: &[&str]| -> Vec<(u32, String)> {
            ls.iter().enumerate().map(|(i, l)| (i as u32, l.to_string())).collect()
        };
        assert_eq!(plurality_label(&v(&["couch", "couch", "couch"])).unwrap(), "couch");
        assert_eq!(plurality_label(&v(&["couch", "sofa", "couch"])).unwrap(), "couch");
        assert_eq!(plurality_label(&v(&["table", "desk", "table", "desk"])).unwrap(), "desk");
        assert_eq!(plurality_label(&v(&["desk", "table", "desk", "table"])).unwrap(), "table");
    }

    #[test]
    fn label_votes_allow_cross_label_merge() {
        let mut g = SceneGraph::default();
        g.integrate(vec![det("table", mask(0..4), 1)], 1);
        // A node already voted "table" accepts a "table" detection even after resolving to "desk".
        let node = g.nodes.get_mut(&NodeId(0)).unwrap();
        node.votes.push((2, "desk".into()));
        node.votes.push((3, "desk".into()));
        g.refresh(NodeId(0));
        assert_eq!(g.node(NodeId(0)).unwrap().resolved_label, "desk");
        g.integrate(vec![det("table", mask(0..4), 4)], 4);
        assert_eq!(g.len(), 1);
    }

    #[test]
    fn lvlm_resolver_and_fallback() {
        let gw = Gateway::new(
            ModelEndpoint::default(),
            Arc::new(FnTransport(|_: &str| Ok("sofa".to_string()))),
        );
        let mut g = SceneGraph::default().with_resolver(LabelResolver::lvlm(gw));
        g.integrate(vec![det("couch", mask(0..4), 1)], 1);
        g.integrate(vec![det("couch", mask(0..4), 2)], 2);
        assert_eq!(g.resolve_label(NodeId(0)).unwrap(), "couch");
        let node = g.nodes.get_mut(&NodeId(0)).unwrap();
        node.votes.push((3, "sofa".into()));
        assert_eq!(g.resolve_label(NodeId(0)).unwrap(), "sofa");

        let bad = Gateway::new(
            ModelEndpoint::default(),
            Arc::new(FnTransport(|_: &str| Ok("armchair".to_string()))),
        );
        let mut g2 = g.clone().with_resolver(LabelResolver::lvlm(bad));
        assert_eq!(g2.resolve_label(NodeId(0)).unwrap(), "couch");
        assert!(g2.mark_explored(NodeId(9)).is_err());
    }

    #[test]
    fn snapshot_is_a_value_copy() {
        let mut g = SceneGraph::default();
        assert!(g.snapshot().is_empty());
        g.integrate(
            vec![det("a", mask(0..2), 0), det("b", mask(5..7), 0), det("c", mask(9..11), 0)],
            0,
        );
        let snap = g.snapshot();
        assert_eq!(snap.len(), 3);
        g.integrate(vec![det("d", mask(20..22), 1)], 1);
        assert_eq!(snap.len(), 3);
        assert_eq!(g.snapshot().len(), 4);
    }

    #[test]
    fn target_candidates_follow_resolved_label() {
        let mut g = SceneGraph::default().with_target("pillow");
        g.integrate(vec![det("pillow", mask(0..2), 0), det("bed", mask(5..9), 0)], 0);
        assert_eq!(g.target_candidates(), vec![(0.5, 0.0)]);
    }
}
