//! Short-term memory for object-directed phases.
//!
//! Frames are buffered only while the agent travels to a chosen node. On
//! arrival, each target candidate is checked against every buffered view that
//! overlaps it, and the fraction of confirming views decides the verdict.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::llmgw::{bindings, parse, Gateway, Parsed, PromptRole, PromptTemplate};
use crate::perception::{splitmix, Detection};
use crate::planner::Phase;
use crate::scenegraph::{overlap, NodeId, SceneGraph};
use crate::world::{GridScene, Pose};

pub const DEFAULT_TAU_STM: f64 = 0.2;
pub const DEFAULT_THETA_V: f64 = 0.5;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum StmError {
    #[error("frames are only recorded while exploring an object, not during {0:?}")]
    Phase(Phase),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StmFrame {
    pub step: u32,
    pub pose: Pose,
    pub detections: Vec<Detection>,
    /// Detection index → node it was fused into.
    pub node_attribution: BTreeMap<usize, NodeId>,
}

#[derive(Debug, Clone, Default)]
pub struct ShortTermMemory {
    frames: Vec<StmFrame>,
}

impl ShortTermMemory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, frame: StmFrame, phase: Phase) -> Result<usize, StmError> {
        if phase != Phase::ExploreObj {
            return Err(StmError::Phase(phase));
        }
        self.frames.push(frame);
        Ok(self.frames.len())
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frames(&self) -> &[StmFrame] {
        &self.frames
    }

    pub fn clear(&mut self) {
        self.frames.clear();
    }

    /// Frames holding a detection that overlaps `candidate` by at least `tau`, ordered by step.
    pub fn retrieve_views(&self, candidate: &Detection, tau: f64) -> Vec<&StmFrame> {
        let mut views: Vec<&StmFrame> = self
            .frames
            .iter()
            .filter(|f| {
                f.detections
                    .iter()
                    .any(|d| overlap(&candidate.mask, &d.mask).is_ok_and(|o| o >= tau))
            })
            .collect();
        views.sort_by_key(|f| f.step);
        views.dedup_by_key(|f| f.step);
        views
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewCheck {
    pub step: u32,
    /// `None` when the backend failed on this view.
    pub confirm: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationResult {
    pub candidate: Detection,
    pub views: Vec<ViewCheck>,
    pub confirm_fraction: f64,
    pub verdict: bool,
}

#[derive(Debug, Clone)]
pub enum VerifyBackend {
    /// Confirms iff the segment's true object carries the target label, flipped with `error_rate`.
    Oracle {
        scene: Arc<GridScene>,
        error_rate: f64,
        seed: u64,
    },
    Lvlm {
        gateway: Gateway,
        template: PromptTemplate,
    },
}

#[derive(Debug, Clone)]
pub struct Verifier {
    pub backend: VerifyBackend,
    pub theta_v: f64,
}

impl Verifier {
    pub fn oracle(scene: Arc<GridScene>, error_rate: f64, seed: u64) -> Self {
        Self {
            backend: VerifyBackend::Oracle {
                scene,
                error_rate,
                seed,
            },
            theta_v: DEFAULT_THETA_V,
        }
    }

    pub fn lvlm(gateway: Gateway) -> Self {
        Self {
            backend: VerifyBackend::Lvlm {
                gateway,
                template: PromptTemplate::bundled(PromptRole::Verify),
            },
            theta_v: DEFAULT_THETA_V,
        }
    }

    fn check(&self, candidate: &Detection, view: &StmFrame, target: &str) -> Option<bool> {
        match &self.backend {
            VerifyBackend::Oracle {
                scene,
                error_rate,
                seed,
            } => {
                let truth = candidate
                    .source_object
                    .and_then(|id| scene.object(id))
                    .is_some_and(|o| o.label == target);
                let key = splitmix(splitmix(*seed ^ u64::from(view.step)) ^ (u64::from(candidate.frame) << 32));
                let flip = ChaCha8Rng::seed_from_u64(key).random::<f64>() < *error_rate;
                Some(truth != flip)
            }
            VerifyBackend::Lvlm { gateway, template } => {
                let b = bindings([
                    ("target", target.to_string()),
                    ("view", describe_view(candidate, view)),
                ]);
                match template
                    .render(&b)
                    .and_then(|p| gateway.complete(PromptRole::Verify, &p))
                    .and_then(|r| parse(PromptRole::Verify, &r))
                {
                    Ok(Parsed::YesNo(v)) => Some(v),
                    other => {
                        log::warn!("verification view {} failed: {other:?}", view.step);
                        None
                    }
                }
            }
        }
    }

    pub fn verify(&self, candidate: &Detection, views: &[&StmFrame], target: &str) -> VerificationResult {
        let checks: Vec<ViewCheck> = views
            .iter()
            .map(|v| ViewCheck {
                step: v.step,
                confirm: self.check(candidate, v, target),
            })
            .collect();
        let answered = checks.iter().filter(|c| c.confirm.is_some()).count();
        let confirms = checks.iter().filter(|c| c.confirm == Some(true)).count();
        let confirm_fraction = if answered == 0 {
            0.0
        } else {
            confirms as f64 / answered as f64
        };
        VerificationResult {
            candidate: candidate.clone(),
            views: checks,
            confirm_fraction,
            verdict: answered > 0 && confirm_fraction >= self.theta_v,
        }
    }
}

/// Text description of the stored segment that best matches the candidate in a view.
pub fn describe_view(candidate: &Detection, view: &StmFrame) -> String {
    let seg = view
        .detections
        .iter()
        .max_by(|a, b| {
            let oa = overlap(&candidate.mask, &a.mask).unwrap_or(0.0);
            let ob = overlap(&candidate.mask, &b.mask).unwrap_or(0.0);
            oa.total_cmp(&ob)
        })
        .unwrap_or(candidate);
    format!(
        "frame {} from ({}, {}) facing {}; segment '{}' at bbox {:?} with {} voxels",
        view.step,
        view.pose.cell.x,
        view.pose.cell.y,
        view.pose.heading,
        seg.label,
        seg.bbox,
        seg.mask.len()
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhaseOutcome {
    Found(Box<Detection>),
    Rejected,
}

/// Ends an object phase: any positive verdict means found; otherwise the node
/// is marked explored and the buffer cleared.
pub fn conclude(
    results: &[VerificationResult],
    node: NodeId,
    graph: &mut SceneGraph,
    stm: &mut ShortTermMemory,
) -> PhaseOutcome {
    if let Some(hit) = results.iter().find(|r| r.verdict) {
        return PhaseOutcome::Found(Box::new(hit.candidate.clone()));
    }
    if let Err(e) = graph.mark_explored(node) {
        log::warn!("{e}");
    }
    stm.clear();
    PhaseOutcome::Rejected
}
