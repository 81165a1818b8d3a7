//! Simulated open-vocabulary detector.
//!
//! Tagging, box grounding and mask extraction are collapsed into one stage that
//! emits the same contract a real segmentation stack would: a label, a
//! confidence, a bounding rectangle and a voxel mask per segment. Noise is
//! drawn from independent seeded streams so that priming the detector with a
//! label can only add detections.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{CellRect, Voxel, VoxelSet};
use crate::llmgw::{bindings, Gateway, GatewayError, PromptRole, PromptTemplate};
use crate::world::{ObjectId, Observation, Pose};

/// Labels the simulated detector may hallucinate.
pub const DEFAULT_VOCABULARY: &[&str] = &[
    "apple", "orange", "pillow", "book", "pen", "cup", "bowl", "remote", "laptop", "plant",
    "lamp", "towel", "soda can", "blanket", "vase", "shoe", "chair", "couch", "bed", "cabinet",
    "kitchen table", "dining table", "desk", "computer table", "counter", "fridge", "toilet",
    "sink", "shelf", "tv stand", "bench", "dresser",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub label: String,
    pub confidence: f64,
    pub bbox: CellRect,
    pub mask: VoxelSet,
    pub frame: u32,
    /// Ground-truth instance behind the segment. Withheld from planning; used by oracles.
    pub source_object: Option<ObjectId>,
}

impl Detection {
    /// Builds a detection whose bounding rectangle is the mask's column extent.
    pub fn from_mask(
        label: impl Into<String>,
        confidence: f64,
        mask: VoxelSet,
        frame: u32,
        source_object: Option<ObjectId>,
    ) -> Self {
        let bbox = mask.bbox().expect("detection mask must be non-empty");
        Self {
            label: label.into(),
            confidence,
            bbox,
            mask,
            frame,
            source_object,
        }
    }

    /// Mask centroid projected on the floor plane.
    pub fn centroid_xy(&self) -> (f64, f64) {
        let c = self.mask.centroid().unwrap_or([0.0; 3]);
        (c[0], c[1])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    pub miss_rate: f64,
    pub false_positive_rate: f64,
    /// `label -> (confused label, probability)`.
    pub label_confusion: BTreeMap<String, (String, f64)>,
    pub primed_label: Option<String>,
    pub vocabulary: Vec<String>,
    /// Detections below this confidence are discarded. Zero accepts everything.
    pub min_confidence: f64,
    pub seed: u64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            miss_rate: 0.0,
            false_positive_rate: 0.0,
            label_confusion: BTreeMap::new(),
            primed_label: None,
            vocabulary: DEFAULT_VOCABULARY.iter().map(|s| s.to_string()).collect(),
            min_confidence: 0.0,
            seed: 0,
        }
    }
}

impl DetectorConfig {
    pub fn noise_free() -> Self {
        Self::default()
    }

    pub fn validate(&self) -> Result<(), PerceptionError> {
        let rate_ok = |r: f64| (0.0..=1.0).contains(&r);
        if !rate_ok(self.miss_rate) || !rate_ok(self.false_positive_rate) {
            return Err(PerceptionError::Config("rates must lie in [0, 1]".into()));
        }
        if self.label_confusion.values().any(|(_, p)| !rate_ok(*p)) {
            return Err(PerceptionError::Config("confusion probabilities must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn primed(&self, label: &str) -> Self {
        Self {
            primed_label: Some(label.to_string()),
            ..self.clone()
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PerceptionError {
    #[error("invalid detector config: {0}")]
    Config(String),
    #[error("detector transport failure (retryable): {0}")]
    Transport(String),
    #[error("detector protocol error: {0}")]
    Protocol(String),
}

const STREAM_TRUE: u64 = 1;
const STREAM_FALSE: u64 = 2;
const STREAM_PRIMED: u64 = 3;

pub(crate) fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn frame_rng(seed: u64, step: u32, pose: Pose, stream: u64) -> ChaCha8Rng {
    let mut h = splitmix(seed);
    for part in [
        u64::from(step),
        pose.cell.x as u64,
        pose.cell.y as u64,
        pose.heading as u64,
        stream,
    ] {
        h = splitmix(h ^ part);
    }
    ChaCha8Rng::seed_from_u64(h)
}

/// Runs the simulated detector on one observation.
pub fn detect(obs: &Observation, cfg: &DetectorConfig) -> Vec<Detection> {
    let mut out = Vec::new();

    let mut rng = frame_rng(cfg.seed, obs.step, obs.pose, STREAM_TRUE);
    for vo in &obs.visible_objects {
        // Draws happen unconditionally so streams stay aligned across configs.
        let miss_draw: f64 = rng.random();
        let confidence: f64 = rng.random_range(0.6..=1.0);
        let confusion_draw: f64 = rng.random();
        if miss_draw < cfg.miss_rate || vo.voxels.is_empty() {
            continue;
        }
        let label = match cfg.label_confusion.get(&vo.label) {
            Some((other, p)) if confusion_draw < *p => other.clone(),
            _ => vo.label.clone(),
        };
        out.push(Detection::from_mask(
            label,
            confidence,
            vo.voxels.clone(),
            obs.step,
            Some(vo.id),
        ));
    }

    if !obs.visible_cells.is_empty() && cfg.false_positive_rate > 0.0 {
        let mut rng = frame_rng(cfg.seed, obs.step, obs.pose, STREAM_FALSE);
        let count = Poisson::new(cfg.false_positive_rate)
            .map(|p| p.sample(&mut rng) as usize)
            .unwrap_or(0);
        for _ in 0..count {
            if cfg.vocabulary.is_empty() {
                break;
            }
            let label = cfg.vocabulary[rng.random_range(0..cfg.vocabulary.len())].clone();
            out.push(false_positive(obs, label, &mut rng));
        }
        if let Some(primed) = &cfg.primed_label {
            let mut rng = frame_rng(cfg.seed, obs.step, obs.pose, STREAM_PRIMED);
            if rng.random::<f64>() < cfg.false_positive_rate {
                out.push(false_positive(obs, primed.clone(), &mut rng));
            }
        }
    }

    out.retain(|d| d.confidence >= cfg.min_confidence);
    out
}

fn false_positive(obs: &Observation, label: String, rng: &mut ChaCha8Rng) -> Detection {
    let cell = obs.visible_cells[rng.random_range(0..obs.visible_cells.len())].cell;
    let z = rng.random_range(0..=3);
    let height = rng.random_range(1..=2);
    let mask: VoxelSet = (z..z + height).map(|z| Voxel::new(cell.x, cell.y, z)).collect();
    let confidence = rng.random_range(0.3..=0.8);
    Detection::from_mask(label, confidence, mask, obs.step, None)
}

/// Frame summary sent to a remote detector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameDescriptor {
    pub step: u32,
    pub pose: Pose,
    pub image_ref: Option<String>,
}

#[derive(Debug, Deserialize)]
struct SegmentPayload {
    segments: Vec<SegmentRecord>,
}

#[derive(Debug, Deserialize)]
struct SegmentRecord {
    label: String,
    confidence: f64,
    bbox: [i32; 4],
    /// Vertical runs `[x, y, z_start, length]`.
    mask: Vec<[i32; 4]>,
}

/// Parses a segment list in the remote detector wire format.
pub fn parse_segments(payload: &str, frame: u32) -> Result<Vec<Detection>, PerceptionError> {
    let trimmed = payload.trim();
    if trimmed.is_empty() {
        return Ok(Vec::new());
    }
    let doc: SegmentPayload =
        serde_json::from_str(trimmed).map_err(|e| PerceptionError::Protocol(e.to_string()))?;
    doc.segments
        .into_iter()
        .map(|s| {
            if !(0.0..=1.0).contains(&s.confidence) {
                return Err(PerceptionError::Protocol(format!(
                    "confidence {} outside [0, 1]",
                    s.confidence
                )));
            }
            let bbox = CellRect::new(s.bbox[0], s.bbox[1], s.bbox[2], s.bbox[3]);
            let mut mask = VoxelSet::new();
            for [x, y, z, len] in s.mask {
                if len <= 0 {
                    return Err(PerceptionError::Protocol("non-positive run length".into()));
                }
                for dz in 0..len {
                    mask.insert(Voxel::new(x, y, z + dz));
                }
            }
            if mask.is_empty() {
                return Err(PerceptionError::Protocol(format!("segment '{}' has an empty mask", s.label)));
            }
            if mask.iter().any(|v| !bbox.contains(v.column())) {
                return Err(PerceptionError::Protocol(format!(
                    "segment '{}' mask leaves its bbox",
                    s.label
                )));
            }
            Ok(Detection {
                label: s.label.trim().to_ascii_lowercase(),
                confidence: s.confidence,
                bbox,
                mask,
                frame,
                source_object: None,
            })
        })
        .collect()
}

/// Encodes a detection list in the remote wire format.
pub fn encode_segments(detections: &[Detection]) -> String {
    let segments: Vec<serde_json::Value> = detections
        .iter()
        .map(|d| {
            let mut runs: Vec<[i32; 4]> = Vec::new();
            for v in d.mask.iter() {
                match runs.last_mut() {
                    Some(r) if r[0] == v.x && r[1] == v.y && r[2] + r[3] == v.z => r[3] += 1,
                    _ => runs.push([v.x, v.y, v.z, 1]),
                }
            }
            serde_json::json!({
                "label": d.label,
                "confidence": d.confidence,
                "bbox": [d.bbox.x0, d.bbox.y0, d.bbox.x1, d.bbox.y1],
                "mask": runs,
            })
        })
        .collect();
    serde_json::json!({ "segments": segments }).to_string()
}

/// Detector backed by a remote segmentation service reached through the gateway.
#[derive(Debug, Clone)]
pub struct RemoteDetector {
    gateway: Gateway,
    template: PromptTemplate,
}

impl RemoteDetector {
    pub fn new(gateway: Gateway) -> Self {
        Self {
            gateway,
            template: PromptTemplate::bundled(PromptRole::Detect),
        }
    }

    pub fn detect_remote(&self, frame: &FrameDescriptor) -> Result<Vec<Detection>, PerceptionError> {
        let request = self
            .template
            .render(&bindings([(
                "frame",
                serde_json::to_string(frame).expect("frame descriptor serializes"),
            )]))
            .map_err(|e| PerceptionError::Protocol(e.to_string()))?;
        let reply = self
            .gateway
            .complete(PromptRole::Detect, &request)
            .map_err(|e| match e {
                GatewayError::BackendFailure { .. } => PerceptionError::Transport(e.to_string()),
                other => PerceptionError::Protocol(other.to_string()),
            })?;
        parse_segments(&reply, frame.step)
    }
}
