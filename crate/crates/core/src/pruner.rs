//! Attention stage: keeps the detected labels that anchor the scene semantics.
//!
//! Whatever backend answers, the output is rebuilt from the input list, so it
//! is always an order-preserving, duplicate-free subset of the input.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::llmgw::{bindings, parse, Gateway, Parsed, PromptRole, PromptTemplate};
use crate::perception::Detection;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exemplar {
    pub input: Vec<String>,
    pub output: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PruneRequest {
    pub input_labels: Vec<String>,
    pub exemplars: Vec<Exemplar>,
}

impl PruneRequest {
    pub fn new(labels: impl IntoIterator<Item = impl Into<String>>) -> Self {
        Self {
            input_labels: labels.into_iter().map(Into::into).collect(),
            exemplars: Vec::new(),
        }
    }
}

#[derive(Debug, Deserialize)]
struct ExemplarDoc {
    exemplars: Vec<Exemplar>,
}

/// Bundled in-context examples; every output is a subset of its input.
pub fn bundled_exemplars() -> Vec<Exemplar> {
    parse_exemplars(include_str!("../data/pruner_exemplars.toml")).expect("bundled exemplars parse")
}

pub fn parse_exemplars(text: &str) -> Result<Vec<Exemplar>, String> {
    let doc: ExemplarDoc = toml::from_str(text).map_err(|e| e.to_string())?;
    for ex in &doc.exemplars {
        if let Some(bad) = ex.output.iter().find(|o| !ex.input.contains(o)) {
            return Err(format!("exemplar output '{bad}' is not in its input"));
        }
    }
    Ok(doc.exemplars)
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnchorConfig {
    pub anchors: BTreeSet<String>,
    #[serde(default)]
    pub synonyms: BTreeMap<String, String>,
}

impl AnchorConfig {
    pub fn bundled() -> Self {
        Self::from_toml_str(include_str!("../data/anchors.toml")).expect("bundled anchors parse")
    }

    pub fn from_toml_str(text: &str) -> Result<Self, String> {
        let cfg: AnchorConfig = toml::from_str(text).map_err(|e| e.to_string())?;
        if cfg.anchors.is_empty() {
            return Err("anchor list is empty".into());
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        Self::from_toml_str(&std::fs::read_to_string(path).map_err(|e| e.to_string())?)
    }

    pub fn canonical<'a>(&'a self, label: &'a str) -> &'a str {
        self.synonyms.get(label).map(String::as_str).unwrap_or(label)
    }

    pub fn is_anchor(&self, label: &str) -> bool {
        self.anchors.contains(self.canonical(label))
    }
}

#[derive(Debug, Clone)]
pub enum PrunerBackend {
    /// Keep labels in the anchor list.
    Oracle(AnchorConfig),
    /// In-context prompt through a model gateway.
    Remote { gateway: Gateway, template: PromptTemplate },
    /// No pruning at all.
    Identity,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PruneOutcome {
    pub labels: Vec<String>,
    /// Backend failed; the input was passed through unpruned.
    pub degraded: bool,
    /// Backend labels that were not part of the input.
    pub rejected: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct Pruner {
    backend: PrunerBackend,
}

impl Pruner {
    pub fn new(backend: PrunerBackend) -> Self {
        Self { backend }
    }

    pub fn oracle() -> Self {
        Self::new(PrunerBackend::Oracle(AnchorConfig::bundled()))
    }

    pub fn identity() -> Self {
        Self::new(PrunerBackend::Identity)
    }

    pub fn remote(gateway: Gateway) -> Self {
        Self::new(PrunerBackend::Remote {
            gateway,
            template: PromptTemplate::bundled(PromptRole::Pruner),
        })
    }

    pub fn backend(&self) -> &PrunerBackend {
        &self.backend
    }

    pub fn prune(&self, req: &PruneRequest) -> PruneOutcome {
        let inputs = dedup(&req.input_labels);
        if inputs.is_empty() {
            return PruneOutcome::default();
        }
        match &self.backend {
            PrunerBackend::Identity => PruneOutcome {
                labels: inputs,
                ..PruneOutcome::default()
            },
            PrunerBackend::Oracle(anchors) => PruneOutcome {
                labels: inputs.into_iter().filter(|l| anchors.is_anchor(l)).collect(),
                ..PruneOutcome::default()
            },
            PrunerBackend::Remote { gateway, template } => {
                let exemplars = req
                    .exemplars
                    .iter()
                    .map(|e| format!("Input: [{}]\nOutput: [{}]\n", e.input.join(", "), e.output.join(", ")))
                    .collect::<String>();
                let reply = template
                    .render(&bindings([("exemplars", exemplars), ("labels", inputs.join(", "))]))
                    .and_then(|prompt| gateway.complete(PromptRole::Pruner, &prompt))
                    .and_then(|text| parse(PromptRole::Pruner, &text));
                match reply {
                    Ok(Parsed::Labels(kept)) => sanitize(&inputs, &kept),
                    other => {
                        log::warn!("pruner-degraded: {other:?}");
                        PruneOutcome {
                            labels: inputs,
                            degraded: true,
                            rejected: Vec::new(),
                        }
                    }
                }
            }
        }
    }
}

fn dedup(labels: &[String]) -> Vec<String> {
    let mut seen = BTreeSet::new();
    labels
        .iter()
        .filter(|l| seen.insert(l.as_str()))
        .cloned()
        .collect()
}

/// Rebuilds the output from `inputs`, keeping those the backend named.
fn sanitize(inputs: &[String], kept: &[String]) -> PruneOutcome {
    let normalized: BTreeSet<String> = kept.iter().map(|k| k.trim().to_ascii_lowercase()).collect();
    let labels: Vec<String> = inputs
        .iter()
        .filter(|l| normalized.contains(&l.to_ascii_lowercase()))
        .cloned()
        .collect();
    let input_set: BTreeSet<String> = inputs.iter().map(|l| l.to_ascii_lowercase()).collect();
    let rejected: Vec<String> = normalized.into_iter().filter(|k| !input_set.contains(k)).collect();
    if !rejected.is_empty() {
        log::info!("pruner dropped labels not in its input: {rejected:?}");
    }
    PruneOutcome {
        labels,
        degraded: false,
        rejected,
    }
}

/// Target-candidate context for the density override.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityContext {
    pub target_label: String,
    /// Floor-plane centroids of current target candidates.
    pub candidates: Vec<(f64, f64)>,
    pub r_dense: f64,
}

impl DensityContext {
    pub fn new(target_label: impl Into<String>, r_dense: f64) -> Self {
        Self {
            target_label: target_label.into(),
            candidates: Vec::new(),
            r_dense,
        }
    }
}

/// True when a detection should skip pruning: it carries the target label or
/// lies within `r_dense` of a target candidate.
pub fn should_bypass(detection: &Detection, ctx: &DensityContext) -> bool {
    if detection.label == ctx.target_label {
        return true;
    }
    let (x, y) = detection.centroid_xy();
    ctx.candidates
        .iter()
        .any(|&(cx, cy)| (x - cx).hypot(y - cy) <= ctx.r_dense + 1e-9)
}
