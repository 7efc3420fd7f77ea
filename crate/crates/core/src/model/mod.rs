//! Staged encoder, classifier and projection heads, the momentum key
//! encoder, and the key queues.

mod checkpoint;
mod layers;
mod queue;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointError, LoadedCheckpoint, SCHEMA_VERSION};
pub use layers::{Encoder, HeadVars, Linear, LinearVars, Network, NetworkVars, ProjectionHead};
pub use queue::{KeyQueue, UNLABELED};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::numerics::{Rng, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ObjectiveKind {
    #[serde(rename = "ce")]
    Ce,
    #[serde(rename = "selfsupcon")]
    SelfSupCon,
    #[serde(rename = "supcon")]
    SupCon,
    #[serde(rename = "ce+selfsupcon")]
    CeSelfSupCon,
    #[serde(rename = "supcon+selfsupcon")]
    SupConSelfSupCon,
}

impl ObjectiveKind {
    pub const ALL: [ObjectiveKind; 5] =
        [ObjectiveKind::Ce, ObjectiveKind::SelfSupCon, ObjectiveKind::SupCon, ObjectiveKind::CeSelfSupCon, ObjectiveKind::SupConSelfSupCon];

    pub fn uses_classifier(self) -> bool {
        matches!(self, ObjectiveKind::Ce | ObjectiveKind::CeSelfSupCon)
    }

    pub fn uses_selfsup(self) -> bool {
        matches!(self, ObjectiveKind::SelfSupCon | ObjectiveKind::CeSelfSupCon | ObjectiveKind::SupConSelfSupCon)
    }

    pub fn uses_supcon(self) -> bool {
        matches!(self, ObjectiveKind::SupCon | ObjectiveKind::SupConSelfSupCon)
    }

    pub fn is_joint(self) -> bool {
        matches!(self, ObjectiveKind::CeSelfSupCon | ObjectiveKind::SupConSelfSupCon)
    }

    pub fn needs_key_encoder(self) -> bool {
        self.uses_selfsup() || self.uses_supcon()
    }

    pub fn needs_two_views(self) -> bool {
        self.uses_selfsup()
    }

    /// Filesystem-safe tag.
    pub fn tag(self) -> &'static str {
        match self {
            ObjectiveKind::Ce => "ce",
            ObjectiveKind::SelfSupCon => "selfsupcon",
            ObjectiveKind::SupCon => "supcon",
            ObjectiveKind::CeSelfSupCon => "ce_selfsupcon",
            ObjectiveKind::SupConSelfSupCon => "supcon_selfsupcon",
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            ObjectiveKind::Ce => "CE",
            ObjectiveKind::SelfSupCon => "SelfSupCon",
            ObjectiveKind::SupCon => "SupCon",
            ObjectiveKind::CeSelfSupCon => "CE+SelfSupCon",
            ObjectiveKind::SupConSelfSupCon => "SupCon+SelfSupCon",
        }
    }
}

impl fmt::Display for ObjectiveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.display_name())
    }
}

impl FromStr for ObjectiveKind {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.to_ascii_lowercase().replace('_', "+");
        ObjectiveKind::ALL
            .into_iter()
            .find(|k| k.display_name().to_ascii_lowercase() == norm)
            .ok_or_else(|| LabError::Config(format!("unknown objective `{s}`")))
    }
}

/// How the supervised contrastive loss aggregates over a query's positives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SupConMode {
    #[default]
    Mean,
    Sum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    #[serde(default = "defaults::input_dim")]
    pub input_dim: usize,
    #[serde(default = "defaults::stage_widths")]
    pub stage_widths: Vec<usize>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { input_dim: defaults::input_dim(), stage_widths: defaults::stage_widths() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub objective: ObjectiveKind,
    #[serde(default)]
    pub encoder: EncoderConfig,
    pub num_classes: usize,
    #[serde(default = "defaults::projection_hidden")]
    pub projection_hidden: usize,
    #[serde(default = "defaults::embed_dim")]
    pub embed_dim: usize,
    #[serde(default = "defaults::temperature")]
    pub temperature: f64,
    /// EMA coefficient of the key encoder.
    #[serde(default = "defaults::momentum")]
    pub momentum: f64,
    #[serde(default = "defaults::queue_size")]
    pub queue_size: usize,
    /// Weight on the self-supervised term of CE+SelfSupCon.
    #[serde(default = "defaults::alpha")]
    pub alpha: f64,
    /// Weight on the self-supervised term of SupCon+SelfSupCon (1 when unset).
    #[serde(default)]
    pub supcon_selfsup_weight: Option<f64>,
    #[serde(default)]
    pub supcon_sum_mode: SupConMode,
    /// One projection head shared by both contrastive terms. Rejected for
    /// joint objectives.
    #[serde(default)]
    pub shared_header: bool,
}

pub mod defaults {
    pub fn input_dim() -> usize {
        256
    }
    pub fn stage_widths() -> Vec<usize> {
        vec![256, 128, 128, 64]
    }
    pub fn projection_hidden() -> usize {
        64
    }
    pub fn embed_dim() -> usize {
        32
    }
    pub fn temperature() -> f64 {
        0.07
    }
    pub fn momentum() -> f64 {
        0.99
    }
    pub fn queue_size() -> usize {
        512
    }
    pub fn alpha() -> f64 {
        1.0
    }
}

impl ModelConfig {
    pub fn new(objective: ObjectiveKind, num_classes: usize) -> Self {
        Self {
            objective,
            encoder: EncoderConfig::default(),
            num_classes,
            projection_hidden: defaults::projection_hidden(),
            embed_dim: defaults::embed_dim(),
            temperature: defaults::temperature(),
            momentum: defaults::momentum(),
            queue_size: defaults::queue_size(),
            alpha: defaults::alpha(),
            supcon_selfsup_weight: None,
            supcon_sum_mode: SupConMode::Mean,
            shared_header: false,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.encoder.stage_widths.last().copied().unwrap_or(0)
    }

    /// Every violation, not just the first.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.encoder.stage_widths.len() < 2 {
            v.push(format!("encoder needs at least 2 stages, got {}", self.encoder.stage_widths.len()));
        }
        if self.encoder.input_dim == 0 || self.encoder.stage_widths.contains(&0) {
            v.push("encoder dims must be positive".into());
        }
        if self.num_classes < 2 && self.objective.uses_classifier() {
            v.push(format!("num_classes must be >= 2, got {}", self.num_classes));
        }
        if self.projection_hidden == 0 || self.embed_dim == 0 {
            v.push("projection dims must be positive".into());
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            v.push(format!("temperature must be > 0, got {}", self.temperature));
        }
        if !(0.0..=1.0).contains(&self.momentum) {
            v.push(format!("momentum must lie in [0,1], got {}", self.momentum));
        }
        if self.queue_size == 0 {
            v.push("queue_size must be positive".into());
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            v.push(format!("alpha must be >= 0, got {}", self.alpha));
        }
        if let Some(w) = self.supcon_selfsup_weight {
            if !(w >= 0.0 && w.is_finite()) {
                v.push(format!("supcon_selfsup_weight must be >= 0, got {w}"));
            }
        }
        if self.shared_header && self.objective.is_joint() {
            v.push(format!(
                "{}: a single shared header is not supported for joint objectives (it diverges during training); use two heads",
                self.objective
            ));
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(LabError::Config(v.join("; ")))
        }
    }

    pub fn selfsup_weight(&self) -> f64 {
        match self.objective {
            ObjectiveKind::CeSelfSupCon => self.alpha,
            ObjectiveKind::SupConSelfSupCon => self.supcon_selfsup_weight.unwrap_or(1.0),
            _ => 1.0,
        }
    }
}

/// Query network, its EMA key copy, key queues and the training RNG.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub config: ModelConfig,
    pub query: Network,
    /// Encoder + projection heads; `None` for cross-entropy.
    pub key: Option<Network>,
    pub selfsup_queue: Option<KeyQueue>,
    /// Labeled queue for the supervised contrastive head.
    pub supcon_queue: Option<KeyQueue>,
    pub rng: Rng,
    /// Number of completed training epochs.
    pub epoch: usize,
}

impl ModelState {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let root = Rng::new(seed);
        let mut init = root.split_named("init");
        let kind = config.objective;
        let enc = &config.encoder;
        let d = config.feature_dim();
        let encoder = Encoder::init(enc.input_dim, &enc.stage_widths, &mut init);
        let classifier = kind.uses_classifier().then(|| Linear::init(d, config.num_classes, &mut init));
        let mut head = || ProjectionHead::init(d, config.projection_hidden, config.embed_dim, &mut init);
        let selfsup_head = kind.uses_selfsup().then(&mut head);
        let supcon_head = kind.uses_supcon().then(&mut head);
        let query = Network { encoder, classifier, selfsup_head, supcon_head };
        let key = kind.needs_key_encoder().then(|| query.key_copy());
        let mut qrng = root.split_named("queue");
        let selfsup_queue =
            if kind.uses_selfsup() { Some(KeyQueue::new(config.queue_size, config.embed_dim, false, &mut qrng)?) } else { None };
        let supcon_queue =
            if kind.uses_supcon() { Some(KeyQueue::new(config.queue_size, config.embed_dim, true, &mut qrng)?) } else { None };
        Ok(Self { config, query, key, selfsup_queue, supcon_queue, rng: root.split_named("train"), epoch: 0 })
    }

    /// Penultimate features `v` for a batch of flattened images.
    pub fn features(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.query.encoder.features(x)?)
    }

    pub fn forward_stages(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        Ok(self.query.encoder.forward_stages(x)?)
    }

    /// Applies [`momentum_update`] to the key network, if any.
    pub fn update_key_encoder(&mut self) -> Result<()> {
        let m = self.config.momentum;
        if let Some(key) = &mut self.key {
            momentum_update(key, &self.query, m)?;
        }
        Ok(())
    }
}

/// `p_k ← m·p_k + (1−m)·p_q` for every key parameter, matched by name.
pub fn momentum_update(key: &mut Network, query: &Network, m: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&m) {
        return Err(LabError::Contract(format!("momentum {m} outside [0,1]")));
    }
    let q: std::collections::HashMap<String, &Tensor> = query.named_params().into_iter().collect();
    for (name, pk) in key.named_params_mut() {
        let pq = q.get(&name).ok_or_else(|| LabError::Contract(format!("query network has no parameter `{name}`")))?;
        if pq.shape() != pk.shape() {
            return Err(LabError::Contract(format!("`{name}`: key shape {:?} vs query shape {:?}", pk.shape(), pq.shape())));
        }
        for (k, &qv) in pk.data_mut().iter_mut().zip(pq.data()) {
            *k = m * *k + (1.0 - m) * qv;
        }
    }
    Ok(())
}
