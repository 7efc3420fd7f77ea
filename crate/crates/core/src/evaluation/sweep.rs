//! Protocol dispatch and per-checkpoint transfer curves.
//!
//! Downstream data: protocols train on the union of a domain's `train` and
//! `val` splits and score on `test`; few-shot episodes are drawn from
//! `test`. The protocol stream for a domain is
//! `Rng::new(seed).split_named(domain id).split_named(protocol)`, so the
//! same (state, domain, seed) always yields the same score.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{
    extract_features, fewshot_on_features, finetune, linear_probe, load_checkpoint_or_missing, HyperParams, LabeledSet, ProbeConfig,
};
use crate::data::{Dataset, EpisodeSpec, Split};
use crate::error::{LabError, Result};
use crate::model::ModelState;
use crate::numerics::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    Linear,
    Finetune,
    Fewshot,
}

impl Protocol {
    pub const ALL: [Protocol; 3] = [Protocol::Linear, Protocol::Finetune, Protocol::Fewshot];

    pub fn name(self) -> &'static str {
        match self {
            Protocol::Linear => "linear",
            Protocol::Finetune => "finetune",
            Protocol::Fewshot => "fewshot",
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Protocol {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        Protocol::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| LabError::Config(format!("unknown protocol `{s}` (expected linear, finetune or fewshot)")))
    }
}

/// Everything a protocol needs besides the model and the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolSettings {
    #[serde(default)]
    pub probe: ProbeConfig,
    #[serde(default)]
    pub finetune: ProbeConfig,
    /// Class-balanced cap on fine-tuning samples; `None` uses all.
    #[serde(default)]
    pub sample_cap: Option<usize>,
    #[serde(default = "default_fewshot")]
    pub fewshot: EpisodeSpec,
}

fn default_fewshot() -> EpisodeSpec {
    EpisodeSpec::new(5)
}

impl Default for ProtocolSettings {
    fn default() -> Self {
        Self { probe: ProbeConfig::default(), finetune: ProbeConfig::default(), sample_cap: None, fewshot: default_fewshot() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolScore {
    pub value: f64,
    /// Few-shot 95% half-width.
    pub ci95: Option<f64>,
    pub best: Option<HyperParams>,
    /// Few-shot episodes excluded as non-finite.
    pub flagged: Option<usize>,
}

fn downstream(domain: &Dataset) -> (LabeledSet, LabeledSet) {
    let mut idx = domain.indices(Split::Train);
    idx.extend(domain.indices(Split::Val));
    idx.sort_unstable();
    let rows =
        |idx: &[usize]| LabeledSet { features: domain.images.select_rows(idx), labels: idx.iter().map(|&i| domain.labels[i]).collect() };
    (rows(&idx), rows(&domain.indices(Split::Test)))
}

pub fn protocol_rng(seed: u64, domain: &str, protocol: Protocol) -> Rng {
    Rng::new(seed).split_named(domain).split_named(protocol.name())
}

pub fn evaluate_protocol(
    state: &ModelState,
    domain: &Dataset,
    protocol: Protocol,
    settings: &ProtocolSettings,
    seed: u64,
) -> Result<ProtocolScore> {
    let rng = protocol_rng(seed, &domain.id, protocol);
    let (train, test) = downstream(domain);
    match protocol {
        Protocol::Linear => {
            let feats = |s: &LabeledSet| -> Result<LabeledSet> {
                Ok(LabeledSet { features: extract_features(state, &s.features)?, labels: s.labels.clone() })
            };
            let probe = linear_probe(&feats(&train)?, domain.num_classes, &settings.probe, &rng)?;
            Ok(ProtocolScore { value: probe.score(&feats(&test)?)?, ci95: None, best: Some(probe.best), flagged: None })
        }
        Protocol::Finetune => {
            let out = finetune(state, &train, &test, domain.num_classes, &settings.finetune, &rng, settings.sample_cap)?;
            Ok(ProtocolScore { value: out.test_accuracy, ci95: None, best: Some(out.best), flagged: None })
        }
        Protocol::Fewshot => {
            let features = extract_features(state, &test.features)?;
            let r = fewshot_on_features(&LabeledSet { features, labels: test.labels }, &settings.fewshot, &rng)?;
            Ok(ProtocolScore { value: r.mean, ci95: Some(r.ci95), best: None, flagged: Some(r.flagged) })
        }
    }
}

/// `epoch_<N>.json` files in `dir`, ascending by `N`. Other names are
/// skipped with a warning.
pub fn checkpoint_epochs(dir: &Path) -> Result<Vec<(usize, PathBuf)>> {
    let entries = std::fs::read_dir(dir).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            LabError::Missing(format!("checkpoint directory {}", dir.display()))
        } else {
            LabError::io(dir, e)
        }
    })?;
    let mut out = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| LabError::io(dir, e))?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        match name.strip_prefix("epoch_").and_then(|r| r.strip_suffix(".json")).and_then(|n| n.parse().ok()) {
            Some(epoch) => out.push((epoch, path)),
            None => log::warn!("checkpoint sweep: skipping {}", path.display()),
        }
    }
    out.sort();
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub epoch: usize,
    pub domain: String,
    pub protocol: Protocol,
    pub value: f64,
    pub ci95: Option<f64>,
}

/// Runs `protocol` on every checkpoint in `dir` for every domain; points
/// are ordered by epoch, then domain order.
pub fn checkpoint_sweep_eval(
    dir: &Path,
    protocol: Protocol,
    domains: &[Dataset],
    settings: &ProtocolSettings,
    seed: u64,
) -> Result<Vec<CurvePoint>> {
    let checkpoints = checkpoint_epochs(dir)?;
    if checkpoints.is_empty() {
        return Err(LabError::Missing(format!("no epoch_<N>.json checkpoints in {}", dir.display())));
    }
    let mut out = Vec::new();
    for (epoch, path) in checkpoints {
        let state = match load_checkpoint_or_missing(&path) {
            Ok(l) => l.state,
            Err(LabError::Missing(m)) => {
                log::warn!("checkpoint sweep: {m} vanished, skipping");
                continue;
            }
            Err(e) => return Err(e),
        };
        for domain in domains {
            let score = evaluate_protocol(&state, domain, protocol, settings, seed)?;
            out.push(CurvePoint { epoch, domain: domain.id.clone(), protocol, value: score.value, ci95: score.ci95 });
        }
    }
    Ok(out)
}
