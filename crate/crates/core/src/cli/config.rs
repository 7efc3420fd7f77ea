//! Experiment configuration: one JSON document, validated as a whole before
//! any compute starts.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::analysis::{InterDenominator, PgdConfig};
use crate::data::{CorruptionKind, DomainSpec, SeverityTable};
use crate::error::{LabError, Result};
use crate::evaluation::{Protocol, ProtocolSettings};
use crate::model::{EncoderConfig, ModelConfig, ObjectiveKind, SupConMode};
use crate::numerics::{Schedule, SgdConfig};
use crate::objectives::{AugmentationRegime, TrainConfig};

/// A preset name (`source`, `near`, `far_texture`, `far_brightness`) or a
/// full domain spec. Either way the generator seed is the run seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DomainRef {
    Preset(String),
    Spec(DomainSpec),
}

impl DomainRef {
    pub fn resolve(&self, seed: u64) -> Result<DomainSpec> {
        match self {
            DomainRef::Preset(name) => DomainSpec::preset(name, seed),
            DomainRef::Spec(spec) => Ok(DomainSpec { seed, ..spec.clone() }),
        }
    }

    pub fn id(&self) -> &str {
        match self {
            DomainRef::Preset(name) => name,
            DomainRef::Spec(spec) => &spec.id,
        }
    }
}

/// One pretraining method; unset fields take the model defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodSpec {
    pub objective: ObjectiveKind,
    /// Directory and record tag; defaults to the objective tag.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tag: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub momentum: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub queue_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub supcon_selfsup_weight: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub supcon_mode: Option<SupConMode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub projection_hidden: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embed_dim: Option<usize>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub shared_header: bool,
    /// Overrides the pretraining augmentation regime for this method.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub augmentation: Option<AugmentationRegime>,
}

impl MethodSpec {
    pub fn new(objective: ObjectiveKind) -> Self {
        Self {
            objective,
            tag: None,
            temperature: None,
            momentum: None,
            queue_size: None,
            alpha: None,
            supcon_selfsup_weight: None,
            supcon_mode: None,
            projection_hidden: None,
            embed_dim: None,
            shared_header: false,
            augmentation: None,
        }
    }

    pub fn tag(&self) -> String {
        self.tag.clone().unwrap_or_else(|| self.objective.tag().to_string())
    }

    pub fn model_config(&self, encoder: &EncoderConfig, num_classes: usize) -> ModelConfig {
        let mut c = ModelConfig::new(self.objective, num_classes);
        c.encoder = encoder.clone();
        c.temperature = self.temperature.unwrap_or(c.temperature);
        c.momentum = self.momentum.unwrap_or(c.momentum);
        c.queue_size = self.queue_size.unwrap_or(c.queue_size);
        c.alpha = self.alpha.unwrap_or(c.alpha);
        c.supcon_selfsup_weight = self.supcon_selfsup_weight;
        c.supcon_sum_mode = self.supcon_mode.unwrap_or_default();
        c.projection_hidden = self.projection_hidden.unwrap_or(c.projection_hidden);
        c.embed_dim = self.embed_dim.unwrap_or(c.embed_dim);
        c.shared_header = self.shared_header;
        c
    }
}

/// Learning-rate schedule over the pretraining epochs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LrSchedule {
    Constant { base: f64 },
    CosineWarmup { base: f64, warmup: usize },
    StepDecay { base: f64, milestones: Vec<usize>, factor: f64 },
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule::CosineWarmup { base: 0.05, warmup: 5 }
    }
}

impl LrSchedule {
    pub fn schedule(&self, epochs: usize) -> Schedule {
        match self.clone() {
            LrSchedule::Constant { base } => Schedule::Constant { base },
            LrSchedule::CosineWarmup { base, warmup } => Schedule::CosineWarmup { base, total: epochs, warmup },
            LrSchedule::StepDecay { base, milestones, factor } => Schedule::StepDecay { base, milestones, factor },
        }
    }

    fn base(&self) -> f64 {
        match self {
            LrSchedule::Constant { base } | LrSchedule::CosineWarmup { base, .. } | LrSchedule::StepDecay { base, .. } => *base,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainSettings {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default)]
    pub schedule: LrSchedule,
    #[serde(default)]
    pub optimizer: SgdConfig,
    #[serde(default)]
    pub train: TrainConfig,
    /// Also checkpoint every this many epochs; 0 keeps only the initial and
    /// final checkpoints.
    #[serde(default)]
    pub checkpoint_every: usize,
}

fn default_epochs() -> usize {
    100
}

impl Default for PretrainSettings {
    fn default() -> Self {
        Self {
            epochs: default_epochs(),
            schedule: LrSchedule::default(),
            optimizer: SgdConfig::default(),
            train: TrainConfig::default(),
            checkpoint_every: 0,
        }
    }
}

/// Which checkpoints `eval` scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointSelector {
    #[default]
    Final,
    /// Every `epoch_<N>.json`, as a transfer-vs-epoch curve.
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnalysisKind {
    Cka,
    Calibration,
    Separation,
    Corruption,
    Pgd,
    Export,
}

impl AnalysisKind {
    pub const ALL: [AnalysisKind; 6] = [
        AnalysisKind::Cka,
        AnalysisKind::Calibration,
        AnalysisKind::Separation,
        AnalysisKind::Corruption,
        AnalysisKind::Pgd,
        AnalysisKind::Export,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AnalysisKind::Cka => "cka",
            AnalysisKind::Calibration => "calibration",
            AnalysisKind::Separation => "separation",
            AnalysisKind::Corruption => "corruption",
            AnalysisKind::Pgd => "pgd",
            AnalysisKind::Export => "export",
        }
    }
}

impl FromStr for AnalysisKind {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        AnalysisKind::ALL.into_iter().find(|k| k.name() == s).ok_or_else(|| LabError::Config(format!("unknown analysis `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisSettings {
    #[serde(default = "default_analyses")]
    pub kinds: Vec<AnalysisKind>,
    /// Domain whose test split is analyzed (probe heads fit on its
    /// train+val splits). Must be the source or one of the targets.
    #[serde(default = "default_analysis_domain")]
    pub domain: String,
    #[serde(default = "default_eps")]
    pub pgd_epsilons: Vec<f64>,
    #[serde(default)]
    pub pgd: PgdConfig,
    /// PGD runs on the first this-many test images.
    #[serde(default = "default_pgd_samples")]
    pub pgd_samples: usize,
    #[serde(default = "default_corruption_kinds")]
    pub corruption_kinds: Vec<CorruptionKind>,
    #[serde(default = "default_severities")]
    pub severities: Vec<u8>,
    #[serde(default)]
    pub severity_table: SeverityTable,
    #[serde(default)]
    pub inter_denominator: InterDenominator,
}

fn default_analyses() -> Vec<AnalysisKind> {
    AnalysisKind::ALL.to_vec()
}

fn default_analysis_domain() -> String {
    "source".into()
}

fn default_eps() -> Vec<f64> {
    vec![0.0, 0.005, 0.01, 0.02, 0.04]
}

fn default_pgd_samples() -> usize {
    128
}

fn default_corruption_kinds() -> Vec<CorruptionKind> {
    CorruptionKind::ALL.to_vec()
}

fn default_severities() -> Vec<u8> {
    vec![1, 2, 3, 4, 5]
}

impl Default for AnalysisSettings {
    fn default() -> Self {
        Self {
            kinds: default_analyses(),
            domain: default_analysis_domain(),
            pgd_epsilons: default_eps(),
            pgd: PgdConfig::default(),
            pgd_samples: default_pgd_samples(),
            corruption_kinds: default_corruption_kinds(),
            severities: default_severities(),
            severity_table: SeverityTable::default(),
            inter_denominator: InterDenominator::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    Alpha,
    QueueSize,
    Augmentation,
    Epochs,
}

impl AblationAxis {
    pub const ALL: [AblationAxis; 4] = [AblationAxis::Alpha, AblationAxis::QueueSize, AblationAxis::Augmentation, AblationAxis::Epochs];

    pub fn name(self) -> &'static str {
        match self {
            AblationAxis::Alpha => "alpha",
            AblationAxis::QueueSize => "queue_size",
            AblationAxis::Augmentation => "augmentation",
            AblationAxis::Epochs => "epochs",
        }
    }
}

impl fmt::Display for AblationAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AblationAxis {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        AblationAxis::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| LabError::Config(format!("unknown ablation axis `{s}` (expected alpha, queue_size, augmentation or epochs)")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationSettings {
    /// Axis used when `--axis` is not given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub axis: Option<AblationAxis>,
    /// Method whose setting is varied; defaults to the first configured
    /// method, or CE+SelfSupCon for the alpha axis.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub method: Option<MethodSpec>,
    #[serde(default)]
    pub alpha: Vec<f64>,
    #[serde(default)]
    pub queue_size: Vec<usize>,
    #[serde(default)]
    pub augmentation: Vec<AugmentationRegime>,
    #[serde(default)]
    pub epochs: Vec<usize>,
    #[serde(default = "default_ablation_protocol")]
    pub protocol: Protocol,
}

fn default_ablation_protocol() -> Protocol {
    Protocol::Linear
}

impl Default for AblationSettings {
    fn default() -> Self {
        Self {
            axis: None,
            method: None,
            alpha: Vec::new(),
            queue_size: Vec::new(),
            augmentation: Vec::new(),
            epochs: Vec::new(),
            protocol: default_ablation_protocol(),
        }
    }
}

impl AblationSettings {
    pub fn grid_len(&self, axis: AblationAxis) -> usize {
        match axis {
            AblationAxis::Alpha => self.alpha.len(),
            AblationAxis::QueueSize => self.queue_size.len(),
            AblationAxis::Augmentation => self.augmentation.len(),
            AblationAxis::Epochs => self.epochs.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub id: String,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    pub methods: Vec<MethodSpec>,
    #[serde(default)]
    pub encoder: EncoderConfig,
    #[serde(default = "default_source")]
    pub source: DomainRef,
    #[serde(default)]
    pub pretrain: PretrainSettings,
    #[serde(default)]
    pub targets: Vec<DomainRef>,
    #[serde(default = "default_protocols")]
    pub protocols: Vec<Protocol>,
    #[serde(default)]
    pub evaluation: ProtocolSettings,
    #[serde(default)]
    pub checkpoints: CheckpointSelector,
    #[serde(default)]
    pub analysis: AnalysisSettings,
    #[serde(default)]
    pub ablation: AblationSettings,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_source() -> DomainRef {
    DomainRef::Preset("source".into())
}

fn default_protocols() -> Vec<Protocol> {
    Protocol::ALL.to_vec()
}

fn default_output() -> PathBuf {
    PathBuf::from("runs")
}

fn safe_name(s: &str) -> bool {
    !s.is_empty() && s.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.')) && s != "." && s != ".."
}

impl ExperimentConfig {
    /// Minimal config for `methods` on the source domain.
    pub fn new(id: &str, methods: Vec<MethodSpec>) -> Self {
        Self {
            id: id.into(),
            seeds: default_seeds(),
            methods,
            encoder: EncoderConfig::default(),
            source: default_source(),
            pretrain: PretrainSettings::default(),
            targets: Vec::new(),
            protocols: default_protocols(),
            evaluation: ProtocolSettings::default(),
            checkpoints: CheckpointSelector::default(),
            analysis: AnalysisSettings::default(),
            ablation: AblationSettings::default(),
            output_dir: default_output(),
        }
    }

    /// Parses and validates; every violation is reported at once.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                LabError::Config(format!("config file {} not found", path.display()))
            } else {
                LabError::io(path, e)
            }
        })?;
        let config: Self = serde_json::from_str(&text).map_err(|e| LabError::Config(format!("{}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(LabError::Config(format!("{} problem(s): {}", v.len(), v.join("; "))))
        }
    }

    pub fn source_spec(&self, seed: u64) -> Result<DomainSpec> {
        self.source.resolve(seed)
    }

    /// Every domain an experiment touches: source first, then targets.
    pub fn domain_refs(&self) -> Vec<&DomainRef> {
        std::iter::once(&self.source).chain(&self.targets).collect()
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !safe_name(&self.id) {
            v.push(format!("id `{}` must be non-empty and use only [A-Za-z0-9._-]", self.id));
        }
        if self.seeds.is_empty() {
            v.push("seeds must not be empty".into());
        }
        let mut seeds = self.seeds.clone();
        seeds.sort_unstable();
        seeds.dedup();
        if seeds.len() != self.seeds.len() {
            v.push("seeds must be distinct".into());
        }
        if self.methods.is_empty() {
            v.push("methods must not be empty".into());
        }
        let mut tags: Vec<String> = self.methods.iter().map(MethodSpec::tag).collect();
        for t in &tags {
            if !safe_name(t) {
                v.push(format!("method tag `{t}` must use only [A-Za-z0-9._-]"));
            }
        }
        tags.sort();
        if tags.windows(2).any(|w| w[0] == w[1]) {
            v.push("method tags must be distinct (set `tag` to run one objective twice)".into());
        }
        let source = match self.source.resolve(0) {
            Ok(s) => {
                v.extend(s.violations());
                Some(s)
            }
            Err(e) => {
                v.push(format!("source: {e}"));
                None
            }
        };
        if let Some(src) = &source {
            if src.side * src.side != self.encoder.input_dim {
                v.push(format!("encoder input_dim {} does not match source images of {}×{}", self.encoder.input_dim, src.side, src.side));
            }
            for m in &self.methods {
                for p in m.model_config(&self.encoder, src.num_classes()).violations() {
                    v.push(format!("method `{}`: {p}", m.tag()));
                }
            }
        }
        let mut ids = vec![self.source.id().to_string()];
        for t in &self.targets {
            match t.resolve(0) {
                Ok(spec) => {
                    v.extend(spec.violations());
                    if spec.side * spec.side != self.encoder.input_dim {
                        v.push(format!(
                            "target `{}`: {}×{} images do not match encoder input_dim {}",
                            spec.id, spec.side, spec.side, self.encoder.input_dim
                        ));
                    }
                }
                Err(e) => v.push(format!("target: {e}")),
            }
            if ids.iter().any(|i| i == t.id()) {
                v.push(format!("domain id `{}` used twice", t.id()));
            }
            ids.push(t.id().to_string());
        }
        let p = &self.pretrain;
        let base = p.schedule.base();
        if !(base >= 0.0 && base.is_finite()) {
            v.push(format!("pretrain.schedule.base must be >= 0, got {base}"));
        }
        if let LrSchedule::StepDecay { factor, .. } = &p.schedule {
            if !(*factor > 0.0 && factor.is_finite()) {
                v.push(format!("pretrain.schedule.factor must be > 0, got {factor}"));
            }
        }
        if p.train.batch_size == 0 {
            v.push("pretrain.train.batch_size must be positive".into());
        }
        if !(0.0..1.0).contains(&p.optimizer.momentum) {
            v.push(format!("pretrain.optimizer.momentum must lie in [0,1), got {}", p.optimizer.momentum));
        }
        if !(p.optimizer.weight_decay >= 0.0) {
            v.push(format!("pretrain.optimizer.weight_decay must be >= 0, got {}", p.optimizer.weight_decay));
        }
        for (name, probe) in [("evaluation.probe", &self.evaluation.probe), ("evaluation.finetune", &self.evaluation.finetune)] {
            for p in probe.violations() {
                v.push(format!("{name}: {p}"));
            }
        }
        let fs = &self.evaluation.fewshot;
        if fs.ways < 2 || fs.shots == 0 || fs.queries == 0 || fs.episodes == 0 {
            v.push(format!("evaluation.fewshot needs ways >= 2 and positive shots, queries, episodes, got {fs:?}"));
        }
        if self.evaluation.sample_cap == Some(0) {
            v.push("evaluation.sample_cap must be positive when set".into());
        }
        let a = &self.analysis;
        if !ids.contains(&a.domain) {
            v.push(format!("analysis.domain `{}` is neither the source nor a target", a.domain));
        }
        if a.pgd_epsilons.iter().any(|e| !(*e >= 0.0)) || a.pgd_epsilons.windows(2).any(|w| w[1] < w[0]) {
            v.push("analysis.pgd_epsilons must be non-negative and ascending".into());
        }
        if a.pgd_samples == 0 {
            v.push("analysis.pgd_samples must be positive".into());
        }
        if !(a.pgd.step_factor >= 0.0) {
            v.push("analysis.pgd.step_factor must be >= 0".into());
        }
        if a.severities.iter().any(|s| !(1..=5).contains(s)) {
            v.push(format!("analysis.severities must lie in 1..=5, got {:?}", a.severities));
        }
        let ab = &self.ablation;
        if ab.alpha.iter().any(|x| !(*x >= 0.0 && x.is_finite())) {
            v.push("ablation.alpha values must be >= 0".into());
        }
        if ab.queue_size.contains(&0) {
            v.push("ablation.queue_size values must be positive".into());
        }
        if let (Some(m), Some(src)) = (&ab.method, &source) {
            for p in m.model_config(&self.encoder, src.num_classes()).violations() {
                v.push(format!("ablation.method: {p}"));
            }
        }
        if self.output_dir.as_os_str().is_empty() {
            v.push("output_dir must not be empty".into());
        }
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_parses_with_defaults() {
        let c: ExperimentConfig = serde_json::from_str(r#"{"id": "x", "methods": [{"objective": "ce"}]}"#).unwrap();
        assert!(c.validate().is_ok());
        assert_eq!(c.seeds, vec![0]);
        assert_eq!(c.protocols.len(), 3);
        assert_eq!(c.pretrain.epochs, 100);
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let r: std::result::Result<ExperimentConfig, _> =
            serde_json::from_str(r#"{"id": "x", "methods": [{"objective": "ce"}], "lerning_rate": 1}"#);
        assert!(r.is_err());
        let r: std::result::Result<ExperimentConfig, _> =
            serde_json::from_str(r#"{"id": "x", "methods": [{"objective": "ce", "tau": 0.1}]}"#);
        assert!(r.is_err());
    }

    #[test]
    fn every_violation_is_listed() {
        let mut c = ExperimentConfig::new("bad id", vec![]);
        c.seeds.clear();
        c.targets.push(DomainRef::Preset("mars".into()));
        c.analysis.pgd_epsilons = vec![0.1, 0.0];
        let v = c.violations();
        assert!(v.len() >= 5, "{v:?}");
        let msg = c.validate().unwrap_err().to_string();
        assert!(msg.contains("seeds") && msg.contains("mars") && msg.contains("methods") && msg.contains("pgd"));
    }

    #[test]
    fn method_overrides_reach_the_model() {
        let mut m = MethodSpec::new(ObjectiveKind::CeSelfSupCon);
        m.alpha = Some(2.0);
        m.queue_size = Some(64);
        let c = m.model_config(&EncoderConfig::default(), 8);
        assert_eq!((c.alpha, c.queue_size, c.temperature), (2.0, 64, 0.07));
        assert_eq!(m.tag(), "ce_selfsupcon");
        let mut bad = ExperimentConfig::new("x", vec![m.clone(), m]);
        bad.methods[1].alpha = Some(-1.0);
        let v = bad.violations();
        assert!(v.iter().any(|s| s.contains("distinct")) && v.iter().any(|s| s.contains("alpha")));
    }
}
