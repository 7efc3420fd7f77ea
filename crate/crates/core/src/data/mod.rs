//! Synthetic source and target domains, augmentation, corruptions and
//! episodic sampling.
//!
//! Every image is `side × side` grayscale in [0,1], flattened row-major.
//! Pixel `(row, col)` of sample `i` is
//!
//! ```text
//! clamp( b + a·cov(row, col) + t·½·cos(2π·f·(x·cosθ + y·sinθ)/side + φ) + σ·n )
//! ```
//!
//! with `x = col + ½`, `y = row + ½`, `cov` the anti-aliased shape coverage
//! from [`raster`], `b` background brightness, `a` shape contrast, `t` the
//! texture amplitude, `f` the grating frequency in cycles per image, `θ`
//! its orientation, `φ` its phase and `n` a standard normal per pixel.
//!
//! The class rule decides which attribute carries the label; all others are
//! drawn from the nuisance ranges. The source domain labels by shape, so
//! texture frequency and brightness are nuisance there, and exactly those two
//! attributes carry the label in the two far domains.
//!
//! Per-sample draws use `Rng::new(seed).split_named(id).split_named(split).split(i)` in the
//! order: shape (nuisance only), cx jitter, cy jitter, radius, contrast,
//! brightness, frequency, orientation, phase, then one normal per pixel when
//! σ > 0. Sample `i` of a split has label `i mod K`.

pub mod augment;
pub mod corrupt;
pub mod episodes;
pub mod io;
pub mod raster;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::numerics::{Rng, Tensor};

pub use augment::{augment, blur3x3, AugmentationPolicy, PolicyKind};
pub use corrupt::{corrupt, CorruptionKind, CorruptionSpec, SeverityTable};
pub use episodes::{sample_episode, Episode, EpisodeSpec};
pub use io::{export_dataset, read_images, read_manifest, write_images, write_manifest};
pub use raster::{SHAPE_COUNT, SHAPE_NAMES};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ClassRule {
    /// Class `c` draws shape `shapes[c]` from the inventory.
    Shape { shapes: Vec<usize> },
    /// Class `c` uses grating frequency `frequencies[c]` (cycles per image).
    TextureFrequency { frequencies: Vec<f64> },
    /// Class `c` draws background brightness uniformly from `bands[c]`.
    BrightnessBand { bands: Vec<(f64, f64)> },
}

impl ClassRule {
    pub fn num_classes(&self) -> usize {
        match self {
            ClassRule::Shape { shapes } => shapes.len(),
            ClassRule::TextureFrequency { frequencies } => frequencies.len(),
            ClassRule::BrightnessBand { bands } => bands.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Nuisance {
    pub frequency: (f64, f64),
    pub brightness: (f64, f64),
    /// Maximum center offset from the image center, in pixels.
    pub jitter: f64,
    pub radius: (f64, f64),
    pub contrast: (f64, f64),
    pub texture_amplitude: f64,
    pub noise: f64,
    /// Grating orientation range, radians.
    #[serde(default = "default_orientation")]
    pub orientation: (f64, f64),
    /// Grating phase range, radians.
    #[serde(default = "default_phase")]
    pub phase: (f64, f64),
}

fn default_orientation() -> (f64, f64) {
    (0.0, std::f64::consts::PI)
}

fn default_phase() -> (f64, f64) {
    (0.0, 2.0 * std::f64::consts::PI)
}

impl Default for Nuisance {
    fn default() -> Self {
        Self {
            frequency: (1.0, 7.0),
            brightness: (0.1, 0.5),
            jitter: 2.0,
            radius: (4.5, 6.5),
            contrast: (0.3, 0.5),
            texture_amplitude: 0.25,
            noise: 0.02,
            orientation: default_orientation(),
            phase: default_phase(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitCounts {
    pub fn get(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        }
    }

    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub id: String,
    #[serde(default = "default_side")]
    pub side: usize,
    pub rule: ClassRule,
    #[serde(default)]
    pub nuisance: Nuisance,
    pub counts: SplitCounts,
    #[serde(default)]
    pub seed: u64,
}

fn default_side() -> usize {
    16
}

impl DomainSpec {
    /// First `k` shapes of the inventory as classes.
    pub fn shapes(id: &str, k: usize, counts: SplitCounts, seed: u64) -> Self {
        Self {
            id: id.into(),
            side: default_side(),
            rule: ClassRule::Shape { shapes: (0..k).collect() },
            nuisance: Nuisance::default(),
            counts,
            seed,
        }
    }

    /// Eight shape classes.
    pub fn source(seed: u64) -> Self {
        Self::shapes("source", 8, SplitCounts { train: 384, val: 64, test: 256 }, seed)
    }

    /// Six shapes unseen in the source, same nuisance distribution.
    pub fn near(seed: u64) -> Self {
        Self {
            id: "near".into(),
            rule: ClassRule::Shape { shapes: (8..14).collect() },
            counts: SplitCounts { train: 240, val: 60, test: 240 },
            ..Self::source(seed)
        }
    }

    /// Six grating frequencies; shape is nuisance. Gratings are stronger
    /// than in the source and have fixed orientation and phase, so the class
    /// is linearly decodable from pixels.
    pub fn far_texture(seed: u64) -> Self {
        let source = Self::source(seed);
        Self {
            id: "far_texture".into(),
            rule: ClassRule::TextureFrequency { frequencies: vec![1.5, 2.5, 3.5, 4.5, 5.5, 6.5] },
            nuisance: Nuisance { texture_amplitude: 0.5, orientation: (0.0, 0.0), phase: (0.0, 0.0), ..source.nuisance.clone() },
            counts: SplitCounts { train: 240, val: 60, test: 240 },
            ..source
        }
    }

    /// Five brightness bands; shape and texture are nuisance.
    pub fn far_brightness(seed: u64) -> Self {
        Self {
            id: "far_brightness".into(),
            rule: ClassRule::BrightnessBand { bands: vec![(0.0, 0.08), (0.12, 0.2), (0.24, 0.32), (0.36, 0.44), (0.48, 0.56)] },
            counts: SplitCounts { train: 240, val: 60, test: 240 },
            ..Self::source(seed)
        }
    }

    /// Named preset lookup: `source`, `near`, `far_texture`, `far_brightness`.
    pub fn preset(name: &str, seed: u64) -> Result<Self> {
        match name {
            "source" => Ok(Self::source(seed)),
            "near" => Ok(Self::near(seed)),
            "far_texture" => Ok(Self::far_texture(seed)),
            "far_brightness" => Ok(Self::far_brightness(seed)),
            other => Err(LabError::Config(format!("unknown domain `{other}` (expected source, near, far_texture or far_brightness)"))),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.rule.num_classes()
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.side < 4 {
            v.push(format!("domain `{}`: side {} < 4", self.id, self.side));
        }
        let k = self.num_classes();
        if k < 2 {
            v.push(format!("domain `{}`: needs at least 2 classes, got {k}", self.id));
        }
        match &self.rule {
            ClassRule::Shape { shapes } => {
                if k > SHAPE_COUNT {
                    v.push(format!("domain `{}`: {k} classes exceed the shape inventory of {SHAPE_COUNT}", self.id));
                }
                if let Some(s) = shapes.iter().find(|&&s| s >= SHAPE_COUNT) {
                    v.push(format!("domain `{}`: shape index {s} outside inventory 0..{SHAPE_COUNT}", self.id));
                }
                let mut seen = shapes.clone();
                seen.sort_unstable();
                seen.dedup();
                if seen.len() != shapes.len() {
                    v.push(format!("domain `{}`: repeated shape in class rule", self.id));
                }
            }
            ClassRule::TextureFrequency { frequencies } => {
                if frequencies.iter().any(|f| !f.is_finite() || *f <= 0.0) {
                    v.push(format!("domain `{}`: frequencies must be positive", self.id));
                }
            }
            ClassRule::BrightnessBand { bands } => {
                if bands.iter().any(|(lo, hi)| !(0.0..=1.0).contains(lo) || !(0.0..=1.0).contains(hi) || lo > hi) {
                    v.push(format!("domain `{}`: brightness bands must be ordered ranges in [0,1]", self.id));
                }
            }
        }
        let n = &self.nuisance;
        for (name, (lo, hi)) in [
            ("frequency", n.frequency),
            ("brightness", n.brightness),
            ("radius", n.radius),
            ("contrast", n.contrast),
            ("orientation", n.orientation),
            ("phase", n.phase),
        ] {
            if !(lo <= hi) {
                v.push(format!("domain `{}`: nuisance {name} range ({lo}, {hi}) is not ordered", self.id));
            }
        }
        if n.noise < 0.0 || n.jitter < 0.0 || n.texture_amplitude < 0.0 {
            v.push(format!("domain `{}`: noise, jitter and texture amplitude must be non-negative", self.id));
        }
        if self.counts.total() == 0 {
            v.push(format!("domain `{}`: no samples requested", self.id));
        }
        v
    }
}

/// Generated images with labels and split tags.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub id: String,
    pub side: usize,
    pub num_classes: usize,
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub splits: Vec<Split>,
}

/// Rows of one split, with their indices into the parent dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Subset {
    pub indices: Vec<usize>,
    pub images: Tensor,
    pub labels: Vec<usize>,
}

impl Subset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Rows at `idx` (positions within this subset).
    pub fn select(&self, idx: &[usize]) -> Subset {
        Subset {
            indices: idx.iter().map(|&i| self.indices[i]).collect(),
            images: self.images.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.splits[i] == split).collect()
    }

    pub fn subset(&self, split: Split) -> Subset {
        let indices = self.indices(split);
        Subset { images: self.images.select_rows(&indices), labels: indices.iter().map(|&i| self.labels[i]).collect(), indices }
    }
}

fn render(spec: &DomainSpec, label: usize, rng: &mut Rng) -> Vec<f64> {
    let side = spec.side;
    let n = &spec.nuisance;
    let shape = match &spec.rule {
        ClassRule::Shape { shapes } => shapes[label],
        _ => rng.below(SHAPE_COUNT),
    };
    let half = side as f64 / 2.0;
    let cx = half + rng.uniform_range(-n.jitter, n.jitter);
    let cy = half + rng.uniform_range(-n.jitter, n.jitter);
    let radius = rng.uniform_range(n.radius.0, n.radius.1);
    let contrast = rng.uniform_range(n.contrast.0, n.contrast.1);
    let brightness = match &spec.rule {
        ClassRule::BrightnessBand { bands } => rng.uniform_range(bands[label].0, bands[label].1),
        _ => rng.uniform_range(n.brightness.0, n.brightness.1),
    };
    let frequency = match &spec.rule {
        ClassRule::TextureFrequency { frequencies } => {
            rng.uniform();
            frequencies[label]
        }
        _ => rng.uniform_range(n.frequency.0, n.frequency.1),
    };
    let theta = rng.uniform_range(n.orientation.0, n.orientation.1);
    let phase = rng.uniform_range(n.phase.0, n.phase.1);
    let (sin, cos) = theta.sin_cos();
    let omega = 2.0 * std::f64::consts::PI * frequency / side as f64;

    let coverage = raster::rasterize(shape, side, cx, cy, radius);
    let mut img = Vec::with_capacity(side * side);
    for row in 0..side {
        for col in 0..side {
            let x = col as f64 + 0.5;
            let y = row as f64 + 0.5;
            let texture = 0.5 * n.texture_amplitude * (omega * (x * cos + y * sin) + phase).cos();
            img.push(brightness + contrast * coverage[row * side + col] + texture);
        }
    }
    if n.noise > 0.0 {
        for v in &mut img {
            *v += n.noise * rng.normal();
        }
    }
    for v in &mut img {
        *v = v.clamp(0.0, 1.0);
    }
    img
}

/// Renders every split of `spec`. Pure function of the spec.
pub fn generate_domain(spec: &DomainSpec) -> Result<Dataset> {
    let problems = spec.violations();
    if !problems.is_empty() {
        return Err(LabError::Config(problems.join("; ")));
    }
    let k = spec.num_classes();
    let root = Rng::new(spec.seed).split_named(&spec.id);
    let d = spec.side * spec.side;
    let total = spec.counts.total();
    let mut data = Vec::with_capacity(total * d);
    let mut labels = Vec::with_capacity(total);
    let mut splits = Vec::with_capacity(total);
    for split in Split::ALL {
        let stream = root.split_named(split.name());
        for i in 0..spec.counts.get(split) {
            let label = i % k;
            let mut rng = stream.split(i as u64);
            data.extend(render(spec, label, &mut rng));
            labels.push(label);
            splits.push(split);
        }
    }
    Ok(Dataset { id: spec.id.clone(), side: spec.side, num_classes: k, images: Tensor::from_vec(vec![total, d], data)?, labels, splits })
}
