//! Parametric corruptions with five severities each.
//!
//! | kind           | parameter          | severities 1..5              |
//! |----------------|--------------------|------------------------------|
//! | gaussian_noise | σ                  | 0.04 0.08 0.12 0.18 0.26     |
//! | blur           | 3×3 binomial passes| 1 2 3 5 8                    |
//! | contrast       | factor about mean  | 0.75 0.6 0.45 0.3 0.2        |
//! | pixelate       | block side (px)    | 2 3 4 6 8                    |
//!
//! Noise draws come from `Rng::new(seed).split_named(kind).split(severity).split(image index)`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::augment::blur3x3;
use crate::error::{LabError, Result};
use crate::numerics::{Rng, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    GaussianNoise,
    Blur,
    Contrast,
    Pixelate,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 4] =
        [CorruptionKind::GaussianNoise, CorruptionKind::Blur, CorruptionKind::Contrast, CorruptionKind::Pixelate];

    pub fn name(self) -> &'static str {
        match self {
            CorruptionKind::GaussianNoise => "gaussian_noise",
            CorruptionKind::Blur => "blur",
            CorruptionKind::Contrast => "contrast",
            CorruptionKind::Pixelate => "pixelate",
        }
    }
}

impl fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CorruptionKind {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        CorruptionKind::ALL.into_iter().find(|k| k.name() == s).ok_or_else(|| LabError::Config(format!("unknown corruption type `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeverityTable {
    pub noise_sigma: [f64; 5],
    pub blur_passes: [usize; 5],
    pub contrast_factor: [f64; 5],
    pub pixelate_block: [usize; 5],
}

impl Default for SeverityTable {
    fn default() -> Self {
        Self {
            noise_sigma: [0.04, 0.08, 0.12, 0.18, 0.26],
            blur_passes: [1, 2, 3, 5, 8],
            contrast_factor: [0.75, 0.6, 0.45, 0.3, 0.2],
            pixelate_block: [2, 3, 4, 6, 8],
        }
    }
}

impl SeverityTable {
    /// Every severity leaves the image unchanged.
    pub fn identity() -> Self {
        Self { noise_sigma: [0.0; 5], blur_passes: [0; 5], contrast_factor: [1.0; 5], pixelate_block: [1; 5] }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    pub severity: u8,
}

impl CorruptionSpec {
    pub fn new(kind: CorruptionKind, severity: u8) -> Result<Self> {
        if !(1..=5).contains(&severity) {
            return Err(LabError::Config(format!("corruption severity {severity} outside 1..=5")));
        }
        Ok(Self { kind, severity })
    }

    /// Table entry for this kind and severity, as f64.
    pub fn parameter(&self, table: &SeverityTable) -> f64 {
        let i = self.severity as usize - 1;
        match self.kind {
            CorruptionKind::GaussianNoise => table.noise_sigma[i],
            CorruptionKind::Blur => table.blur_passes[i] as f64,
            CorruptionKind::Contrast => table.contrast_factor[i],
            CorruptionKind::Pixelate => table.pixelate_block[i] as f64,
        }
    }
}

fn pixelate(img: &[f64], side: usize, block: usize) -> Vec<f64> {
    if block <= 1 {
        return img.to_vec();
    }
    let mut out = vec![0.0; img.len()];
    for br in (0..side).step_by(block) {
        for bc in (0..side).step_by(block) {
            let rows = br..(br + block).min(side);
            let cols = bc..(bc + block).min(side);
            let n = (rows.len() * cols.len()) as f64;
            let mean = rows.clone().flat_map(|r| cols.clone().map(move |c| img[r * side + c])).sum::<f64>() / n;
            for r in rows {
                for c in cols.clone() {
                    out[r * side + c] = mean;
                }
            }
        }
    }
    out
}

/// Corrupts one image; `rng` is only used by gaussian noise.
pub fn corrupt_image(img: &[f64], side: usize, spec: CorruptionSpec, table: &SeverityTable, rng: &mut Rng) -> Vec<f64> {
    let p = spec.parameter(table);
    let mut out = match spec.kind {
        CorruptionKind::GaussianNoise => {
            if p == 0.0 {
                img.to_vec()
            } else {
                img.iter().map(|v| v + p * rng.normal()).collect()
            }
        }
        CorruptionKind::Blur => {
            let mut x = img.to_vec();
            for _ in 0..p as usize {
                x = blur3x3(&x, side);
            }
            x
        }
        CorruptionKind::Contrast => {
            if p == 1.0 {
                img.to_vec()
            } else {
                let mean = img.iter().sum::<f64>() / img.len() as f64;
                img.iter().map(|v| mean + (v - mean) * p).collect()
            }
        }
        CorruptionKind::Pixelate => pixelate(img, side, p as usize),
    };
    for v in &mut out {
        *v = v.clamp(0.0, 1.0);
    }
    out
}

/// Corrupts every row of `images` (`n × side²`). Labels are untouched by
/// construction: only pixels are returned.
pub fn corrupt(images: &Tensor, side: usize, spec: CorruptionSpec, table: &SeverityTable, seed: u64) -> Result<Tensor> {
    if images.cols() != side * side {
        return Err(LabError::Contract(format!("images have {} pixels, expected {}", images.cols(), side * side)));
    }
    let base = Rng::new(seed).split_named(spec.kind.name()).split(spec.severity as u64);
    let mut data = Vec::with_capacity(images.len());
    for i in 0..images.rows() {
        let mut rng = base.split(i as u64);
        data.extend(corrupt_image(images.row(i), side, spec, table, &mut rng));
    }
    Ok(Tensor::from_vec(images.shape().to_vec(), data)?)
}
