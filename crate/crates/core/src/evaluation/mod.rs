//! Transfer protocols: frozen-feature linear probe, full fine-tune and
//! episodic few-shot logistic regression, plus per-checkpoint sweeps.
//!
//! Model selection only ever sees the downstream training split. Test data
//! reaches a protocol exclusively through the final scoring call
//! ([`FittedProbe::score`], the `test` argument of [`finetune`]).

mod fewshot;
mod finetune;
mod sweep;

pub use fewshot::{fewshot_eval, fewshot_on_features, fit_logistic, FewShotResult, LogisticFit};
pub use finetune::{balanced_cap, finetune, FinetuneOutcome};
pub use sweep::{
    checkpoint_epochs, checkpoint_sweep_eval, evaluate_protocol, protocol_rng, CurvePoint, Protocol, ProtocolScore, ProtocolSettings,
};

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::model::{load_checkpoint, CheckpointError, Linear, ModelState};
use crate::numerics::{matmul, Rng, Schedule, Sgd, SgdConfig, Tape, Tensor};

/// Dimensions whose training variance is below this are only centered.
pub const STANDARDIZE_EPS: f64 = 1e-12;

/// Rows (images or features) with one label each.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    pub features: Tensor,
    pub labels: Vec<usize>,
}

impl LabeledSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn select(&self, idx: &[usize]) -> LabeledSet {
        LabeledSet { features: self.features.select_rows(idx), labels: idx.iter().map(|&i| self.labels[i]).collect() }
    }
}

/// Per-dimension affine standardization with statistics from training
/// features only. Variance is the population variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureStandardizer {
    pub mean: Vec<f64>,
    /// Divisor per dimension: `sqrt(var)`, or 1 when `var < STANDARDIZE_EPS`.
    pub scale: Vec<f64>,
}

impl FeatureStandardizer {
    pub fn fit(features: &Tensor) -> Result<Self> {
        let (n, d) = (features.rows(), features.cols());
        if n == 0 {
            return Err(LabError::Contract("standardizer: no rows".into()));
        }
        let mut mean = vec![0.0; d];
        for i in 0..n {
            for (m, v) in mean.iter_mut().zip(features.row(i)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; d];
        for i in 0..n {
            for ((s, v), m) in var.iter_mut().zip(features.row(i)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let scale = var.iter().map(|s| s / n as f64).map(|v| if v < STANDARDIZE_EPS { 1.0 } else { v.sqrt() }).collect();
        Ok(Self { mean, scale })
    }

    pub fn transform(&self, features: &Tensor) -> Result<Tensor> {
        let d = self.mean.len();
        if features.cols() != d {
            return Err(LabError::Contract(format!("standardizer fitted on {d} dims, got {}", features.cols())));
        }
        let mut data = features.data().to_vec();
        for row in data.chunks_mut(d) {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.scale) {
                *v = (*v - m) / s;
            }
        }
        Ok(Tensor::from_vec(features.shape().to_vec(), data)?)
    }
}

/// Penultimate features of `images` under the query encoder.
pub fn extract_features(state: &ModelState, images: &Tensor) -> Result<Tensor> {
    let want = state.config.encoder.input_dim;
    if images.cols() != want {
        return Err(LabError::Checkpoint(CheckpointError::ShapeMismatch {
            path: Default::default(),
            name: "input".into(),
            expected: vec![want],
            found: vec![images.cols()],
        }));
    }
    state.features(images)
}

/// Loads a checkpoint and extracts features; missing files map to
/// [`LabError::Missing`].
pub fn extract_features_from(path: &Path, images: &Tensor) -> Result<Tensor> {
    let loaded = load_checkpoint_or_missing(path)?;
    let mut feats = extract_features(&loaded.state, images);
    if let Err(LabError::Checkpoint(CheckpointError::ShapeMismatch { path: p, .. })) = &mut feats {
        *p = path.to_path_buf();
    }
    feats
}

pub(crate) fn load_checkpoint_or_missing(path: &Path) -> Result<crate::model::LoadedCheckpoint> {
    if !path.exists() {
        return Err(LabError::Missing(format!("checkpoint {}", path.display())));
    }
    Ok(load_checkpoint(path)?)
}

/// Index of the largest entry of each row; ties go to the lowest index.
pub fn argmax_rows(scores: &Tensor) -> Vec<usize> {
    (0..scores.rows())
        .map(|i| {
            let r = scores.row(i);
            (1..r.len()).fold(0, |best, j| if r[j] > r[best] { j } else { best })
        })
        .collect()
}

pub fn accuracy(predictions: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    predictions.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / labels.len() as f64
}

/// One point of the hyperparameter grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    pub lr: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    #[serde(default = "defaults::epochs")]
    pub epochs: usize,
    #[serde(default = "defaults::milestones")]
    pub milestones: Vec<usize>,
    #[serde(default = "defaults::decay")]
    pub decay: f64,
    #[serde(default = "defaults::lrs")]
    pub lrs: Vec<f64>,
    #[serde(default = "defaults::batch_sizes")]
    pub batch_sizes: Vec<usize>,
    /// Used instead of `batch_sizes` when the training split is smaller
    /// than `small_threshold`.
    #[serde(default = "defaults::small_batch_sizes")]
    pub small_batch_sizes: Vec<usize>,
    #[serde(default = "defaults::small_threshold")]
    pub small_threshold: usize,
    #[serde(default = "defaults::weight_decays")]
    pub weight_decays: Vec<f64>,
    #[serde(default = "defaults::val_fraction")]
    pub val_fraction: f64,
    #[serde(default = "defaults::momentum")]
    pub momentum: f64,
}

pub mod defaults {
    pub fn epochs() -> usize {
        50
    }
    pub fn milestones() -> Vec<usize> {
        vec![25, 37]
    }
    pub fn decay() -> f64 {
        0.1
    }
    pub fn lrs() -> Vec<f64> {
        vec![0.001, 0.01, 0.1]
    }
    pub fn batch_sizes() -> Vec<usize> {
        vec![32, 128]
    }
    pub fn small_batch_sizes() -> Vec<usize> {
        vec![16, 64]
    }
    pub fn small_threshold() -> usize {
        512
    }
    pub fn weight_decays() -> Vec<f64> {
        vec![0.0, 1e-4, 1e-5]
    }
    pub fn val_fraction() -> f64 {
        0.3
    }
    pub fn momentum() -> f64 {
        0.9
    }
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: defaults::epochs(),
            milestones: defaults::milestones(),
            decay: defaults::decay(),
            lrs: defaults::lrs(),
            batch_sizes: defaults::batch_sizes(),
            small_batch_sizes: defaults::small_batch_sizes(),
            small_threshold: defaults::small_threshold(),
            weight_decays: defaults::weight_decays(),
            val_fraction: defaults::val_fraction(),
            momentum: defaults::momentum(),
        }
    }
}

impl ProbeConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.epochs == 0 {
            v.push("probe epochs must be positive".into());
        }
        if let Some(m) = self.milestones.iter().find(|&&m| m >= self.epochs) {
            v.push(format!("probe milestone {m} not below epochs {}", self.epochs));
        }
        if self.lrs.is_empty() || self.batch_sizes.is_empty() || self.small_batch_sizes.is_empty() || self.weight_decays.is_empty() {
            v.push("probe grid has an empty axis".into());
        }
        if self.lrs.iter().any(|l| !l.is_finite() || *l < 0.0) {
            v.push("probe learning rates must be finite and non-negative".into());
        }
        if self.batch_sizes.iter().chain(&self.small_batch_sizes).any(|&b| b == 0) {
            v.push("probe batch sizes must be positive".into());
        }
        if self.weight_decays.iter().any(|w| *w < 0.0) {
            v.push("probe weight decays must be non-negative".into());
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            v.push(format!("val_fraction {} outside (0,1)", self.val_fraction));
        }
        if !(0.0..=1.0).contains(&self.momentum) {
            v.push(format!("probe momentum {} outside [0,1]", self.momentum));
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

    pub fn schedule(&self, lr: f64) -> Schedule {
        Schedule::StepDecay { base: lr, milestones: self.milestones.clone(), factor: self.decay }
    }

    /// Grid in lr-major, then batch, then weight-decay order.
    pub fn grid(&self, train_size: usize) -> Vec<HyperParams> {
        let batches = if train_size < self.small_threshold { &self.small_batch_sizes } else { &self.batch_sizes };
        let mut out = Vec::new();
        for &lr in &self.lrs {
            for &batch_size in batches {
                for &weight_decay in &self.weight_decays {
                    out.push(HyperParams { lr, batch_size, weight_decay });
                }
            }
        }
        out
    }
}

/// Class-stratified split: per class, `round(n_c·fraction)` samples (at
/// least one when `n_c ≥ 2`, none when `n_c = 1`) go to the second part.
///
/// Fallback when the held-out part ends up with fewer than two classes: it
/// is replaced by the full training part (selection on training accuracy),
/// with a warning.
pub fn stratified_split(labels: &[usize], fraction: f64, rng: &mut Rng) -> (Vec<usize>, Vec<usize>) {
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let mut train = Vec::new();
    let mut held = Vec::new();
    for c in 0..k {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        rng.shuffle(&mut idx);
        let n = idx.len();
        let take = if n < 2 { 0 } else { ((n as f64 * fraction).round() as usize).clamp(1, n - 1) };
        held.extend_from_slice(&idx[..take]);
        train.extend_from_slice(&idx[take..]);
    }
    train.sort_unstable();
    held.sort_unstable();
    let held_classes = {
        let mut c: Vec<usize> = held.iter().map(|&i| labels[i]).collect();
        c.sort_unstable();
        c.dedup();
        c.len()
    };
    if held_classes < 2 {
        log::warn!("stratified split: held-out part has {held_classes} class(es); selecting on the training part");
        let all: Vec<usize> = (0..labels.len()).collect();
        return (all.clone(), all);
    }
    (train, held)
}

/// Softmax-regression head `x·W + b` trained with minibatch heavy-ball SGD
/// on (already standardized) features, starting from zero weights.
pub fn train_linear_head(data: &LabeledSet, num_classes: usize, hp: HyperParams, config: &ProbeConfig, rng: &mut Rng) -> Result<Linear> {
    let d = data.features.cols();
    let mut head = Linear::zeros(d, num_classes);
    let mut opt = Sgd::new(SgdConfig { momentum: config.momentum, weight_decay: hp.weight_decay })?;
    let schedule = config.schedule(hp.lr);
    let batch = hp.batch_size.min(data.len()).max(1);
    for epoch in 0..config.epochs {
        let lr = schedule.lr(epoch);
        let order = rng.permutation(data.len());
        for idx in order.chunks(batch) {
            let labels: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();
            let mut tape = Tape::new();
            let x = tape.constant(data.features.select_rows(idx));
            let vars = head.bind(&mut tape, true);
            let logits = vars.forward(&mut tape, x)?;
            let loss = tape.softmax_cross_entropy(logits, &labels)?;
            if !tape.scalar_value(loss).is_finite() {
                return Err(LabError::Numerical(format!("linear head: non-finite loss at epoch {epoch} (lr {lr})")));
            }
            let g = tape.backward(loss)?;
            head.weight.grad = Some(g.wrt(vars.w));
            head.bias.grad = Some(g.wrt(vars.b));
            opt.step([("weight".to_string(), &mut head.weight), ("bias".to_string(), &mut head.bias)], lr)?;
        }
    }
    Ok(head)
}

pub fn head_predict(head: &Linear, features: &Tensor) -> Result<Vec<usize>> {
    let logits = matmul(features, &head.weight)?;
    let mut data = logits.into_data();
    let k = head.bias.len();
    for row in data.chunks_mut(k) {
        for (v, b) in row.iter_mut().zip(head.bias.data()) {
            *v += b;
        }
    }
    Ok(argmax_rows(&Tensor::from_vec(vec![features.rows(), k], data)?))
}

/// Validation accuracy of one grid cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub params: HyperParams,
    pub val_accuracy: f64,
}

/// A probe selected and retrained on the full downstream training split.
#[derive(Debug, Clone, PartialEq)]
pub struct FittedProbe {
    pub standardizer: FeatureStandardizer,
    pub head: Linear,
    pub best: HyperParams,
    pub grid: Vec<GridCell>,
}

impl FittedProbe {
    pub fn predict(&self, features: &Tensor) -> Result<Vec<usize>> {
        head_predict(&self.head, &self.standardizer.transform(features)?)
    }

    /// The only entry point for test data.
    pub fn score(&self, test: &LabeledSet) -> Result<f64> {
        Ok(accuracy(&self.predict(&test.features)?, &test.labels))
    }
}

/// First cell with the highest validation accuracy (grid order breaks ties).
pub fn select_best(grid: &[GridCell]) -> GridCell {
    grid.iter().skip(1).fold(grid[0], |best, c| if c.val_accuracy > best.val_accuracy { *c } else { best })
}

/// Stratified 70/30 split, full grid sweep on standardized features, then
/// the best cell retrained on the whole training split.
///
/// Streams: split from `rng.split_named("split")`, cell `i` from
/// `rng.split_named("cell").split(i)`, the final fit from
/// `rng.split_named("final")`.
pub fn linear_probe(train: &LabeledSet, num_classes: usize, config: &ProbeConfig, rng: &Rng) -> Result<FittedProbe> {
    config.validate()?;
    let present = {
        let mut l = train.labels.clone();
        l.sort_unstable();
        l.dedup();
        l.len()
    };
    if present < 2 {
        return Err(LabError::Degenerate(format!("linear probe needs at least 2 classes, training split has {present}")));
    }
    if let Some(&bad) = train.labels.iter().find(|&&l| l >= num_classes) {
        return Err(LabError::Contract(format!("label {bad} outside {num_classes} classes")));
    }
    let (fit_idx, val_idx) = stratified_split(&train.labels, config.val_fraction, &mut rng.split_named("split"));
    let fit = train.select(&fit_idx);
    let val = train.select(&val_idx);
    let std = FeatureStandardizer::fit(&fit.features)?;
    let fit_std = LabeledSet { features: std.transform(&fit.features)?, labels: fit.labels.clone() };
    let val_std = std.transform(&val.features)?;
    let cells = config.grid(train.len());
    let cell_rng = rng.split_named("cell");
    let grid = cells
        .par_iter()
        .enumerate()
        .map(|(i, &hp)| {
            let head = train_linear_head(&fit_std, num_classes, hp, config, &mut cell_rng.split(i as u64))?;
            Ok(GridCell { params: hp, val_accuracy: accuracy(&head_predict(&head, &val_std)?, &val.labels) })
        })
        .collect::<Result<Vec<_>>>()?;
    let best = select_best(&grid).params;

    let standardizer = FeatureStandardizer::fit(&train.features)?;
    let all_std = LabeledSet { features: standardizer.transform(&train.features)?, labels: train.labels.clone() };
    let head = train_linear_head(&all_std, num_classes, best, config, &mut rng.split_named("final"))?;
    Ok(FittedProbe { standardizer, head, best, grid })
}

#[cfg(test)]
mod tests;
