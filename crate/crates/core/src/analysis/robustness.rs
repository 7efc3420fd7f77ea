//! Corruption sweeps and L∞ PGD attacks against a frozen encoder plus a
//! linear head.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::data::{corrupt, CorruptionKind, CorruptionSpec, SeverityTable};
use crate::error::{LabError, Result};
use crate::evaluation::{accuracy, argmax_rows, FeatureStandardizer, FittedProbe};
use crate::model::{Encoder, Linear, ModelState};
use crate::numerics::{Tape, Tensor};

/// Encoder, optional feature standardization and a linear head.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoringModel {
    pub encoder: Encoder,
    pub standardizer: Option<FeatureStandardizer>,
    pub head: Linear,
}

impl ScoringModel {
    /// Uses the model's own classifier; a contract error if it has none.
    pub fn from_classifier(state: &ModelState) -> Result<Self> {
        let head = state.query.classifier.clone().ok_or_else(|| {
            LabError::Contract(format!("{} checkpoint has no classifier head; train a probe first", state.config.objective))
        })?;
        Ok(Self { encoder: state.query.encoder.clone(), standardizer: None, head })
    }

    pub fn from_probe(state: &ModelState, probe: &FittedProbe) -> Self {
        Self { encoder: state.query.encoder.clone(), standardizer: Some(probe.standardizer.clone()), head: probe.head.clone() }
    }

    pub fn logits(&self, images: &Tensor) -> Result<Tensor> {
        let mut f = self.encoder.features(images)?;
        if let Some(s) = &self.standardizer {
            f = s.transform(&f)?;
        }
        Ok(self.head.forward(&f)?)
    }

    pub fn predict(&self, images: &Tensor) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.logits(images)?))
    }

    pub fn accuracy(&self, images: &Tensor, labels: &[usize]) -> Result<f64> {
        Ok(accuracy(&self.predict(images)?, labels))
    }

    /// Gradient of the summed cross-entropy with respect to the input pixels.
    pub fn input_gradient(&self, images: &Tensor, labels: &[usize]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let x = tape.param(images);
        let mut h = x;
        for stage in &self.encoder.stages {
            let z = stage.bind(&mut tape, false).forward(&mut tape, h)?;
            h = tape.relu(z);
        }
        if let Some(s) = &self.standardizer {
            let d = s.mean.len();
            let mut diag = Tensor::zeros(&[d, d]);
            for j in 0..d {
                diag.data_mut()[j * d + j] = 1.0 / s.scale[j];
            }
            let shift = Tensor::from_vec(vec![d], s.mean.iter().zip(&s.scale).map(|(m, sc)| -m / sc).collect())?;
            let dv = tape.constant(diag);
            let sv = tape.constant(shift);
            let z = tape.matmul(h, dv)?;
            h = tape.add_row_bias(z, sv)?;
        }
        let logits = self.head.bind(&mut tape, false).forward(&mut tape, h)?;
        let k = self.head.output_dim();
        let mut weights = vec![0.0; labels.len() * k];
        for (i, &y) in labels.iter().enumerate() {
            weights[i * k + y] = 1.0;
        }
        let loss = tape.weighted_nll(logits, weights, vec![1.0; labels.len()])?;
        Ok(tape.backward(loss)?.wrt(x))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorruptionCell {
    pub kind: CorruptionKind,
    pub severity: u8,
    pub error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorruptionReport {
    pub clean_error: f64,
    pub cells: Vec<CorruptionCell>,
    /// Unweighted mean of `cells[..].error`.
    pub mce: f64,
    /// Kinds whose error dropped from one severity to the next.
    pub non_monotone: Vec<CorruptionKind>,
}

/// Top-1 error on every (kind, severity) cell, plus the clean error.
pub fn corruption_sweep(
    model: &ScoringModel,
    images: &Tensor,
    labels: &[usize],
    side: usize,
    kinds: &[CorruptionKind],
    severities: &[u8],
    table: &SeverityTable,
    seed: u64,
) -> Result<CorruptionReport> {
    if kinds.is_empty() || severities.is_empty() {
        return Err(LabError::Config("corruption sweep needs at least one kind and one severity".into()));
    }
    let clean_error = 1.0 - model.accuracy(images, labels)?;
    let mut cells = Vec::with_capacity(kinds.len() * severities.len());
    let mut non_monotone = Vec::new();
    for &kind in kinds {
        let mut prev: Option<f64> = None;
        for &sev in severities {
            let spec = CorruptionSpec::new(kind, sev)?;
            let x = corrupt(images, side, spec, table, seed)?;
            let error = 1.0 - model.accuracy(&x, labels)?;
            if prev.is_some_and(|p| error < p) && !non_monotone.contains(&kind) {
                warn!("{kind}: error fell from {:.4} to {error:.4} at severity {sev}", prev.unwrap_or(0.0));
                non_monotone.push(kind);
            }
            prev = Some(error);
            cells.push(CorruptionCell { kind, severity: sev, error });
        }
    }
    let mce = cells.iter().map(|c| c.error).sum::<f64>() / cells.len() as f64;
    Ok(CorruptionReport { clean_error, cells, mce, non_monotone })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PgdConfig {
    pub steps: usize,
    /// Step size is `step_factor · ε / steps`.
    pub step_factor: f64,
}

impl Default for PgdConfig {
    fn default() -> Self {
        Self { steps: 20, step_factor: 2.5 }
    }
}

/// Iterates `x ← clip₀₁(clip_{x₀±ε}(x + η·sign(g(x))))` from `x = x₀`.
///
/// Every step is checked to stay inside the ε-ball and `[0,1]`.
pub fn pgd_steps<G>(x0: &Tensor, epsilon: f64, eta: f64, steps: usize, mut grad: G) -> Result<Tensor>
where
    G: FnMut(&Tensor) -> Result<Vec<f64>>,
{
    if !(epsilon >= 0.0) || !(eta >= 0.0) {
        return Err(LabError::Config(format!("PGD needs ε ≥ 0 and η ≥ 0, got {epsilon}, {eta}")));
    }
    if let Some(v) = x0.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(LabError::Contract(format!("PGD input pixel {v} outside [0,1]")));
    }
    let lo: Vec<f64> = x0.data().iter().map(|v| v - epsilon).collect();
    let hi: Vec<f64> = x0.data().iter().map(|v| v + epsilon).collect();
    let mut x = x0.clone();
    for step in 0..steps {
        let g = grad(&x)?;
        if g.len() != x.len() {
            return Err(LabError::Contract(format!("gradient has {} entries for {} pixels", g.len(), x.len())));
        }
        for (i, v) in x.data_mut().iter_mut().enumerate() {
            let s = if g[i] > 0.0 {
                1.0
            } else if g[i] < 0.0 {
                -1.0
            } else {
                0.0
            };
            *v = (*v + eta * s).clamp(lo[i], hi[i]).clamp(0.0, 1.0);
            if !(*v >= lo[i] && *v <= hi[i] && (0.0..=1.0).contains(v)) {
                return Err(LabError::Numerical(format!("PGD step {step}: pixel {i} left the feasible set")));
            }
        }
    }
    Ok(x)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PgdPoint {
    pub epsilon: f64,
    /// Fraction of samples classified correctly under every attack with
    /// budget up to `epsilon`.
    pub accuracy: f64,
    /// Accuracy under the attack at exactly this budget.
    pub single_budget_accuracy: f64,
}

/// Robust accuracy over an ascending ε grid.
///
/// An attacker with budget ε can also run every smaller budget, so a sample
/// counts as robust at ε only if it survived all attacks up to ε. The
/// reported curve is therefore non-increasing by construction; the raw
/// per-budget accuracy is kept alongside.
pub fn pgd_attack(model: &ScoringModel, images: &Tensor, labels: &[usize], eps_grid: &[f64], config: &PgdConfig) -> Result<Vec<PgdPoint>> {
    if eps_grid.windows(2).any(|w| w[1] < w[0]) || eps_grid.iter().any(|e| !(*e >= 0.0)) {
        return Err(LabError::Config(format!("ε grid must be ascending and non-negative, got {eps_grid:?}")));
    }
    if labels.len() != images.rows() {
        return Err(LabError::Contract(format!("{} labels for {} images", labels.len(), images.rows())));
    }
    let mut robust = vec![true; labels.len()];
    let mut out = Vec::with_capacity(eps_grid.len());
    for &eps in eps_grid {
        let eta = if config.steps == 0 { 0.0 } else { config.step_factor * eps / config.steps as f64 };
        let adv = pgd_steps(images, eps, eta, config.steps, |x| model.input_gradient(x, labels))?;
        let pred = model.predict(&adv)?;
        for (r, (p, y)) in robust.iter_mut().zip(pred.iter().zip(labels)) {
            *r &= p == y;
        }
        out.push(PgdPoint {
            epsilon: eps,
            accuracy: robust.iter().filter(|&&r| r).count() as f64 / labels.len().max(1) as f64,
            single_budget_accuracy: accuracy(&pred, labels),
        });
    }
    Ok(out)
}
