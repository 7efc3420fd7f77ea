//! Episodic few-shot evaluation with a multinomial logistic-regression head.
//!
//! Per episode the support features are standardized with support
//! statistics, then `mean CE + (λ/2)·‖W‖²` (bias unpenalized) is minimized
//! by full-batch gradient descent from zero with step `1/L`,
//! `L = ½·λ_max(X̃ᵀX̃/n) + λ` (`X̃` = features with a ones column, `λ_max`
//! by power iteration). Iteration stops when the gradient norm falls below
//! `1e−6` or after 500 steps. An episode whose fit turns non-finite is
//! flagged and excluded from the aggregate.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{accuracy, argmax_rows, extract_features, FeatureStandardizer, LabeledSet};
use crate::data::{sample_episode, EpisodeSpec};
use crate::error::{LabError, Result};
use crate::model::ModelState;
use crate::numerics::{softmax_rows, Rng, Tensor};

pub const FEWSHOT_L2: f64 = 1e-4;
pub const FEWSHOT_TOL: f64 = 1e-6;
pub const FEWSHOT_MAX_ITERS: usize = 500;
const POWER_ITERS: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FewShotResult {
    /// Accuracies of the episodes that were kept, in episode order.
    pub accuracies: Vec<f64>,
    pub mean: f64,
    /// `1.96·σ/√E` with σ the population standard deviation over kept episodes.
    pub ci95: f64,
    pub requested: usize,
    /// Episodes excluded because the fit became non-finite.
    pub flagged: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogisticFit {
    /// `d × K`.
    pub weight: Tensor,
    pub bias: Vec<f64>,
    pub iterations: usize,
    pub grad_norm: f64,
}

impl LogisticFit {
    pub fn is_finite(&self) -> bool {
        self.weight.all_finite() && self.bias.iter().all(|b| b.is_finite())
    }

    pub fn predict(&self, x: &Tensor) -> Vec<usize> {
        argmax_rows(&self.logits(x))
    }

    fn logits(&self, x: &Tensor) -> Tensor {
        let (n, d, k) = (x.rows(), x.cols(), self.bias.len());
        let mut out = vec![0.0; n * k];
        for i in 0..n {
            let row = x.row(i);
            let o = &mut out[i * k..(i + 1) * k];
            o.copy_from_slice(&self.bias);
            for (a, &xv) in row.iter().enumerate().take(d) {
                let w = &self.weight.data()[a * k..(a + 1) * k];
                for (ov, wv) in o.iter_mut().zip(w) {
                    *ov += xv * wv;
                }
            }
        }
        Tensor::from_vec(vec![n, k], out).expect("shape")
    }
}

/// Largest eigenvalue of `X̃ᵀX̃/n` by power iteration from the ones vector.
fn lipschitz(x: &Tensor) -> f64 {
    let (n, d) = (x.rows(), x.cols());
    let mut v = vec![1.0 / ((d + 1) as f64).sqrt(); d + 1];
    let mut lambda = 0.0;
    for _ in 0..POWER_ITERS {
        let mut w = vec![0.0; d + 1];
        for i in 0..n {
            let row = x.row(i);
            let xv: f64 = row.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>() + v[d];
            for (wj, rj) in w.iter_mut().zip(row) {
                *wj += xv * rj;
            }
            w[d] += xv;
        }
        w.iter_mut().for_each(|wj| *wj /= n as f64);
        let norm = w.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return norm;
        }
        lambda = norm;
        v = w.into_iter().map(|a| a / norm).collect();
    }
    lambda
}

/// Full-batch gradient descent on L2-penalized multinomial logistic loss.
pub fn fit_logistic(x: &Tensor, y: &[usize], k: usize, lambda: f64, max_iters: usize, tol: f64) -> LogisticFit {
    let (n, d) = (x.rows(), x.cols());
    let step = 1.0 / (0.5 * lipschitz(x) + lambda);
    let mut fit = LogisticFit { weight: Tensor::zeros(&[d, k]), bias: vec![0.0; k], iterations: 0, grad_norm: f64::INFINITY };
    for it in 0..max_iters {
        let probs = softmax_rows(fit.logits(x).data(), k);
        let mut gw = vec![0.0; d * k];
        let mut gb = vec![0.0; k];
        for i in 0..n {
            let row = x.row(i);
            let mut r = probs[i * k..(i + 1) * k].to_vec();
            r[y[i]] -= 1.0;
            for (a, &xv) in row.iter().enumerate() {
                for c in 0..k {
                    gw[a * k + c] += xv * r[c];
                }
            }
            for c in 0..k {
                gb[c] += r[c];
            }
        }
        let w = fit.weight.data();
        for (g, wv) in gw.iter_mut().zip(w) {
            *g = *g / n as f64 + lambda * wv;
        }
        gb.iter_mut().for_each(|g| *g /= n as f64);
        fit.grad_norm = gw.iter().chain(&gb).map(|g| g * g).sum::<f64>().sqrt();
        fit.iterations = it;
        if !fit.grad_norm.is_finite() || fit.grad_norm < tol {
            break;
        }
        for (wv, g) in fit.weight.data_mut().iter_mut().zip(&gw) {
            *wv -= step * g;
        }
        for (bv, g) in fit.bias.iter_mut().zip(&gb) {
            *bv -= step * g;
        }
        fit.iterations = it + 1;
    }
    fit
}

fn run_episode(data: &LabeledSet, spec: &EpisodeSpec, rng: &mut Rng) -> Result<Option<f64>> {
    let ep = sample_episode(&data.labels, spec, rng)?;
    let support = data.features.select_rows(&ep.support);
    let query = data.features.select_rows(&ep.query);
    let std = FeatureStandardizer::fit(&support)?;
    let xs = std.transform(&support)?;
    let xq = std.transform(&query)?;
    let fit = fit_logistic(&xs, &ep.support_labels, spec.ways, FEWSHOT_L2, FEWSHOT_MAX_ITERS, FEWSHOT_TOL);
    if !fit.is_finite() {
        return Ok(None);
    }
    Ok(Some(accuracy(&fit.predict(&xq), &ep.query_labels)))
}

/// Runs `spec.episodes` episodes on fixed features; episode `e` draws from
/// `rng.split(e)`.
pub fn fewshot_on_features(data: &LabeledSet, spec: &EpisodeSpec, rng: &Rng) -> Result<FewShotResult> {
    if spec.episodes == 0 {
        return Err(LabError::Config("few-shot needs at least one episode".into()));
    }
    let outcomes =
        (0..spec.episodes).into_par_iter().map(|e| run_episode(data, spec, &mut rng.split(e as u64))).collect::<Result<Vec<_>>>()?;
    let accuracies: Vec<f64> = outcomes.iter().flatten().copied().collect();
    let flagged = spec.episodes - accuracies.len();
    if accuracies.is_empty() {
        return Err(LabError::Numerical(format!("all {} few-shot episodes diverged", spec.episodes)));
    }
    if flagged > 0 {
        log::warn!("few-shot: {flagged} of {} episodes excluded (non-finite fit)", spec.episodes);
    }
    let e = accuracies.len() as f64;
    let mean = accuracies.iter().sum::<f64>() / e;
    let var = accuracies.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / e;
    Ok(FewShotResult { ci95: 1.96 * var.sqrt() / e.sqrt(), mean, accuracies, requested: spec.episodes, flagged })
}

/// Frozen query-encoder features of `images`, then [`fewshot_on_features`].
pub fn fewshot_eval(state: &ModelState, images: &Tensor, labels: &[usize], spec: &EpisodeSpec, rng: &Rng) -> Result<FewShotResult> {
    let features = extract_features(state, images)?;
    fewshot_on_features(&LabeledSet { features, labels: labels.to_vec() }, spec, rng)
}
