//! Expected calibration error over 15 equal-width confidence bins and
//! negative log-likelihood.
//!
//! Bin `b ∈ 1..=15` holds confidences in `((b−1)/15, b/15]`; a sample with
//! confidence `c` lands in bin `max(1, ⌈15·c⌉)`.

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::numerics::{log_softmax_rows, softmax_rows, Tensor};

pub const ECE_BINS: usize = 15;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityBins {
    pub counts: Vec<usize>,
    /// Mean confidence per bin (0 for empty bins).
    pub confidence: Vec<f64>,
    /// Accuracy per bin (0 for empty bins).
    pub accuracy: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub ece: f64,
    pub nll: f64,
    pub bins: ReliabilityBins,
}

pub fn bin_index(confidence: f64) -> usize {
    ((confidence * ECE_BINS as f64).ceil() as usize).clamp(1, ECE_BINS) - 1
}

pub fn calibration(logits: &Tensor, labels: &[usize]) -> Result<Calibration> {
    let (n, k) = (logits.rows(), logits.cols());
    if n == 0 || labels.len() != n {
        return Err(LabError::Contract(format!("calibration: {n} logit rows, {} labels", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(LabError::Contract(format!("calibration: label {bad} outside {k} classes")));
    }
    let probs = softmax_rows(logits.data(), k);
    let logp = log_softmax_rows(logits.data(), k);
    let mut counts = vec![0usize; ECE_BINS];
    let mut conf = vec![0.0; ECE_BINS];
    let mut hits = vec![0.0; ECE_BINS];
    let mut nll = 0.0;
    for i in 0..n {
        let row = &probs[i * k..(i + 1) * k];
        let pred = (1..k).fold(0, |b, j| if row[j] > row[b] { j } else { b });
        let b = bin_index(row[pred]);
        counts[b] += 1;
        conf[b] += row[pred];
        hits[b] += f64::from(u8::from(pred == labels[i]));
        nll -= logp[i * k + labels[i]];
    }
    let mut ece = 0.0;
    for b in 0..ECE_BINS {
        if counts[b] > 0 {
            let c = counts[b] as f64;
            conf[b] /= c;
            hits[b] /= c;
            ece += c / n as f64 * (hits[b] - conf[b]).abs();
        }
    }
    Ok(Calibration { ece, nll: nll / n as f64, bins: ReliabilityBins { counts, confidence: conf, accuracy: hits } })
}
