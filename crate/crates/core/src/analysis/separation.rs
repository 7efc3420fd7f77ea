//! Intra- and inter-class separation of L2-normalized features.
//!
//! With `s_k` the sum of class `k`'s unit vectors,
//! `R_intra = (1/K) Σ_k (1 − ‖s_k‖²/N_k²)` (all ordered pairs, `i = j`
//! included) and `R_inter = 1/(K(K−1)) Σ_{k≠m} (N_k·N_m − s_k·s_m) / D_km` where
//! `D_km = N_k·N_m`, or `N_k²` under [`InterDenominator::Literal`].

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::numerics::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterDenominator {
    #[default]
    Pairwise,
    /// `N_k²` for every ordered pair, as some write the formula.
    Literal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Separation {
    pub r_intra: f64,
    pub r_inter: f64,
}

pub fn class_separation(features: &Tensor, labels: &[usize], denominator: InterDenominator) -> Result<Separation> {
    let (n, d) = (features.rows(), features.cols());
    if labels.len() != n {
        return Err(LabError::Contract(format!("{n} feature rows, {} labels", labels.len())));
    }
    let mut classes: Vec<usize> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 {
        return Err(LabError::Degenerate(format!("class separation needs two classes, got {}", classes.len())));
    }
    let k = classes.len();
    let mut sums = vec![vec![0.0; d]; k];
    let mut counts = vec![0usize; k];
    for i in 0..n {
        let row = features.row(i);
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(LabError::Degenerate(format!("zero feature vector at row {i}")));
        }
        let c = classes.binary_search(&labels[i]).expect("present");
        counts[c] += 1;
        for (s, v) in sums[c].iter_mut().zip(row) {
            *s += v / norm;
        }
    }
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let r_intra = (0..k).map(|c| 1.0 - dot(&sums[c], &sums[c]) / (counts[c] * counts[c]) as f64).sum::<f64>() / k as f64;
    let mut inter = 0.0;
    for a in 0..k {
        for b in 0..k {
            if a != b {
                let den = match denominator {
                    InterDenominator::Pairwise => counts[a] * counts[b],
                    InterDenominator::Literal => counts[a] * counts[a],
                } as f64;
                inter += ((counts[a] * counts[b]) as f64 - dot(&sums[a], &sums[b])) / den;
            }
        }
    }
    Ok(Separation { r_intra, r_inter: inter / (k * (k - 1)) as f64 })
}
