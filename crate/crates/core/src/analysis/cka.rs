//! Linear CKA with the biased HSIC estimator:
//! `CKA(X, Y) = ‖ȲᵀX̄‖²_F / (‖X̄ᵀX̄‖_F · ‖ȲᵀȲ‖_F)` on column-centered inputs.

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::numerics::Tensor;

/// Activations of one stage with where they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationMatrix {
    pub data: Tensor,
    pub model: String,
    pub stage: usize,
    pub domain: String,
    pub split: String,
}

impl ActivationMatrix {
    pub fn new(data: Tensor, model: &str, stage: usize, domain: &str, split: &str) -> Result<Self> {
        if data.shape().len() != 2 || data.rows() < 2 {
            return Err(LabError::Contract(format!("activation matrix needs n ≥ 2 rows, shape {:?}", data.shape())));
        }
        if !data.all_finite() {
            return Err(LabError::Numerical(format!("non-finite activations for {model} stage {stage}")));
        }
        Ok(Self { data, model: model.into(), stage, domain: domain.into(), split: split.into() })
    }
}

fn centered(x: &Tensor) -> Vec<f64> {
    let (n, d) = (x.rows(), x.cols());
    let mut out = x.data().to_vec();
    for j in 0..d {
        let mean = (0..n).map(|i| out[i * d + j]).sum::<f64>() / n as f64;
        for i in 0..n {
            out[i * d + j] -= mean;
        }
    }
    out
}

/// `‖AᵀB‖²_F` for row-major `n×p` and `n×q`.
fn cross_frobenius_sq(a: &[f64], p: usize, b: &[f64], q: usize, n: usize) -> f64 {
    let mut m = vec![0.0; p * q];
    for i in 0..n {
        let ar = &a[i * p..(i + 1) * p];
        let br = &b[i * q..(i + 1) * q];
        for (r, &av) in ar.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let row = &mut m[r * q..(r + 1) * q];
            for (mv, &bv) in row.iter_mut().zip(br) {
                *mv += av * bv;
            }
        }
    }
    m.iter().map(|v| v * v).sum()
}

pub fn linear_cka(x: &Tensor, y: &Tensor) -> Result<f64> {
    let n = x.rows();
    if y.rows() != n {
        return Err(LabError::Contract(format!("CKA needs equal sample counts, got {n} and {}", y.rows())));
    }
    if n < 2 {
        return Err(LabError::Contract("CKA needs at least 2 samples".into()));
    }
    let (p, q) = (x.cols(), y.cols());
    let xc = centered(x);
    let yc = centered(y);
    let xx = cross_frobenius_sq(&xc, p, &xc, p, n).sqrt();
    let yy = cross_frobenius_sq(&yc, q, &yc, q, n).sqrt();
    if xx == 0.0 || yy == 0.0 {
        return Err(LabError::Undefined("CKA of a zero-variance activation matrix".into()));
    }
    // both orders, so swapping the arguments is exact
    let xy = 0.5 * (cross_frobenius_sq(&yc, q, &xc, p, n) + cross_frobenius_sq(&xc, p, &yc, q, n));
    Ok((xy / (xx * yy)).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageGrids {
    pub models: Vec<String>,
    /// Per model, `stages × stages`.
    pub within: Vec<Vec<Vec<f64>>>,
    /// Per stage, `models × models`.
    pub across: Vec<Vec<Vec<f64>>>,
}

/// CKA within each model across stages, and across models per stage.
/// `models[i] = (id, per-stage activations)` on identical samples.
pub fn cka_stage_grid(models: &[(String, Vec<Tensor>)]) -> Result<StageGrids> {
    let stages = models.first().map_or(0, |m| m.1.len());
    if let Some((id, acts)) = models.iter().find(|m| m.1.len() != stages) {
        return Err(LabError::Config(format!("model `{id}` has {} stages, expected {stages}", acts.len())));
    }
    let within = models
        .iter()
        .map(|(_, acts)| {
            (0..stages).map(|a| (0..stages).map(|b| linear_cka(&acts[a], &acts[b])).collect::<Result<Vec<_>>>()).collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let across = (0..stages)
        .map(|s| {
            models
                .iter()
                .map(|(_, a)| models.iter().map(|(_, b)| linear_cka(&a[s], &b[s])).collect::<Result<Vec<_>>>())
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(StageGrids { models: models.iter().map(|m| m.0.clone()).collect(), within, across })
}
