use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{NumericsError, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SgdConfig {
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
}

fn default_momentum() -> f64 {
    0.9
}

fn default_weight_decay() -> f64 {
    1e-4
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self { momentum: default_momentum(), weight_decay: default_weight_decay() }
    }
}

/// Heavy-ball SGD: `v ← μ·v + g + λ·θ`, `θ ← θ − lr·v`.
///
/// Velocity buffers are keyed by parameter name and created lazily (zero)
/// on the first step that sees a parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sgd {
    pub config: SgdConfig,
    velocities: BTreeMap<String, Vec<f64>>,
}

impl Sgd {
    pub fn new(config: SgdConfig) -> Result<Self, NumericsError> {
        if !(0.0..1.0).contains(&config.momentum) && config.momentum != 1.0 {
            return Err(NumericsError::Contract(format!("momentum {} outside [0,1]", config.momentum)));
        }
        if config.weight_decay < 0.0 {
            return Err(NumericsError::Contract(format!("weight decay {} < 0", config.weight_decay)));
        }
        Ok(Self { config, velocities: BTreeMap::new() })
    }

    pub fn velocity(&self, name: &str) -> Option<&[f64]> {
        self.velocities.get(name).map(Vec::as_slice)
    }

    /// Updates every parameter from its `grad` slot. Grads are left in place.
    pub fn step<'a, I>(&mut self, params: I, lr: f64) -> Result<(), NumericsError>
    where
        I: IntoIterator<Item = (String, &'a mut Tensor)>,
    {
        let SgdConfig { momentum, weight_decay } = self.config;
        for (name, p) in params {
            let grad = p.grad.take().ok_or_else(|| NumericsError::Contract(format!("parameter `{name}` has no gradient")))?;
            if grad.len() != p.len() {
                return Err(NumericsError::Contract(format!("parameter `{name}`: gradient length {} vs {}", grad.len(), p.len())));
            }
            let v = self.velocities.entry(name.clone()).or_insert_with(|| vec![0.0; grad.len()]);
            if v.len() != grad.len() {
                return Err(NumericsError::Contract(format!("velocity shape mismatch for `{name}`")));
            }
            for ((vi, gi), th) in v.iter_mut().zip(&grad).zip(p.data_mut().iter_mut()) {
                *vi = momentum * *vi + gi + weight_decay * *th;
                *th -= lr * *vi;
            }
            p.grad = Some(grad);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(v: f64, g: f64) -> Tensor {
        let mut t = Tensor::scalar(v);
        t.grad = Some(vec![g]);
        t
    }

    #[test]
    fn plain_descent() {
        let mut opt = Sgd::new(SgdConfig { momentum: 0.0, weight_decay: 0.0 }).unwrap();
        let mut p = param(0.0, 1.0);
        opt.step([("w".to_string(), &mut p)], 1.0).unwrap();
        assert_eq!(p.data(), &[-1.0]);
        assert_eq!(p.grad.as_deref(), Some(&[1.0][..]));
    }

    #[test]
    fn pure_momentum_drifts_linearly() {
        let mut opt = Sgd::new(SgdConfig { momentum: 1.0, weight_decay: 0.0 }).unwrap();
        let mut p = param(0.0, 1.0);
        opt.step([("w".to_string(), &mut p)], 1.0).unwrap();
        let mut last = p.data()[0];
        for _ in 0..5 {
            p.grad = Some(vec![0.0]);
            opt.step([("w".to_string(), &mut p)], 1.0).unwrap();
            assert_eq!(opt.velocity("w").unwrap(), &[1.0]);
            assert_eq!(p.data()[0], last - 1.0);
            last = p.data()[0];
        }
    }

    #[test]
    fn two_steps_match_hand_unroll() {
        let (mu, wd, lr) = (0.9, 1e-4, 0.05);
        let mut opt = Sgd::new(SgdConfig { momentum: mu, weight_decay: wd }).unwrap();
        let (t0, g1, g2) = (0.7, 0.3, -0.2);
        let mut p = param(t0, g1);
        opt.step([("w".to_string(), &mut p)], lr).unwrap();
        p.grad = Some(vec![g2]);
        opt.step([("w".to_string(), &mut p)], lr).unwrap();
        let v1 = g1 + wd * t0;
        let t1 = t0 - lr * v1;
        let v2 = mu * v1 + g2 + wd * t1;
        let t2 = t1 - lr * v2;
        assert!((p.data()[0] - t2).abs() < 1e-12);
        assert!((opt.velocity("w").unwrap()[0] - v2).abs() < 1e-12);
    }

    #[test]
    fn missing_grad_names_parameter() {
        let mut opt = Sgd::new(SgdConfig::default()).unwrap();
        let mut p = Tensor::scalar(1.0);
        let err = opt.step([("enc.0.weight".to_string(), &mut p)], 0.1).unwrap_err();
        assert!(err.to_string().contains("enc.0.weight"));
    }
}
