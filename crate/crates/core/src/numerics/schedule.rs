use serde::{Deserialize, Serialize};

/// Per-epoch learning-rate schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Schedule {
    Constant {
        base: f64,
    },
    /// Linear warmup `base·(e+1)/warmup`, then half-cosine decay to 0 at `total`.
    CosineWarmup {
        base: f64,
        total: usize,
        warmup: usize,
    },
    /// Multiplies by `factor` at each milestone epoch.
    StepDecay {
        base: f64,
        milestones: Vec<usize>,
        factor: f64,
    },
}

impl Schedule {
    pub fn lr(&self, epoch: usize) -> f64 {
        match self {
            Schedule::Constant { base } => *base,
            &Schedule::CosineWarmup { base, total, warmup } => {
                if epoch < warmup {
                    base * (epoch + 1) as f64 / warmup as f64
                } else if total <= warmup {
                    base
                } else {
                    let t = (epoch - warmup) as f64 / (total - warmup) as f64;
                    base * 0.5 * (1.0 + (std::f64::consts::PI * t.min(1.0)).cos())
                }
            }
            Schedule::StepDecay { base, milestones, factor } => {
                let passed = milestones.iter().filter(|&&m| epoch >= m).count();
                base * factor.powi(passed as i32)
            }
        }
    }

    pub fn base(&self) -> f64 {
        match self {
            Schedule::Constant { base } | Schedule::CosineWarmup { base, .. } | Schedule::StepDecay { base, .. } => *base,
        }
    }

    /// Same shape with a different base rate.
    pub fn with_base(&self, base: f64) -> Schedule {
        let mut s = self.clone();
        match &mut s {
            Schedule::Constant { base: b } | Schedule::CosineWarmup { base: b, .. } | Schedule::StepDecay { base: b, .. } => *b = base,
        }
        s
    }
}
