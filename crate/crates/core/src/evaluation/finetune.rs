//! Full-network fine-tuning: encoder plus a fresh linear head, all trainable.
//!
//! Features pass through a fixed standardizer fitted on the initial
//! encoder's training features before the head. Its divisors are floored at
//! [`SCALE_FLOOR`]: a nearly constant unit that wakes up during training would
//! otherwise be amplified by orders of magnitude. A grid cell whose loss goes
//! non-finite is dropped from selection. The head is initialized
//! from `rng.split_named("head")`, identically for every grid cell. No
//! augmentation is applied.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{accuracy, head_predict, select_best, stratified_split, FeatureStandardizer, GridCell, HyperParams, LabeledSet, ProbeConfig};
use crate::error::{LabError, Result};
use crate::model::{Linear, ModelState, Network};
use crate::numerics::{Rng, Sgd, SgdConfig, Tape, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneOutcome {
    pub test_accuracy: f64,
    pub best: HyperParams,
    pub grid: Vec<GridCell>,
    /// Training samples actually used (after the cap).
    pub train_size: usize,
}

/// Class-balanced subsample of at most `cap` indices: `⌊cap/K⌋` per class,
/// the remainder spread one each over the lowest class indices.
pub fn balanced_cap(labels: &[usize], num_classes: usize, cap: usize, rng: &mut Rng) -> Result<Vec<usize>> {
    if cap < num_classes {
        return Err(LabError::Config(format!("sample cap {cap} is below the class count {num_classes}")));
    }
    let mut out = Vec::with_capacity(cap);
    for c in 0..num_classes {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        rng.shuffle(&mut idx);
        let want = cap / num_classes + usize::from(c < cap % num_classes);
        out.extend(idx.into_iter().take(want));
    }
    out.sort_unstable();
    Ok(out)
}

/// Smallest divisor the fine-tune standardizer applies.
pub const SCALE_FLOOR: f64 = 1e-2;

struct Tuned {
    net: Network,
    standardizer: FeatureStandardizer,
}

impl Tuned {
    fn new(state: &ModelState, train_images: &Tensor, head: &Linear) -> Result<Self> {
        let mut standardizer = FeatureStandardizer::fit(&state.features(train_images)?)?;
        for s in &mut standardizer.scale {
            *s = s.max(SCALE_FLOOR);
        }
        let net = Network { encoder: state.query.encoder.clone(), classifier: Some(head.clone()), selfsup_head: None, supcon_head: None };
        Ok(Self { net, standardizer })
    }

    fn predict(&self, images: &Tensor) -> Result<Vec<usize>> {
        let f = self.standardizer.transform(&self.net.encoder.features(images)?)?;
        head_predict(self.net.classifier.as_ref().expect("head"), &f)
    }

    fn train(&mut self, data: &LabeledSet, hp: HyperParams, config: &ProbeConfig, rng: &mut Rng) -> Result<()> {
        let d = self.standardizer.mean.len();
        let mut diag = Tensor::zeros(&[d, d]);
        for j in 0..d {
            diag.data_mut()[j * d + j] = 1.0 / self.standardizer.scale[j];
        }
        let shift: Vec<f64> = (0..d).map(|j| -self.standardizer.mean[j] / self.standardizer.scale[j]).collect();
        let shift = Tensor::from_vec(vec![d], shift)?;
        let mut opt = Sgd::new(SgdConfig { momentum: config.momentum, weight_decay: hp.weight_decay })?;
        let schedule = config.schedule(hp.lr);
        let batch = hp.batch_size.min(data.len()).max(1);
        for epoch in 0..config.epochs {
            let lr = schedule.lr(epoch);
            for idx in rng.permutation(data.len()).chunks(batch) {
                let labels: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();
                let mut tape = Tape::new();
                let vars = self.net.bind(&mut tape, true);
                let x = tape.constant(data.features.select_rows(idx));
                let f = vars.features(&mut tape, x)?;
                let dv = tape.constant(diag.clone());
                let sv = tape.constant(shift.clone());
                let scaled = tape.matmul(f, dv)?;
                let z = tape.add_row_bias(scaled, sv)?;
                let logits = vars.classifier.as_ref().expect("head").forward(&mut tape, z)?;
                let loss = tape.softmax_cross_entropy(logits, &labels)?;
                if !tape.scalar_value(loss).is_finite() {
                    return Err(LabError::Numerical(format!("fine-tune: non-finite loss at epoch {epoch} (lr {lr})")));
                }
                let g = tape.backward(loss)?;
                self.net.store_grads(&vars, &g);
                opt.step(self.net.named_params_mut(), lr)?;
                self.net.zero_grads();
            }
        }
        Ok(())
    }
}

/// Same sweep protocol as the linear probe with the whole network trainable.
/// `train` and `test` hold raw images. With `sample_cap`, the training split
/// is first subsampled class-balanced (stream `rng.split_named("cap")`).
pub fn finetune(
    state: &ModelState,
    train: &LabeledSet,
    test: &LabeledSet,
    num_classes: usize,
    config: &ProbeConfig,
    rng: &Rng,
    sample_cap: Option<usize>,
) -> Result<FinetuneOutcome> {
    config.validate()?;
    let train = match sample_cap {
        Some(cap) => train.select(&balanced_cap(&train.labels, num_classes, cap, &mut rng.split_named("cap"))?),
        None => train.clone(),
    };
    let feature_dim = state.config.feature_dim();
    let head = Linear::init(feature_dim, num_classes, &mut rng.split_named("head"));

    let (fit_idx, val_idx) = stratified_split(&train.labels, config.val_fraction, &mut rng.split_named("split"));
    let fit = train.select(&fit_idx);
    let val = train.select(&val_idx);
    let cells = config.grid(train.len());
    let cell_rng = rng.split_named("cell");
    let grid = cells
        .par_iter()
        .enumerate()
        .map(|(i, &hp)| {
            let mut t = Tuned::new(state, &fit.features, &head)?;
            match t.train(&fit, hp, config, &mut cell_rng.split(i as u64)) {
                Err(LabError::Numerical(msg)) => {
                    log::warn!("fine-tune cell {hp:?} dropped: {msg}");
                    return Ok(None);
                }
                r => r?,
            }
            Ok(Some(GridCell { params: hp, val_accuracy: accuracy(&t.predict(&val.features)?, &val.labels) }))
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect::<Vec<_>>();
    if grid.is_empty() {
        return Err(LabError::Numerical(format!("fine-tune: all {} grid cells diverged", cells.len())));
    }
    let best = select_best(&grid).params;

    let mut t = Tuned::new(state, &train.features, &head)?;
    t.train(&train, best, config, &mut rng.split_named("final"))?;
    let test_accuracy = accuracy(&t.predict(&test.features)?, &test.labels);
    Ok(FinetuneOutcome { test_accuracy, best, grid, train_size: train.len() })
}

/// Accuracy of the untrained head on frozen, standardized features: what a
/// zero-learning-rate fine-tune must reproduce.
#[cfg(test)]
pub(crate) fn random_head_accuracy(
    state: &ModelState,
    train: &LabeledSet,
    test: &LabeledSet,
    num_classes: usize,
    rng: &Rng,
) -> Result<f64> {
    let head = Linear::init(state.config.feature_dim(), num_classes, &mut rng.split_named("head"));
    let t = Tuned::new(state, &train.features, &head)?;
    Ok(accuracy(&t.predict(&test.features)?, &test.labels))
}
