use serde::{Deserialize, Serialize};

use super::{build_objective, AugmentedBatch, LossBreakdown};
use crate::data::{augment, AugmentationPolicy};
use crate::error::{LabError, Result};
use crate::model::{ModelState, ObjectiveKind};
use crate::numerics::{Rng, Schedule, Sgd, Tape, Tensor};

/// Which augmentation pipeline produces training views.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentationRegime {
    /// Weak for cross-entropy, strong for every contrastive objective.
    #[default]
    Auto,
    Weak,
    Strong,
    None,
}

impl AugmentationRegime {
    pub fn policy_for(self, kind: ObjectiveKind) -> AugmentationPolicy {
        match self {
            AugmentationRegime::Auto if kind == ObjectiveKind::Ce => AugmentationPolicy::weak(),
            AugmentationRegime::Auto | AugmentationRegime::Strong => AugmentationPolicy::strong(),
            AugmentationRegime::Weak => AugmentationPolicy::weak(),
            AugmentationRegime::None => AugmentationPolicy::identity(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub augmentation: AugmentationRegime,
}

fn default_batch() -> usize {
    32
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { batch_size: default_batch(), augmentation: AugmentationRegime::Auto }
    }
}

/// Borrowed training split: `n × side²` images in [0,1] plus labels.
#[derive(Debug, Clone, Copy)]
pub struct TrainingSet<'a> {
    pub images: &'a Tensor,
    pub labels: &'a [usize],
    pub side: usize,
}

impl TrainingSet<'_> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn augmented(&self, idx: &[usize], policy: &AugmentationPolicy, rng: &mut Rng) -> Result<Tensor> {
        let d = self.images.cols();
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend(augment(self.images.row(i), self.side, policy, rng));
        }
        Ok(Tensor::from_vec(vec![idx.len(), d], data)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub steps: usize,
    pub mean_loss: f64,
    pub mean_ce: Option<f64>,
    pub mean_selfsup: Option<f64>,
    pub mean_supcon: Option<f64>,
}

/// Fills empty key queues with key-encoder embeddings of augmented training
/// samples, in a shuffled pass, until full or the data runs out.
pub fn warmup_fill(state: &mut ModelState, set: TrainingSet<'_>, policy: &AugmentationPolicy, rng: &mut Rng) -> Result<()> {
    let needs = |q: &Option<crate::model::KeyQueue>| q.as_ref().is_some_and(|q| q.filled() == 0);
    if !needs(&state.selfsup_queue) && !needs(&state.supcon_queue) {
        return Ok(());
    }
    let key = state.key.clone().ok_or_else(|| LabError::Contract("queues without a key encoder".into()))?;
    let order = rng.permutation(set.len());
    let cap = state.config.queue_size;
    let fill_selfsup = needs(&state.selfsup_queue);
    let fill_supcon = needs(&state.supcon_queue);
    let mut written = 0;
    for chunk in order.chunks(cap.clamp(1, 64)) {
        if written >= cap {
            break;
        }
        let take = chunk.len().min(cap - written);
        let idx = &chunk[..take];
        let x = set.augmented(idx, policy, rng)?;
        let feats = key.encoder.features(&x)?;
        if fill_selfsup {
            let k = key.selfsup_head.as_ref().expect("head").forward(&feats)?;
            state.selfsup_queue.as_mut().expect("queue").enqueue(&k, None)?;
        }
        if fill_supcon {
            let k = key.supcon_head.as_ref().expect("head").forward(&feats)?;
            let labels: Vec<usize> = idx.iter().map(|&i| set.labels[i]).collect();
            state.supcon_queue.as_mut().expect("queue").enqueue(&k, Some(&labels))?;
        }
        written += take;
    }
    Ok(())
}

/// One pass over shuffled minibatches: objective, backward, SGD step,
/// momentum update of the key encoder, enqueue.
///
/// All randomness comes from `state.rng` split by `epoch`, so an epoch is
/// reproducible from the state alone.
pub fn train_epoch(
    state: &mut ModelState,
    set: TrainingSet<'_>,
    optimizer: &mut Sgd,
    schedule: &Schedule,
    epoch: usize,
    config: &TrainConfig,
) -> Result<EpochMetrics> {
    if set.is_empty() {
        return Err(LabError::Contract("train_epoch: empty dataset".into()));
    }
    if config.batch_size == 0 {
        return Err(LabError::Config("batch_size must be positive".into()));
    }
    let kind = state.config.objective;
    let policy = config.augmentation.policy_for(kind);
    let mut rng = state.rng.split(epoch as u64);
    if kind.needs_key_encoder() {
        let mut fill_rng = rng.split_named("warmup");
        warmup_fill(state, set, &policy, &mut fill_rng)?;
    }
    let lr = schedule.lr(epoch);
    let batch = config.batch_size.min(state.config.queue_size.max(1));
    let order = rng.permutation(set.len());
    let mut sums = [0.0f64; 4];
    let mut seen = [false; 3];
    let mut steps = 0;

    for (step, idx) in order.chunks(batch).enumerate() {
        let labels: Vec<usize> = idx.iter().map(|&i| set.labels[i]).collect();
        let view1 = set.augmented(idx, &policy, &mut rng)?;
        let view2 = if kind.needs_key_encoder() { Some(set.augmented(idx, &policy, &mut rng)?) } else { None };
        let batch = AugmentedBatch { view1, view2, labels: Some(labels) };

        let mut tape = Tape::new();
        let objective = build_objective(&mut tape, &batch, state)?;
        let b: &LossBreakdown = &objective.breakdown;
        if !b.total.is_finite() {
            return Err(LabError::Numerical(format!(
                "non-finite loss at epoch {epoch} step {step} (lr {lr}): total {} ce {:?} selfsup {:?} supcon {:?}",
                b.total, b.ce_term, b.selfsup_term, b.supcon_term
            )));
        }
        let grads = tape.backward(objective.total)?;
        state.query.store_grads(&objective.vars, &grads);
        optimizer.step(state.query.named_params_mut(), lr)?;
        state.query.zero_grads();
        state.update_key_encoder()?;

        let b = objective.commit(state)?;
        sums[0] += b.total;
        for (k, term) in [b.ce_term, b.selfsup_term, b.supcon_term].into_iter().enumerate() {
            if let Some(t) = term {
                sums[k + 1] += t;
                seen[k] = true;
            }
        }
        steps += 1;
    }
    state.epoch = epoch + 1;
    let n = steps as f64;
    let mean = |k: usize| seen[k].then(|| sums[k + 1] / n);
    Ok(EpochMetrics { epoch, lr, steps, mean_loss: sums[0] / n, mean_ce: mean(0), mean_selfsup: mean(1), mean_supcon: mean(2) })
}
