//! The five pretraining objectives as differentiable computations over a
//! batch and the current key queues, plus the epoch training loop.
//!
//! Key embeddings always come from the gradient-free key network, so nothing
//! recorded on the tape can reach the key parameters or the queues.

mod train;

pub use train::{train_epoch, warmup_fill, AugmentationRegime, EpochMetrics, TrainConfig, TrainingSet};

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::model::{KeyQueue, ModelState, NetworkVars, ObjectiveKind, SupConMode};
use crate::numerics::{Tape, Tensor, Var};

/// Raw images already passed through augmentation: one view for
/// cross-entropy, two for the contrastive objectives.
#[derive(Debug, Clone)]
pub struct AugmentedBatch {
    pub view1: Tensor,
    pub view2: Option<Tensor>,
    pub labels: Option<Vec<usize>>,
}

impl AugmentedBatch {
    pub fn len(&self) -> usize {
        self.view1.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PositiveStats {
    pub min: f64,
    pub mean: f64,
    pub max: f64,
    /// Queries with at least one positive (the ones that contribute).
    pub contributing: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub ce_term: Option<f64>,
    pub selfsup_term: Option<f64>,
    pub supcon_term: Option<f64>,
    /// Weight applied to the self-supervised term.
    pub alpha: f64,
    pub positives: Option<PositiveStats>,
    /// SupCon found no positive for any query; its term contributed zero.
    pub cold_start: bool,
}

// ── contrastive kernels ─────────────────────────────────────────────────────

/// Momentum-contrast loss: per query, an (M+1)-way softmax over
/// `[q·k₊, q·k₁ … q·k_M] / τ` with the positive at index 0; mean over the
/// batch. `positives` (`B×d`) and `negatives` (`M×d`) are constants.
pub fn selfsup_contrast(tape: &mut Tape, queries: Var, positives: &Tensor, negatives: &Tensor, tau: f64) -> Result<Var> {
    let b = tape.value(queries).rows();
    let kp = tape.constant(positives.clone());
    let kn = tape.constant(negatives.clone());
    let pos = tape.row_dot(queries, kp)?;
    let neg = tape.matmul_nt(queries, kn)?;
    let logits = tape.concat_cols(&[pos, neg])?;
    let logits = tape.scale(logits, 1.0 / tau);
    Ok(tape.softmax_cross_entropy(logits, &vec![0; b])?)
}

/// Supervised contrastive loss against a labeled key set.
///
/// For query `i` with positives `P(i) = {j : key_labels[j] == label_i}`,
/// the term is `Σ_{j∈P(i)} w · (−log softmax(q_i·K/τ)_j)` with `w = 1/|P(i)|`
/// in [`SupConMode::Mean`] and `w = 1` in [`SupConMode::Sum`]; terms are
/// averaged over queries with `|P(i)| ≥ 1`. Returns `None` for the loss when
/// no query has a positive.
pub fn supcon_contrast(
    tape: &mut Tape,
    queries: Var,
    query_labels: &[usize],
    keys: &Tensor,
    key_labels: &[i64],
    tau: f64,
    mode: SupConMode,
) -> Result<(Option<Var>, PositiveStats)> {
    let b = tape.value(queries).rows();
    let n = keys.rows();
    if query_labels.len() != b || key_labels.len() != n {
        return Err(LabError::Contract(format!(
            "supcon: {} query labels for {b} queries, {} key labels for {n} keys",
            query_labels.len(),
            key_labels.len()
        )));
    }
    let counts: Vec<usize> = query_labels.iter().map(|&y| key_labels.iter().filter(|&&l| l == y as i64).count()).collect();
    let contributing = counts.iter().filter(|&&c| c > 0).count();
    let stats = PositiveStats {
        min: counts.iter().copied().min().unwrap_or(0) as f64,
        mean: counts.iter().sum::<usize>() as f64 / b.max(1) as f64,
        max: counts.iter().copied().max().unwrap_or(0) as f64,
        contributing,
    };
    if contributing == 0 {
        return Ok((None, stats));
    }
    let mut weights = vec![0.0; b * n];
    let mut row_scale = vec![0.0; b];
    for i in 0..b {
        if counts[i] == 0 {
            continue;
        }
        let w = match mode {
            SupConMode::Mean => 1.0 / counts[i] as f64,
            SupConMode::Sum => 1.0,
        };
        for j in 0..n {
            if key_labels[j] == query_labels[i] as i64 {
                weights[i * n + j] = w;
            }
        }
        row_scale[i] = 1.0 / contributing as f64;
    }
    let kv = tape.constant(keys.clone());
    let logits = tape.matmul_nt(queries, kv)?;
    let logits = tape.scale(logits, 1.0 / tau);
    Ok((Some(tape.weighted_nll(logits, weights, row_scale)?), stats))
}

// ── model-level objectives ──────────────────────────────────────────────────

/// Keys produced while building an objective, enqueued by [`Objective::commit`].
#[derive(Debug, Clone, Default)]
pub struct PendingKeys {
    selfsup: Option<Tensor>,
    supcon: Option<(Tensor, Vec<usize>)>,
}

/// An objective recorded on a tape, ready for `backward`.
#[derive(Debug)]
pub struct Objective {
    pub total: Var,
    pub vars: NetworkVars,
    pub breakdown: LossBreakdown,
    pub pending: PendingKeys,
}

impl Objective {
    /// Enqueues the batch's keys (and labels, for the supervised queue).
    pub fn commit(self, state: &mut ModelState) -> Result<LossBreakdown> {
        commit_keys(&self.pending, state)?;
        Ok(self.breakdown)
    }
}

pub fn commit_keys(pending: &PendingKeys, state: &mut ModelState) -> Result<()> {
    if let (Some(k), Some(q)) = (&pending.selfsup, &mut state.selfsup_queue) {
        q.enqueue(k, None)?;
    }
    if let (Some((k, l)), Some(q)) = (&pending.supcon, &mut state.supcon_queue) {
        q.enqueue(k, Some(l))?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Terms {
    ce: bool,
    selfsup: bool,
    supcon: bool,
}

impl Terms {
    fn of(kind: ObjectiveKind) -> Self {
        Terms { ce: kind.uses_classifier(), selfsup: kind.uses_selfsup(), supcon: kind.uses_supcon() }
    }
}

fn labels_of(batch: &AugmentedBatch) -> Result<&[usize]> {
    let labels = batch.labels.as_deref().ok_or_else(|| LabError::Contract("objective needs labels".into()))?;
    if labels.len() != batch.len() {
        return Err(LabError::Contract(format!("{} labels for {} samples", labels.len(), batch.len())));
    }
    Ok(labels)
}

fn visible_keys(queue: Option<&KeyQueue>, which: &str) -> Result<(Tensor, Vec<i64>)> {
    let q = queue.ok_or_else(|| LabError::Contract(format!("model has no {which} queue")))?;
    q.visible()
        .map(|(k, l)| (k, l.to_vec()))
        .ok_or_else(|| LabError::Contract(format!("{which} queue is empty; fill it with key embeddings (warmup_fill) before training")))
}

/// Records the requested terms on `tape` with one shared encoder forward on
/// view 1.
fn build_terms(tape: &mut Tape, batch: &AugmentedBatch, state: &ModelState, terms: Terms) -> Result<Objective> {
    let cfg = &state.config;
    let tau = cfg.temperature;
    let vars = state.query.bind(tape, true);
    let x1 = tape.constant(batch.view1.clone());
    let features = vars.features(tape, x1)?;

    let mut parts: Vec<(Var, f64)> = Vec::new();
    let mut breakdown = LossBreakdown {
        total: 0.0,
        ce_term: None,
        selfsup_term: None,
        supcon_term: None,
        alpha: if terms.selfsup && (terms.ce || terms.supcon) { cfg.selfsup_weight() } else { 1.0 },
        positives: None,
        cold_start: false,
    };
    let mut pending = PendingKeys::default();

    if terms.ce {
        let labels = labels_of(batch)?;
        let head = vars.classifier.ok_or_else(|| LabError::Contract("model has no classifier head".into()))?;
        let logits = head.forward(tape, features)?;
        let ce = tape.softmax_cross_entropy(logits, labels)?;
        breakdown.ce_term = Some(tape.scalar_value(ce));
        parts.push((ce, 1.0));
    }

    if terms.selfsup || terms.supcon {
        let view2 = batch.view2.as_ref().ok_or_else(|| LabError::Contract("contrastive objective needs a second augmented view".into()))?;
        let key = state.key.as_ref().ok_or_else(|| LabError::Contract("model has no key encoder".into()))?;
        let key_features = key.encoder.features(view2)?;

        if terms.selfsup {
            let (negatives, _) = visible_keys(state.selfsup_queue.as_ref(), "self-supervised")?;
            let head = vars.selfsup_head.ok_or_else(|| LabError::Contract("model has no self-supervised head".into()))?;
            let q = head.forward(tape, features)?;
            let k_pos = key.selfsup_head.as_ref().expect("key mirrors query heads").forward(&key_features)?;
            let loss = selfsup_contrast(tape, q, &k_pos, &negatives, tau)?;
            breakdown.selfsup_term = Some(tape.scalar_value(loss));
            parts.push((loss, breakdown.alpha));
            breakdown.positives = Some(PositiveStats { min: 1.0, mean: 1.0, max: 1.0, contributing: batch.len() });
            pending.selfsup = Some(k_pos);
        }

        if terms.supcon {
            let labels = labels_of(batch)?;
            let head = vars.supcon_head.ok_or_else(|| LabError::Contract("model has no supervised contrastive head".into()))?;
            let q = head.forward(tape, features)?;
            let fresh = key.supcon_head.as_ref().expect("key mirrors query heads").forward(&key_features)?;
            // contrast set: this batch's keys, then the queue's visible keys
            let mut key_labels: Vec<i64> = labels.iter().map(|&l| l as i64).collect();
            let keys = match state.supcon_queue.as_ref().and_then(KeyQueue::visible) {
                Some((qk, ql)) => {
                    key_labels.extend_from_slice(ql);
                    let mut data = fresh.data().to_vec();
                    data.extend_from_slice(qk.data());
                    Tensor::from_vec(vec![fresh.rows() + qk.rows(), fresh.cols()], data)?
                }
                None => fresh.clone(),
            };
            let (loss, stats) = supcon_contrast(tape, q, labels, &keys, &key_labels, tau, cfg.supcon_sum_mode)?;
            breakdown.positives = Some(stats);
            match loss {
                Some(l) => {
                    breakdown.supcon_term = Some(tape.scalar_value(l));
                    parts.push((l, 1.0));
                }
                None => {
                    log::warn!("supcon: no query has a positive key; term contributes zero (cold start)");
                    breakdown.supcon_term = Some(0.0);
                    breakdown.cold_start = true;
                }
            }
            pending.supcon = Some((fresh, labels.to_vec()));
        }
    }

    let total = match parts.as_slice() {
        [] => {
            let z = tape.constant(Tensor::scalar(0.0));
            tape.scale(z, 1.0)
        }
        [(v, w)] if *w == 1.0 => *v,
        _ => {
            let mut acc: Option<Var> = None;
            for &(v, w) in &parts {
                let term = if w == 1.0 { v } else { tape.scale(v, w) };
                acc = Some(match acc {
                    None => term,
                    Some(a) => tape.add(a, term)?,
                });
            }
            acc.expect("non-empty")
        }
    };
    breakdown.total = tape.scalar_value(total);
    Ok(Objective { total, vars, breakdown, pending })
}

/// Records the state's configured objective on `tape` without touching the
/// queues; call [`Objective::commit`] after the optimizer step.
pub fn build_objective(tape: &mut Tape, batch: &AugmentedBatch, state: &ModelState) -> Result<Objective> {
    let cfg = &state.config;
    if cfg.objective.is_joint() && cfg.selfsup_weight() < 0.0 {
        return Err(LabError::Contract(format!("joint objective with negative weight {}", cfg.selfsup_weight())));
    }
    build_terms(tape, batch, state, Terms::of(cfg.objective))
}

/// Mean cross-entropy of the classifier head on view 1.
pub fn ce_loss(batch: &AugmentedBatch, state: &ModelState) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    Ok(build_terms(&mut tape, batch, state, Terms { ce: true, selfsup: false, supcon: false })?.breakdown)
}

/// Momentum-contrast loss on the self-supervised head; enqueues the
/// batch's keys afterwards.
pub fn selfsupcon_loss(batch: &AugmentedBatch, state: &mut ModelState) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    build_terms(&mut tape, batch, state, Terms { ce: false, selfsup: true, supcon: false })?.commit(state)
}

/// Supervised contrastive loss on the supervised head; enqueues keys and
/// labels afterwards.
pub fn supcon_loss(batch: &AugmentedBatch, state: &mut ModelState) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    build_terms(&mut tape, batch, state, Terms { ce: false, selfsup: false, supcon: true })?.commit(state)
}

/// CE + α·SelfSupCon or SupCon + w·SelfSupCon over the shared encoder.
pub fn joint_loss(batch: &AugmentedBatch, state: &mut ModelState) -> Result<LossBreakdown> {
    if !state.config.objective.is_joint() {
        return Err(LabError::Contract(format!("{} is not a joint objective", state.config.objective)));
    }
    let mut tape = Tape::new();
    build_objective(&mut tape, batch, state)?.commit(state)
}

#[cfg(test)]
mod tests;
