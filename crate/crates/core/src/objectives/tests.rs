use super::*;
use crate::data::{generate_domain, DomainSpec, Split, SplitCounts};
use crate::model::{EncoderConfig, ModelConfig};
use crate::numerics::{l2_normalize, Gradients, Rng, Schedule, Sgd, SgdConfig};
use proptest::prelude::{prop_assert, proptest};

fn unit_rows(rng: &mut Rng, n: usize, d: usize) -> Tensor {
    let data: Vec<f64> = (0..n * d).map(|_| rng.normal()).collect();
    l2_normalize(&Tensor::from_vec(vec![n, d], data).unwrap())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn selfsup_value(q: &Tensor, pos: &Tensor, neg: &Tensor, tau: f64) -> f64 {
    let mut tape = Tape::new();
    let qv = tape.constant(q.clone());
    let l = selfsup_contrast(&mut tape, qv, pos, neg, tau).unwrap();
    tape.scalar_value(l)
}

fn supcon_value(q: &Tensor, ql: &[usize], keys: &Tensor, kl: &[i64], tau: f64, mode: SupConMode) -> Option<f64> {
    let mut tape = Tape::new();
    let qv = tape.constant(q.clone());
    let (l, _) = supcon_contrast(&mut tape, qv, ql, keys, kl, tau, mode).unwrap();
    l.map(|l| tape.scalar_value(l))
}

fn tiny_config(kind: ObjectiveKind) -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig { input_dim: 6, stage_widths: vec![5, 4] },
        projection_hidden: 4,
        embed_dim: 3,
        queue_size: 8,
        ..ModelConfig::new(kind, 3)
    }
}

fn batch(rng: &mut Rng, b: usize, d: usize, k: usize) -> AugmentedBatch {
    let v1: Vec<f64> = (0..b * d).map(|_| rng.uniform()).collect();
    let v2: Vec<f64> = (0..b * d).map(|_| rng.uniform()).collect();
    AugmentedBatch {
        view1: Tensor::from_vec(vec![b, d], v1).unwrap(),
        view2: Some(Tensor::from_vec(vec![b, d], v2).unwrap()),
        labels: Some((0..b).map(|_| rng.below(k)).collect()),
    }
}

/// Fills every queue with random unit keys (labels from `0..k`).
fn fill_queues(state: &mut ModelState, rng: &mut Rng, n: usize) {
    let k = state.config.num_classes;
    let d = state.config.embed_dim;
    if let Some(q) = state.selfsup_queue.as_mut() {
        q.enqueue(&unit_rows(rng, n, d), None).unwrap();
    }
    if let Some(q) = state.supcon_queue.as_mut() {
        let labels: Vec<usize> = (0..n).map(|_| rng.below(k)).collect();
        q.enqueue(&unit_rows(rng, n, d), Some(&labels)).unwrap();
    }
}

fn grads_of(state: &ModelState, b: &AugmentedBatch, terms: Terms) -> (Vec<(String, Vec<f64>)>, f64) {
    let mut tape = Tape::new();
    let obj = build_terms(&mut tape, b, state, terms).unwrap();
    let g: Gradients = tape.backward(obj.total).unwrap();
    let named = obj.vars.named_vars().into_iter().map(|(n, v)| (n, g.wrt(v))).collect();
    (named, obj.breakdown.total)
}

// ── closed forms and direct oracles ────────────────────────────────────────

#[test]
fn uniform_classifier_gives_ln_k() {
    let mut state = ModelState::init(ModelConfig::new(ObjectiveKind::Ce, 8), 1).unwrap();
    let c = state.query.classifier.as_mut().unwrap();
    c.weight = Tensor::zeros(c.weight.shape());
    c.bias = Tensor::zeros(c.bias.shape());
    let mut rng = Rng::new(2);
    let mut b = batch(&mut rng, 5, 256, 8);
    b.view2 = None;
    let out = ce_loss(&b, &state).unwrap();
    assert!((out.total - 8f64.ln()).abs() < 1e-12);
    assert_eq!((out.selfsup_term, out.supcon_term), (None, None));
}

#[test]
fn ce_matches_direct_softmax_oracle() {
    let state = ModelState::init(tiny_config(ObjectiveKind::Ce), 3).unwrap();
    let b = batch(&mut Rng::new(4), 4, 6, 3);
    let logits = state.query.logits(&b.view1).unwrap().unwrap();
    let labels = b.labels.as_ref().unwrap();
    let mut oracle = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let row = logits.row(i);
        let z: f64 = row.iter().map(|v| v.exp()).sum();
        oracle += -(row[y].exp() / z).ln() / 4.0;
    }
    let got = ce_loss(&b, &state).unwrap();
    assert!((got.total - oracle).abs() < 1e-12);
    assert_eq!(got.ce_term, Some(got.total));
}

#[test]
fn ce_without_labels_is_contract_error() {
    let state = ModelState::init(tiny_config(ObjectiveKind::Ce), 3).unwrap();
    let mut b = batch(&mut Rng::new(4), 2, 6, 3);
    b.labels = None;
    assert!(matches!(ce_loss(&b, &state), Err(LabError::Contract(_))));
}

#[test]
fn all_equal_similarities_give_ln_m_plus_one() {
    let mut rng = Rng::new(5);
    let q0 = unit_rows(&mut rng, 1, 8);
    let m = 511;
    // positive and every negative coincide with the query
    let neg = Tensor::from_vec(vec![m, 8], q0.row(0).repeat(m)).unwrap();
    let v = selfsup_value(&q0, &q0, &neg, 0.07);
    assert!((v - 512f64.ln()).abs() < 1e-9, "{v}");
}

#[test]
fn saturated_positive_goes_to_zero() {
    let q = Tensor::from_rows(&[vec![1.0, 0.0, 0.0]]).unwrap();
    let neg = Tensor::from_rows(&[vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0], vec![0.0, -1.0, 0.0]]).unwrap();
    assert!(selfsup_value(&q, &q, &neg, 0.01) < 1e-6);
}

#[test]
fn selfsup_matches_direct_summation() {
    let mut rng = Rng::new(6);
    let (b, m, d, tau) = (2, 4, 5, 0.07);
    let q = unit_rows(&mut rng, b, d);
    let pos = unit_rows(&mut rng, b, d);
    let neg = unit_rows(&mut rng, m, d);
    let mut oracle = 0.0;
    for i in 0..b {
        let p = (dot(q.row(i), pos.row(i)) / tau).exp();
        let mut den = p;
        for j in 0..m {
            den += (dot(q.row(i), neg.row(j)) / tau).exp();
        }
        oracle += -(p / den).ln() / b as f64;
    }
    assert!((selfsup_value(&q, &pos, &neg, tau) - oracle).abs() < 1e-10);
}

#[test]
fn supcon_single_positive_equals_selfsup() {
    let mut rng = Rng::new(7);
    for _ in 0..20 {
        let (m, d, tau) = (6, 4, 0.5);
        let q = unit_rows(&mut rng, 1, d);
        let pos = unit_rows(&mut rng, 1, d);
        let neg = unit_rows(&mut rng, m, d);
        let mut keys = pos.data().to_vec();
        keys.extend_from_slice(neg.data());
        let keys = Tensor::from_vec(vec![m + 1, d], keys).unwrap();
        let labels: Vec<i64> = (0..=m as i64).collect();
        let s = supcon_value(&q, &[0], &keys, &labels, tau, SupConMode::Mean).unwrap();
        assert!((s - selfsup_value(&q, &pos, &neg, tau)).abs() < 1e-10);
    }
}

#[test]
fn supcon_uniform_case_is_ln_m_for_any_positive_count() {
    let mut rng = Rng::new(8);
    let q = unit_rows(&mut rng, 1, 6);
    let m = 12;
    let keys = Tensor::from_vec(vec![m, 6], q.row(0).repeat(m)).unwrap();
    for p in 1..=m {
        let labels: Vec<i64> = (0..m).map(|j| if j < p { 0 } else { 1 }).collect();
        let v = supcon_value(&q, &[0], &keys, &labels, 0.07, SupConMode::Mean).unwrap();
        assert!((v - (m as f64).ln()).abs() < 1e-9);
        let s = supcon_value(&q, &[0], &keys, &labels, 0.07, SupConMode::Sum).unwrap();
        assert!((s - p as f64 * (m as f64).ln()).abs() < 1e-9);
    }
}

#[test]
fn supcon_matches_direct_summation() {
    let mut rng = Rng::new(9);
    let (d, tau) = (5, 0.07);
    let q = unit_rows(&mut rng, 2, d);
    let keys = unit_rows(&mut rng, 6, d);
    let ql = [0usize, 1];
    let kl = [0i64, 1, 1, 0, 1, 1];
    for mode in [SupConMode::Mean, SupConMode::Sum] {
        let mut oracle = 0.0;
        for i in 0..2 {
            let den: f64 = (0..6).map(|j| (dot(q.row(i), keys.row(j)) / tau).exp()).sum();
            let pos: Vec<usize> = (0..6).filter(|&j| kl[j] == ql[i] as i64).collect();
            let mut term = 0.0;
            for &j in &pos {
                term += -((dot(q.row(i), keys.row(j)) / tau).exp() / den).ln();
            }
            if mode == SupConMode::Mean {
                term /= pos.len() as f64;
            }
            oracle += term / 2.0;
        }
        let got = supcon_value(&q, &ql, &keys, &kl, tau, mode).unwrap();
        assert!((got - oracle).abs() < 1e-10, "{mode:?}");
    }
}

#[test]
fn supcon_without_positives_is_none() {
    let mut rng = Rng::new(10);
    let q = unit_rows(&mut rng, 2, 3);
    let keys = unit_rows(&mut rng, 4, 3);
    assert_eq!(supcon_value(&q, &[0, 0], &keys, &[1, 2, 1, -1], 0.1, SupConMode::Mean), None);
    // queries without positives are excluded from the average
    let partial = supcon_value(&q, &[0, 1], &keys, &[1, 2, 1, -1], 0.1, SupConMode::Mean).unwrap();
    let only = supcon_value(&Tensor::from_vec(vec![1, 3], q.row(1).to_vec()).unwrap(), &[1], &keys, &[1, 2, 1, -1], 0.1, SupConMode::Mean)
        .unwrap();
    assert!((partial - only).abs() < 1e-12);
}

#[test]
fn temperature_scaling_is_consistent() {
    let mut rng = Rng::new(11);
    let q = unit_rows(&mut rng, 3, 4);
    let pos = unit_rows(&mut rng, 3, 4);
    let neg = unit_rows(&mut rng, 7, 4);
    let kl: Vec<i64> = (0..7).map(|j| j % 2).collect();
    for c in [0.5, 3.0, 10.0] {
        let scaled = Tensor::from_vec(vec![3, 4], q.data().iter().map(|v| v * c).collect()).unwrap();
        let a = selfsup_value(&q, &pos, &neg, 0.07);
        let b = selfsup_value(&scaled, &pos, &neg, 0.07 * c);
        assert!((a - b).abs() < 1e-10);
        let a = supcon_value(&q, &[0, 1, 0], &neg, &kl, 0.2, SupConMode::Mean).unwrap();
        let b = supcon_value(&scaled, &[0, 1, 0], &neg, &kl, 0.2 * c, SupConMode::Mean).unwrap();
        assert!((a - b).abs() < 1e-10);
    }
}

#[test]
fn selfsup_invariant_to_queue_order() {
    let mut rng = Rng::new(12);
    let q = unit_rows(&mut rng, 3, 4);
    let pos = unit_rows(&mut rng, 3, 4);
    let neg = unit_rows(&mut rng, 9, 4);
    let base = selfsup_value(&q, &pos, &neg, 0.07);
    for _ in 0..10 {
        let perm = rng.permutation(9);
        let shuffled = neg.select_rows(&perm);
        assert!((selfsup_value(&q, &pos, &shuffled, 0.07) - base).abs() < 1e-12);
    }
}

proptest! {
    #[test]
    fn losses_are_finite_and_non_negative(seed in 0u64..10_000, b in 1usize..5, m in 1usize..17, tau_pick in 0usize..3) {
        let tau = [0.07, 0.5, 1.0][tau_pick];
        let mut rng = Rng::new(seed);
        let q = unit_rows(&mut rng, b, 4);
        let pos = unit_rows(&mut rng, b, 4);
        let neg = unit_rows(&mut rng, m, 4);
        let s = selfsup_value(&q, &pos, &neg, tau);
        prop_assert!(s.is_finite() && s >= 0.0);
        let ql: Vec<usize> = (0..b).map(|_| rng.below(3)).collect();
        let kl: Vec<i64> = (0..m).map(|_| rng.below(3) as i64).collect();
        if let Some(v) = supcon_value(&q, &ql, &neg, &kl, tau, SupConMode::Mean) {
            prop_assert!(v.is_finite() && v >= 0.0);
        }
    }
}

// ── model-level behavior ────────────────────────────────────────────────────

#[test]
fn empty_queue_asks_for_warmup() {
    let state = ModelState::init(tiny_config(ObjectiveKind::SelfSupCon), 1).unwrap();
    let b = batch(&mut Rng::new(1), 2, 6, 3);
    let mut tape = Tape::new();
    let err = build_objective(&mut tape, &b, &state).unwrap_err();
    assert!(matches!(err, LabError::Contract(ref m) if m.contains("warmup_fill")), "{err}");
}

#[test]
fn key_path_and_queues_untouched_by_backward() {
    for kind in ObjectiveKind::ALL.into_iter().filter(|k| k.needs_key_encoder()) {
        let mut state = ModelState::init(tiny_config(kind), 2).unwrap();
        let mut rng = Rng::new(3);
        fill_queues(&mut state, &mut rng, 4);
        let key_before = state.key.clone();
        let ss_before = state.selfsup_queue.clone();
        let sc_before = state.supcon_queue.clone();
        let b = batch(&mut rng, 3, 6, 3);
        let mut tape = Tape::new();
        let obj = build_objective(&mut tape, &b, &state).unwrap();
        let g = tape.backward(obj.total).unwrap();
        state.query.store_grads(&obj.vars, &g);
        assert_eq!(state.key, key_before);
        assert_eq!(state.selfsup_queue, ss_before);
        assert_eq!(state.supcon_queue, sc_before);
        let written = obj.commit(&mut state).map(|_| ());
        written.unwrap();
        if let Some(q) = &state.selfsup_queue {
            assert_eq!(q.filled(), 4 + 3);
        }
        if let Some(q) = &state.supcon_queue {
            assert_eq!(q.filled(), 4 + 3);
        }
    }
}

#[test]
fn breakdown_terms_add_up() {
    for kind in ObjectiveKind::ALL {
        let mut cfg = tiny_config(kind);
        cfg.alpha = 2.0;
        cfg.supcon_selfsup_weight = Some(0.7);
        let mut state = ModelState::init(cfg, 4).unwrap();
        let mut rng = Rng::new(5);
        fill_queues(&mut state, &mut rng, 8);
        let b = batch(&mut rng, 4, 6, 3);
        let mut tape = Tape::new();
        let out = build_objective(&mut tape, &b, &state).unwrap().breakdown;
        let terms = [out.ce_term, out.selfsup_term, out.supcon_term].iter().filter(|t| t.is_some()).count();
        let expected = match kind {
            ObjectiveKind::Ce => out.ce_term.unwrap(),
            ObjectiveKind::SelfSupCon => out.selfsup_term.unwrap(),
            ObjectiveKind::SupCon => out.supcon_term.unwrap(),
            ObjectiveKind::CeSelfSupCon => {
                assert_eq!(out.alpha, 2.0);
                out.ce_term.unwrap() + 2.0 * out.selfsup_term.unwrap()
            }
            ObjectiveKind::SupConSelfSupCon => {
                assert_eq!(out.alpha, 0.7);
                out.supcon_term.unwrap() + 0.7 * out.selfsup_term.unwrap()
            }
        };
        assert_eq!(terms, if kind.is_joint() { 2 } else { 1 });
        assert!((out.total - expected).abs() < 1e-12, "{kind}");
    }
}

#[test]
fn zero_alpha_joint_is_exactly_ce() {
    let mut cfg = tiny_config(ObjectiveKind::CeSelfSupCon);
    cfg.alpha = 0.0;
    let mut state = ModelState::init(cfg, 6).unwrap();
    let mut rng = Rng::new(7);
    fill_queues(&mut state, &mut rng, 5);
    let b = batch(&mut rng, 3, 6, 3);
    let (joint, total) = grads_of(&state, &b, Terms::of(ObjectiveKind::CeSelfSupCon));
    let (ce, ce_total) = grads_of(&state, &b, Terms { ce: true, selfsup: false, supcon: false });
    assert_eq!(total, ce_total);
    for (name, g) in &ce {
        let j = &joint.iter().find(|(n, _)| n == name).unwrap().1;
        assert_eq!(g, j, "{name}");
    }
}

#[test]
fn negative_alpha_is_rejected() {
    let mut cfg = tiny_config(ObjectiveKind::CeSelfSupCon);
    cfg.alpha = -1.0;
    let mut state = ModelState::init(tiny_config(ObjectiveKind::CeSelfSupCon), 6).unwrap();
    state.config = cfg;
    let mut rng = Rng::new(7);
    fill_queues(&mut state, &mut rng, 5);
    let b = batch(&mut rng, 2, 6, 3);
    assert!(matches!(joint_loss(&b, &mut state), Err(LabError::Contract(_))));
}

#[test]
fn joint_gradient_is_sum_of_term_gradients() {
    for kind in [ObjectiveKind::CeSelfSupCon, ObjectiveKind::SupConSelfSupCon] {
        let mut cfg = tiny_config(kind);
        cfg.alpha = 1.5;
        let mut state = ModelState::init(cfg, 8).unwrap();
        let mut rng = Rng::new(9);
        fill_queues(&mut state, &mut rng, 7);
        let b = batch(&mut rng, 4, 6, 3);
        let w = state.config.selfsup_weight();
        let (joint, _) = grads_of(&state, &b, Terms::of(kind));
        let first = Terms { ce: kind == ObjectiveKind::CeSelfSupCon, selfsup: false, supcon: kind == ObjectiveKind::SupConSelfSupCon };
        let (a, _) = grads_of(&state, &b, first);
        let (s, _) = grads_of(&state, &b, Terms { ce: false, selfsup: true, supcon: false });
        for (name, g) in &joint {
            let ga = &a.iter().find(|(n, _)| n == name).unwrap().1;
            let gs = &s.iter().find(|(n, _)| n == name).unwrap().1;
            for i in 0..g.len() {
                assert!((g[i] - (ga[i] + w * gs[i])).abs() < 1e-10, "{kind} {name}");
            }
        }
    }
}

#[test]
fn model_level_supcon_singleton_matches_selfsup() {
    // B=1, both queues hold the same keys with labels different from the
    // query, and both heads share weights: the supervised contrast set is
    // [fresh key, queue keys], exactly the momentum-contrast geometry.
    let mut state = ModelState::init(tiny_config(ObjectiveKind::SupConSelfSupCon), 10).unwrap();
    let head = state.query.selfsup_head.clone();
    state.query.supcon_head = head.clone();
    let key = state.key.as_mut().unwrap();
    key.supcon_head = key.selfsup_head.clone();
    let mut rng = Rng::new(11);
    let keys = unit_rows(&mut rng, 6, 3);
    state.selfsup_queue.as_mut().unwrap().enqueue(&keys, None).unwrap();
    state.supcon_queue.as_mut().unwrap().enqueue(&keys, Some(&[1, 2, 1, 2, 1, 2])).unwrap();
    let mut b = batch(&mut rng, 1, 6, 3);
    b.labels = Some(vec![0]);
    let mut tape = Tape::new();
    let out = build_objective(&mut tape, &b, &state).unwrap().breakdown;
    assert!((out.supcon_term.unwrap() - out.selfsup_term.unwrap()).abs() < 1e-10);
}

#[test]
fn model_gradients_match_finite_differences() {
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (t, kind) in ObjectiveKind::ALL.into_iter().cycle().take(10).enumerate() {
        let mut state = ModelState::init(tiny_config(kind), 100 + t as u64).unwrap();
        let mut rng = Rng::new(200 + t as u64);
        fill_queues(&mut state, &mut rng, 5);
        let b = batch(&mut rng, 3, 6, 3);
        let (analytic, _) = grads_of(&state, &b, Terms::of(kind));
        let value = |s: &ModelState| {
            let mut tape = Tape::new();
            build_objective(&mut tape, &b, s).unwrap().breakdown.total
        };
        for (name, g) in &analytic {
            for i in 0..g.len() {
                let mut plus = state.clone();
                let mut minus = state.clone();
                bump(&mut plus, name, i, h);
                bump(&mut minus, name, i, -h);
                let numeric = (value(&plus) - value(&minus)) / (2.0 * h);
                let err = (g[i] - numeric).abs() / (g[i].abs() + numeric.abs()).max(1e-3);
                worst = worst.max(err);
            }
        }
    }
    assert!(worst < 1e-4, "worst relative error {worst}");
}

fn bump(state: &mut ModelState, name: &str, i: usize, h: f64) {
    for (n, p) in state.query.named_params_mut() {
        if n == name {
            p.data_mut()[i] += h;
        }
    }
}

// ── training loop ───────────────────────────────────────────────────────────

fn toy_data(n: usize) -> crate::data::Dataset {
    generate_domain(&DomainSpec::shapes("toy", 2, SplitCounts { train: n, val: 0, test: 0 }, 1)).unwrap()
}

fn toy_config(kind: ObjectiveKind) -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig { input_dim: 256, stage_widths: vec![16, 8] },
        projection_hidden: 8,
        embed_dim: 4,
        queue_size: 16,
        ..ModelConfig::new(kind, 2)
    }
}

#[test]
fn zero_lr_keeps_parameters_and_rotates_queue() {
    let ds = toy_data(12);
    let set = TrainingSet { images: &ds.images, labels: &ds.labels, side: 16 };
    let mut state = ModelState::init(toy_config(ObjectiveKind::SelfSupCon), 3).unwrap();
    let query_before = state.query.clone();
    let mut opt = Sgd::new(SgdConfig::default()).unwrap();
    let cfg = TrainConfig { batch_size: 4, ..TrainConfig::default() };
    train_epoch(&mut state, set, &mut opt, &Schedule::Constant { base: 0.0 }, 0, &cfg).unwrap();
    assert_eq!(state.query, query_before);
    let q = state.selfsup_queue.as_ref().unwrap();
    // warmup fills 12, then three steps of 4 wrap the 16-slot ring
    assert_eq!(q.filled(), 16);
    assert_eq!(q.write_pointer(), (12 + 12) % 16);
    assert_eq!(state.epoch, 1);
}

#[test]
fn single_step_matches_hand_unroll() {
    let ds = toy_data(6);
    let set = TrainingSet { images: &ds.images, labels: &ds.labels, side: 16 };
    let mut state = ModelState::init(toy_config(ObjectiveKind::Ce), 4).unwrap();
    let start = state.clone();
    let mut opt = Sgd::new(SgdConfig { momentum: 0.9, weight_decay: 1e-3 }).unwrap();
    let cfg = TrainConfig { batch_size: 6, augmentation: AugmentationRegime::None };
    let lr = 0.05;
    train_epoch(&mut state, set, &mut opt, &Schedule::Constant { base: lr }, 0, &cfg).unwrap();

    let b = AugmentedBatch { view1: ds.images.clone(), view2: None, labels: Some(ds.labels.clone()) };
    let (grads, _) = grads_of(&start, &b, Terms::of(ObjectiveKind::Ce));
    let after: Vec<(String, Tensor)> = state.query.named_params().into_iter().map(|(n, t)| (n, t.clone())).collect();
    for (name, p0) in start.query.named_params() {
        let g = &grads.iter().find(|(n, _)| *n == name).unwrap().1;
        let p1 = &after.iter().find(|(n, _)| *n == name).unwrap().1;
        for i in 0..p0.len() {
            let expected = p0.data()[i] - lr * (g[i] + 1e-3 * p0.data()[i]);
            assert!((p1.data()[i] - expected).abs() < 1e-12, "{name}[{i}]");
        }
    }
}

#[test]
fn ce_loss_decreases_on_separable_toy_set() {
    let ds = toy_data(64);
    let set = TrainingSet { images: &ds.images, labels: &ds.labels, side: 16 };
    let mut state = ModelState::init(toy_config(ObjectiveKind::Ce), 5).unwrap();
    let mut opt = Sgd::new(SgdConfig::default()).unwrap();
    let cfg = TrainConfig { batch_size: 16, augmentation: AugmentationRegime::None };
    let schedule = Schedule::Constant { base: 0.05 };
    let losses: Vec<f64> = (0..5).map(|e| train_epoch(&mut state, set, &mut opt, &schedule, e, &cfg).unwrap().mean_loss).collect();
    assert!(losses[4] < losses[0], "{losses:?}");
}

#[test]
fn training_is_deterministic_for_every_objective() {
    let ds = toy_data(16);
    let sub = ds.subset(Split::Train);
    let set = TrainingSet { images: &sub.images, labels: &sub.labels, side: 16 };
    for kind in ObjectiveKind::ALL {
        let run = || {
            let mut state = ModelState::init(toy_config(kind), 6).unwrap();
            let mut opt = Sgd::new(SgdConfig::default()).unwrap();
            let cfg = TrainConfig { batch_size: 8, ..TrainConfig::default() };
            let schedule = Schedule::CosineWarmup { base: 0.05, total: 2, warmup: 1 };
            let m: Vec<EpochMetrics> = (0..2).map(|e| train_epoch(&mut state, set, &mut opt, &schedule, e, &cfg).unwrap()).collect();
            (state, m)
        };
        let (a, ma) = run();
        let (b, mb) = run();
        assert_eq!(a, b, "{kind}");
        assert_eq!(ma, mb);
        assert!(ma.iter().all(|m| m.mean_loss.is_finite()));
    }
}

#[test]
fn nan_loss_aborts_with_diagnostics() {
    let ds = toy_data(8);
    let set = TrainingSet { images: &ds.images, labels: &ds.labels, side: 16 };
    let mut state = ModelState::init(toy_config(ObjectiveKind::Ce), 7).unwrap();
    state.query.encoder.stages[0].weight.data_mut()[0] = f64::NAN;
    let mut opt = Sgd::new(SgdConfig::default()).unwrap();
    let err = train_epoch(&mut state, set, &mut opt, &Schedule::Constant { base: 0.1 }, 3, &TrainConfig::default()).unwrap_err();
    assert!(matches!(err, LabError::Numerical(ref m) if m.contains("epoch 3 step 0") && m.contains("lr 0.1")), "{err}");
}
