use super::finetune::random_head_accuracy;
use super::*;
use crate::data::{generate_domain, DomainSpec, EpisodeSpec, Split, SplitCounts};
use crate::model::{save_checkpoint, EncoderConfig, ModelConfig, ObjectiveKind};
use crate::numerics::softmax_rows;

fn gaussian(rng: &mut Rng, n: usize, d: usize) -> Tensor {
    Tensor::from_vec(vec![n, d], (0..n * d).map(|_| rng.normal()).collect()).unwrap()
}

fn quick_probe() -> ProbeConfig {
    ProbeConfig {
        epochs: 12,
        milestones: vec![6, 9],
        lrs: vec![0.01, 0.1],
        small_batch_sizes: vec![16],
        weight_decays: vec![0.0, 1e-4],
        ..ProbeConfig::default()
    }
}

fn small_state(kind: ObjectiveKind, k: usize, seed: u64) -> ModelState {
    let cfg = ModelConfig { encoder: EncoderConfig { input_dim: 256, stage_widths: vec![32, 16] }, ..ModelConfig::new(kind, k) };
    ModelState::init(cfg, seed).unwrap()
}

fn small_domain(seed: u64) -> crate::data::Dataset {
    let spec = DomainSpec { counts: SplitCounts { train: 60, val: 12, test: 60 }, ..DomainSpec::far_texture(seed) };
    generate_domain(&spec).unwrap()
}

#[test]
fn standardizer_statistics() {
    let mut rng = Rng::new(1);
    let mut x = gaussian(&mut rng, 50, 4);
    for i in 0..50 {
        x.data_mut()[i * 4] = x.data()[i * 4] * 7.0 + 3.0;
        x.data_mut()[i * 4 + 3] = 2.5;
    }
    let s = FeatureStandardizer::fit(&x).unwrap();
    let z = s.transform(&x).unwrap();
    for j in 0..3 {
        let col: Vec<f64> = (0..50).map(|i| z.get2(i, j)).collect();
        let mean = col.iter().sum::<f64>() / 50.0;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 50.0;
        assert!(mean.abs() < 1e-9 && (var - 1.0).abs() < 1e-6);
    }
    assert!((0..50).all(|i| z.get2(i, 3) == 0.0));
    assert_eq!(s.scale[3], 1.0);
    // other data uses the stored statistics, not its own
    let y = gaussian(&mut rng, 3, 4);
    let zy = s.transform(&y).unwrap();
    for i in 0..3 {
        for j in 0..4 {
            assert_eq!(zy.get2(i, j), (y.get2(i, j) - s.mean[j]) / s.scale[j]);
        }
    }
}

#[test]
fn feature_extraction_consistency() {
    let state = small_state(ObjectiveKind::Ce, 6, 2);
    let ds = small_domain(3);
    let x = ds.images.select_rows(&[0, 5, 9]);
    let a = extract_features(&state, &x).unwrap();
    assert_eq!(a, extract_features(&state, &x).unwrap());
    assert_eq!(&a, state.forward_stages(&x).unwrap().last().unwrap());

    let mut zero = state.clone();
    for (_, p) in zero.query.named_params_mut() {
        *p = Tensor::zeros(p.shape());
    }
    assert!(extract_features(&zero, &x).unwrap().data().iter().all(|&v| v == 0.0));

    let wrong = Tensor::zeros(&[2, 100]);
    assert!(matches!(extract_features(&state, &wrong), Err(LabError::Checkpoint(_))));
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(extract_features_from(&dir.path().join("none.json"), &x), Err(LabError::Missing(_))));
    let path = dir.path().join("m.json");
    save_checkpoint(&path, &state, None).unwrap();
    assert_eq!(extract_features_from(&path, &x).unwrap(), a);
}

#[test]
fn stratified_split_is_a_balanced_partition() {
    let labels: Vec<usize> = (0..100).map(|i| i % 4).collect();
    let (a, b) = stratified_split(&labels, 0.3, &mut Rng::new(4));
    assert_eq!(a.len() + b.len(), 100);
    assert!(a.iter().all(|i| !b.contains(i)));
    for c in 0..4 {
        assert_eq!(b.iter().filter(|&&i| labels[i] == c).count(), 8);
    }
    // a single-class held-out part falls back to the training part
    let (a, b) = stratified_split(&[0, 0, 0, 1], 0.3, &mut Rng::new(0));
    assert_eq!(a, b);
}

#[test]
fn probe_separates_separable_features() {
    let mut rng = Rng::new(5);
    let mut x = gaussian(&mut rng, 80, 3);
    let labels: Vec<usize> = (0..80).map(|i| i % 2).collect();
    for i in 0..80 {
        x.data_mut()[i * 3] += if labels[i] == 1 { 6.0 } else { -6.0 };
    }
    let data = LabeledSet { features: x, labels };
    let probe = linear_probe(&data.select(&(0..60).collect::<Vec<_>>()), 2, &quick_probe(), &Rng::new(1)).unwrap();
    assert_eq!(probe.score(&data.select(&(60..80).collect::<Vec<_>>())).unwrap(), 1.0);
}

#[test]
fn probe_on_permuted_labels_is_at_chance() {
    let mut rng = Rng::new(6);
    let k = 4;
    let train = LabeledSet { features: gaussian(&mut rng, 200, 5), labels: (0..200).map(|_| rng.below(k)).collect() };
    let test = LabeledSet { features: gaussian(&mut rng, 400, 5), labels: (0..400).map(|_| rng.below(k)).collect() };
    let acc = linear_probe(&train, k, &quick_probe(), &Rng::new(2)).unwrap().score(&test).unwrap();
    let p = 1.0 / k as f64;
    let sigma = (p * (1.0 - p) / 400.0).sqrt();
    assert!((acc - p).abs() < 3.0 * sigma, "{acc}");
}

#[test]
fn grid_selection_matches_exhaustive_rerun() {
    let mut rng = Rng::new(7);
    let k = 3;
    let mut x = gaussian(&mut rng, 90, 4);
    let labels: Vec<usize> = (0..90).map(|i| i % k).collect();
    for i in 0..90 {
        x.data_mut()[i * 4 + labels[i]] += 1.2;
    }
    let data = LabeledSet { features: x, labels };
    let cfg = quick_probe();
    let root = Rng::new(3);
    let probe = linear_probe(&data, k, &cfg, &root).unwrap();

    let (fit_idx, val_idx) = stratified_split(&data.labels, cfg.val_fraction, &mut root.split_named("split"));
    let fit = data.select(&fit_idx);
    let val = data.select(&val_idx);
    let std = FeatureStandardizer::fit(&fit.features).unwrap();
    let fit_std = LabeledSet { features: std.transform(&fit.features).unwrap(), labels: fit.labels.clone() };
    let mut best: Option<(f64, HyperParams)> = None;
    for (i, hp) in cfg.grid(data.len()).into_iter().enumerate() {
        let head = train_linear_head(&fit_std, k, hp, &cfg, &mut root.split_named("cell").split(i as u64)).unwrap();
        let acc = accuracy(&head_predict(&head, &std.transform(&val.features).unwrap()).unwrap(), &val.labels);
        assert_eq!(probe.grid[i], GridCell { params: hp, val_accuracy: acc });
        if best.is_none_or(|(b, _)| acc > b) {
            best = Some((acc, hp));
        }
    }
    assert_eq!(probe.best, best.unwrap().1);
}

#[test]
fn probe_config_validation() {
    let bad = ProbeConfig { milestones: vec![60], lrs: vec![], val_fraction: 1.5, ..ProbeConfig::default() };
    let v = bad.violations();
    assert_eq!(v.len(), 3, "{v:?}");
    assert_eq!(ProbeConfig::default().grid(100).len(), 18);
    assert_eq!(ProbeConfig::default().grid(100)[0].batch_size, 16);
    assert_eq!(ProbeConfig::default().grid(1000)[0].batch_size, 32);
}

#[test]
fn zero_lr_finetune_is_the_random_head() {
    let state = small_state(ObjectiveKind::SelfSupCon, 6, 8);
    let ds = small_domain(9);
    let train = LabeledSet { features: ds.subset(Split::Train).images, labels: ds.subset(Split::Train).labels };
    let test = LabeledSet { features: ds.subset(Split::Test).images, labels: ds.subset(Split::Test).labels };
    let cfg = ProbeConfig {
        epochs: 2,
        milestones: vec![1],
        lrs: vec![0.0],
        small_batch_sizes: vec![16],
        weight_decays: vec![0.0],
        ..ProbeConfig::default()
    };
    let rng = Rng::new(10);
    let out = finetune(&state, &train, &test, 6, &cfg, &rng, None).unwrap();
    assert_eq!(out.test_accuracy, random_head_accuracy(&state, &train, &test, 6, &rng).unwrap());
}

#[test]
fn finetune_learns_and_respects_cap() {
    let state = small_state(ObjectiveKind::Ce, 6, 11);
    let ds = small_domain(12);
    let train = LabeledSet { features: ds.subset(Split::Train).images, labels: ds.subset(Split::Train).labels };
    let test = LabeledSet { features: ds.subset(Split::Test).images, labels: ds.subset(Split::Test).labels };
    let cfg = ProbeConfig {
        epochs: 4,
        milestones: vec![3],
        lrs: vec![0.05],
        small_batch_sizes: vec![16],
        weight_decays: vec![0.0],
        ..ProbeConfig::default()
    };
    let out = finetune(&state, &train, &test, 6, &cfg, &Rng::new(1), Some(30)).unwrap();
    assert_eq!(out.train_size, 30);
    assert!((0.0..=1.0).contains(&out.test_accuracy));
    assert!(matches!(finetune(&state, &train, &test, 6, &cfg, &Rng::new(1), Some(5)), Err(LabError::Config(_))));

    let idx = balanced_cap(&train.labels, 6, 6, &mut Rng::new(2)).unwrap();
    let mut classes: Vec<usize> = idx.iter().map(|&i| train.labels[i]).collect();
    classes.sort_unstable();
    assert_eq!(classes, vec![0, 1, 2, 3, 4, 5]);
    let idx = balanced_cap(&train.labels, 6, 14, &mut Rng::new(2)).unwrap();
    let counts: Vec<usize> = (0..6).map(|c| idx.iter().filter(|&&i| train.labels[i] == c).count()).collect();
    assert_eq!(counts, vec![3, 3, 2, 2, 2, 2]);
}

#[test]
fn diverging_finetune_cells_are_dropped() {
    let state = small_state(ObjectiveKind::Ce, 6, 11);
    let ds = small_domain(12);
    let train = LabeledSet { features: ds.subset(Split::Train).images, labels: ds.subset(Split::Train).labels };
    let test = LabeledSet { features: ds.subset(Split::Test).images, labels: ds.subset(Split::Test).labels };
    let cfg = ProbeConfig {
        epochs: 2,
        milestones: vec![1],
        lrs: vec![0.05, 1e300],
        small_batch_sizes: vec![16],
        weight_decays: vec![0.0],
        ..ProbeConfig::default()
    };
    let out = finetune(&state, &train, &test, 6, &cfg, &Rng::new(1), None).unwrap();
    assert_eq!(out.grid.len(), 1);
    assert_eq!(out.best.lr, 0.05);
    let all_bad = ProbeConfig { lrs: vec![1e300], ..cfg };
    assert!(matches!(finetune(&state, &train, &test, 6, &all_bad, &Rng::new(1), None), Err(LabError::Numerical(_))));
}

/// Gradient of the penalized logistic objective, computed independently.
fn logistic_grad_norm(fit: &LogisticFit, x: &Tensor, y: &[usize], k: usize, lambda: f64) -> f64 {
    let n = x.rows();
    let mut logits = vec![0.0; n * k];
    for i in 0..n {
        for c in 0..k {
            logits[i * k + c] = fit.bias[c] + (0..x.cols()).map(|a| x.get2(i, a) * fit.weight.get2(a, c)).sum::<f64>();
        }
    }
    let p = softmax_rows(&logits, k);
    let mut total = 0.0;
    for a in 0..=x.cols() {
        for c in 0..k {
            let mut g = 0.0;
            for i in 0..n {
                let xa = if a == x.cols() { 1.0 } else { x.get2(i, a) };
                g += xa * (p[i * k + c] - f64::from(u8::from(y[i] == c)));
            }
            g /= n as f64;
            if a < x.cols() {
                g += lambda * fit.weight.get2(a, c);
            }
            total += g * g;
        }
    }
    total.sqrt()
}

#[test]
fn logistic_fit_reaches_stationarity_and_memorizes() {
    let mut rng = Rng::new(13);
    let x = gaussian(&mut rng, 10, 12);
    let y: Vec<usize> = (0..10).map(|i| i % 5).collect();
    let fit = fit_logistic(&x, &y, 5, 1e-2, 5000, 1e-8);
    assert!(logistic_grad_norm(&fit, &x, &y, 5, 1e-2) < 1e-7);
    // support == query: memorized
    let fit = fit_logistic(&x, &y, 5, 1e-4, 500, 1e-6);
    assert_eq!(accuracy(&fit.predict(&x), &y), 1.0);
}

#[test]
fn fewshot_on_random_features_is_chance_and_ci_shrinks() {
    let mut rng = Rng::new(14);
    let labels: Vec<usize> = (0..400).map(|i| i % 10).collect();
    let data = LabeledSet { features: gaussian(&mut rng, 400, 8), labels };
    let mut cis = Vec::new();
    for e in [50, 200, 800] {
        let spec = EpisodeSpec { ways: 5, shots: 5, queries: 15, episodes: e };
        let r = fewshot_on_features(&data, &spec, &Rng::new(15)).unwrap();
        assert_eq!(r.flagged, 0);
        assert!((0.0..=1.0).contains(&r.mean) && r.ci95 >= 0.0);
        if e == 800 {
            assert!((r.mean - 0.2).abs() < 3.0 * r.ci95.max(0.005), "{} ± {}", r.mean, r.ci95);
        }
        cis.push(r.ci95);
    }
    for w in cis.windows(2) {
        let ratio = w[0] / w[1];
        assert!((1.6..2.5).contains(&ratio), "ci ratio {ratio}");
    }
}

#[test]
fn fewshot_from_model_is_deterministic() {
    let state = small_state(ObjectiveKind::SupCon, 6, 16);
    let ds = small_domain(17);
    let test = ds.subset(Split::Test);
    let spec = EpisodeSpec { ways: 5, shots: 1, queries: 5, episodes: 20 };
    let a = fewshot_eval(&state, &test.images, &test.labels, &spec, &Rng::new(1)).unwrap();
    let b = fewshot_eval(&state, &test.images, &test.labels, &spec, &Rng::new(1)).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.accuracies.len(), 20);
}

#[test]
fn protocol_names_round_trip() {
    for p in Protocol::ALL {
        assert_eq!(p.name().parse::<Protocol>().unwrap(), p);
    }
    assert!(matches!("knn".parse::<Protocol>(), Err(LabError::Config(_))));
}

#[test]
fn checkpoint_sweep_replays_individual_runs() {
    let dir = tempfile::tempdir().unwrap();
    let ds = small_domain(18);
    let mut s1 = small_state(ObjectiveKind::Ce, 8, 19);
    s1.epoch = 3;
    let mut s0 = small_state(ObjectiveKind::Ce, 8, 20);
    s0.epoch = 1;
    save_checkpoint(&dir.path().join("epoch_3.json"), &s1, None).unwrap();
    std::fs::write(dir.path().join("notes.txt"), "x").unwrap();
    let settings = ProtocolSettings { probe: quick_probe(), ..ProtocolSettings::default() };

    save_checkpoint(&dir.path().join("epoch_1.json"), &s0, None).unwrap();
    let curve = checkpoint_sweep_eval(dir.path(), Protocol::Linear, std::slice::from_ref(&ds), &settings, 5).unwrap();
    assert_eq!(curve.iter().map(|c| c.epoch).collect::<Vec<_>>(), vec![1, 3]);
    for (point, state) in curve.iter().zip([&s0, &s1]) {
        let direct = evaluate_protocol(state, &ds, Protocol::Linear, &settings, 5).unwrap();
        assert_eq!(point.value, direct.value);
    }

    let single = tempfile::tempdir().unwrap();
    save_checkpoint(&single.path().join("epoch_7.json"), &s0, None).unwrap();
    assert_eq!(checkpoint_sweep_eval(single.path(), Protocol::Linear, std::slice::from_ref(&ds), &settings, 5).unwrap().len(), 1);
    let empty = tempfile::tempdir().unwrap();
    assert!(matches!(checkpoint_sweep_eval(empty.path(), Protocol::Linear, &[ds], &settings, 5), Err(LabError::Missing(_))));
}
