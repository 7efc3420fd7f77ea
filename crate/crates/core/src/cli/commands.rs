//! The five subcommands. Each writes under the output directory:
//!
//! ```text
//! <out>/config.json                         frozen, resolved config
//! <out>/records.jsonl                       metric store
//! <out>/checkpoints/<method>/seed_<s>/epoch_<N>.json
//! <out>/analysis/*.csv, analysis/embeddings/*
//! <out>/ablation/<axis>/<value>/<method>/seed_<s>/epoch_<N>.json
//! <out>/ablation/<axis>.csv
//! <out>/report/*
//! ```

use std::collections::BTreeMap;
use std::fmt::Write;
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rayon::prelude::*;

use super::config::{AblationAxis, AnalysisKind, CheckpointSelector, DomainRef, ExperimentConfig, MethodSpec};
use super::records::{MetricRecord, RecordStore};
use super::report::{write_report, ReportFiles, Stat};
use crate::analysis::{calibration, cka_stage_grid, class_separation, corruption_sweep, export_embeddings, pgd_attack, ScoringModel};
use crate::data::{generate_domain, Dataset, Split};
use crate::error::{LabError, Result};
use crate::evaluation::{
    checkpoint_epochs, checkpoint_sweep_eval, evaluate_protocol, extract_features, linear_probe, protocol_rng, LabeledSet, Protocol,
};
use crate::model::{load_checkpoint, save_checkpoint, ModelState, ObjectiveKind};
use crate::numerics::Sgd;
use crate::objectives::{train_epoch, TrainingSet};

pub fn checkpoint_dir(out: &Path, method: &str, seed: u64) -> PathBuf {
    out.join("checkpoints").join(method).join(format!("seed_{seed}"))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| LabError::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| LabError::io(path, e))
}

/// Writes the resolved config next to the results.
pub fn freeze_config(config: &ExperimentConfig, out: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(config).map_err(|e| LabError::Contract(format!("config serialization: {e}")))?;
    write_text(&out.join("config.json"), &(text + "\n"))
}

/// Highest-epoch checkpoint in `dir`.
pub fn final_checkpoint(dir: &Path) -> Result<(usize, PathBuf)> {
    checkpoint_epochs(dir)?.pop().ok_or_else(|| LabError::Missing(format!("no checkpoints in {}; run `lab pretrain` first", dir.display())))
}

fn load_state(path: &Path) -> Result<ModelState> {
    if !path.exists() {
        return Err(LabError::Missing(format!("checkpoint {}", path.display())));
    }
    Ok(load_checkpoint(path)?.state)
}

fn domain(r: &DomainRef, seed: u64) -> Result<Dataset> {
    generate_domain(&r.resolve(seed)?)
}

/// Trains one method from scratch, checkpointing at epoch 0, at every
/// epoch where `save` holds, and at the end. Stale `epoch_*.json` files in
/// `dir` are removed first.
fn pretrain_one(
    config: &ExperimentConfig,
    method: &MethodSpec,
    seed: u64,
    epochs: usize,
    dir: &Path,
    save: &(dyn Fn(usize) -> bool + Sync),
) -> Result<Vec<MetricRecord>> {
    fs::create_dir_all(dir).map_err(|e| LabError::io(dir, e))?;
    for (_, stale) in checkpoint_epochs(dir)? {
        fs::remove_file(&stale).map_err(|e| LabError::io(&stale, e))?;
    }
    let src = domain(&config.source, seed)?;
    let train = src.subset(Split::Train);
    let mut state = ModelState::init(method.model_config(&config.encoder, src.num_classes), seed)?;
    let mut optimizer = Sgd::new(config.pretrain.optimizer)?;
    let schedule = config.pretrain.schedule.schedule(epochs);
    let mut tc = config.pretrain.train.clone();
    if let Some(a) = method.augmentation {
        tc.augmentation = a;
    }
    let set = TrainingSet { images: &train.images, labels: &train.labels, side: src.side };
    let tag = method.tag();
    let ckpt = |e: usize| dir.join(format!("epoch_{e}.json"));
    save_checkpoint(&ckpt(0), &state, Some(&optimizer))?;
    let mut records = Vec::new();
    for e in 0..epochs {
        let m = train_epoch(&mut state, set, &mut optimizer, &schedule, e, &tc).map_err(|err| match err {
            LabError::Numerical(msg) => LabError::Numerical(format!("{tag} seed {seed}: {msg}")),
            other => other,
        })?;
        let rec = |metric: &str, v: f64| MetricRecord::new(&config.id, &tag, "pretrain", &src.id, seed, metric, v).at_epoch(e + 1);
        records.push(rec("loss", m.mean_loss));
        for (name, v) in [("ce_term", m.mean_ce), ("selfsup_term", m.mean_selfsup), ("supcon_term", m.mean_supcon)] {
            if let Some(v) = v {
                records.push(rec(name, v));
            }
        }
        if e + 1 == epochs || save(e + 1) {
            save_checkpoint(&ckpt(e + 1), &state, Some(&optimizer))?;
        }
    }
    info!("pretrained {tag} seed {seed}: {epochs} epochs");
    Ok(records)
}

fn jobs(config: &ExperimentConfig) -> Vec<(MethodSpec, u64)> {
    config.methods.iter().flat_map(|m| config.seeds.iter().map(move |&s| (m.clone(), s))).collect()
}

/// Pretrains every (method, seed); returns the number of records written.
pub fn cmd_pretrain(config: &ExperimentConfig, out: &Path) -> Result<usize> {
    freeze_config(config, out)?;
    let every = config.pretrain.checkpoint_every;
    let save = move |e: usize| every > 0 && e.is_multiple_of(every);
    let results: Vec<Vec<MetricRecord>> = jobs(config)
        .par_iter()
        .map(|(m, seed)| pretrain_one(config, m, *seed, config.pretrain.epochs, &checkpoint_dir(out, &m.tag(), *seed), &save))
        .collect::<Result<_>>()?;
    let records: Vec<MetricRecord> = results.into_iter().flatten().collect();
    RecordStore::new(out).upsert(&records)?;
    Ok(records.len())
}

fn score_records(
    config: &ExperimentConfig,
    method: &str,
    protocol: Protocol,
    domain: &str,
    seed: u64,
    value: f64,
    ci95: Option<f64>,
    flagged: Option<usize>,
) -> Vec<MetricRecord> {
    let rec = |metric: &str, v: f64| MetricRecord::new(&config.id, method, protocol.name(), domain, seed, metric, v);
    let mut out = vec![rec("accuracy", value)];
    if let Some(c) = ci95 {
        out.push(rec("ci95", c));
    }
    if let Some(f) = flagged {
        out.push(rec("flagged_episodes", f as f64));
    }
    out
}

fn targets(config: &ExperimentConfig, seed: u64) -> Result<Vec<Dataset>> {
    if config.targets.is_empty() {
        return Err(LabError::Config("no target domains configured".into()));
    }
    config.targets.iter().map(|t| domain(t, seed)).collect()
}

/// Scores every (method, seed) checkpoint on every target domain.
pub fn cmd_eval(config: &ExperimentConfig, out: &Path, protocols: &[Protocol]) -> Result<usize> {
    if protocols.is_empty() {
        return Err(LabError::Config("no protocols to run".into()));
    }
    let settings = &config.evaluation;
    let results: Vec<Vec<MetricRecord>> = jobs(config)
        .par_iter()
        .map(|(m, seed)| -> Result<Vec<MetricRecord>> {
            let tag = m.tag();
            let seed = *seed;
            let domains = targets(config, seed)?;
            let dir = checkpoint_dir(out, &tag, seed);
            let mut recs = Vec::new();
            match config.checkpoints {
                CheckpointSelector::Final => {
                    let (_, path) = final_checkpoint(&dir)?;
                    let state = load_state(&path)?;
                    for d in &domains {
                        for &p in protocols {
                            let s = evaluate_protocol(&state, d, p, settings, seed)?;
                            info!("{tag} seed {seed} {p} {}: {:.4}", d.id, s.value);
                            recs.extend(score_records(config, &tag, p, &d.id, seed, s.value, s.ci95, s.flagged));
                        }
                    }
                }
                CheckpointSelector::All => {
                    for &p in protocols {
                        for pt in checkpoint_sweep_eval(&dir, p, &domains, settings, seed)? {
                            recs.extend(
                                score_records(config, &tag, p, &pt.domain, seed, pt.value, pt.ci95, None)
                                    .into_iter()
                                    .map(|r| r.at_epoch(pt.epoch)),
                            );
                        }
                    }
                }
            }
            Ok(recs)
        })
        .collect::<Result<_>>()?;
    let records: Vec<MetricRecord> = results.into_iter().flatten().collect();
    RecordStore::new(out).upsert(&records)?;
    Ok(records.len())
}

fn split_rows(ds: &Dataset, splits: &[Split]) -> LabeledSet {
    let mut idx: Vec<usize> = splits.iter().flat_map(|&s| ds.indices(s)).collect();
    idx.sort_unstable();
    LabeledSet { features: ds.images.select_rows(&idx), labels: idx.iter().map(|&i| ds.labels[i]).collect() }
}

fn fmt_value(v: f64) -> String {
    format!("{v}")
}

/// Runs the requested analyses on the final checkpoints.
pub fn cmd_analyze(config: &ExperimentConfig, out: &Path, kinds: &[AnalysisKind]) -> Result<usize> {
    if kinds.is_empty() {
        return Err(LabError::Config("no analyses requested".into()));
    }
    let a = &config.analysis;
    let dref = config
        .domain_refs()
        .into_iter()
        .find(|d| d.id() == a.domain)
        .ok_or_else(|| LabError::Config(format!("analysis domain `{}` not configured", a.domain)))?;
    let adir = out.join("analysis");
    let mut records = Vec::new();
    for &seed in &config.seeds {
        let ds = domain(dref, seed)?;
        let test = split_rows(&ds, &[Split::Test]);
        let states: Vec<(String, ModelState)> = config
            .methods
            .iter()
            .map(|m| {
                let (_, path) = final_checkpoint(&checkpoint_dir(out, &m.tag(), seed))?;
                Ok((m.tag(), load_state(&path)?))
            })
            .collect::<Result<_>>()?;

        if kinds.contains(&AnalysisKind::Cka) {
            let acts: Vec<(String, Vec<_>)> =
                states.iter().map(|(t, s)| Ok((t.clone(), s.forward_stages(&test.features)?))).collect::<Result<_>>()?;
            let grids = cka_stage_grid(&acts)?;
            let mut within = String::from("method,stage_a,stage_b,cka\n");
            for (m, g) in grids.models.iter().zip(&grids.within) {
                for (i, row) in g.iter().enumerate() {
                    for (j, v) in row.iter().enumerate() {
                        let _ = writeln!(within, "{m},{},{},{v:.6}", i + 1, j + 1);
                        if i < j {
                            records.push(MetricRecord::new(&config.id, m, "cka", &ds.id, seed, &format!("within_{}_{}", i + 1, j + 1), *v));
                        }
                    }
                }
            }
            write_text(&adir.join(format!("cka_within_seed{seed}.csv")), &within)?;
            if grids.models.len() < 2 {
                warn!("across-model CKA needs at least 2 methods; skipped");
            } else {
                let mut across = String::from("stage,method_a,method_b,cka\n");
                for (s, g) in grids.across.iter().enumerate() {
                    for (i, row) in g.iter().enumerate() {
                        for (j, v) in row.iter().enumerate() {
                            let (ma, mb) = (&grids.models[i], &grids.models[j]);
                            let _ = writeln!(across, "{},{ma},{mb},{v:.6}", s + 1);
                            if i < j {
                                records.push(MetricRecord::new(
                                    &config.id,
                                    &format!("{ma}~{mb}"),
                                    "cka",
                                    &ds.id,
                                    seed,
                                    &format!("stage_{}", s + 1),
                                    *v,
                                ));
                            }
                        }
                    }
                }
                write_text(&adir.join(format!("cka_across_seed{seed}.csv")), &across)?;
            }
        }

        let per_method: Vec<Vec<MetricRecord>> =
            states.par_iter().map(|(tag, state)| analyze_one(config, &adir, tag, state, &ds, &test, seed, kinds)).collect::<Result<_>>()?;
        records.extend(per_method.into_iter().flatten());

        if kinds.contains(&AnalysisKind::Export) {
            let edir = adir.join("embeddings");
            for (tag, state) in &states {
                for d in config.domain_refs() {
                    let data = domain(d, seed)?;
                    export_embeddings(state, &data, &edir, &format!("{tag}_seed{seed}_{}", data.id))?;
                }
            }
        }
    }
    RecordStore::new(out).upsert(&records)?;
    Ok(records.len())
}

#[allow(clippy::too_many_arguments)]
fn analyze_one(
    config: &ExperimentConfig,
    adir: &Path,
    tag: &str,
    state: &ModelState,
    ds: &Dataset,
    test: &LabeledSet,
    seed: u64,
    kinds: &[AnalysisKind],
) -> Result<Vec<MetricRecord>> {
    let a = &config.analysis;
    let rec = |protocol: &str, metric: &str, v: f64| MetricRecord::new(&config.id, tag, protocol, &ds.id, seed, metric, v);
    let mut records = Vec::new();
    let needs_head = kinds.iter().any(|k| matches!(k, AnalysisKind::Calibration | AnalysisKind::Corruption | AnalysisKind::Pgd));
    let model = if needs_head {
        let train = split_rows(ds, &[Split::Train, Split::Val]);
        let feats = LabeledSet { features: extract_features(state, &train.features)?, labels: train.labels };
        let probe = linear_probe(&feats, ds.num_classes, &config.evaluation.probe, &protocol_rng(seed, &ds.id, Protocol::Linear))?;
        Some(ScoringModel::from_probe(state, &probe))
    } else {
        None
    };
    let name = |what: &str| adir.join(format!("{what}_{tag}_seed{seed}.csv"));
    for &kind in kinds {
        match (kind, &model) {
            (AnalysisKind::Calibration, Some(m)) => {
                let c = calibration(&m.logits(&test.features)?, &test.labels)?;
                records.push(rec("calibration", "ece", c.ece));
                records.push(rec("calibration", "nll", c.nll));
                let mut csv = String::from("bin,lower,upper,count,confidence,accuracy\n");
                for b in 0..c.bins.counts.len() {
                    let n = c.bins.counts.len() as f64;
                    let _ = writeln!(
                        csv,
                        "{},{:.6},{:.6},{},{:.6},{:.6}",
                        b + 1,
                        b as f64 / n,
                        (b + 1) as f64 / n,
                        c.bins.counts[b],
                        c.bins.confidence[b],
                        c.bins.accuracy[b]
                    );
                }
                write_text(&name("reliability"), &csv)?;
            }
            (AnalysisKind::Separation, _) => {
                let f = extract_features(state, &test.features)?;
                let s = class_separation(&f, &test.labels, a.inter_denominator)?;
                records.push(rec("separation", "r_intra", s.r_intra));
                records.push(rec("separation", "r_inter", s.r_inter));
            }
            (AnalysisKind::Corruption, Some(m)) => {
                let r = corruption_sweep(
                    m,
                    &test.features,
                    &test.labels,
                    ds.side,
                    &a.corruption_kinds,
                    &a.severities,
                    &a.severity_table,
                    seed,
                )?;
                records.push(rec("corruption", "clean_error", r.clean_error));
                records.push(rec("corruption", "mce", r.mce));
                let mut csv = String::from("corruption,severity,error\n");
                for c in &r.cells {
                    records.push(rec("corruption", &format!("error_{}_{}", c.kind, c.severity), c.error));
                    let _ = writeln!(csv, "{},{},{:.6}", c.kind, c.severity, c.error);
                }
                write_text(&name("corruption"), &csv)?;
            }
            (AnalysisKind::Pgd, Some(m)) => {
                let n = a.pgd_samples.min(test.len());
                let sub = test.select(&(0..n).collect::<Vec<_>>());
                let curve = pgd_attack(m, &sub.features, &sub.labels, &a.pgd_epsilons, &a.pgd)?;
                let mut csv = String::from("epsilon,accuracy,single_budget_accuracy\n");
                for p in &curve {
                    records.push(rec("pgd", &format!("accuracy_eps_{}", fmt_value(p.epsilon)), p.accuracy));
                    let _ = writeln!(csv, "{},{:.6},{:.6}", fmt_value(p.epsilon), p.accuracy, p.single_budget_accuracy);
                }
                write_text(&name("pgd"), &csv)?;
            }
            _ => {}
        }
    }
    Ok(records)
}

fn axis_values(config: &ExperimentConfig, axis: AblationAxis) -> Vec<String> {
    let ab = &config.ablation;
    match axis {
        AblationAxis::Alpha => ab.alpha.iter().map(|&v| fmt_value(v)).collect(),
        AblationAxis::QueueSize => ab.queue_size.iter().map(|v| v.to_string()).collect(),
        AblationAxis::Augmentation => ab
            .augmentation
            .iter()
            .map(|a| serde_json::to_value(a).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default())
            .collect(),
        AblationAxis::Epochs => ab.epochs.iter().map(|v| v.to_string()).collect(),
    }
}

fn ablation_method(config: &ExperimentConfig, axis: AblationAxis) -> MethodSpec {
    match (&config.ablation.method, axis) {
        (Some(m), _) => m.clone(),
        (None, AblationAxis::Alpha) => MethodSpec::new(ObjectiveKind::CeSelfSupCon),
        (None, _) => config.methods[0].clone(),
    }
}

/// Pretrain + evaluate per grid point and seed; records carry the axis tag.
/// The `epochs` axis trains once per seed to the largest value and scores
/// the intermediate checkpoints.
pub fn cmd_ablate(config: &ExperimentConfig, out: &Path, axis: AblationAxis) -> Result<usize> {
    let ab = &config.ablation;
    if ab.grid_len(axis) == 0 {
        return Err(LabError::Config(format!("ablation.{axis} grid is empty")));
    }
    if axis == AblationAxis::Alpha && config.ablation.method.as_ref().is_some_and(|m| m.objective != ObjectiveKind::CeSelfSupCon) {
        return Err(LabError::Config("the alpha axis needs a CE+SelfSupCon method".into()));
    }
    freeze_config(config, out)?;
    let base = ablation_method(config, axis);
    let tag = base.tag();
    let values = axis_values(config, axis);
    let protocol = ab.protocol;
    let root = out.join("ablation").join(axis.name());

    let points: Vec<(usize, u64)> = (0..values.len()).flat_map(|i| config.seeds.iter().map(move |&s| (i, s))).collect();
    let results: Vec<Vec<MetricRecord>> = if axis == AblationAxis::Epochs {
        let max = *ab.epochs.iter().max().expect("non-empty");
        config
            .seeds
            .par_iter()
            .map(|&seed| -> Result<Vec<MetricRecord>> {
                let dir = root.join("run").join(&tag).join(format!("seed_{seed}"));
                let grid = ab.epochs.clone();
                pretrain_one(config, &base, seed, max, &dir, &move |e| grid.contains(&e))?;
                let domains = targets(config, seed)?;
                let mut recs = Vec::new();
                for (value, &e) in values.iter().zip(&ab.epochs) {
                    let state = load_state(&dir.join(format!("epoch_{e}.json")))?;
                    for d in &domains {
                        let s = evaluate_protocol(&state, d, protocol, &config.evaluation, seed)?;
                        recs.extend(
                            score_records(config, &tag, protocol, &d.id, seed, s.value, s.ci95, s.flagged)
                                .into_iter()
                                .map(|r| r.with_axis(axis.name(), value)),
                        );
                    }
                }
                Ok(recs)
            })
            .collect::<Result<_>>()?
    } else {
        points
            .par_iter()
            .map(|&(i, seed)| -> Result<Vec<MetricRecord>> {
                let mut m = base.clone();
                match axis {
                    AblationAxis::Alpha => m.alpha = Some(ab.alpha[i]),
                    AblationAxis::QueueSize => m.queue_size = Some(ab.queue_size[i]),
                    AblationAxis::Augmentation => m.augmentation = Some(ab.augmentation[i]),
                    AblationAxis::Epochs => unreachable!(),
                }
                let dir = root.join(&values[i]).join(&tag).join(format!("seed_{seed}"));
                pretrain_one(config, &m, seed, config.pretrain.epochs, &dir, &|_| false)?;
                let (_, path) = final_checkpoint(&dir)?;
                let state = load_state(&path)?;
                let mut recs = Vec::new();
                for d in &targets(config, seed)? {
                    let s = evaluate_protocol(&state, d, protocol, &config.evaluation, seed)?;
                    info!("{axis}={} seed {seed} {}: {:.4}", values[i], d.id, s.value);
                    recs.extend(
                        score_records(config, &tag, protocol, &d.id, seed, s.value, s.ci95, s.flagged)
                            .into_iter()
                            .map(|r| r.with_axis(axis.name(), &values[i])),
                    );
                }
                Ok(recs)
            })
            .collect::<Result<_>>()?
    };
    let records: Vec<MetricRecord> = results.into_iter().flatten().collect();

    // curve: value × domain, mean over seeds, in grid order
    let mut acc: BTreeMap<(usize, String), Vec<f64>> = BTreeMap::new();
    for r in records.iter().filter(|r| r.metric == "accuracy") {
        let i = values.iter().position(|v| Some(v) == r.axis_value.as_ref()).expect("grid value");
        acc.entry((i, r.domain.clone())).or_default().push(r.value);
    }
    let mut csv = format!("{axis},method,protocol,domain,mean,std,n\n");
    for ((i, d), v) in &acc {
        let s = Stat::of(v);
        let _ = writeln!(csv, "{},{tag},{protocol},{d},{:.6},{:.6},{}", values[*i], s.mean, s.std, s.n);
    }
    write_text(&out.join("ablation").join(format!("{axis}.csv")), &csv)?;
    RecordStore::new(out).upsert(&records)?;
    Ok(records.len())
}

pub fn cmd_report(out: &Path) -> Result<ReportFiles> {
    write_report(out)
}
