//! Episodic N-way K-shot sampling.

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::numerics::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpisodeSpec {
    #[serde(default = "default_ways")]
    pub ways: usize,
    pub shots: usize,
    #[serde(default = "default_queries")]
    pub queries: usize,
    #[serde(default = "default_episodes")]
    pub episodes: usize,
}

fn default_ways() -> usize {
    5
}
fn default_queries() -> usize {
    15
}
fn default_episodes() -> usize {
    600
}

impl EpisodeSpec {
    pub fn new(shots: usize) -> Self {
        Self { ways: default_ways(), shots, queries: default_queries(), episodes: default_episodes() }
    }
}

/// One task. Indices point into the label slice given to [`sample_episode`];
/// episode labels are `0..ways` in the order of `classes`.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub classes: Vec<usize>,
    pub support: Vec<usize>,
    pub support_labels: Vec<usize>,
    pub query: Vec<usize>,
    pub query_labels: Vec<usize>,
}

/// Draws `ways` distinct classes, then `shots` support and `queries` query
/// samples per class without replacement.
pub fn sample_episode(labels: &[usize], spec: &EpisodeSpec, rng: &mut Rng) -> Result<Episode> {
    if spec.ways == 0 || spec.shots == 0 || spec.queries == 0 {
        return Err(LabError::Config("episode ways, shots and queries must be positive".into()));
    }
    let num_classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut by_class = vec![Vec::new(); num_classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let present: Vec<usize> = (0..num_classes).filter(|&c| !by_class[c].is_empty()).collect();
    if spec.ways > present.len() {
        return Err(LabError::Config(format!("{}-way episodes need {} classes, dataset has {}", spec.ways, spec.ways, present.len())));
    }
    let need = spec.shots + spec.queries;
    if let Some(&c) = present.iter().find(|&&c| by_class[c].len() < need) {
        return Err(LabError::Config(format!(
            "class {c} has {} samples, episodes need {need} (shots {} + queries {})",
            by_class[c].len(),
            spec.shots,
            spec.queries
        )));
    }
    let perm = rng.permutation(present.len());
    let classes: Vec<usize> = perm[..spec.ways].iter().map(|&p| present[p]).collect();
    let mut ep = Episode { classes: classes.clone(), support: vec![], support_labels: vec![], query: vec![], query_labels: vec![] };
    for (j, &c) in classes.iter().enumerate() {
        let pool = &by_class[c];
        let order = rng.permutation(pool.len());
        for &o in &order[..spec.shots] {
            ep.support.push(pool[o]);
            ep.support_labels.push(j);
        }
        for &o in &order[spec.shots..need] {
            ep.query.push(pool[o]);
            ep.query_labels.push(j);
        }
    }
    Ok(ep)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest};
    use std::collections::HashSet;

    fn labels(k: usize, per: usize) -> Vec<usize> {
        (0..k * per).map(|i| i % k).collect()
    }

    #[test]
    fn one_way_one_shot() {
        let l = labels(3, 4);
        let spec = EpisodeSpec { ways: 1, shots: 1, queries: 1, episodes: 1 };
        let ep = sample_episode(&l, &spec, &mut Rng::new(0)).unwrap();
        assert_eq!(ep.support.len(), 1);
        assert_eq!(ep.query.len(), 1);
        assert_ne!(ep.support[0], ep.query[0]);
        assert_eq!(l[ep.support[0]], l[ep.query[0]]);
    }

    #[test]
    fn class_sets_vary_with_seed() {
        let l = labels(10, 20);
        let spec = EpisodeSpec::new(5);
        let a = sample_episode(&l, &spec, &mut Rng::new(1)).unwrap();
        let b = sample_episode(&l, &spec, &mut Rng::new(2)).unwrap();
        assert_ne!(a.classes, b.classes);
    }

    #[test]
    fn short_class_is_named() {
        let mut l = labels(6, 20);
        l.retain(|&c| c != 4);
        l.extend([4; 7]);
        let err = sample_episode(&l, &EpisodeSpec::new(5), &mut Rng::new(0)).unwrap_err();
        assert!(matches!(err, LabError::Config(ref m) if m.contains("class 4")), "{err}");
        let err = sample_episode(&labels(3, 30), &EpisodeSpec::new(1), &mut Rng::new(0)).unwrap_err();
        assert!(matches!(err, LabError::Config(_)));
    }

    #[test]
    fn disjoint_over_many_episodes() {
        let l = labels(8, 25);
        let spec = EpisodeSpec::new(5);
        let root = Rng::new(11);
        for e in 0..10_000u64 {
            let ep = sample_episode(&l, &spec, &mut root.split(e)).unwrap();
            let s: HashSet<usize> = ep.support.iter().copied().collect();
            assert_eq!(s.len(), ep.support.len());
            assert!(ep.query.iter().all(|q| !s.contains(q)));
            let classes: HashSet<usize> = ep.classes.iter().copied().collect();
            assert_eq!(classes.len(), 5);
        }
    }

    proptest! {
        #[test]
        fn episode_shape(k in 2usize..8, per in 4usize..12, seed in 0u64..1000) {
            let l = labels(k, per);
            let ways = 1 + (seed as usize % k);
            let shots = 1 + (seed as usize % (per - 1)).min(per - 2);
            let spec = EpisodeSpec { ways, shots, queries: per - shots, episodes: 1 };
            let ep = sample_episode(&l, &spec, &mut Rng::new(seed)).unwrap();
            prop_assert_eq!(ep.support.len(), ways * shots);
            prop_assert_eq!(ep.query.len(), ways * (per - shots));
            for (i, &s) in ep.support.iter().enumerate() {
                prop_assert_eq!(l[s], ep.classes[ep.support_labels[i]]);
            }
            for (i, &q) in ep.query.iter().enumerate() {
                prop_assert_eq!(l[q], ep.classes[ep.query_labels[i]]);
                prop_assert!(!ep.support.contains(&q));
            }
        }
    }
}
